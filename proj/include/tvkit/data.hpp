#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvkit/net.hpp"

namespace tvkit {

// A synthetic classification task: Gaussian clusters around class anchors that
// are shared across tasks, with a per-task rotation in a random 2-D subspace
// plus a mean shift. Related tasks overlap; rotation angle controls how far a
// task drifts from the anchor set.
struct TaskSpec {
    std::string id;
    std::size_t in_dim = 16;
    std::size_t num_classes = 10;
    std::size_t train_per_class = 64;
    std::size_t val_per_class = 16;
    std::size_t test_per_class = 32;
    double rot_angle = 0.0;
    double shift = 0.0;          // magnitude; direction drawn from the task seed
    double noise = 0.25;         // cluster sigma
    double domain_shift = 0.0;   // extra shift magnitude for the shifted variant
    std::uint64_t seed = 0;
    std::uint64_t anchor_seed = 0;  // tasks sharing this share their anchor set

    void validate() const;
    nlohmann::json to_json() const;
    static TaskSpec from_json(const nlohmann::json& j);
};

struct Dataset {
    std::string id;
    std::size_t in_dim = 0;
    std::size_t num_classes = 0;
    Batch train, val, test;
};

struct KShotSample {
    std::size_t k = 0;
    std::vector<std::size_t> indices;  // into the train split, class-major
    std::uint64_t seed = 0;
};

// Class centers after the task's transform (num_classes x in_dim, row-major).
std::vector<double> class_centers(const TaskSpec& spec, bool shifted = false);

Dataset generate(const TaskSpec& spec, bool shifted = false);

KShotSample kshot(const Dataset& data, std::size_t k, std::uint64_t seed);

Batch gather(const Batch& from, const std::vector<std::size_t>& indices);

// IDX image/label pair (big-endian header, raw u8 payload); pixels normalised
// to [0,1] and flattened. Everything lands in the train split.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

// Task suites used by the experiment drivers: one pretraining task on the bare
// anchors plus n related tasks with increasing rotation away from them.
TaskSpec pretrain_spec(std::uint64_t seed);
std::vector<TaskSpec> task_suite(std::uint64_t seed, std::size_t n);

}  // namespace tvkit
