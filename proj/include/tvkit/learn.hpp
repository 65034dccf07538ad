#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tvkit/blocks.hpp"
#include "tvkit/net.hpp"
#include "tvkit/partition.hpp"

namespace tvkit {

struct TrainConfig {
    double learning_rate = 1e-1;
    double weight_decay = 1e-1;
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    double l1_penalty = 0.0;
    std::uint64_t seed = 0;
    double init_coefficient = 0.0;
    bool interleave_tasks = false;  // default: one global shuffle across the task union
    int threads = 1;

    void validate() const;
    nlohmann::json to_json() const;
};

struct LearnReport {
    CoefficientSet coeffs;
    std::vector<double> loss_trace;    // one entry per epoch, mean objective
    std::vector<double> val_accuracy;  // empty unless validation data was supplied
};

nlohmann::json learn_report_json(const LearnReport& report, const TrainConfig& config);

// Decoupled-weight-decay adaptive moment optimiser.
struct AdamW {
    double lr;
    double weight_decay;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<double> m, v;
    std::size_t t = 0;

    AdamW(std::size_t n, double lr_, double weight_decay_);
    void step(std::span<double> params, std::span<const double> grad);
};

// Chain rule from a weight-space gradient to coefficient space:
// d loss / d lambda(i, j[, k]) = <grad block j [restricted to partition k], tv i block j>.
// Factored payloads use <G, B A> = sum((B^T G) . A) without densifying.
std::vector<double> coefficient_grad(const std::vector<BlockSpec>& specs,
                                     std::span<const double> weight_grad,
                                     std::span<const TaskVector> tvs,
                                     const PartitionMasks* masks = nullptr);

LearnReport learn_addition(const ToyModel& model, const BlockedTensor& theta0,
                           std::span<const TaskVector> tvs,
                           const std::vector<Batch>& train_tasks, const TrainConfig& config,
                           const Batch* val = nullptr, const PartitionMasks* masks = nullptr);

LearnReport learn_addition_linearized(const ToyModel& model, const BlockedTensor& theta0,
                                      std::span<const TaskVector> tvs,
                                      const std::vector<Batch>& train_tasks,
                                      const TrainConfig& config, const Batch* val = nullptr,
                                      const PartitionMasks* masks = nullptr);

// loss = -CE(target batch) + CE(control batch), one batch of each per step.
LearnReport learn_negation(const ToyModel& model, const BlockedTensor& theta0,
                           const TaskVector& target_tv, const Batch& target_data,
                           const Batch& control_data, const TrainConfig& config);

// Composition objective on a k-shot sample; the target task's own vector must
// not appear among tvs.
LearnReport learn_fewshot(const ToyModel& model, const BlockedTensor& theta0,
                          std::span<const TaskVector> tvs, const std::string& target_id,
                          const Batch& kshot_data, const TrainConfig& config,
                          const Batch* val = nullptr);

// Baseline: one shared alpha over {0, 0.05, ..., 1.0} picked by accuracy on
// the given data; ties resolve to the smaller alpha.
std::pair<double, double> isotropic_grid(const ToyModel& model, const BlockedTensor& theta0,
                                         std::span<const TaskVector> tvs, const Batch& data,
                                         int threads = 1);

struct FinetuneConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    int threads = 1;
};

// Full-model training on one task; the source of fine-tuned weights that task
// vectors are cut from.
BlockedTensor finetune_weights(const ToyModel& model, const BlockedTensor& theta0,
                               const Batch& train, const FinetuneConfig& config);

double batch_accuracy(std::span<const double> logits, std::span<const int> labels,
                      std::size_t num_classes);

}  // namespace tvkit
