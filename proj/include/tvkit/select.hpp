#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvkit/blocks.hpp"
#include "tvkit/data.hpp"
#include "tvkit/net.hpp"

namespace tvkit {

enum class SelectStrategy { Random, FeatureSimilarity, GradientWhole, GradientBlockwise };

const char* to_string(SelectStrategy s);
SelectStrategy select_strategy_from_string(const std::string& s);

// A budgeted pick of task vectors. Whole-vector strategies list one id set;
// the blockwise strategy lists an id set per block, and the sets may differ
// because single blocks carry knowledge on their own.
struct SelectionPlan {
    SelectStrategy strategy = SelectStrategy::Random;
    std::size_t budget = 0;
    std::vector<std::string> whole;                              // rank order
    std::map<std::string, std::vector<std::string>> blockwise;   // block -> rank order

    nlohmann::json to_json() const;
    static SelectionPlan from_json(const nlohmann::json& j);
};

SelectionPlan select_random(std::span<const TaskVector> tvs, std::size_t b, std::uint64_t seed);

// Ranks candidate datasets by cosine between mean latents (pre-logit) against
// the target's mean latent. A zero-norm mean scores 0; exact ties keep the
// candidate order.
SelectionPlan select_by_features(const ToyModel& model, const BlockedTensor& theta0,
                                 std::span<const Dataset> candidates, const Dataset& target,
                                 std::size_t b, int threads = 1);

enum class GradientMode { Whole, Blockwise };

// Probes the coefficient gradient at lambda = 0 over target_data, processing
// candidates in id order in groups of group_size (0 means b). Whole mode ranks
// by L1 norm over blocks; blockwise keeps a per-block ranking.
SelectionPlan select_by_gradient(const ToyModel& model, const BlockedTensor& theta0,
                                 std::span<const TaskVector> tvs, const Batch& target_data,
                                 std::size_t b, std::size_t group_size, GradientMode mode,
                                 int threads = 1);

// Zeroes every coefficient the plan does not admit; selected entries are kept
// for all partitions.
void restrict_coefficients(CoefficientSet& coeffs, const SelectionPlan& plan);

}  // namespace tvkit
