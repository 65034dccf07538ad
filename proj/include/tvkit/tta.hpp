#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvkit/blocks.hpp"
#include "tvkit/learn.hpp"
#include "tvkit/net.hpp"

namespace tvkit {

struct UfmConfig {
    std::size_t trusted_cap = 100;       // per-class ceiling for the trusted set
    double omega_start = 0.9;            // confidence gate, stepped linearly
    double omega_end = 1.0;
    double trusted_fraction = 0.25;      // share of each batch drawn from the trusted set
    double temperature_exponent = 0.5;
    double weak_noise = 0.01;            // additive Gaussian sigma
    double strong_noise = 0.1;
    double strong_dropout = 0.1;         // coordinate zeroing probability

    void validate() const;
};

// p^e / sum(p^e), elementwise on a probability vector.
std::vector<double> sharpen(std::span<const double> probs, double exponent = 0.5);

// Pseudo-labelled anchor examples: the most confident min(N/C, cap) predictions
// per predicted class. Classes nobody predicts fall short and are flagged.
struct TrustedSet {
    std::vector<std::size_t> indices;        // into the source batch, class-major
    std::vector<int> labels;                 // predicted class per index
    std::size_t per_class_target = 0;
    std::vector<std::size_t> class_counts;
    bool shortfall = false;
};

TrustedSet build_trusted_set(const ToyModel& model, std::span<const double> theta,
                             const Batch& data, std::size_t trusted_cap, int threads = 1);

// Per-example consistency loss: cross-entropy of the strong view against the
// sharpened weak prediction, gated off unless the sharpened confidence clears
// omega. The weak branch is a constant target.
std::vector<double> ufm_loss(std::span<const double> weak_logits,
                             std::span<const double> strong_logits, std::size_t num_classes,
                             double omega, double temperature_exponent = 0.5);

struct AdaptReport {
    LearnReport learn;
    std::vector<std::size_t> trusted_sizes;   // per epoch
    std::vector<std::string> warnings;        // shortfalls, collapse notices
    std::size_t trusted_examples_seen = 0;
    std::size_t unlabeled_examples_seen = 0;
};

nlohmann::json adapt_report_json(const AdaptReport& report, const TrainConfig& config);

AdaptReport adapt_ufm(const ToyModel& model, const BlockedTensor& theta0,
                      std::span<const TaskVector> tvs, const Batch& unlabeled,
                      const TrainConfig& config, const UfmConfig& ufm);

AdaptReport adapt_entropy(const ToyModel& model, const BlockedTensor& theta0,
                          std::span<const TaskVector> tvs, const Batch& unlabeled,
                          const TrainConfig& config);

}  // namespace tvkit
