#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tvkit/blocks.hpp"
#include "tvkit/net.hpp"

namespace tvkit {

// Top-1 predictions; exactly equal top logits resolve to the lowest class
// index so disagreement between two models is well defined.
std::vector<int> predict_classes(const ToyModel& model, const BlockedTensor& theta,
                                 const Batch& data, int threads = 1);

// Top-1 match rate in percent. Parameters stay 32-bit; logits accumulate in
// 64-bit, same as the training path.
double accuracy(const ToyModel& model, const BlockedTensor& theta, const Batch& data,
                int threads = 1);

// 100 * absolute / reference, the score normalised by the fully fine-tuned
// model's accuracy on the same data.
double relative_accuracy(double absolute, double finetuned_ref);

struct NegationReport {
    double target_accuracy = 0.0;      // edited model on the forgotten task
    double control_accuracy = 0.0;     // edited model on the control task
    double control_reference = 0.0;    // pre-edit model on the control task
    double retention = 0.0;            // control / reference
    bool pass = false;                 // control kept >= 95% of the reference
};

NegationReport negation_report(const ToyModel& model, const BlockedTensor& theta0,
                               const BlockedTensor& theta_edited, const Batch& target_data,
                               const Batch& control_data, int threads = 1);

// Share of data_i (percent) whose prediction flips when tv j joins tv i on
// top of the base, both at their learned coefficient rows. Asymmetric in
// general: (i, j) is scored on task i's data.
double disentanglement_error(const ToyModel& model, const BlockedTensor& theta0,
                             const CoefficientSet& coeffs, std::span<const TaskVector> tvs,
                             std::size_t i, std::size_t j, const Batch& data_i,
                             int threads = 1);

struct DisentanglementReport {
    std::vector<std::string> ids;   // n task-vector ids
    std::vector<double> xi;         // n x n, [i*n + j]; diagonal fixed at 0
    double mean_xi = 0.0;           // mean over the n*(n-1) ordered pairs
};

DisentanglementReport disentanglement_matrix(const ToyModel& model,
                                             const BlockedTensor& theta0,
                                             const CoefficientSet& coeffs,
                                             std::span<const TaskVector> tvs,
                                             std::span<const Batch> data_per_tv,
                                             int threads = 1);

struct EvalReport {
    std::vector<std::string> dataset_ids;
    std::vector<double> absolute;                       // percent, one per dataset
    std::vector<double> relative;                       // empty unless references given
    std::optional<NegationReport> negation;
    std::optional<DisentanglementReport> disentanglement;
};

// One row per dataset: id, absolute, relative (blank without a reference).
std::string accuracy_csv(const EvalReport& report);

// One row per ordered pair (first, second, xi).
std::string disentanglement_csv(const DisentanglementReport& report);

}  // namespace tvkit
