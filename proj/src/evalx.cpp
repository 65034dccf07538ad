#include "tvkit/evalx.hpp"

#include <charconv>
#include <cstddef>

#include "tvkit/errors.hpp"
#include "tvkit/learn.hpp"

namespace tvkit {

namespace {

void require_rows(const Batch& data) {
    if (data.size() == 0) throw ConfigError("empty batch");
}

// Shortest round-trip decimal form, so external tooling reads back the exact
// value.
std::string fmt(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

// Single-row coefficient view: tv i of a joint set, same block scaling.
CoefficientSet coeff_row(const CoefficientSet& coeffs, std::size_t i) {
    CoefficientSet out;
    out.tv_ids = {coeffs.tv_ids[i]};
    out.block_names = coeffs.block_names;
    out.K = coeffs.K;
    const std::size_t row = coeffs.m() * coeffs.K;
    out.values.assign(coeffs.values.begin() + i * row, coeffs.values.begin() + (i + 1) * row);
    return out;
}

CoefficientSet coeff_rows(const CoefficientSet& coeffs, std::size_t i, std::size_t j) {
    CoefficientSet out = coeff_row(coeffs, i);
    CoefficientSet second = coeff_row(coeffs, j);
    out.tv_ids.push_back(second.tv_ids[0]);
    out.values.insert(out.values.end(), second.values.begin(), second.values.end());
    return out;
}

}  // namespace

std::vector<int> predict_classes(const ToyModel& model, const BlockedTensor& theta,
                                 const Batch& data, int threads) {
    require_rows(data);
    const std::size_t C = model.config().num_classes;
    auto logits = forward(model, theta, data, threads);
    std::vector<int> pred(data.size());
    for (std::size_t r = 0; r < data.size(); ++r) {
        const double* row = logits.data() + r * C;
        std::size_t arg = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (row[c] > row[arg]) arg = c;
        pred[r] = static_cast<int>(arg);
    }
    return pred;
}

double accuracy(const ToyModel& model, const BlockedTensor& theta, const Batch& data,
                int threads) {
    require_rows(data);
    auto logits = forward(model, theta, data, threads);
    return 100.0 * batch_accuracy(logits, data.labels, model.config().num_classes);
}

double relative_accuracy(double absolute, double finetuned_ref) {
    if (!(finetuned_ref > 0.0)) throw ConfigError("reference accuracy must be positive");
    return 100.0 * absolute / finetuned_ref;
}

NegationReport negation_report(const ToyModel& model, const BlockedTensor& theta0,
                               const BlockedTensor& theta_edited, const Batch& target_data,
                               const Batch& control_data, int threads) {
    NegationReport out;
    out.target_accuracy = accuracy(model, theta_edited, target_data, threads);
    out.control_accuracy = accuracy(model, theta_edited, control_data, threads);
    out.control_reference = accuracy(model, theta0, control_data, threads);
    out.retention =
        out.control_reference > 0.0 ? out.control_accuracy / out.control_reference : 1.0;
    out.pass = out.control_accuracy >= 0.95 * out.control_reference;
    return out;
}

double disentanglement_error(const ToyModel& model, const BlockedTensor& theta0,
                             const CoefficientSet& coeffs, std::span<const TaskVector> tvs,
                             std::size_t i, std::size_t j, const Batch& data_i, int threads) {
    if (i >= tvs.size() || j >= tvs.size() || i == j)
        throw ConfigError("disentanglement needs two distinct task vectors");
    if (coeffs.K != 1) throw ConfigError("disentanglement expects flat coefficients");
    check_composition(theta0, coeffs, tvs);
    require_rows(data_i);

    std::vector<TaskVector> lone{tvs[i]};
    std::vector<TaskVector> pair{tvs[i], tvs[j]};
    auto theta_i = apply_anisotropic(theta0, coeff_row(coeffs, i), lone);
    auto theta_ij = apply_anisotropic(theta0, coeff_rows(coeffs, i, j), pair);

    auto p1 = predict_classes(model, theta_i, data_i, threads);
    auto p2 = predict_classes(model, theta_ij, data_i, threads);
    std::size_t flips = 0;
    for (std::size_t r = 0; r < p1.size(); ++r)
        if (p1[r] != p2[r]) ++flips;
    return 100.0 * static_cast<double>(flips) / static_cast<double>(p1.size());
}

DisentanglementReport disentanglement_matrix(const ToyModel& model,
                                             const BlockedTensor& theta0,
                                             const CoefficientSet& coeffs,
                                             std::span<const TaskVector> tvs,
                                             std::span<const Batch> data_per_tv,
                                             int threads) {
    if (tvs.empty()) throw ConfigError("disentanglement needs task vectors");
    if (data_per_tv.size() != tvs.size())
        throw ShapeError("one dataset per task vector required");

    const std::size_t n = tvs.size();
    DisentanglementReport out;
    for (const auto& tv : tvs) out.ids.push_back(tv.id);
    out.xi.assign(n * n, 0.0);

    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double xi =
                disentanglement_error(model, theta0, coeffs, tvs, i, j, data_per_tv[i], threads);
            out.xi[i * n + j] = xi;
            sum += xi;
        }
    }
    if (n > 1) out.mean_xi = sum / static_cast<double>(n * (n - 1));
    return out;
}

std::string accuracy_csv(const EvalReport& report) {
    if (report.dataset_ids.size() != report.absolute.size())
        throw ShapeError("one absolute accuracy per dataset required");
    if (!report.relative.empty() && report.relative.size() != report.absolute.size())
        throw ShapeError("relative accuracies must match datasets");
    std::string out = "dataset,absolute,relative\n";
    for (std::size_t d = 0; d < report.dataset_ids.size(); ++d) {
        out += report.dataset_ids[d];
        out += ',';
        out += fmt(report.absolute[d]);
        out += ',';
        if (!report.relative.empty()) out += fmt(report.relative[d]);
        out += '\n';
    }
    return out;
}

std::string disentanglement_csv(const DisentanglementReport& report) {
    const std::size_t n = report.ids.size();
    if (report.xi.size() != n * n) throw ShapeError("xi matrix must be n x n");
    std::string out = "first,second,xi\n";
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            out += report.ids[i];
            out += ',';
            out += report.ids[j];
            out += ',';
            out += fmt(report.xi[i * n + j]);
            out += '\n';
        }
    return out;
}

}  // namespace tvkit
