#include "tvkit/tta.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <sstream>
#include <utility>

#include "tvkit/errors.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {

namespace {

void require_inputs(const ToyModel& model, const Batch& data) {
    if (data.size() == 0) throw ConfigError("empty batch");
    if (data.in_dim != model.config().in_dim)
        throw ShapeError("batch in_dim does not match the model");
}

void require_finite(double loss, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batch;
        throw NumericError(msg.str());
    }
}

std::size_t argmax_row(const double* row, std::size_t cols) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

// Stable log-softmax of one row.
std::vector<double> log_softmax_row(const double* row, std::size_t cols) {
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double lse = 0.0;
    for (std::size_t c = 0; c < cols; ++c) lse += std::exp(row[c] - mx);
    lse = mx + std::log(lse);
    std::vector<double> out(cols);
    for (std::size_t c = 0; c < cols; ++c) out[c] = row[c] - lse;
    return out;
}

struct UfmRow {
    bool gated = false;            // true when the loss is switched off
    double loss = 0.0;
    std::vector<double> target;    // sharpened weak prediction, constant
};

UfmRow ufm_row(const double* weak, const double* strong, std::size_t cols, double omega,
               double exponent) {
    UfmRow out;
    auto weak_log = log_softmax_row(weak, cols);
    std::vector<double> probs(cols);
    for (std::size_t c = 0; c < cols; ++c) probs[c] = std::exp(weak_log[c]);
    out.target = sharpen(probs, exponent);
    double peak = *std::max_element(out.target.begin(), out.target.end());
    if (!(peak > omega)) {
        out.gated = true;
        return out;
    }
    auto strong_log = log_softmax_row(strong, cols);
    for (std::size_t c = 0; c < cols; ++c) out.loss -= out.target[c] * strong_log[c];
    return out;
}

Batch gather_rows(const Batch& from, std::span<const std::size_t> rows) {
    Batch out;
    out.in_dim = from.in_dim;
    out.inputs.reserve(rows.size() * from.in_dim);
    for (std::size_t r : rows)
        out.inputs.insert(out.inputs.end(), from.inputs.begin() + r * from.in_dim,
                          from.inputs.begin() + (r + 1) * from.in_dim);
    return out;
}

std::vector<std::string> tv_ids(std::span<const TaskVector> tvs) {
    std::vector<std::string> ids;
    ids.reserve(tvs.size());
    for (const auto& tv : tvs) ids.push_back(tv.id);
    return ids;
}

std::vector<std::string> block_names(const std::vector<BlockSpec>& specs) {
    std::vector<std::string> names;
    names.reserve(specs.size());
    for (const auto& s : specs) names.push_back(s.name);
    return names;
}

double histogram_entropy(const std::vector<std::size_t>& counts, std::size_t total) {
    double h = 0.0;
    for (std::size_t n : counts) {
        if (n == 0) continue;
        double p = static_cast<double>(n) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace

void UfmConfig::validate() const {
    if (trusted_cap < 1) throw ConfigError("trusted_cap must be at least 1");
    if (!(omega_start > 0.0 && omega_start <= 1.0) || !(omega_end > 0.0 && omega_end <= 1.0))
        throw ConfigError("omega must stay in (0, 1]");
    if (!(trusted_fraction > 0.0 && trusted_fraction < 1.0))
        throw ConfigError("trusted_fraction must lie in (0, 1)");
    if (!(temperature_exponent > 0.0))
        throw ConfigError("temperature_exponent must be positive");
    if (weak_noise < 0.0 || strong_noise < 0.0) throw ConfigError("noise sigma must be >= 0");
    if (!(strong_dropout >= 0.0 && strong_dropout < 1.0))
        throw ConfigError("strong_dropout must lie in [0, 1)");
}

std::vector<double> sharpen(std::span<const double> probs, double exponent) {
    if (probs.empty()) throw ShapeError("empty probability vector");
    if (!(exponent > 0.0)) throw ConfigError("sharpening exponent must be positive");
    double sum = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw NumericError("negative probability");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw NumericError("probabilities must sum to 1");
    std::vector<double> out(probs.size());
    double denom = 0.0;
    for (std::size_t c = 0; c < probs.size(); ++c) {
        out[c] = std::pow(probs[c], exponent);
        denom += out[c];
    }
    for (double& p : out) p /= denom;
    return out;
}

TrustedSet build_trusted_set(const ToyModel& model, std::span<const double> theta,
                             const Batch& data, std::size_t trusted_cap, int threads) {
    require_inputs(model, data);
    if (trusted_cap < 1) throw ConfigError("trusted_cap must be at least 1");
    const std::size_t N = data.size();
    const std::size_t C = model.config().num_classes;
    if (N < C) throw ConfigError("need at least one example per class to build a trusted set");

    auto logits = forward_f64(model, theta, data, threads);
    auto probs = softmax_rows(logits, N, C);

    // (confidence, row) per predicted class; ties keep the earlier row.
    std::vector<std::vector<std::pair<double, std::size_t>>> by_class(C);
    for (std::size_t i = 0; i < N; ++i) {
        std::size_t c = argmax_row(probs.data() + i * C, C);
        by_class[c].push_back({probs[i * C + c], i});
    }

    TrustedSet out;
    out.per_class_target = std::min(N / C, trusted_cap);
    out.class_counts.resize(C, 0);
    for (std::size_t c = 0; c < C; ++c) {
        auto& cand = by_class[c];
        std::stable_sort(cand.begin(), cand.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        std::size_t take = std::min(out.per_class_target, cand.size());
        out.class_counts[c] = take;
        if (take < out.per_class_target) out.shortfall = true;
        for (std::size_t r = 0; r < take; ++r) {
            out.indices.push_back(cand[r].second);
            out.labels.push_back(static_cast<int>(c));
        }
    }
    return out;
}

std::vector<double> ufm_loss(std::span<const double> weak_logits,
                             std::span<const double> strong_logits, std::size_t num_classes,
                             double omega, double temperature_exponent) {
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (weak_logits.size() != strong_logits.size() || weak_logits.size() % num_classes != 0)
        throw ShapeError("weak and strong logits must be equal B x C arrays");
    const std::size_t rows = weak_logits.size() / num_classes;
    std::vector<double> out(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        auto r = ufm_row(weak_logits.data() + i * num_classes,
                         strong_logits.data() + i * num_classes, num_classes, omega,
                         temperature_exponent);
        out[i] = r.gated ? 0.0 : r.loss;
    }
    return out;
}

nlohmann::json adapt_report_json(const AdaptReport& report, const TrainConfig& config) {
    nlohmann::json out = learn_report_json(report.learn, config);
    out["trusted_sizes"] = report.trusted_sizes;
    out["warnings"] = report.warnings;
    out["trusted_examples_seen"] = report.trusted_examples_seen;
    out["unlabeled_examples_seen"] = report.unlabeled_examples_seen;
    return out;
}

AdaptReport adapt_ufm(const ToyModel& model, const BlockedTensor& theta0,
                      std::span<const TaskVector> tvs, const Batch& unlabeled,
                      const TrainConfig& config, const UfmConfig& ufm) {
    config.validate();
    ufm.validate();
    model.require_matching(theta0);
    require_inputs(model, unlabeled);

    const std::size_t N = unlabeled.size();
    const std::size_t C = model.config().num_classes;
    if (N < C) throw ConfigError("need at least one example per class per epoch");

    AdaptReport report;
    report.learn.coeffs = CoefficientSet::zeros(tv_ids(tvs), block_names(model.specs()));
    std::fill(report.learn.coeffs.values.begin(), report.learn.coeffs.values.end(),
              config.init_coefficient);
    check_composition(theta0, report.learn.coeffs, tvs);

    auto& coeffs = report.learn.coeffs;
    AdamW opt(coeffs.values.size(), config.learning_rate, config.weight_decay);

    // The unlabeled stream drives the step count; the trusted quarter rides on
    // top of each batch.
    const double f = ufm.trusted_fraction;
    std::size_t bu_nom = config.batch_size
        - static_cast<std::size_t>(std::llround(static_cast<double>(config.batch_size) * f));
    if (bu_nom < 1) bu_nom = 1;
    const std::size_t steps_per_epoch = (N + bu_nom - 1) / bu_nom;
    const std::size_t total_steps = config.epochs * steps_per_epoch;
    const double omega_denom = static_cast<double>(std::max<std::size_t>(1, total_steps - 1));

    auto shuffle_rng = make_rng(config.seed, "shuffle");
    auto aug_rng = make_rng(config.seed, "tta-aug");
    auto trusted_rng = make_rng(config.seed, "trusted");
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t step_index = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto theta = compose_f64(theta0, coeffs, tvs);
        auto trusted = build_trusted_set(model, theta, unlabeled, ufm.trusted_cap,
                                         config.threads);
        report.trusted_sizes.push_back(trusted.indices.size());
        if (trusted.shortfall) {
            std::ostringstream msg;
            msg << "epoch " << epoch << ": trusted set short of " << trusted.per_class_target
                << " per class:";
            for (std::size_t c = 0; c < C; ++c)
                if (trusted.class_counts[c] < trusted.per_class_target)
                    msg << " class " << c << " has " << trusted.class_counts[c];
            report.warnings.push_back(msg.str());
        }

        // Trusted rows are drawn from a shuffled cycle so small sets get
        // oversampled rather than exhausted.
        std::vector<std::size_t> trusted_order(trusted.indices.size());
        std::iota(trusted_order.begin(), trusted_order.end(), 0);
        std::shuffle(trusted_order.begin(), trusted_order.end(), trusted_rng);
        std::size_t trusted_pos = 0;

        std::shuffle(perm.begin(), perm.end(), shuffle_rng);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < N; start += bu_nom, ++batches) {
            const std::size_t bu = std::min(bu_nom, N - start);
            const double omega = ufm.omega_start
                + (ufm.omega_end - ufm.omega_start)
                    * (static_cast<double>(step_index) / omega_denom);

            std::size_t bt = static_cast<std::size_t>(
                std::llround(static_cast<double>(bu) * f / (1.0 - f)));

            Batch trusted_batch;
            trusted_batch.in_dim = unlabeled.in_dim;
            for (std::size_t r = 0; r < bt; ++r) {
                if (trusted_pos == trusted_order.size()) {
                    std::shuffle(trusted_order.begin(), trusted_order.end(), trusted_rng);
                    trusted_pos = 0;
                }
                std::size_t slot = trusted_order[trusted_pos++];
                std::size_t row = trusted.indices[slot];
                trusted_batch.inputs.insert(
                    trusted_batch.inputs.end(), unlabeled.inputs.begin() + row * unlabeled.in_dim,
                    unlabeled.inputs.begin() + (row + 1) * unlabeled.in_dim);
                trusted_batch.labels.push_back(trusted.labels[slot]);
            }

            Batch clean = gather_rows(unlabeled, {perm.data() + start, bu});
            Batch weak = clean;
            Batch strong = clean;
            for (double& x : weak.inputs) x += ufm.weak_noise * gauss(aug_rng);
            for (double& x : strong.inputs) x += ufm.strong_noise * gauss(aug_rng);
            for (double& x : strong.inputs)
                if (unif(aug_rng) < ufm.strong_dropout) x = 0.0;

            double step_loss = 0.0;
            std::vector<double> wgrad(model.param_count(), 0.0);
            if (bt > 0) {
                auto tr = backward_f64(model, theta, trusted_batch, LossKind::CrossEntropy,
                                       config.threads);
                step_loss += tr.loss;
                for (std::size_t p = 0; p < wgrad.size(); ++p) wgrad[p] += tr.grad[p];
            }

            auto weak_logits = forward_f64(model, theta, weak, config.threads);
            auto strong_logits = forward_f64(model, theta, strong, config.threads);
            std::vector<double> dl(bu * C, 0.0);
            double u_loss = 0.0;
            const double inv_bu = 1.0 / static_cast<double>(bu);
            for (std::size_t i = 0; i < bu; ++i) {
                auto r = ufm_row(weak_logits.data() + i * C, strong_logits.data() + i * C, C,
                                 omega, ufm.temperature_exponent);
                if (r.gated) continue;
                u_loss += r.loss * inv_bu;
                auto strong_log = log_softmax_row(strong_logits.data() + i * C, C);
                for (std::size_t c = 0; c < C; ++c)
                    dl[i * C + c] = (std::exp(strong_log[c]) - r.target[c]) * inv_bu;
            }
            step_loss += u_loss;
            auto ur = backward_cotangent_f64(model, theta, strong, dl, config.threads);
            for (std::size_t p = 0; p < wgrad.size(); ++p) wgrad[p] += ur.grad[p];

            require_finite(step_loss, epoch, batches);
            auto cgrad = coefficient_grad(model.specs(), wgrad, tvs);
            opt.step(coeffs.values, cgrad);
            theta = compose_f64(theta0, coeffs, tvs);

            epoch_loss += step_loss;
            report.trusted_examples_seen += bt;
            report.unlabeled_examples_seen += bu;
            ++step_index;
        }
        report.learn.loss_trace.push_back(epoch_loss / static_cast<double>(batches));
    }
    coeffs.validate_finite();
    return report;
}

AdaptReport adapt_entropy(const ToyModel& model, const BlockedTensor& theta0,
                          std::span<const TaskVector> tvs, const Batch& unlabeled,
                          const TrainConfig& config) {
    config.validate();
    model.require_matching(theta0);
    require_inputs(model, unlabeled);

    const std::size_t N = unlabeled.size();
    const std::size_t C = model.config().num_classes;

    AdaptReport report;
    report.learn.coeffs = CoefficientSet::zeros(tv_ids(tvs), block_names(model.specs()));
    std::fill(report.learn.coeffs.values.begin(), report.learn.coeffs.values.end(),
              config.init_coefficient);
    check_composition(theta0, report.learn.coeffs, tvs);

    auto& coeffs = report.learn.coeffs;
    AdamW opt(coeffs.values.size(), config.learning_rate, config.weight_decay);
    auto shuffle_rng = make_rng(config.seed, "shuffle");
    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    const double collapse_floor = std::log(static_cast<double>(C)) / 4.0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(perm.begin(), perm.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < N; start += config.batch_size, ++batches) {
            const std::size_t b = std::min(config.batch_size, N - start);
            Batch chunk = gather_rows(unlabeled, {perm.data() + start, b});
            auto theta = compose_f64(theta0, coeffs, tvs);
            auto br = backward_f64(model, theta, chunk, LossKind::Entropy, config.threads);
            require_finite(br.loss, epoch, batches);
            auto cgrad = coefficient_grad(model.specs(), br.grad, tvs);
            opt.step(coeffs.values, cgrad);
            epoch_loss += br.loss;
            report.unlabeled_examples_seen += b;
        }
        report.learn.loss_trace.push_back(epoch_loss / static_cast<double>(batches));

        // Entropy descent can satisfy itself by funnelling every input into
        // one class; a flat prediction histogram is the health signal.
        auto theta = compose_f64(theta0, coeffs, tvs);
        auto logits = forward_f64(model, theta, unlabeled, config.threads);
        std::vector<std::size_t> hist(C, 0);
        for (std::size_t i = 0; i < N; ++i) ++hist[argmax_row(logits.data() + i * C, C)];
        double h = histogram_entropy(hist, N);
        if (h < collapse_floor) {
            std::ostringstream msg;
            msg << "epoch " << epoch << ": prediction collapse, histogram entropy " << h
                << " < " << collapse_floor;
            report.warnings.push_back(msg.str());
        }
    }
    coeffs.validate_finite();
    return report;
}

}  // namespace tvkit
