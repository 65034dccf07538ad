#include "tvkit/learn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "tvkit/errors.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {
namespace {

std::vector<std::size_t> block_offsets_of(const std::vector<BlockSpec>& specs) {
    std::vector<std::size_t> off(specs.size());
    std::size_t o = 0;
    for (std::size_t j = 0; j < specs.size(); ++j) {
        off[j] = o;
        o += specs[j].numel();
    }
    off.push_back(o);  // sentinel: total element count
    return off;
}

void require_labelled(const Batch& b, const char* what) {
    if (b.size() == 0) throw ConfigError(std::string(what) + " is empty");
    if (b.labels.size() != b.size())
        throw ConfigError(std::string(what) + " must carry one label per example");
}

Batch gather_pairs(const std::vector<Batch>& tasks,
                   std::span<const std::pair<std::uint32_t, std::uint32_t>> rows) {
    Batch out;
    out.in_dim = tasks.front().in_dim;
    out.inputs.reserve(rows.size() * out.in_dim);
    out.labels.reserve(rows.size());
    for (auto [t, r] : rows) {
        const Batch& src = tasks[t];
        const double* x = src.inputs.data() + std::size_t{r} * src.in_dim;
        out.inputs.insert(out.inputs.end(), x, x + src.in_dim);
        out.labels.push_back(src.labels[r]);
    }
    return out;
}

// One epoch's minibatch order. Global mode shuffles the pooled (task, row)
// union; interleave mode shuffles within each task and round-robins the
// per-task batch streams.
std::vector<Batch> epoch_schedule(const std::vector<Batch>& tasks, std::size_t batch_size,
                                  bool interleave, std::mt19937_64& rng) {
    std::vector<Batch> out;
    if (!interleave) {
        std::vector<std::pair<std::uint32_t, std::uint32_t>> pool;
        for (std::uint32_t t = 0; t < tasks.size(); ++t)
            for (std::uint32_t r = 0; r < tasks[t].size(); ++r) pool.emplace_back(t, r);
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t lo = 0; lo < pool.size(); lo += batch_size) {
            const std::size_t hi = std::min(lo + batch_size, pool.size());
            out.push_back(gather_pairs(
                tasks, std::span(pool).subspan(lo, hi - lo)));
        }
        return out;
    }
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> streams(tasks.size());
    std::size_t most = 0;
    for (std::uint32_t t = 0; t < tasks.size(); ++t) {
        std::vector<std::uint32_t> idx(tasks[t].size());
        std::iota(idx.begin(), idx.end(), 0u);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::uint32_t r : idx) streams[t].emplace_back(t, r);
        most = std::max(most, (streams[t].size() + batch_size - 1) / batch_size);
    }
    for (std::size_t b = 0; b < most; ++b)
        for (std::size_t t = 0; t < streams.size(); ++t) {
            const std::size_t lo = b * batch_size;
            if (lo >= streams[t].size()) continue;
            const std::size_t hi = std::min(lo + batch_size, streams[t].size());
            out.push_back(gather_pairs(tasks, std::span(streams[t]).subspan(lo, hi - lo)));
        }
    return out;
}

void require_finite(double loss, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(loss)) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "non-finite loss at epoch %zu, batch %zu", epoch, batch);
        throw NumericError(buf);
    }
}

double l1_term(double penalty, std::span<const double> v) {
    if (penalty == 0.0) return 0.0;
    double s = 0.0;
    for (double x : v) s += std::fabs(x);
    return penalty * s;
}

void add_l1_subgradient(double penalty, std::span<const double> v, std::span<double> g) {
    if (penalty == 0.0) return;
    for (std::size_t e = 0; e < v.size(); ++e)
        if (v[e] != 0.0) g[e] += v[e] > 0.0 ? penalty : -penalty;
}

double accuracy_of_logits(std::span<const double> logits, const Batch& batch, std::size_t C) {
    return batch_accuracy(logits, batch.labels, C);
}

// Shared loop for the standard and linearized addition objectives.
LearnReport run_addition(const ToyModel& model, const BlockedTensor& theta0,
                         std::span<const TaskVector> tvs, const std::vector<Batch>& train_tasks,
                         const TrainConfig& config, const Batch* val,
                         const PartitionMasks* masks, bool linearized) {
    config.validate();
    model.require_matching(theta0);
    if (tvs.empty()) throw ConfigError("addition needs at least one task vector");
    if (train_tasks.empty()) throw ConfigError("training data is empty");
    for (const Batch& b : train_tasks) require_labelled(b, "training task");
    if (masks != nullptr && masks->specs != theta0.specs())
        throw ShapeError("partition masks were built for a different block inventory");

    const std::size_t K = masks != nullptr ? masks->K : 1;
    std::vector<std::string> ids, names;
    for (const TaskVector& tv : tvs) ids.push_back(tv.id);
    for (const BlockSpec& s : theta0.specs()) names.push_back(s.name);
    CoefficientSet coeffs = CoefficientSet::zeros(std::move(ids), std::move(names), K);
    std::fill(coeffs.values.begin(), coeffs.values.end(), config.init_coefficient);

    AdamW opt(coeffs.values.size(), config.learning_rate, config.weight_decay);
    std::mt19937_64 rng = make_rng(config.seed, "shuffle");
    const std::vector<double> th0 = theta0.to_f64();
    const std::size_t C = model.config().num_classes;

    LearnReport report;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const std::vector<Batch> schedule =
            epoch_schedule(train_tasks, config.batch_size, config.interleave_tasks, rng);
        double epoch_sum = 0.0;
        for (std::size_t b = 0; b < schedule.size(); ++b) {
            const Batch& batch = schedule[b];
            double loss;
            std::vector<double> cgrad;
            if (!linearized) {
                const std::vector<double> theta =
                    masks != nullptr ? compose_partitioned_f64(theta0, coeffs, tvs, *masks)
                                     : compose_f64(theta0, coeffs, tvs);
                BackwardResult back = backward_f64(model, theta, batch,
                                                   LossKind::CrossEntropy, config.threads);
                loss = back.loss;
                cgrad = coefficient_grad(theta0.specs(), back.grad, tvs, masks);
            } else {
                const std::vector<double> delta =
                    masks != nullptr
                        ? compose_delta_partitioned_f64(theta0, coeffs, tvs, *masks)
                        : compose_delta_f64(theta0, coeffs, tvs);
                std::vector<double> logits = forward_f64(model, th0, batch, config.threads);
                const std::vector<double> tang =
                    jvp_f64(model, th0, delta, batch, config.threads);
                for (std::size_t e = 0; e < logits.size(); ++e) logits[e] += tang[e];
                auto [l, dl] = loss_with_dlogits(LossKind::CrossEntropy, logits, batch, C);
                loss = l;
                BackwardResult back =
                    backward_cotangent_f64(model, th0, batch, dl, config.threads);
                cgrad = coefficient_grad(theta0.specs(), back.grad, tvs, masks);
            }
            const double objective = loss + l1_term(config.l1_penalty, coeffs.values);
            require_finite(objective, epoch, b);
            add_l1_subgradient(config.l1_penalty, coeffs.values, cgrad);
            opt.step(coeffs.values, cgrad);
            epoch_sum += objective;
        }
        report.loss_trace.push_back(epoch_sum / static_cast<double>(schedule.size()));
        if (val != nullptr) {
            std::vector<double> logits;
            if (!linearized) {
                const std::vector<double> theta =
                    masks != nullptr ? compose_partitioned_f64(theta0, coeffs, tvs, *masks)
                                     : compose_f64(theta0, coeffs, tvs);
                logits = forward_f64(model, theta, *val, config.threads);
            } else {
                const std::vector<double> delta =
                    masks != nullptr
                        ? compose_delta_partitioned_f64(theta0, coeffs, tvs, *masks)
                        : compose_delta_f64(theta0, coeffs, tvs);
                logits = forward_f64(model, th0, *val, config.threads);
                const std::vector<double> tang =
                    jvp_f64(model, th0, delta, *val, config.threads);
                for (std::size_t e = 0; e < logits.size(); ++e) logits[e] += tang[e];
            }
            report.val_accuracy.push_back(accuracy_of_logits(logits, *val, C));
        }
    }
    report.coeffs = std::move(coeffs);
    return report;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (l1_penalty < 0.0) throw ConfigError("l1_penalty must be non-negative");
    if (threads < 1) throw ConfigError("threads must be at least 1");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"l1_penalty", l1_penalty},
            {"seed", seed},
            {"init_coefficient", init_coefficient},
            {"interleave_tasks", interleave_tasks},
            {"threads", threads}};
}

nlohmann::json learn_report_json(const LearnReport& report, const TrainConfig& config) {
    nlohmann::json out{{"tv_ids", report.coeffs.tv_ids},
                       {"block_names", report.coeffs.block_names},
                       {"K", report.coeffs.K},
                       {"coeffs", report.coeffs.values},
                       {"loss_trace", report.loss_trace},
                       {"seed", config.seed},
                       {"config", config.to_json()}};
    if (!report.val_accuracy.empty()) out["val_accuracy"] = report.val_accuracy;
    return out;
}

AdamW::AdamW(std::size_t n, double lr_, double weight_decay_)
    : lr(lr_), weight_decay(weight_decay_), m(n, 0.0), v(n, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m.size() || grad.size() != m.size())
        throw ShapeError("optimizer state size mismatch");
    t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t e = 0; e < params.size(); ++e) {
        m[e] = beta1 * m[e] + (1.0 - beta1) * grad[e];
        v[e] = beta2 * v[e] + (1.0 - beta2) * grad[e] * grad[e];
        const double mhat = m[e] / bc1;
        const double vhat = v[e] / bc2;
        params[e] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * params[e]);
    }
}

std::vector<double> coefficient_grad(const std::vector<BlockSpec>& specs,
                                     std::span<const double> weight_grad,
                                     std::span<const TaskVector> tvs,
                                     const PartitionMasks* masks) {
    const std::vector<std::size_t> offsets = block_offsets_of(specs);
    if (weight_grad.size() != offsets.back())
        throw ShapeError("weight gradient length does not match the block inventory");
    const std::size_t n = tvs.size();
    const std::size_t m = specs.size();
    const std::size_t K = masks != nullptr ? masks->K : 1;
    if (masks != nullptr && masks->specs != specs)
        throw ShapeError("partition masks were built for a different block inventory");

    std::vector<double> out(n * m * K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const TaskVector& tv = tvs[i];
        if (tv.is_dense()) {
            if (tv.dense->specs() != specs)
                throw ShapeError("task vector '" + tv.id +
                                 "' does not match the block inventory");
            for (std::size_t j = 0; j < m; ++j) {
                auto blk = tv.dense->block(j);
                const double* g = weight_grad.data() + offsets[j];
                double* dst = out.data() + (i * m + j) * K;
                if (K == 1) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < blk.size(); ++e)
                        s += g[e] * static_cast<double>(blk[e]);
                    dst[0] = s;
                } else {
                    const std::vector<std::uint32_t> mask = masks->assignment(j);
                    for (std::size_t e = 0; e < blk.size(); ++e)
                        dst[mask[e]] += g[e] * static_cast<double>(blk[e]);
                }
            }
        } else {
            for (const LoraFactor& f : tv.factors) {
                std::size_t j = m;
                for (std::size_t c = 0; c < m; ++c)
                    if (specs[c].name == f.name) { j = c; break; }
                if (j == m)
                    throw ShapeError("task vector '" + tv.id + "' targets unknown block '" +
                                     f.name + "'");
                const BlockSpec& s = specs[j];
                if (s.shape.size() != 2 || s.shape[0] != f.out_dim || s.shape[1] != f.in_dim)
                    throw ShapeError("factored block '" + f.name +
                                     "' does not match the inventory shape");
                f.validate();
                const double* g = weight_grad.data() + offsets[j];
                double* dst = out.data() + (i * m + j) * K;
                if (K == 1) {
                    // <G, B A> = sum over (r, c) of (B^T G)[r, c] * A[r, c]
                    double total = 0.0;
                    for (std::size_t r = 0; r < f.rank; ++r) {
                        for (std::size_t c = 0; c < f.in_dim; ++c) {
                            double btg = 0.0;
                            for (std::size_t o = 0; o < f.out_dim; ++o)
                                btg += static_cast<double>(f.b[o * f.rank + r]) *
                                       g[o * f.in_dim + c];
                            total += btg * static_cast<double>(f.a[r * f.in_dim + c]);
                        }
                    }
                    dst[0] = total;
                } else {
                    const std::vector<std::uint32_t> mask = masks->assignment(j);
                    for (std::size_t o = 0; o < f.out_dim; ++o) {
                        for (std::size_t c = 0; c < f.in_dim; ++c) {
                            double d = 0.0;
                            for (std::size_t r = 0; r < f.rank; ++r)
                                d += static_cast<double>(f.b[o * f.rank + r]) *
                                     static_cast<double>(f.a[r * f.in_dim + c]);
                            const std::size_t e = o * f.in_dim + c;
                            dst[mask[e]] += g[e] * d;
                        }
                    }
                }
            }
        }
    }
    return out;
}

LearnReport learn_addition(const ToyModel& model, const BlockedTensor& theta0,
                           std::span<const TaskVector> tvs,
                           const std::vector<Batch>& train_tasks, const TrainConfig& config,
                           const Batch* val, const PartitionMasks* masks) {
    return run_addition(model, theta0, tvs, train_tasks, config, val, masks, false);
}

LearnReport learn_addition_linearized(const ToyModel& model, const BlockedTensor& theta0,
                                      std::span<const TaskVector> tvs,
                                      const std::vector<Batch>& train_tasks,
                                      const TrainConfig& config, const Batch* val,
                                      const PartitionMasks* masks) {
    return run_addition(model, theta0, tvs, train_tasks, config, val, masks, true);
}

LearnReport learn_negation(const ToyModel& model, const BlockedTensor& theta0,
                           const TaskVector& target_tv, const Batch& target_data,
                           const Batch& control_data, const TrainConfig& config) {
    config.validate();
    model.require_matching(theta0);
    require_labelled(target_data, "target data");
    require_labelled(control_data, "control data");

    std::vector<std::string> names;
    for (const BlockSpec& s : theta0.specs()) names.push_back(s.name);
    CoefficientSet coeffs = CoefficientSet::zeros({target_tv.id}, std::move(names));
    std::fill(coeffs.values.begin(), coeffs.values.end(), config.init_coefficient);
    const std::span<const TaskVector> tvs(&target_tv, 1);

    AdamW opt(coeffs.values.size(), config.learning_rate, config.weight_decay);
    std::mt19937_64 rng = make_rng(config.seed, "shuffle");

    std::vector<std::uint32_t> tgt_idx(target_data.size());
    std::vector<std::uint32_t> ctl_idx(control_data.size());
    std::iota(tgt_idx.begin(), tgt_idx.end(), 0u);
    std::iota(ctl_idx.begin(), ctl_idx.end(), 0u);
    std::size_t ctl_pos = ctl_idx.size();  // forces a shuffle before first use

    auto take = [](const Batch& src, std::span<const std::uint32_t> rows) {
        Batch out;
        out.in_dim = src.in_dim;
        for (std::uint32_t r : rows) {
            const double* x = src.inputs.data() + std::size_t{r} * src.in_dim;
            out.inputs.insert(out.inputs.end(), x, x + src.in_dim);
            out.labels.push_back(src.labels[r]);
        }
        return out;
    };

    LearnReport report;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(tgt_idx.begin(), tgt_idx.end(), rng);
        double epoch_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t lo = 0; lo < tgt_idx.size(); lo += config.batch_size, ++steps) {
            const std::size_t hi = std::min(lo + config.batch_size, tgt_idx.size());
            const Batch tgt = take(target_data, std::span(tgt_idx).subspan(lo, hi - lo));

            // Control rows cycle independently, reshuffled on wrap.
            std::vector<std::uint32_t> ctl_rows;
            while (ctl_rows.size() < config.batch_size) {
                if (ctl_pos == ctl_idx.size()) {
                    std::shuffle(ctl_idx.begin(), ctl_idx.end(), rng);
                    ctl_pos = 0;
                }
                ctl_rows.push_back(ctl_idx[ctl_pos++]);
            }
            const Batch ctl = take(control_data, ctl_rows);

            const std::vector<double> theta = compose_f64(theta0, coeffs, tvs);
            BackwardResult up = backward_f64(model, theta, tgt, LossKind::NegatedCrossEntropy,
                                             config.threads);
            BackwardResult down =
                backward_f64(model, theta, ctl, LossKind::CrossEntropy, config.threads);
            const double objective = up.loss + down.loss;
            require_finite(objective, epoch, steps);
            for (std::size_t e = 0; e < up.grad.size(); ++e) up.grad[e] += down.grad[e];
            std::vector<double> cgrad = coefficient_grad(theta0.specs(), up.grad, tvs);
            opt.step(coeffs.values, cgrad);
            epoch_sum += objective;
        }
        report.loss_trace.push_back(epoch_sum / static_cast<double>(steps));
    }
    report.coeffs = std::move(coeffs);
    return report;
}

LearnReport learn_fewshot(const ToyModel& model, const BlockedTensor& theta0,
                          std::span<const TaskVector> tvs, const std::string& target_id,
                          const Batch& kshot_data, const TrainConfig& config,
                          const Batch* val) {
    for (const TaskVector& tv : tvs)
        if (tv.id == target_id)
            throw ProtocolError("task vector '" + target_id +
                                "' belongs to the target task; transfer must exclude it");
    require_labelled(kshot_data, "k-shot data");
    const std::size_t C = model.config().num_classes;
    std::vector<std::size_t> counts(C, 0);
    for (int y : kshot_data.labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ConfigError("k-shot label out of range");
        counts[static_cast<std::size_t>(y)] += 1;
    }
    for (std::size_t c = 1; c < C; ++c)
        if (counts[c] != counts[0])
            throw ConfigError("k-shot data must hold the same number of examples per class");
    if (counts[0] == 0) throw ConfigError("k-shot data is empty");
    return learn_addition(model, theta0, tvs, {kshot_data}, config, val, nullptr);
}

std::pair<double, double> isotropic_grid(const ToyModel& model, const BlockedTensor& theta0,
                                         std::span<const TaskVector> tvs, const Batch& data,
                                         int threads) {
    model.require_matching(theta0);
    if (tvs.empty()) throw ConfigError("grid search needs at least one task vector");
    require_labelled(data, "grid-search data");
    std::vector<std::string> ids, names;
    for (const TaskVector& tv : tvs) ids.push_back(tv.id);
    for (const BlockSpec& s : theta0.specs()) names.push_back(s.name);

    double best_alpha = 0.0;
    double best_acc = -1.0;
    for (int g = 0; g <= 20; ++g) {
        const double alpha = static_cast<double>(g) * 0.05;
        CoefficientSet coeffs = CoefficientSet::isotropic(alpha, ids, names);
        const std::vector<double> theta = compose_f64(theta0, coeffs, tvs);
        const std::vector<double> logits = forward_f64(model, theta, data, threads);
        const double acc =
            batch_accuracy(logits, data.labels, model.config().num_classes);
        if (acc > best_acc) {  // ties keep the smaller alpha
            best_acc = acc;
            best_alpha = alpha;
        }
    }
    return {best_alpha, best_acc};
}

BlockedTensor finetune_weights(const ToyModel& model, const BlockedTensor& theta0,
                               const Batch& train, const FinetuneConfig& config) {
    if (!(config.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (config.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (config.batch_size < 1) throw ConfigError("batch_size must be at least 1");
    model.require_matching(theta0);
    require_labelled(train, "training data");

    std::vector<double> theta = theta0.to_f64();
    AdamW opt(theta.size(), config.learning_rate, config.weight_decay);
    std::mt19937_64 rng = make_rng(config.seed, "finetune-shuffle");
    std::vector<std::uint32_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0u);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t step = 0;
        for (std::size_t lo = 0; lo < idx.size(); lo += config.batch_size, ++step) {
            const std::size_t hi = std::min(lo + config.batch_size, idx.size());
            Batch b;
            b.in_dim = train.in_dim;
            for (std::size_t r = lo; r < hi; ++r) {
                const double* x = train.inputs.data() + std::size_t{idx[r]} * train.in_dim;
                b.inputs.insert(b.inputs.end(), x, x + train.in_dim);
                b.labels.push_back(train.labels[idx[r]]);
            }
            BackwardResult back =
                backward_f64(model, theta, b, LossKind::CrossEntropy, config.threads);
            require_finite(back.loss, epoch, step);
            opt.step(theta, back.grad);
        }
    }
    return BlockedTensor::from_f64(theta0.specs(), theta);
}

double batch_accuracy(std::span<const double> logits, std::span<const int> labels,
                      std::size_t num_classes) {
    if (labels.empty()) throw ConfigError("accuracy needs labels");
    if (logits.size() != labels.size() * num_classes)
        throw ShapeError("logits shape mismatch");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        const double* l = logits.data() + r * num_classes;
        std::size_t arg = 0;  // ties resolve to the lowest class index
        for (std::size_t c = 1; c < num_classes; ++c)
            if (l[c] > l[arg]) arg = c;
        if (static_cast<int>(arg) == labels[r]) hits += 1;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace tvkit
