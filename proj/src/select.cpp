#include "tvkit/select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "tvkit/errors.hpp"
#include "tvkit/learn.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {
namespace {

void require_budget(std::size_t b) {
    if (b < 1) throw ConfigError("selection budget must be at least 1");
}

std::vector<std::size_t> id_sorted_order(std::span<const TaskVector> tvs) {
    std::vector<std::size_t> order(tvs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return tvs[a].id < tvs[b].id; });
    for (std::size_t i = 1; i < order.size(); ++i)
        if (tvs[order[i - 1]].id == tvs[order[i]].id)
            throw ConfigError("duplicate task vector id '" + tvs[order[i]].id + "'");
    return order;
}

// Descending by score; equal scores keep the incoming (id-sorted) order.
std::vector<std::string> top_ids(const std::vector<std::pair<std::string, double>>& scored,
                                 std::size_t b) {
    std::vector<std::size_t> idx(scored.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
        return scored[x].second > scored[y].second;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min(b, idx.size()); ++i)
        out.push_back(scored[idx[i]].first);
    return out;
}

}  // namespace

const char* to_string(SelectStrategy s) {
    switch (s) {
        case SelectStrategy::Random: return "random";
        case SelectStrategy::FeatureSimilarity: return "feature-similarity";
        case SelectStrategy::GradientWhole: return "gradient-whole";
        case SelectStrategy::GradientBlockwise: return "gradient-blockwise";
    }
    return "random";
}

SelectStrategy select_strategy_from_string(const std::string& s) {
    if (s == "random") return SelectStrategy::Random;
    if (s == "feature-similarity") return SelectStrategy::FeatureSimilarity;
    if (s == "gradient-whole") return SelectStrategy::GradientWhole;
    if (s == "gradient-blockwise") return SelectStrategy::GradientBlockwise;
    throw ConfigError("unknown selection strategy '" + s + "'");
}

nlohmann::json SelectionPlan::to_json() const {
    nlohmann::json out{{"strategy", to_string(strategy)}, {"budget", budget}};
    if (strategy == SelectStrategy::GradientBlockwise) {
        out["blockwise"] = nlohmann::json::object();
        for (const auto& [block, ids] : blockwise) out["blockwise"][block] = ids;
    } else {
        out["whole"] = whole;
    }
    return out;
}

SelectionPlan SelectionPlan::from_json(const nlohmann::json& j) {
    SelectionPlan p;
    try {
        p.strategy = select_strategy_from_string(j.at("strategy").get<std::string>());
        p.budget = j.at("budget").get<std::size_t>();
        if (p.strategy == SelectStrategy::GradientBlockwise) {
            for (const auto& [block, ids] : j.at("blockwise").items())
                p.blockwise[block] = ids.get<std::vector<std::string>>();
        } else {
            p.whole = j.at("whole").get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed selection plan: ") + e.what());
    }
    return p;
}

SelectionPlan select_random(std::span<const TaskVector> tvs, std::size_t b,
                            std::uint64_t seed) {
    require_budget(b);
    std::vector<std::size_t> order = id_sorted_order(tvs);
    std::mt19937_64 rng = make_rng(seed, "select-random");
    const std::size_t take = std::min(b, order.size());
    for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    SelectionPlan plan;
    plan.strategy = SelectStrategy::Random;
    plan.budget = b;
    for (std::size_t i = 0; i < take; ++i) plan.whole.push_back(tvs[order[i]].id);
    return plan;
}

SelectionPlan select_by_features(const ToyModel& model, const BlockedTensor& theta0,
                                 std::span<const Dataset> candidates, const Dataset& target,
                                 std::size_t b, int threads) {
    require_budget(b);
    model.require_matching(theta0);
    if (candidates.empty()) throw ConfigError("no candidate datasets");
    const std::vector<double> th = theta0.to_f64();
    const std::size_t emb = model.config().emb_dim;

    auto mean_latent = [&](const Batch& batch) {
        if (batch.size() == 0) throw ConfigError("dataset has no examples");
        const std::vector<double> z = embed_f64(model, th, batch, threads);
        std::vector<double> mean(emb, 0.0);
        for (std::size_t r = 0; r < batch.size(); ++r)
            for (std::size_t e = 0; e < emb; ++e) mean[e] += z[r * emb + e];
        for (double& v : mean) v /= static_cast<double>(batch.size());
        return mean;
    };
    auto cosine = [&](const std::vector<double>& a, const std::vector<double>& bv) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t e = 0; e < a.size(); ++e) {
            dot += a[e] * bv[e];
            na += a[e] * a[e];
            nb += bv[e] * bv[e];
        }
        // a zero-norm mean has no direction; score it 0 so order falls back
        // to the candidate index
        if (na == 0.0 || nb == 0.0) return 0.0;
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };

    const std::vector<double> zt = mean_latent(target.train);
    std::vector<std::pair<std::string, double>> scored;
    for (const Dataset& c : candidates)
        scored.emplace_back(c.id, cosine(mean_latent(c.train), zt));

    SelectionPlan plan;
    plan.strategy = SelectStrategy::FeatureSimilarity;
    plan.budget = b;
    plan.whole = top_ids(scored, b);
    return plan;
}

SelectionPlan select_by_gradient(const ToyModel& model, const BlockedTensor& theta0,
                                 std::span<const TaskVector> tvs, const Batch& target_data,
                                 std::size_t b, std::size_t group_size, GradientMode mode,
                                 int threads) {
    require_budget(b);
    model.require_matching(theta0);
    if (target_data.size() == 0 || target_data.labels.size() != target_data.size())
        throw ConfigError("gradient probe needs labelled target data");
    const std::vector<std::size_t> order = id_sorted_order(tvs);
    if (group_size == 0) group_size = b;

    // The probe sits at lambda = 0, so the weight gradient is the plain
    // zero-shot gradient and one backward pass serves every group.
    const BackwardResult probe = backward_f64(model, theta0.to_f64(), target_data,
                                              LossKind::CrossEntropy, threads);
    const std::size_t m = model.num_blocks();

    std::vector<std::pair<std::string, double>> whole_scores;
    std::vector<std::vector<std::pair<std::string, double>>> block_scores(m);
    for (std::size_t lo = 0; lo < order.size(); lo += group_size) {
        const std::size_t hi = std::min(lo + group_size, order.size());
        std::vector<TaskVector> group;
        for (std::size_t i = lo; i < hi; ++i) group.push_back(tvs[order[i]]);
        const std::vector<double> cg = coefficient_grad(model.specs(), probe.grad, group);
        for (std::size_t i = 0; i < group.size(); ++i) {
            double l1 = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double g = std::fabs(cg[i * m + j]);
                l1 += g;
                block_scores[j].emplace_back(group[i].id, g);
            }
            whole_scores.emplace_back(group[i].id, l1);
        }
    }

    SelectionPlan plan;
    plan.strategy = mode == GradientMode::Whole ? SelectStrategy::GradientWhole
                                                : SelectStrategy::GradientBlockwise;
    plan.budget = b;
    if (mode == GradientMode::Whole) {
        plan.whole = top_ids(whole_scores, b);
    } else {
        for (std::size_t j = 0; j < m; ++j)
            plan.blockwise[model.specs()[j].name] = top_ids(block_scores[j], b);
    }
    return plan;
}

void restrict_coefficients(CoefficientSet& coeffs, const SelectionPlan& plan) {
    const std::size_t K = coeffs.K;
    if (plan.strategy == SelectStrategy::GradientBlockwise) {
        for (std::size_t j = 0; j < coeffs.m(); ++j) {
            const auto it = plan.blockwise.find(coeffs.block_names[j]);
            if (it == plan.blockwise.end())
                throw ConfigError("plan has no entry for block '" + coeffs.block_names[j] + "'");
            const std::set<std::string> keep(it->second.begin(), it->second.end());
            for (std::size_t i = 0; i < coeffs.n(); ++i)
                if (!keep.count(coeffs.tv_ids[i]))
                    for (std::size_t k = 0; k < K; ++k) coeffs.at(i, j, k) = 0.0;
        }
        return;
    }
    const std::set<std::string> keep(plan.whole.begin(), plan.whole.end());
    for (std::size_t i = 0; i < coeffs.n(); ++i)
        if (!keep.count(coeffs.tv_ids[i]))
            for (std::size_t j = 0; j < coeffs.m(); ++j)
                for (std::size_t k = 0; k < K; ++k) coeffs.at(i, j, k) = 0.0;
}

}  // namespace tvkit
