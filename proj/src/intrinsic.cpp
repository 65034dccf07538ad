#include "tvkit/intrinsic.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>
#include <unordered_map>

#include "tvkit/errors.hpp"
#include "tvkit/evalx.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {

namespace {

std::string fmt(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

struct Moments {
    double mean = 0.0;
    double std = 0.0;
};

Moments block_moments(std::span<const float> block) {
    Moments m;
    for (float v : block) m.mean += v;
    m.mean /= static_cast<double>(block.size());
    for (float v : block) m.std += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(m.std / static_cast<double>(block.size()));
    return m;
}

}  // namespace

const char* to_string(BasisKind k) {
    return k == BasisKind::Random ? "random" : "taskvector";
}

BasisSet make_random_basis(const BlockedTensor& theta0, std::size_t d, std::uint64_t seed) {
    if (d < 1) throw ConfigError("basis dimension must be at least 1");
    const auto& specs = theta0.specs();

    std::vector<Moments> moments(specs.size());
    for (std::size_t j = 0; j < specs.size(); ++j) {
        moments[j] = block_moments(theta0.block(j));
        if (moments[j].std < 1e-6) moments[j].std = 1e-6;
    }

    BasisSet out;
    out.kind = BasisKind::Random;
    for (std::size_t b = 0; b < d; ++b) {
        auto rng = make_rng(seed, "random-basis", b);
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<std::vector<float>> data;
        for (std::size_t j = 0; j < specs.size(); ++j) {
            std::vector<float> blk(specs[j].numel());
            for (float& v : blk)
                v = static_cast<float>(moments[j].mean + moments[j].std * gauss(rng));
            data.push_back(std::move(blk));
        }
        TaskVector tv;
        tv.id = "basis" + std::to_string(b);
        tv.base_fingerprint = theta0.fingerprint();
        tv.dense = BlockedTensor(specs, std::move(data));
        out.elements.push_back(std::move(tv));
    }
    return out;
}

BasisSet make_tv_basis(std::span<const TaskVector> tvs, std::size_t d,
                       const SelectionPlan& plan) {
    if (d < 1) throw ConfigError("basis dimension must be at least 1");
    if (d > tvs.size()) throw ConfigError("basis dimension exceeds the candidate count");
    if (plan.budget != d) throw ConfigError("selection plan budget does not match d");
    if (plan.blockwise.empty()) throw ConfigError("a blockwise selection plan is required");

    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < tvs.size(); ++i) {
        if (!tvs[i].is_dense()) throw ConfigError("dense task vectors required for a basis");
        if (!tvs[i].dense->same_specs(*tvs[0].dense))
            throw ShapeError("task vectors disagree on block layout");
        by_id[tvs[i].id] = i;
    }

    const auto& specs = tvs[0].dense->specs();
    BasisSet out;
    out.kind = BasisKind::TaskVector;
    for (std::size_t b = 0; b < d; ++b) {
        std::vector<std::vector<float>> data;
        for (std::size_t j = 0; j < specs.size(); ++j) {
            auto it = plan.blockwise.find(specs[j].name);
            if (it == plan.blockwise.end())
                throw ConfigError("selection plan is missing block " + specs[j].name);
            if (it->second.size() < d)
                throw ConfigError("selection plan ranks fewer than d vectors for block "
                                  + specs[j].name);
            auto src = by_id.find(it->second[b]);
            if (src == by_id.end())
                throw ConfigError("selection plan names unknown task vector " + it->second[b]);
            auto blk = tvs[src->second].dense->block(j);
            data.emplace_back(blk.begin(), blk.end());
        }
        TaskVector tv;
        tv.id = "basis" + std::to_string(b);
        tv.base_fingerprint = tvs[0].base_fingerprint;
        tv.dense = BlockedTensor(specs, std::move(data));
        out.elements.push_back(std::move(tv));
    }
    return out;
}

SubspacePoint run_subspace_experiment(const ToyModel& model, const BlockedTensor& theta0,
                                      const BasisSet& basis, const Dataset& target,
                                      double finetuned_ref_acc, const TrainConfig& config) {
    model.require_matching(theta0);
    SubspacePoint out;
    out.d = basis.d();
    if (basis.d() == 0) {
        out.abs_acc = accuracy(model, theta0, target.test, config.threads);
    } else {
        auto report = learn_addition(model, theta0, basis.elements, {target.train}, config);
        auto theta = apply_anisotropic(theta0, report.coeffs, basis.elements);
        out.abs_acc = accuracy(model, theta, target.test, config.threads);
    }
    out.rel_acc = relative_accuracy(out.abs_acc, finetuned_ref_acc);
    return out;
}

std::string subspace_csv(std::span<const SubspaceRow> rows) {
    std::string out = "basis_kind,d,seed,abs_acc,rel_acc\n";
    for (const auto& r : rows) {
        out += r.basis_kind;
        out += ',';
        out += std::to_string(r.d);
        out += ',';
        out += std::to_string(r.seed);
        out += ',';
        out += fmt(r.abs_acc);
        out += ',';
        out += fmt(r.rel_acc);
        out += '\n';
    }
    return out;
}

}  // namespace tvkit
