#include "tvkit/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "tvkit/errors.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {

std::vector<double> densify(const LoraFactor& factor) {
    factor.validate();
    std::vector<double> out(factor.out_dim * factor.in_dim, 0.0);
    for (std::size_t o = 0; o < factor.out_dim; ++o)
        for (std::size_t c = 0; c < factor.in_dim; ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < factor.rank; ++r)
                s += static_cast<double>(factor.b[o * factor.rank + r]) *
                     static_cast<double>(factor.a[r * factor.in_dim + c]);
            out[o * factor.in_dim + c] = s;
        }
    return out;
}

namespace {

struct FactorSlot {
    std::size_t block = 0;       // index into the model's specs
    std::size_t theta_off = 0;   // flat offset of the block
    std::size_t a_off = 0;       // offsets into the packed parameter vector
    std::size_t b_off = 0;
    std::size_t out_dim = 0, in_dim = 0;
};

}  // namespace

TaskVector finetune_lora(const ToyModel& model, const BlockedTensor& theta0, const Batch& train,
                         std::size_t rank, const FinetuneConfig& config,
                         const std::vector<std::string>* only_blocks) {
    if (rank < 1) throw ConfigError("rank must be at least 1");
    if (!(config.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (config.batch_size < 1) throw ConfigError("batch_size must be at least 1");
    model.require_matching(theta0);
    if (train.size() == 0 || train.labels.size() != train.size())
        throw ConfigError("training data must carry one label per example");

    const std::vector<BlockSpec>& specs = model.specs();
    std::vector<FactorSlot> slots;
    std::size_t packed = 0;
    for (std::size_t j = 0; j < specs.size(); ++j) {
        if (specs[j].kind != BlockKind::WeightMatrix) continue;
        if (only_blocks != nullptr &&
            std::find(only_blocks->begin(), only_blocks->end(), specs[j].name) ==
                only_blocks->end())
            continue;
        FactorSlot s;
        s.block = j;
        s.theta_off = model.block_offsets()[j];
        s.out_dim = specs[j].shape[0];
        s.in_dim = specs[j].shape[1];
        if (rank > std::min(s.out_dim, s.in_dim))
            throw ShapeError("rank " + std::to_string(rank) + " exceeds block '" +
                             specs[j].name + "' (" + std::to_string(s.out_dim) + "x" +
                             std::to_string(s.in_dim) + ")");
        s.a_off = packed;
        packed += rank * s.in_dim;
        s.b_off = packed;
        packed += s.out_dim * rank;
        slots.push_back(s);
    }
    if (slots.empty()) throw ConfigError("no weight-matrix blocks to factor");
    if (only_blocks != nullptr)
        for (const std::string& name : *only_blocks) {
            const auto it = std::find_if(specs.begin(), specs.end(),
                                         [&](const BlockSpec& s) { return s.name == name; });
            if (it == specs.end()) throw ConfigError("unknown block '" + name + "'");
            if (it->kind != BlockKind::WeightMatrix)
                throw ConfigError("block '" + name + "' is not a weight matrix");
        }

    // B starts at zero so the initial delta vanishes; A is a small Gaussian.
    std::vector<double> params(packed, 0.0);
    std::mt19937_64 init_rng = make_rng(config.seed, "lora-init");
    std::normal_distribution<double> small(0.0, 0.01);
    for (const FactorSlot& s : slots)
        for (std::size_t e = 0; e < rank * s.in_dim; ++e) params[s.a_off + e] = small(init_rng);

    const std::vector<double> th0 = theta0.to_f64();
    std::vector<double> theta(th0.size());
    auto build_theta = [&] {
        std::copy(th0.begin(), th0.end(), theta.begin());
        for (const FactorSlot& s : slots) {
            const double* A = params.data() + s.a_off;
            const double* B = params.data() + s.b_off;
            double* dst = theta.data() + s.theta_off;
            for (std::size_t o = 0; o < s.out_dim; ++o)
                for (std::size_t c = 0; c < s.in_dim; ++c) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < rank; ++r)
                        acc += B[o * rank + r] * A[r * s.in_dim + c];
                    dst[o * s.in_dim + c] += acc;
                }
        }
    };

    AdamW opt(packed, config.learning_rate, config.weight_decay);
    std::mt19937_64 rng = make_rng(config.seed, "lora-shuffle");
    std::vector<std::uint32_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::vector<double> pgrad(packed);

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
            build_theta();
            BackwardResult back =
                backward_f64(model, theta, b, LossKind::CrossEntropy, config.threads);
            if (!std::isfinite(back.loss)) {
                char buf[96];
                std::snprintf(buf, sizeof buf, "non-finite loss at epoch %zu, batch %zu",
                              epoch, step);
                throw NumericError(buf);
            }
            // dB = G A^T, dA = B^T G on each factored block
            std::fill(pgrad.begin(), pgrad.end(), 0.0);
            for (const FactorSlot& s : slots) {
                const double* G = back.grad.data() + s.theta_off;
                const double* A = params.data() + s.a_off;
                const double* B = params.data() + s.b_off;
                double* dA = pgrad.data() + s.a_off;
                double* dB = pgrad.data() + s.b_off;
                for (std::size_t o = 0; o < s.out_dim; ++o)
                    for (std::size_t r = 0; r < rank; ++r) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < s.in_dim; ++c)
                            acc += G[o * s.in_dim + c] * A[r * s.in_dim + c];
                        dB[o * rank + r] = acc;
                    }
                for (std::size_t r = 0; r < rank; ++r)
                    for (std::size_t c = 0; c < s.in_dim; ++c) {
                        double acc = 0.0;
                        for (std::size_t o = 0; o < s.out_dim; ++o)
                            acc += B[o * rank + r] * G[o * s.in_dim + c];
                        dA[r * s.in_dim + c] = acc;
                    }
            }
            opt.step(params, pgrad);
        }
    }

    TaskVector tv;
    tv.id = "lora";
    tv.base_fingerprint = theta0.fingerprint();
    for (const FactorSlot& s : slots) {
        LoraFactor f;
        f.name = specs[s.block].name;
        f.rank = rank;
        f.out_dim = s.out_dim;
        f.in_dim = s.in_dim;
        f.a.resize(rank * s.in_dim);
        f.b.resize(s.out_dim * rank);
        for (std::size_t e = 0; e < f.a.size(); ++e)
            f.a[e] = static_cast<float>(params[s.a_off + e]);
        for (std::size_t e = 0; e < f.b.size(); ++e)
            f.b[e] = static_cast<float>(params[s.b_off + e]);
        f.validate();
        tv.factors.push_back(std::move(f));
    }
    return tv;
}

}  // namespace tvkit
