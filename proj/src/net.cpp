#include "tvkit/net.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include "tvkit/errors.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_dx(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void require_finite(std::span<const double> v, const std::string& where) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(where + " produced a non-finite value");
}

// Runs fn(shard, begin, end) over a fixed partition of [0, B). Thread count
// only changes the grouping of shard reductions, never per-row results.
template <typename Fn>
void run_shards(std::size_t B, int threads, Fn&& fn) {
    std::size_t T = threads < 1 ? 1 : static_cast<std::size_t>(threads);
    T = std::min(T, B == 0 ? std::size_t{1} : B);
    if (T <= 1) {
        fn(std::size_t{0}, std::size_t{0}, B);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(T);
    for (std::size_t s = 0; s < T; ++s) {
        const std::size_t lo = B * s / T;
        const std::size_t hi = B * (s + 1) / T;
        pool.emplace_back([&, s, lo, hi] {
            try {
                fn(s, lo, hi);
            } catch (...) {
                errs[s] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

struct LayerCache {
    std::vector<double> xhat;     // B x d_in, normalised pre-affine input
    std::vector<double> inv_std;  // B
    std::vector<double> h;        // B x d_in, LayerNorm output
    std::vector<double> a;        // B x d_out, linear output
};

struct Cache {
    std::vector<LayerCache> layers;
    std::vector<double> norm;  // B, latent norms
    std::vector<double> zhat;  // B x emb
};

// theta blocks per layer l: W = 4l, b = 4l+1, ln_g = 4l+2, ln_b = 4l+3.
struct Params {
    const double* theta;
    const std::vector<std::size_t>* offsets;
    const double* W(std::size_t l) const { return theta + (*offsets)[4 * l]; }
    const double* b(std::size_t l) const { return theta + (*offsets)[4 * l + 1]; }
    const double* g(std::size_t l) const { return theta + (*offsets)[4 * l + 2]; }
    const double* beta(std::size_t l) const { return theta + (*offsets)[4 * l + 3]; }
};

void layer_norm_row(const double* x, std::size_t d, const double* g, const double* beta,
                    double* xhat, double* inv_std, double* h) {
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(d);  // population variance
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    *inv_std = inv;
    for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mu) * inv;
        h[i] = g[i] * xhat[i] + beta[i];
    }
}

// Forward over rows [0, B) of input; logits may be null when only latents are
// wanted. cache may be null.
void forward_rows(const ToyModel& m, Params p, const double* input, std::size_t B,
                  Cache* cache, double* logits, double* zhat_out) {
    const NetConfig& cfg = m.config();
    const std::size_t L = m.num_layers();
    std::vector<double> cur(input, input + B * cfg.in_dim);
    if (cache) cache->layers.resize(L);

    std::vector<double> xhat_row, h_row, a;
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t din = m.layer_in_dim(l);
        const std::size_t dout = m.layer_out_dim(l);
        LayerCache* lc = cache ? &cache->layers[l] : nullptr;
        if (lc) {
            lc->xhat.resize(B * din);
            lc->inv_std.resize(B);
            lc->h.resize(B * din);
            lc->a.resize(B * dout);
        }
        xhat_row.resize(din);
        h_row.resize(din);
        a.assign(B * dout, 0.0);
        for (std::size_t r = 0; r < B; ++r) {
            const double* x = cur.data() + r * din;
            double inv = 0.0;
            double* xh = lc ? lc->xhat.data() + r * din : xhat_row.data();
            double* hh = lc ? lc->h.data() + r * din : h_row.data();
            layer_norm_row(x, din, p.g(l), p.beta(l), xh, &inv, hh);
            if (lc) lc->inv_std[r] = inv;
            const double* W = p.W(l);
            const double* bias = p.b(l);
            double* ar = a.data() + r * dout;
            for (std::size_t o = 0; o < dout; ++o) {
                double s = bias[o];
                const double* wrow = W + o * din;
                for (std::size_t i = 0; i < din; ++i) s += wrow[i] * hh[i];
                ar[o] = s;
            }
        }
        require_finite(a, "layer " + std::to_string(l));
        if (lc) lc->a = a;
        if (l + 1 < L) {
            cur.resize(B * dout);
            for (std::size_t e = 0; e < a.size(); ++e) cur[e] = gelu(a[e]);
        } else {
            cur = std::move(a);
        }
    }

    // Head: L2-normalise the latent, score against frozen unit-norm rows.
    const std::size_t emb = cfg.emb_dim;
    const std::size_t C = cfg.num_classes;
    const std::vector<double>& E = m.class_embeddings();
    if (cache) {
        cache->norm.resize(B);
        cache->zhat.resize(B * emb);
    }
    std::vector<double> zhat_row(emb);
    for (std::size_t r = 0; r < B; ++r) {
        const double* z = cur.data() + r * emb;
        double n2 = 0.0;
        for (std::size_t e = 0; e < emb; ++e) n2 += z[e] * z[e];
        const double n = std::sqrt(n2);
        if (!(n > 0.0) || !std::isfinite(n))
            throw NumericError("head latent has zero or non-finite norm");
        double* zh = cache ? cache->zhat.data() + r * emb : zhat_row.data();
        for (std::size_t e = 0; e < emb; ++e) zh[e] = z[e] / n;
        if (cache) cache->norm[r] = n;
        if (zhat_out)
            for (std::size_t e = 0; e < emb; ++e) zhat_out[r * emb + e] = zh[e];
        if (logits) {
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                const double* erow = E.data() + c * emb;
                for (std::size_t e = 0; e < emb; ++e) s += erow[e] * zh[e];
                logits[r * C + c] = cfg.logit_scale * s;
            }
        }
    }
    if (logits) require_finite({logits, B * C}, "head");
}

// Scatter the cotangent on logits back to a parameter-gradient sum over the
// shard rows; no batch averaging here.
void backward_rows(const ToyModel& m, Params p, const double* input, std::size_t B,
                   const Cache& cache, const double* dlogits, double* grad) {
    const NetConfig& cfg = m.config();
    const std::size_t L = m.num_layers();
    const std::size_t emb = cfg.emb_dim;
    const std::size_t C = cfg.num_classes;
    const std::vector<double>& E = m.class_embeddings();
    const std::vector<std::size_t>& off = m.block_offsets();

    // Head backward into dz (gradient at the pre-normalisation latent).
    std::vector<double> dz(B * emb, 0.0);
    for (std::size_t r = 0; r < B; ++r) {
        const double* dl = dlogits + r * C;
        const double* zh = cache.zhat.data() + r * emb;
        double dzh[512];
        for (std::size_t e = 0; e < emb; ++e) {
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) s += E[c * emb + e] * dl[c];
            dzh[e] = cfg.logit_scale * s;
        }
        double dot = 0.0;
        for (std::size_t e = 0; e < emb; ++e) dot += zh[e] * dzh[e];
        const double n = cache.norm[r];
        for (std::size_t e = 0; e < emb; ++e) dz[r * emb + e] = (dzh[e] - zh[e] * dot) / n;
    }

    std::vector<double> dout = std::move(dz);
    for (std::size_t l = L; l-- > 0;) {
        const std::size_t din = m.layer_in_dim(l);
        const std::size_t dn = m.layer_out_dim(l);
        const LayerCache& lc = cache.layers[l];
        double* dW = grad + off[4 * l];
        double* db = grad + off[4 * l + 1];
        double* dg = grad + off[4 * l + 2];
        double* dbeta = grad + off[4 * l + 3];
        const double* W = p.W(l);
        const double* g = p.g(l);

        std::vector<double> dx(B * din, 0.0);
        std::vector<double> da_row(dn);
        std::vector<double> dh(din);
        for (std::size_t r = 0; r < B; ++r) {
            const double* up = dout.data() + r * dn;
            const double* a = lc.a.data() + r * dn;
            for (std::size_t o = 0; o < dn; ++o)
                da_row[o] = (l + 1 < L) ? up[o] * gelu_dx(a[o]) : up[o];
            const double* h = lc.h.data() + r * din;
            for (std::size_t o = 0; o < dn; ++o) {
                const double d = da_row[o];
                db[o] += d;
                double* wrow = dW + o * din;
                for (std::size_t i = 0; i < din; ++i) wrow[i] += d * h[i];
            }
            std::fill(dh.begin(), dh.end(), 0.0);
            for (std::size_t o = 0; o < dn; ++o) {
                const double d = da_row[o];
                const double* wrow = W + o * din;
                for (std::size_t i = 0; i < din; ++i) dh[i] += wrow[i] * d;
            }
            const double* xh = lc.xhat.data() + r * din;
            const double inv = lc.inv_std[r];
            double mean_t = 0.0, mean_tx = 0.0;
            for (std::size_t i = 0; i < din; ++i) {
                dg[i] += dh[i] * xh[i];
                dbeta[i] += dh[i];
                const double t = g[i] * dh[i];
                mean_t += t;
                mean_tx += t * xh[i];
            }
            mean_t /= static_cast<double>(din);
            mean_tx /= static_cast<double>(din);
            double* dxr = dx.data() + r * din;
            for (std::size_t i = 0; i < din; ++i)
                dxr[i] = inv * (g[i] * dh[i] - mean_t - xh[i] * mean_tx);
        }
        // dx is the gradient at this layer's input, which is the previous
        // layer's activation output; the da_row line above applies that
        // layer's GELU factor.
        dout = std::move(dx);
    }
    (void)input;
}

// Forward-mode pass carrying (value, tangent) pairs. Mirrors forward_rows.
void jvp_rows(const ToyModel& m, Params p, Params d, const double* input, std::size_t B,
              double* dlogits_out) {
    const NetConfig& cfg = m.config();
    const std::size_t L = m.num_layers();
    std::vector<double> v(input, input + B * cfg.in_dim);
    std::vector<double> t(B * cfg.in_dim, 0.0);  // inputs carry no tangent

    std::vector<double> av, at;
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t din = m.layer_in_dim(l);
        const std::size_t dn = m.layer_out_dim(l);
        av.assign(B * dn, 0.0);
        at.assign(B * dn, 0.0);
        std::vector<double> xh(din), xht(din), hv(din), ht(din);
        for (std::size_t r = 0; r < B; ++r) {
            const double* x = v.data() + r * din;
            const double* xt = t.data() + r * din;
            double mu = 0.0, mut = 0.0;
            for (std::size_t i = 0; i < din; ++i) {
                mu += x[i];
                mut += xt[i];
            }
            mu /= static_cast<double>(din);
            mut /= static_cast<double>(din);
            double var = 0.0, vart = 0.0;
            for (std::size_t i = 0; i < din; ++i) {
                const double c = x[i] - mu;
                var += c * c;
                vart += 2.0 * c * (xt[i] - mut);
            }
            var /= static_cast<double>(din);
            vart /= static_cast<double>(din);
            const double inv = 1.0 / std::sqrt(var + kLnEps);
            const double invt = -0.5 * inv * inv * inv * vart;
            const double* g = p.g(l);
            const double* gt = d.g(l);
            const double* be = p.beta(l);
            const double* bet = d.beta(l);
            for (std::size_t i = 0; i < din; ++i) {
                const double c = x[i] - mu;
                xh[i] = c * inv;
                xht[i] = (xt[i] - mut) * inv + c * invt;
                hv[i] = g[i] * xh[i] + be[i];
                ht[i] = gt[i] * xh[i] + g[i] * xht[i] + bet[i];
            }
            const double* W = p.W(l);
            const double* Wt = d.W(l);
            const double* b = p.b(l);
            const double* bt = d.b(l);
            double* avr = av.data() + r * dn;
            double* atr = at.data() + r * dn;
            for (std::size_t o = 0; o < dn; ++o) {
                double sv = b[o], st = bt[o];
                const double* wrow = W + o * din;
                const double* wtrow = Wt + o * din;
                for (std::size_t i = 0; i < din; ++i) {
                    sv += wrow[i] * hv[i];
                    st += wtrow[i] * hv[i] + wrow[i] * ht[i];
                }
                avr[o] = sv;
                atr[o] = st;
            }
        }
        require_finite(av, "layer " + std::to_string(l));
        if (l + 1 < L) {
            v.resize(B * dn);
            t.resize(B * dn);
            for (std::size_t e = 0; e < av.size(); ++e) {
                v[e] = gelu(av[e]);
                t[e] = gelu_dx(av[e]) * at[e];
            }
        } else {
            v = std::move(av);
            t = std::move(at);
        }
    }

    const std::size_t emb = cfg.emb_dim;
    const std::size_t C = cfg.num_classes;
    const std::vector<double>& E = m.class_embeddings();
    for (std::size_t r = 0; r < B; ++r) {
        const double* z = v.data() + r * emb;
        const double* zt = t.data() + r * emb;
        double n2 = 0.0, ndot = 0.0;
        for (std::size_t e = 0; e < emb; ++e) {
            n2 += z[e] * z[e];
            ndot += z[e] * zt[e];
        }
        const double n = std::sqrt(n2);
        if (!(n > 0.0) || !std::isfinite(n))
            throw NumericError("head latent has zero or non-finite norm");
        // zhat_t = (zt - zhat (zhat . zt)) / n, with zhat . zt = ndot / n
        for (std::size_t c = 0; c < C; ++c) {
            const double* erow = E.data() + c * emb;
            double s = 0.0;
            for (std::size_t e = 0; e < emb; ++e) {
                const double zh = z[e] / n;
                const double zht = zt[e] / n - zh * (ndot / n2);
                s += erow[e] * zht;
            }
            dlogits_out[r * C + c] = cfg.logit_scale * s;
        }
    }
}

void per_example_dlogits(LossKind kind, const double* logits, const int* labels, std::size_t C,
                         double* dl, double* loss_out) {
    double mx = logits[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(logits[c] - mx);
    const double lse = mx + std::log(sum);
    switch (kind) {
        case LossKind::CrossEntropy:
        case LossKind::NegatedCrossEntropy: {
            const int y = *labels;
            const double sign = kind == LossKind::CrossEntropy ? 1.0 : -1.0;
            *loss_out = sign * (lse - logits[y]);
            for (std::size_t c = 0; c < C; ++c) {
                const double pc = std::exp(logits[c] - lse);
                dl[c] = sign * (pc - (static_cast<int>(c) == y ? 1.0 : 0.0));
            }
            break;
        }
        case LossKind::Entropy: {
            double H = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double logp = logits[c] - lse;
                H -= std::exp(logp) * logp;
            }
            *loss_out = H;
            for (std::size_t c = 0; c < C; ++c) {
                const double logp = logits[c] - lse;
                dl[c] = -std::exp(logp) * (logp + H);
            }
            break;
        }
    }
}

void validate_batch(const ToyModel& m, const Batch& batch, bool needs_labels) {
    if (batch.in_dim != m.config().in_dim)
        throw ConfigError("batch feature width " + std::to_string(batch.in_dim) +
                          " does not match model input " + std::to_string(m.config().in_dim));
    if (batch.size() == 0) throw ConfigError("empty batch");
    if (batch.inputs.size() != batch.size() * batch.in_dim)
        throw ConfigError("batch input size is not a whole number of rows");
    if (needs_labels) {
        if (batch.labels.size() != batch.size())
            throw ConfigError("batch labels missing or mis-sized");
        for (int y : batch.labels)
            if (y < 0 || static_cast<std::size_t>(y) >= m.config().num_classes)
                throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(m.config().num_classes) + ")");
    }
}

void require_theta(const ToyModel& m, std::span<const double> theta) {
    if (theta.size() != m.param_count())
        throw ShapeError("parameter vector has " + std::to_string(theta.size()) +
                         " elements, model expects " + std::to_string(m.param_count()));
}

}  // namespace

ToyModel::ToyModel(NetConfig cfg) : cfg_(cfg) {
    if (cfg_.depth < 1) throw ConfigError("depth must be >= 1");
    if (cfg_.width < 1 || cfg_.in_dim < 1 || cfg_.emb_dim < 1)
        throw ConfigError("model dimensions must be positive");
    if (cfg_.emb_dim > 512) throw ConfigError("emb_dim above 512 unsupported");
    if (cfg_.num_classes < 2) throw ConfigError("need at least two classes");
    if (!(cfg_.logit_scale > 0.0)) throw ConfigError("logit_scale must be positive");

    for (std::size_t l = 0; l <= cfg_.depth; ++l) {
        const std::string tag = "L" + std::to_string(l);
        const std::size_t din = layer_in_dim(l);
        const std::size_t dout = layer_out_dim(l);
        specs_.push_back({tag + ".W", {dout, din}, BlockKind::WeightMatrix});
        specs_.push_back({tag + ".b", {dout}, BlockKind::Bias});
        specs_.push_back({tag + ".ln_g", {din}, BlockKind::LnGain});
        specs_.push_back({tag + ".ln_b", {din}, BlockKind::LnBias});
    }
    offsets_.resize(specs_.size());
    std::size_t off = 0;
    for (std::size_t j = 0; j < specs_.size(); ++j) {
        offsets_[j] = off;
        off += specs_[j].numel();
    }
    param_count_ = off;

    auto rng = make_rng(cfg_.head_seed, "head");
    std::normal_distribution<double> dist(0.0, 1.0);
    head_.resize(cfg_.num_classes * cfg_.emb_dim);
    for (std::size_t c = 0; c < cfg_.num_classes; ++c) {
        double n2 = 0.0;
        do {
            n2 = 0.0;
            for (std::size_t e = 0; e < cfg_.emb_dim; ++e) {
                head_[c * cfg_.emb_dim + e] = dist(rng);
                n2 += head_[c * cfg_.emb_dim + e] * head_[c * cfg_.emb_dim + e];
            }
        } while (n2 < 1e-12);
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t e = 0; e < cfg_.emb_dim; ++e) head_[c * cfg_.emb_dim + e] *= inv;
    }
}

BlockedTensor ToyModel::init_params(std::uint64_t seed) const {
    auto rng = make_rng(seed, "init");
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<std::vector<float>> data;
    for (const BlockSpec& s : specs_) {
        std::vector<float> blk(s.numel());
        switch (s.kind) {
            case BlockKind::WeightMatrix: {
                const double scale = 1.0 / std::sqrt(static_cast<double>(s.shape[1]));
                for (float& v : blk) v = static_cast<float>(dist(rng) * scale);
                break;
            }
            case BlockKind::Bias:
            case BlockKind::LnBias:
                std::fill(blk.begin(), blk.end(), 0.0f);
                break;
            case BlockKind::LnGain:
                std::fill(blk.begin(), blk.end(), 1.0f);
                break;
        }
        data.push_back(std::move(blk));
    }
    return BlockedTensor(specs_, std::move(data));
}

void ToyModel::require_matching(const BlockedTensor& theta) const {
    if (theta.specs() == specs_) return;
    for (std::size_t j = 0; j < std::min(theta.specs().size(), specs_.size()); ++j)
        if (!(theta.specs()[j] == specs_[j]))
            throw ShapeError("block '" + specs_[j].name + "' does not match the model inventory");
    throw ShapeError("parameter tensor has " + std::to_string(theta.specs().size()) +
                     " blocks, model has " + std::to_string(specs_.size()));
}

nlohmann::json ToyModel::meta() const {
    return {{"depth", cfg_.depth},         {"width", cfg_.width},
            {"in_dim", cfg_.in_dim},       {"emb_dim", cfg_.emb_dim},
            {"num_classes", cfg_.num_classes}, {"logit_scale", cfg_.logit_scale},
            {"head_seed", cfg_.head_seed}};
}

ToyModel ToyModel::from_meta(const nlohmann::json& meta) {
    NetConfig cfg;
    try {
        cfg.depth = meta.at("depth").get<std::size_t>();
        cfg.width = meta.at("width").get<std::size_t>();
        cfg.in_dim = meta.at("in_dim").get<std::size_t>();
        cfg.emb_dim = meta.at("emb_dim").get<std::size_t>();
        cfg.num_classes = meta.at("num_classes").get<std::size_t>();
        cfg.logit_scale = meta.at("logit_scale").get<double>();
        cfg.head_seed = meta.at("head_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model description incomplete: ") + e.what());
    }
    return ToyModel(cfg);
}

std::vector<double> forward_f64(const ToyModel& model, std::span<const double> theta,
                                const Batch& batch, int threads) {
    require_theta(model, theta);
    validate_batch(model, batch, false);
    const std::size_t B = batch.size();
    const std::size_t C = model.config().num_classes;
    std::vector<double> logits(B * C);
    Params p{theta.data(), &model.block_offsets()};
    run_shards(B, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
        if (lo == hi) return;
        forward_rows(model, p, batch.inputs.data() + lo * batch.in_dim, hi - lo, nullptr,
                     logits.data() + lo * C, nullptr);
    });
    return logits;
}

std::vector<double> embed_f64(const ToyModel& model, std::span<const double> theta,
                              const Batch& batch, int threads) {
    require_theta(model, theta);
    validate_batch(model, batch, false);
    const std::size_t B = batch.size();
    const std::size_t emb = model.config().emb_dim;
    std::vector<double> zhat(B * emb);
    Params p{theta.data(), &model.block_offsets()};
    run_shards(B, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
        if (lo == hi) return;
        forward_rows(model, p, batch.inputs.data() + lo * batch.in_dim, hi - lo, nullptr,
                     nullptr, zhat.data() + lo * emb);
    });
    return zhat;
}

BackwardResult backward_f64(const ToyModel& model, std::span<const double> theta,
                            const Batch& batch, LossKind loss, int threads) {
    require_theta(model, theta);
    validate_batch(model, batch, loss != LossKind::Entropy);
    const std::size_t B = batch.size();
    const std::size_t C = model.config().num_classes;
    Params p{theta.data(), &model.block_offsets()};

    std::size_t T = threads < 1 ? 1 : static_cast<std::size_t>(threads);
    T = std::min(T, B);
    std::vector<std::vector<double>> grads(T, std::vector<double>(model.param_count(), 0.0));
    std::vector<double> losses(T, 0.0);
    run_shards(B, threads, [&](std::size_t s, std::size_t lo, std::size_t hi) {
        if (lo == hi) return;
        const std::size_t n = hi - lo;
        const double* in = batch.inputs.data() + lo * batch.in_dim;
        Cache cache;
        std::vector<double> logits(n * C);
        forward_rows(model, p, in, n, &cache, logits.data(), nullptr);
        std::vector<double> dl(n * C);
        double lsum = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            double le = 0.0;
            const int* y = batch.labels.empty() ? nullptr : &batch.labels[lo + r];
            per_example_dlogits(loss, logits.data() + r * C, y, C, dl.data() + r * C, &le);
            lsum += le;
        }
        losses[s] = lsum;
        backward_rows(model, p, in, n, cache, dl.data(), grads[s].data());
    });

    BackwardResult out;
    out.grad.assign(model.param_count(), 0.0);
    for (std::size_t s = 0; s < T; ++s) {
        out.loss += losses[s];
        for (std::size_t e = 0; e < out.grad.size(); ++e) out.grad[e] += grads[s][e];
    }
    out.loss /= static_cast<double>(B);
    for (double& g : out.grad) g /= static_cast<double>(B);
    return out;
}

BackwardResult backward_cotangent_f64(const ToyModel& model, std::span<const double> theta,
                                      const Batch& batch, std::span<const double> cotangent,
                                      int threads) {
    require_theta(model, theta);
    validate_batch(model, batch, false);
    const std::size_t B = batch.size();
    const std::size_t C = model.config().num_classes;
    if (cotangent.size() != B * C)
        throw ShapeError("cotangent must be batch x classes");
    Params p{theta.data(), &model.block_offsets()};

    std::size_t T = threads < 1 ? 1 : static_cast<std::size_t>(threads);
    T = std::min(T, B);
    std::vector<std::vector<double>> grads(T, std::vector<double>(model.param_count(), 0.0));
    std::vector<double> losses(T, 0.0);
    run_shards(B, threads, [&](std::size_t s, std::size_t lo, std::size_t hi) {
        if (lo == hi) return;
        const std::size_t n = hi - lo;
        const double* in = batch.inputs.data() + lo * batch.in_dim;
        Cache cache;
        std::vector<double> logits(n * C);
        forward_rows(model, p, in, n, &cache, logits.data(), nullptr);
        double lsum = 0.0;
        for (std::size_t e = 0; e < n * C; ++e) lsum += cotangent[lo * C + e] * logits[e];
        losses[s] = lsum;
        backward_rows(model, p, in, n, cache, cotangent.data() + lo * C, grads[s].data());
    });

    BackwardResult out;
    out.grad.assign(model.param_count(), 0.0);
    for (std::size_t s = 0; s < T; ++s) {
        out.loss += losses[s];
        for (std::size_t e = 0; e < out.grad.size(); ++e) out.grad[e] += grads[s][e];
    }
    return out;
}

std::vector<double> jvp_f64(const ToyModel& model, std::span<const double> theta,
                            std::span<const double> direction, const Batch& batch,
                            int threads) {
    require_theta(model, theta);
    require_theta(model, direction);
    validate_batch(model, batch, false);
    const std::size_t B = batch.size();
    const std::size_t C = model.config().num_classes;
    std::vector<double> dlogits(B * C);
    Params p{theta.data(), &model.block_offsets()};
    Params d{direction.data(), &model.block_offsets()};
    run_shards(B, threads, [&](std::size_t, std::size_t lo, std::size_t hi) {
        if (lo == hi) return;
        jvp_rows(model, p, d, batch.inputs.data() + lo * batch.in_dim, hi - lo,
                 dlogits.data() + lo * C);
    });
    return dlogits;
}

std::vector<double> linearized_forward_f64(const ToyModel& model, const BlockedTensor& theta0,
                                           const CoefficientSet& coeffs,
                                           std::span<const TaskVector> tvs, const Batch& batch,
                                           int threads) {
    model.require_matching(theta0);
    const std::vector<double> base = theta0.to_f64();
    const std::vector<double> delta = compose_delta_f64(theta0, coeffs, tvs);
    std::vector<double> logits = forward_f64(model, base, batch, threads);
    const std::vector<double> tangent = jvp_f64(model, base, delta, batch, threads);
    for (std::size_t e = 0; e < logits.size(); ++e) logits[e] += tangent[e];
    return logits;
}

std::vector<double> forward(const ToyModel& model, const BlockedTensor& theta,
                            const Batch& batch, int threads) {
    model.require_matching(theta);
    return forward_f64(model, theta.to_f64(), batch, threads);
}

BackwardResult backward(const ToyModel& model, const BlockedTensor& theta, const Batch& batch,
                        LossKind loss, int threads) {
    model.require_matching(theta);
    return backward_f64(model, theta.to_f64(), batch, loss, threads);
}

std::vector<double> jvp(const ToyModel& model, const BlockedTensor& theta,
                        const BlockedTensor& direction, const Batch& batch, int threads) {
    model.require_matching(theta);
    model.require_matching(direction);
    return jvp_f64(model, theta.to_f64(), direction.to_f64(), batch, threads);
}

double loss_value(LossKind loss, std::span<const double> logits, const Batch& batch,
                  std::size_t num_classes) {
    const std::size_t B = batch.size();
    if (logits.size() != B * num_classes) throw ShapeError("logits shape mismatch");
    double sum = 0.0;
    std::vector<double> dl(num_classes);
    for (std::size_t r = 0; r < B; ++r) {
        double le = 0.0;
        const int* y = batch.labels.empty() ? nullptr : &batch.labels[r];
        if (loss != LossKind::Entropy && y == nullptr)
            throw ConfigError("labelled loss on unlabeled batch");
        per_example_dlogits(loss, logits.data() + r * num_classes, y, num_classes, dl.data(),
                            &le);
        sum += le;
    }
    return sum / static_cast<double>(B);
}

std::pair<double, std::vector<double>> loss_with_dlogits(LossKind loss,
                                                         std::span<const double> logits,
                                                         const Batch& batch,
                                                         std::size_t num_classes) {
    const std::size_t B = batch.size();
    if (logits.size() != B * num_classes) throw ShapeError("logits shape mismatch");
    std::vector<double> dl(logits.size());
    double sum = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        double le = 0.0;
        const int* y = batch.labels.empty() ? nullptr : &batch.labels[r];
        if (loss != LossKind::Entropy && y == nullptr)
            throw ConfigError("labelled loss on unlabeled batch");
        per_example_dlogits(loss, logits.data() + r * num_classes, y, num_classes,
                            dl.data() + r * num_classes, &le);
        sum += le;
    }
    const double inv = 1.0 / static_cast<double>(B);
    for (double& d : dl) d *= inv;
    // Same division as loss_value so the two agree bitwise.
    return {sum / static_cast<double>(B), std::move(dl)};
}

std::vector<double> softmax_rows(std::span<const double> logits, std::size_t rows,
                                 std::size_t cols) {
    if (logits.size() != rows * cols) throw ShapeError("logits shape mismatch");
    std::vector<double> out(logits.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* l = logits.data() + r * cols;
        double mx = l[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, l[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(l[c] - mx);
            sum += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= sum;
    }
    return out;
}

std::vector<double> finite_difference_grad(const ToyModel& model, std::span<const double> theta,
                                           const Batch& batch, LossKind loss,
                                           std::span<const std::size_t> coords, double h) {
    std::vector<double> work(theta.begin(), theta.end());
    std::vector<double> out;
    out.reserve(coords.size());
    for (std::size_t c : coords) {
        if (c >= work.size()) throw ConfigError("finite-difference coordinate out of range");
        const double keep = work[c];
        work[c] = keep + h;
        const double up =
            loss_value(loss, forward_f64(model, work, batch), batch, model.config().num_classes);
        work[c] = keep - h;
        const double dn =
            loss_value(loss, forward_f64(model, work, batch), batch, model.config().num_classes);
        work[c] = keep;
        out.push_back((up - dn) / (2.0 * h));
    }
    return out;
}

}  // namespace tvkit
