#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "tvkit/blocks.hpp"
#include "tvkit/errors.hpp"
#include "tvkit/net.hpp"
#include "tvkit/rng.hpp"

using namespace tvkit;

namespace {

NetConfig small_config() {
    NetConfig cfg;
    cfg.depth = 3;
    cfg.width = 16;
    cfg.in_dim = 8;
    cfg.emb_dim = 8;
    cfg.num_classes = 5;
    cfg.logit_scale = 10.0;
    cfg.head_seed = 99;
    return cfg;
}

Batch random_batch(const ToyModel& m, std::size_t B, std::uint64_t seed) {
    Batch b;
    b.in_dim = m.config().in_dim;
    auto rng = make_rng(seed, "batch");
    std::normal_distribution<double> dist(0.0, 1.0);
    b.inputs.resize(B * b.in_dim);
    for (double& v : b.inputs) v = dist(rng);
    std::uniform_int_distribution<int> lab(0, static_cast<int>(m.config().num_classes) - 1);
    b.labels.resize(B);
    for (int& y : b.labels) y = lab(rng);
    return b;
}

std::vector<double> random_direction(const ToyModel& m, std::uint64_t seed, double scale) {
    auto rng = make_rng(seed, "dir");
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> d(m.param_count());
    for (double& v : d) v = dist(rng);
    return d;
}

double max_abs(std::span<const double> v) {
    double mx = 0.0;
    for (double x : v) mx = std::max(mx, std::fabs(x));
    return mx;
}

}  // namespace

TEST_CASE("class embeddings are unit-norm and logits are scaled cosines") {
    ToyModel m(small_config());
    const auto& E = m.class_embeddings();
    const std::size_t emb = m.config().emb_dim;
    for (std::size_t c = 0; c < m.config().num_classes; ++c) {
        double n2 = 0.0;
        for (std::size_t e = 0; e < emb; ++e) n2 += E[c * emb + e] * E[c * emb + e];
        CHECK(std::fabs(n2 - 1.0) <= 1e-12);
    }

    auto theta = m.init_params(1).to_f64();
    Batch b = random_batch(m, 6, 2);
    auto logits = forward_f64(m, theta, b);
    auto zhat = embed_f64(m, theta, b);
    for (std::size_t r = 0; r < b.size(); ++r)
        for (std::size_t c = 0; c < m.config().num_classes; ++c) {
            double dot = 0.0;
            for (std::size_t e = 0; e < emb; ++e) dot += E[c * emb + e] * zhat[r * emb + e];
            CHECK(std::fabs(logits[r * m.config().num_classes + c] -
                            m.config().logit_scale * dot) <= 1e-9);
            // a latent exactly parallel to row c would score logit_scale
            CHECK(std::fabs(logits[r * m.config().num_classes + c]) <=
                  m.config().logit_scale + 1e-9);
        }
}

TEST_CASE("identical inputs produce identical logit rows") {
    ToyModel m(small_config());
    auto theta = m.init_params(3).to_f64();
    Batch b;
    b.in_dim = m.config().in_dim;
    auto rng = make_rng(4, "row");
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> row(b.in_dim);
    for (double& v : row) v = dist(rng);
    b.inputs.insert(b.inputs.end(), row.begin(), row.end());
    b.inputs.insert(b.inputs.end(), row.begin(), row.end());
    b.labels = {0, 0};
    auto logits = forward_f64(m, theta, b);
    const std::size_t C = m.config().num_classes;
    for (std::size_t c = 0; c < C; ++c) CHECK(logits[c] == logits[C + c]);
}

TEST_CASE("reverse-mode gradient matches central finite differences") {
    ToyModel m(small_config());
    auto theta = m.init_params(5).to_f64();
    Batch b = random_batch(m, 12, 6);
    auto rng = make_rng(7, "coords");
    std::uniform_int_distribution<std::size_t> pick(0, m.param_count() - 1);
    std::vector<std::size_t> coords(20);
    for (auto& c : coords) c = pick(rng);

    for (LossKind kind :
         {LossKind::CrossEntropy, LossKind::NegatedCrossEntropy, LossKind::Entropy}) {
        auto res = backward_f64(m, theta, b, kind);
        auto fd = finite_difference_grad(m, theta, b, kind, coords, 1e-3);
        std::vector<double> sel;
        for (std::size_t c : coords) sel.push_back(res.grad[c]);
        const double scale = std::max({max_abs(fd), max_abs(sel), 1e-12});
        for (std::size_t k = 0; k < coords.size(); ++k)
            CHECK(std::fabs(sel[k] - fd[k]) / scale <= 1e-4);
    }
}

TEST_CASE("batch duplicated twice gives the same mean gradient") {
    ToyModel m(small_config());
    auto theta = m.init_params(8).to_f64();
    Batch one = random_batch(m, 1, 9);
    Batch two;
    two.in_dim = one.in_dim;
    two.inputs = one.inputs;
    two.inputs.insert(two.inputs.end(), one.inputs.begin(), one.inputs.end());
    two.labels = {one.labels[0], one.labels[0]};
    auto g1 = backward_f64(m, theta, one, LossKind::CrossEntropy);
    auto g2 = backward_f64(m, theta, two, LossKind::CrossEntropy);
    CHECK(g1.loss == g2.loss);
    for (std::size_t e = 0; e < g1.grad.size(); ++e) CHECK(g1.grad[e] == g2.grad[e]);
}

TEST_CASE("entropy is flat at a confident prediction") {
    Batch b;
    b.in_dim = 1;
    b.inputs = {0.0};
    std::vector<double> logits = {20.0, 0.0, 0.0, 0.0};
    CHECK(loss_value(LossKind::Entropy, logits, b, 4) <= 1e-6);
    for (std::size_t c = 0; c < 4; ++c) {
        auto up = logits, dn = logits;
        up[c] += 1e-4;
        dn[c] -= 1e-4;
        const double fd = (loss_value(LossKind::Entropy, up, b, 4) -
                           loss_value(LossKind::Entropy, dn, b, 4)) /
                          2e-4;
        CHECK(std::fabs(fd) <= 1e-5);
    }
}

TEST_CASE("cross-entropy logit sensitivities cancel within each row") {
    Batch b;
    b.in_dim = 1;
    b.inputs = {0.0};
    b.labels = {2};
    std::vector<double> logits = {0.3, -1.2, 0.7, 2.0};
    double row_sum = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
        auto up = logits, dn = logits;
        up[c] += 1e-5;
        dn[c] -= 1e-5;
        row_sum += (loss_value(LossKind::CrossEntropy, up, b, 4) -
                    loss_value(LossKind::CrossEntropy, dn, b, 4)) /
                   2e-5;
    }
    CHECK(std::fabs(row_sum) <= 1e-8);
}

TEST_CASE("jvp of the zero direction is exactly zero") {
    ToyModel m(small_config());
    auto theta = m.init_params(10).to_f64();
    std::vector<double> zero(m.param_count(), 0.0);
    Batch b = random_batch(m, 4, 11);
    auto t = jvp_f64(m, theta, zero, b);
    for (double v : t) CHECK(v == 0.0);
}

TEST_CASE("jvp is linear in the direction") {
    ToyModel m(small_config());
    auto theta = m.init_params(12).to_f64();
    Batch b = random_batch(m, 5, 13);
    auto d1 = random_direction(m, 14, 0.1);
    auto d2 = random_direction(m, 15, 0.1);
    std::vector<double> mix(m.param_count());
    for (std::size_t e = 0; e < mix.size(); ++e) mix[e] = 2.0 * d1[e] - 0.5 * d2[e];
    auto t1 = jvp_f64(m, theta, d1, b);
    auto t2 = jvp_f64(m, theta, d2, b);
    auto tm = jvp_f64(m, theta, mix, b);
    const double scale = std::max(max_abs(tm), 1e-12);
    for (std::size_t e = 0; e < tm.size(); ++e)
        CHECK(std::fabs(tm[e] - (2.0 * t1[e] - 0.5 * t2[e])) / scale <= 1e-10);
}

TEST_CASE("jvp matches the central difference of the forward pass") {
    ToyModel m(small_config());
    auto theta = m.init_params(16).to_f64();
    Batch b = random_batch(m, 6, 17);
    auto dir = random_direction(m, 18, 1.0);
    auto t = jvp_f64(m, theta, dir, b);

    const double h = 1e-4;
    std::vector<double> up(theta), dn(theta);
    for (std::size_t e = 0; e < theta.size(); ++e) {
        up[e] = theta[e] + h * dir[e];
        dn[e] = theta[e] - h * dir[e];
    }
    auto lu = forward_f64(m, up, b);
    auto ld = forward_f64(m, dn, b);
    const double scale = std::max(max_abs(t), 1e-12);
    for (std::size_t e = 0; e < t.size(); ++e)
        CHECK(std::fabs(t[e] - (lu[e] - ld[e]) / (2.0 * h)) / scale <= 1e-4);
}

TEST_CASE("jvp and vjp are adjoint") {
    ToyModel m(small_config());
    auto theta = m.init_params(19).to_f64();
    Batch b = random_batch(m, 5, 20);
    auto dir = random_direction(m, 21, 0.5);
    auto rng = make_rng(22, "cot");
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> cot(b.size() * m.config().num_classes);
    for (double& v : cot) v = dist(rng);

    auto t = jvp_f64(m, theta, dir, b);
    double lhs = 0.0;
    for (std::size_t e = 0; e < t.size(); ++e) lhs += cot[e] * t[e];

    auto back = backward_cotangent_f64(m, theta, b, cot);
    double rhs = 0.0;
    for (std::size_t e = 0; e < dir.size(); ++e) rhs += back.grad[e] * dir[e];

    CHECK(std::fabs(lhs - rhs) / std::max({std::fabs(lhs), std::fabs(rhs), 1e-12}) <= 1e-6);
}

TEST_CASE("tangent logits at zero coefficients equal the base forward exactly") {
    ToyModel m(small_config());
    auto theta0 = m.init_params(23);
    auto rng_t = m.init_params(24);
    TaskVector tv = diff(rng_t, theta0, "t");
    CoefficientSet c = CoefficientSet::zeros({"t"}, [&] {
        std::vector<std::string> names;
        for (const auto& s : m.specs()) names.push_back(s.name);
        return names;
    }());
    Batch b = random_batch(m, 7, 25);
    auto lin = linearized_forward_f64(m, theta0, c, std::span<const TaskVector>(&tv, 1), b);
    auto fwd = forward_f64(m, theta0.to_f64(), b);
    for (std::size_t e = 0; e < lin.size(); ++e) CHECK(lin[e] == fwd[e]);
}

TEST_CASE("tangent logits are affine in each coefficient") {
    ToyModel m(small_config());
    auto theta0 = m.init_params(26);
    TaskVector tv = diff(m.init_params(27), theta0, "t");
    std::vector<std::string> names;
    for (const auto& s : m.specs()) names.push_back(s.name);
    Batch b = random_batch(m, 4, 28);

    auto eval = [&](double lam) {
        CoefficientSet c = CoefficientSet::zeros({"t"}, names);
        c.at(0, 2) = lam;  // scale one ln-gain block
        return linearized_forward_f64(m, theta0, c, std::span<const TaskVector>(&tv, 1), b);
    };
    auto l0 = eval(0.0), l1 = eval(0.4), l2 = eval(0.8);
    const double scale = std::max(max_abs(l2), 1.0);
    for (std::size_t e = 0; e < l0.size(); ++e)
        CHECK(std::fabs(l2[e] - 2.0 * l1[e] + l0[e]) / scale <= 1e-9);
}

TEST_CASE("tangent model matches the true forward to second order") {
    ToyModel m(small_config());
    auto theta0 = m.init_params(29);
    TaskVector tv = diff(m.init_params(30), theta0, "t");
    std::vector<std::string> names;
    for (const auto& s : m.specs()) names.push_back(s.name);
    Batch b = random_batch(m, 4, 31);

    auto gap = [&](double eps) {
        CoefficientSet c = CoefficientSet::isotropic(eps, {"t"}, names);
        auto lin = linearized_forward_f64(m, theta0, c, std::span<const TaskVector>(&tv, 1), b);
        auto base = theta0.to_f64();
        const auto delta = compose_delta_f64(theta0, c, std::span<const TaskVector>(&tv, 1));
        for (std::size_t e = 0; e < base.size(); ++e) base[e] += delta[e];
        auto true_logits = forward_f64(m, base, b);
        double mx = 0.0;
        for (std::size_t e = 0; e < lin.size(); ++e)
            mx = std::max(mx, std::fabs(lin[e] - true_logits[e]));
        return mx;
    };
    const double e1 = gap(0.05);
    const double e2 = gap(0.025);
    CHECK(e1 / e2 >= 2.5);  // quadratic shrink, allowing fp slack around 4x
    CHECK(e1 / e2 <= 6.0);
}

TEST_CASE("non-finite activations name the layer") {
    ToyModel m(small_config());
    auto theta = m.init_params(32).to_f64();
    theta[0] = std::numeric_limits<double>::infinity();  // L0.W first element
    Batch b = random_batch(m, 2, 33);
    try {
        forward_f64(m, theta, b);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    }
}

TEST_CASE("thread count does not change results beyond rounding") {
    NetConfig cfg = small_config();
    ToyModel m(cfg);
    auto theta = m.init_params(34).to_f64();
    Batch b = random_batch(m, 33, 35);

    auto f1 = forward_f64(m, theta, b, 1);
    auto f4 = forward_f64(m, theta, b, 4);
    for (std::size_t e = 0; e < f1.size(); ++e) CHECK(f1[e] == f4[e]);

    auto g1 = backward_f64(m, theta, b, LossKind::CrossEntropy, 1);
    auto g4 = backward_f64(m, theta, b, LossKind::CrossEntropy, 4);
    const double scale = std::max(max_abs(g1.grad), 1e-12);
    for (std::size_t e = 0; e < g1.grad.size(); ++e)
        CHECK(std::fabs(g1.grad[e] - g4.grad[e]) / scale <= 1e-5);
}

TEST_CASE("model description round-trips through its meta form") {
    ToyModel m(small_config());
    ToyModel back = ToyModel::from_meta(m.meta());
    CHECK(back.specs() == m.specs());
    CHECK(back.class_embeddings() == m.class_embeddings());
    CHECK(back.config().logit_scale == m.config().logit_scale);
}

TEST_CASE("parameter tensors must match the model inventory") {
    ToyModel m(small_config());
    BlockedTensor wrong({{"W", {2, 2}, BlockKind::WeightMatrix}});
    CHECK_THROWS_AS(forward(m, wrong, random_batch(m, 2, 36)), ShapeError);
    Batch bad = random_batch(m, 2, 37);
    bad.labels[0] = 99;
    CHECK_THROWS_AS(backward(m, m.init_params(38), bad, LossKind::CrossEntropy), ConfigError);
}
