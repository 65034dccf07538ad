#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <new>
#include <random>

#include "tvkit/blocks.hpp"
#include "tvkit/data.hpp"
#include "tvkit/errors.hpp"
#include "tvkit/lora.hpp"
#include "tvkit/net.hpp"
#include "tvkit/tvck.hpp"

using namespace tvkit;
namespace fs = std::filesystem;

// Allocation watch: counts heap blocks at least `threshold` bytes while armed.
// Composing factored vectors must never materialise a dense per-vector block,
// so the only large allocation on that path is the composite itself.
namespace {
std::atomic<bool> g_watch{false};
std::atomic<std::size_t> g_big_allocs{0};
std::atomic<std::size_t> g_threshold{static_cast<std::size_t>(-1)};

void note_alloc(std::size_t sz) {
    if (g_watch.load(std::memory_order_relaxed) &&
        sz >= g_threshold.load(std::memory_order_relaxed))
        g_big_allocs.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace

void* operator new(std::size_t sz) {
    note_alloc(sz);
    if (void* p = std::malloc(sz ? sz : 1)) return p;
    throw std::bad_alloc();
}
void* operator new[](std::size_t sz) {
    note_alloc(sz);
    if (void* p = std::malloc(sz ? sz : 1)) return p;
    throw std::bad_alloc();
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }

namespace {

NetConfig small_cfg() {
    NetConfig c;
    c.depth = 2;
    c.width = 24;
    c.in_dim = 8;
    c.emb_dim = 8;
    c.num_classes = 4;
    return c;
}

TaskSpec small_task(std::uint64_t seed, double rot) {
    TaskSpec t;
    t.id = "t" + std::to_string(seed);
    t.in_dim = 8;
    t.num_classes = 4;
    t.train_per_class = 16;
    t.val_per_class = 8;
    t.test_per_class = 8;
    t.rot_angle = rot;
    t.shift = 0.3;
    t.noise = 0.2;
    t.seed = seed;
    t.anchor_seed = 5;
    return t;
}

LoraFactor random_factor(std::size_t out, std::size_t in, std::size_t rank,
                         std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    LoraFactor f;
    f.name = "W";
    f.rank = rank;
    f.out_dim = out;
    f.in_dim = in;
    f.a.resize(rank * in);
    f.b.resize(out * rank);
    for (float& v : f.a) v = dist(rng);
    for (float& v : f.b) v = dist(rng);
    return f;
}

}  // namespace

TEST_CASE("densify of zero factors is exactly zero") {
    LoraFactor f = random_factor(4, 3, 2, 1);
    std::fill(f.a.begin(), f.a.end(), 0.0f);
    for (double v : densify(f)) CHECK(v == 0.0);

    LoraFactor g = random_factor(4, 3, 2, 2);
    std::fill(g.b.begin(), g.b.end(), 0.0f);
    for (double v : densify(g)) CHECK(v == 0.0);
}

TEST_CASE("rank-1 basis factors give a single unit entry") {
    LoraFactor f;
    f.name = "W";
    f.rank = 1;
    f.out_dim = 3;
    f.in_dim = 4;
    f.b = {1.0f, 0.0f, 0.0f};
    f.a = {1.0f, 0.0f, 0.0f, 0.0f};
    std::vector<double> d = densify(f);
    REQUIRE(d.size() == 12);
    CHECK(d[0] == 1.0);
    for (std::size_t e = 1; e < d.size(); ++e) CHECK(d[e] == 0.0);
}

TEST_CASE("densify matches a naive triple loop") {
    LoraFactor f = random_factor(4, 3, 2, 7);
    std::vector<double> got = densify(f);
    for (std::size_t o = 0; o < 4; ++o)
        for (std::size_t c = 0; c < 3; ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < 2; ++r)
                s += double(f.b[o * 2 + r]) * double(f.a[r * 3 + c]);
            CHECK(got[o * 3 + c] == s);
        }
}

TEST_CASE("malformed factors are rejected") {
    LoraFactor f = random_factor(4, 3, 2, 9);
    f.a.pop_back();
    CHECK_THROWS_AS(densify(f), ShapeError);

    LoraFactor g = random_factor(4, 3, 2, 9);
    g.rank = 0;
    CHECK_THROWS_AS(densify(g), ShapeError);
}

TEST_CASE("zero training epochs give an exactly zero delta") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(1);
    Dataset d = generate(small_task(1, 0.4));

    FinetuneConfig fc;
    fc.epochs = 0;
    TaskVector tv = finetune_lora(model, theta0, d.train, 4, fc);
    REQUIRE(tv.factors.size() == 3);  // one per weight-matrix block
    for (const LoraFactor& f : tv.factors) {
        for (float v : f.b) CHECK(v == 0.0f);
        for (double v : densify(f)) CHECK(v == 0.0);
    }

    CoefficientSet one = CoefficientSet::isotropic(1.0, {tv.id}, [&] {
        std::vector<std::string> names;
        for (const BlockSpec& s : model.specs()) names.push_back(s.name);
        return names;
    }());
    std::vector<TaskVector> tvs{tv};
    BlockedTensor out = apply_anisotropic(theta0, one, tvs);
    CHECK(out.fingerprint() == theta0.fingerprint());
}

TEST_CASE("unit-coefficient composite equals base plus densified deltas") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(2);
    Dataset d = generate(small_task(2, 0.5));

    FinetuneConfig fc;
    fc.epochs = 6;
    fc.batch_size = 16;
    TaskVector tv = finetune_lora(model, theta0, d.train, 2, fc);

    std::vector<std::string> names;
    for (const BlockSpec& s : model.specs()) names.push_back(s.name);
    CoefficientSet one = CoefficientSet::isotropic(1.0, {tv.id}, names);
    std::vector<TaskVector> tvs{tv};
    const std::vector<double> composite = compose_f64(theta0, one, tvs);

    std::vector<double> expected = theta0.to_f64();
    for (const LoraFactor& f : tv.factors) {
        const std::size_t j = theta0.block_index(f.name);
        const std::vector<double> delta = densify(f);
        double* dst = expected.data() + model.block_offsets()[j];
        for (std::size_t e = 0; e < delta.size(); ++e) dst[e] = delta[e] + dst[e];
    }
    REQUIRE(composite.size() == expected.size());
    for (std::size_t e = 0; e < expected.size(); ++e) CHECK(composite[e] == expected[e]);
}

TEST_CASE("low-rank fine-tuning reduces the training loss") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(3);
    Dataset d = generate(small_task(3, 0.5));

    const double before = loss_value(
        LossKind::CrossEntropy, forward_f64(model, theta0.to_f64(), d.train), d.train, 4);

    FinetuneConfig fc;
    fc.epochs = 30;
    fc.batch_size = 16;
    fc.learning_rate = 5e-3;
    TaskVector tv = finetune_lora(model, theta0, d.train, 4, fc);

    std::vector<std::string> names;
    for (const BlockSpec& s : model.specs()) names.push_back(s.name);
    CoefficientSet one = CoefficientSet::isotropic(1.0, {tv.id}, names);
    std::vector<TaskVector> tvs{tv};
    const double after = loss_value(
        LossKind::CrossEntropy, forward_f64(model, compose_f64(theta0, one, tvs), d.train),
        d.train, 4);
    CHECK(after < before);
}

TEST_CASE("factored set covers exactly the weight-matrix blocks") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(4);
    Dataset d = generate(small_task(4, 0.4));
    FinetuneConfig fc;
    fc.epochs = 1;
    fc.batch_size = 32;

    TaskVector tv = finetune_lora(model, theta0, d.train, 2, fc);
    std::vector<std::string> got;
    for (const LoraFactor& f : tv.factors) got.push_back(f.name);
    CHECK(got == std::vector<std::string>{"L0.W", "L1.W", "L2.W"});

    std::vector<std::string> only = {"L1.W"};
    TaskVector narrow = finetune_lora(model, theta0, d.train, 2, fc, &only);
    REQUIRE(narrow.factors.size() == 1);
    CHECK(narrow.factors[0].name == "L1.W");

    std::vector<std::string> bogus = {"L9.W"};
    CHECK_THROWS_AS(finetune_lora(model, theta0, d.train, 2, fc, &bogus), ConfigError);
    std::vector<std::string> not_w = {"L0.b"};
    CHECK_THROWS_AS(finetune_lora(model, theta0, d.train, 2, fc, &not_w), ConfigError);
}

TEST_CASE("invalid ranks are rejected") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(5);
    Dataset d = generate(small_task(5, 0.4));
    FinetuneConfig fc;
    fc.epochs = 1;
    CHECK_THROWS_AS(finetune_lora(model, theta0, d.train, 0, fc), ConfigError);
    CHECK_THROWS_AS(finetune_lora(model, theta0, d.train, 9, fc), ShapeError);  // emb_dim is 8
}

TEST_CASE("same seed reproduces the same factors") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(6);
    Dataset d = generate(small_task(6, 0.5));
    FinetuneConfig fc;
    fc.epochs = 4;
    fc.batch_size = 16;
    fc.seed = 9;
    TaskVector a = finetune_lora(model, theta0, d.train, 2, fc);
    TaskVector b = finetune_lora(model, theta0, d.train, 2, fc);
    CHECK(a.content_hash() == b.content_hash());
    fc.seed = 10;
    TaskVector c = finetune_lora(model, theta0, d.train, 2, fc);
    CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("factored composition allocates no per-vector dense buffers") {
    NetConfig cfg;
    cfg.depth = 2;
    cfg.width = 64;
    cfg.in_dim = 16;
    cfg.emb_dim = 16;
    cfg.num_classes = 4;
    ToyModel model(cfg);
    BlockedTensor theta0 = model.init_params(7);

    std::vector<TaskVector> tvs;
    for (std::uint64_t s = 0; s < 3; ++s) {
        TaskVector tv;
        tv.id = "f" + std::to_string(s);
        tv.base_fingerprint = theta0.fingerprint();
        for (const char* name : {"L0.W", "L1.W", "L2.W"}) {
            LoraFactor f = random_factor(model.specs()[theta0.block_index(name)].shape[0],
                                         model.specs()[theta0.block_index(name)].shape[1], 2,
                                         s * 10 + theta0.block_index(name));
            f.name = name;
            tv.factors.push_back(std::move(f));
        }
        tvs.push_back(std::move(tv));
    }
    std::vector<std::string> names;
    for (const BlockSpec& s : model.specs()) names.push_back(s.name);
    CoefficientSet coeffs = CoefficientSet::isotropic(0.4, {"f0", "f1", "f2"}, names);

    // any buffer the size of a dense weight block (64 x 64 floats) counts
    g_threshold.store(64 * 64 * sizeof(float));
    g_big_allocs.store(0);
    g_watch.store(true);
    std::vector<double> delta = compose_delta_f64(theta0, coeffs, tvs);
    g_watch.store(false);

    // exactly one large allocation: the composite delta itself
    CHECK(g_big_allocs.load() == 1);
    CHECK(delta.size() == model.param_count());

    // a densifying path would trip the watch once per factor
    g_big_allocs.store(0);
    g_watch.store(true);
    std::vector<double> dense = densify(tvs[0].factors[1]);  // 64 x 64
    g_watch.store(false);
    CHECK(g_big_allocs.load() == 1);
    CHECK(dense.size() == 64 * 64);
}

TEST_CASE("trained factored vectors survive the container round-trip") {
    ToyModel model(small_cfg());
    BlockedTensor theta0 = model.init_params(8);
    Dataset d = generate(small_task(7, 0.5));
    FinetuneConfig fc;
    fc.epochs = 3;
    fc.batch_size = 16;
    TaskVector tv = finetune_lora(model, theta0, d.train, 2, fc);
    tv.id = "lora-rt";

    auto dir = fs::temp_directory_path() / "tvkit_lora_tests";
    fs::create_directories(dir);
    const auto path = dir / "trained.tvck";
    save_taskvector(path, tv);
    TaskVector back = load_taskvector(path);
    CHECK(back.content_hash() == tv.content_hash());
    CHECK(back.factors.size() == tv.factors.size());
    fs::remove_all(dir);
}
