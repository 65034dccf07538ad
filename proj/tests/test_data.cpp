#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

#include "tvkit/blocks.hpp"
#include "tvkit/data.hpp"
#include "tvkit/errors.hpp"
#include "tvkit/net.hpp"

using namespace tvkit;
namespace fs = std::filesystem;

namespace {

TaskSpec demo_spec() {
    TaskSpec s;
    s.id = "demo";
    s.in_dim = 8;
    s.num_classes = 4;
    s.train_per_class = 20;
    s.val_per_class = 5;
    s.test_per_class = 10;
    s.rot_angle = 0.3;
    s.shift = 0.5;
    s.noise = 0.25;
    s.seed = 42;
    s.anchor_seed = 7;
    return s;
}

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / "data_tests";
    fs::create_directories(dir);
    return dir / name;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return num / std::sqrt(na * nb);
}

std::vector<double> mean_latent(const ToyModel& m, const std::vector<double>& theta,
                                const Batch& b) {
    auto z = embed_f64(m, theta, b);
    const std::size_t emb = m.config().emb_dim;
    std::vector<double> mean(emb, 0.0);
    for (std::size_t r = 0; r < b.size(); ++r)
        for (std::size_t e = 0; e < emb; ++e) mean[e] += z[r * emb + e];
    for (double& v : mean) v /= static_cast<double>(b.size());
    return mean;
}

}  // namespace

TEST_CASE("generation is deterministic in the spec") {
    auto a = generate(demo_spec());
    auto b = generate(demo_spec());
    CHECK(a.train.inputs == b.train.inputs);
    CHECK(a.train.labels == b.train.labels);
    CHECK(a.val.inputs == b.val.inputs);
    CHECK(a.test.inputs == b.test.inputs);
}

TEST_CASE("vanishing noise collapses examples onto separable centers") {
    TaskSpec s = demo_spec();
    s.noise = 1e-12;
    auto data = generate(s);
    auto centers = class_centers(s);
    for (std::size_t r = 0; r < data.train.size(); ++r) {
        double best = 1e300;
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < s.num_classes; ++c) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < s.in_dim; ++i) {
                const double d =
                    data.train.inputs[r * s.in_dim + i] - centers[c * s.in_dim + i];
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                best_c = c;
            }
        }
        CHECK(static_cast<int>(best_c) == data.train.labels[r]);
        CHECK(best <= 1e-20);
    }
}

TEST_CASE("lightly rotated siblings stay closer than a heavily rotated task") {
    TaskSpec a = demo_spec();
    a.in_dim = 16;
    a.num_classes = 10;
    a.rot_angle = 0.2;
    a.shift = 0.0;
    TaskSpec b = a;
    b.seed = 1001;
    TaskSpec c = a;
    c.seed = 2002;
    c.rot_angle = 3.14159;

    NetConfig cfg;
    cfg.in_dim = 16;
    cfg.emb_dim = 16;
    cfg.num_classes = 10;
    ToyModel m(cfg);
    auto theta = m.init_params(5).to_f64();
    auto za = mean_latent(m, theta, generate(a).train);
    auto zb = mean_latent(m, theta, generate(b).train);
    auto zc = mean_latent(m, theta, generate(c).train);
    CHECK(cosine(za, zb) > cosine(za, zc));
}

TEST_CASE("splits never share an example") {
    auto data = generate(demo_spec());
    auto key = [&](const Batch& b, std::size_t r) {
        std::string k;
        k.resize(b.in_dim * sizeof(double));
        std::memcpy(k.data(), b.inputs.data() + r * b.in_dim, k.size());
        return k;
    };
    std::unordered_set<std::string> seen;
    for (const Batch* b : {&data.train, &data.val, &data.test})
        for (std::size_t r = 0; r < b->size(); ++r) CHECK(seen.insert(key(*b, r)).second);
}

TEST_CASE("k-shot sampling is exact per class") {
    auto data = generate(demo_spec());
    auto one = kshot(data, 1, 3);
    CHECK(one.indices.size() == data.num_classes);

    auto all = kshot(data, 20, 3);
    CHECK(all.indices.size() == data.train.size());
    std::set<std::size_t> uniq(all.indices.begin(), all.indices.end());
    CHECK(uniq.size() == data.train.size());

    auto sample = kshot(data, 4, 9);
    auto picked = gather(data.train, sample.indices);
    std::vector<int> per_class(data.num_classes, 0);
    for (int y : picked.labels) per_class[static_cast<std::size_t>(y)]++;
    for (int n : per_class) CHECK(n == 4);

    CHECK_THROWS_AS(kshot(data, 21, 3), ConfigError);
}

TEST_CASE("k-shot draws differ across seeds almost always") {
    auto data = generate(demo_spec());
    int distinct = 0;
    auto ref = kshot(data, 2, 0).indices;
    for (std::uint64_t s = 1; s <= 100; ++s)
        if (kshot(data, 2, s).indices != ref) distinct++;
    CHECK(distinct >= 99);
}

TEST_CASE("gather pulls the addressed rows") {
    auto data = generate(demo_spec());
    Batch g = gather(data.train, {0, 5, 7});
    CHECK(g.size() == 3);
    for (std::size_t i = 0; i < data.in_dim; ++i) {
        CHECK(g.inputs[i] == data.train.inputs[i]);
        CHECK(g.inputs[data.in_dim + i] == data.train.inputs[5 * data.in_dim + i]);
    }
    CHECK(g.labels[2] == data.train.labels[7]);
    CHECK_THROWS_AS(gather(data.train, {data.train.size()}), ConfigError);
}

TEST_CASE("hand-built idx pair round-trips") {
    auto img_path = temp_file("img.idx");
    auto lab_path = temp_file("lab.idx");
    const unsigned char img_bytes[] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                                       0, 255, 128, 64, 255, 0, 0, 0};
    const unsigned char lab_bytes[] = {0, 0, 8, 1, 0, 0, 0, 2, 1, 0};
    std::ofstream(img_path, std::ios::binary)
        .write(reinterpret_cast<const char*>(img_bytes), sizeof(img_bytes));
    std::ofstream(lab_path, std::ios::binary)
        .write(reinterpret_cast<const char*>(lab_bytes), sizeof(lab_bytes));

    auto data = load_idx(img_path, lab_path);
    CHECK(data.in_dim == 4);
    CHECK(data.train.size() == 2);
    CHECK(data.train.inputs[0] == 0.0);
    CHECK(data.train.inputs[1] == 1.0);
    CHECK(data.train.inputs[2] == doctest::Approx(128.0 / 255.0));
    CHECK(data.train.inputs[3] == doctest::Approx(64.0 / 255.0));
    CHECK(data.train.inputs[4] == 1.0);
    CHECK(data.train.labels == std::vector<int>{1, 0});
    CHECK(data.num_classes == 2);
}

TEST_CASE("idx loader rejects bad magics and count mismatches") {
    auto img_path = temp_file("bad_img.idx");
    auto lab_path = temp_file("bad_lab.idx");
    const unsigned char img_bytes[] = {0, 0, 9, 9, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7};
    const unsigned char lab_bytes[] = {0, 0, 8, 1, 0, 0, 0, 1, 1};
    std::ofstream(img_path, std::ios::binary)
        .write(reinterpret_cast<const char*>(img_bytes), sizeof(img_bytes));
    std::ofstream(lab_path, std::ios::binary)
        .write(reinterpret_cast<const char*>(lab_bytes), sizeof(lab_bytes));
    CHECK_THROWS_AS(load_idx(img_path, lab_path), FormatError);

    const unsigned char good_img[] = {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7};
    std::ofstream(img_path, std::ios::binary)
        .write(reinterpret_cast<const char*>(good_img), sizeof(good_img));
    const unsigned char two_labels[] = {0, 0, 8, 1, 0, 0, 0, 2, 1, 0};
    std::ofstream(lab_path, std::ios::binary)
        .write(reinterpret_cast<const char*>(two_labels), sizeof(two_labels));
    CHECK_THROWS_AS(load_idx(img_path, lab_path), FormatError);
}

TEST_CASE("dataset cache file round-trips") {
    auto data = generate(demo_spec());
    auto path = temp_file("demo.tvck");
    save_dataset(path, data);
    auto back = load_dataset(path);
    CHECK(back.id == data.id);
    CHECK(back.in_dim == data.in_dim);
    CHECK(back.num_classes == data.num_classes);
    CHECK(back.train.labels == data.train.labels);
    CHECK(back.test.labels == data.test.labels);
    REQUIRE(back.train.inputs.size() == data.train.inputs.size());
    for (std::size_t i = 0; i < back.train.inputs.size(); ++i)
        CHECK(back.train.inputs[i] ==
              static_cast<double>(static_cast<float>(data.train.inputs[i])));
}

TEST_CASE("task suites share anchors and differ otherwise") {
    auto suite = task_suite(11, 8);
    REQUIRE(suite.size() == 8);
    std::set<std::string> ids;
    std::set<std::uint64_t> seeds;
    for (const TaskSpec& s : suite) {
        ids.insert(s.id);
        seeds.insert(s.seed);
        CHECK(s.anchor_seed == suite[0].anchor_seed);
    }
    CHECK(ids.size() == 8);
    CHECK(seeds.size() == 8);
    CHECK(pretrain_spec(11).anchor_seed == suite[0].anchor_seed);

    TaskSpec bad = suite[0];
    bad.noise = 0.0;
    CHECK_THROWS_AS(generate(bad), ConfigError);
}

TEST_CASE("task spec round-trips through json") {
    TaskSpec s = demo_spec();
    TaskSpec back = TaskSpec::from_json(s.to_json());
    CHECK(back.id == s.id);
    CHECK(back.rot_angle == s.rot_angle);
    CHECK(back.seed == s.seed);
    CHECK(back.anchor_seed == s.anchor_seed);
}
