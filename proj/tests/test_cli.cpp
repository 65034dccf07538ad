#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvkit/data.hpp"
#include "tvkit/learn.hpp"
#include "tvkit/net.hpp"
#include "tvkit/tvck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tvkit;

namespace {

const fs::path& work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "tvkit-cli-tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string at(const std::string& name) { return (work_dir() / name).string(); }

int run(const std::string& args) {
    std::string cmd = std::string(TVKIT_BIN) + " " + args + " >" + at("stdout.log") + " 2>" +
                      at("stderr.log");
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void run_ok(const std::string& args) {
    INFO("command: ", args);
    REQUIRE(run(args) == 0);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

json read_json(const std::string& path) { return json::parse(read_file(path)); }

// CSV cell (row, col) with row 0 = header.
std::string csv_cell(const std::string& text, std::size_t row, std::size_t col) {
    std::istringstream lines(text);
    std::string line;
    for (std::size_t r = 0; r <= row; ++r) REQUIRE(!std::getline(lines, line).fail());
    std::istringstream cells(line);
    std::string cell;
    for (std::size_t c = 0; c <= col; ++c) REQUIRE(!std::getline(cells, cell, ',').fail());
    return cell;
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

// Base weights, two related tasks, their fine-tuned models and task vectors.
// Built once; cases that mutate nothing share it.
struct Pipeline {
    std::string base = at("base.tvck");
    std::string data_a = at("a.tvck"), data_b = at("b.tvck");
    std::string ft_a = at("ft_a.tvck"), ft_b = at("ft_b.tvck");
    std::string tv_a = at("tv_a.tvck"), tv_b = at("tv_b.tvck");

    Pipeline() {
        run_ok("init-base --depth 2 --width 32 --seed 7 --out " + base);
        run_ok("gen-data --id taska --seed 11 --rot 0.4 --out " + data_a);
        run_ok("gen-data --id taskb --seed 12 --rot 0.9 --out " + data_b);
        run_ok("finetune --base " + base + " --data " + data_a +
               " --epochs 12 --lr 5e-3 --seed 1 --out " + ft_a);
        run_ok("finetune --base " + base + " --data " + data_b +
               " --epochs 12 --lr 5e-3 --seed 1 --out " + ft_b);
        run_ok("diff --base " + base + " --finetuned " + ft_a + " --id taska --out " + tv_a);
        run_ok("diff --base " + base + " --finetuned " + ft_b + " --id taskb --out " + tv_b);
    }
};

const Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

}  // namespace

TEST_CASE("bad invocations exit with the documented codes") {
    const Pipeline& p = pipeline();

    CHECK(run("") == 2);
    CHECK(run("learn add --base " + p.base + " --out " + at("x.json")) == 2);
    CHECK(run("eval relacc --weights " + p.base + " --data " + p.data_a + " --data " +
              p.data_b + " --ref 100 --out " + at("x.csv")) == 2);

    // tv cut from this base, offered back for its own task
    CHECK(run("learn fewshot --base " + p.base + " --tv " + p.tv_a + " --data " + p.data_a +
              " --target-id taska --out " + at("x.json")) == 4);

    // tv against a different base
    run_ok("init-base --depth 2 --width 32 --seed 99 --out " + at("other.tvck"));
    CHECK(run("learn add --base " + at("other.tvck") + " --tv " + p.tv_a + " --data " +
              p.data_a + " --out " + at("x.json")) == 4);

    std::ofstream(at("garbage.tvck"), std::ios::binary) << "not a container";
    CHECK(run("eval acc --weights " + at("garbage.tvck") + " --data " + p.data_a + " --out " +
              at("x.csv")) == 2);

    // weights overflow to inf under an absurd step size
    CHECK(run("finetune --base " + p.base + " --data " + p.data_a +
              " --epochs 2 --lr 1e300 --out " + at("x.tvck")) == 3);

    std::ofstream(at("nested.manifest.json"))
        << json{{"argv", {"rerun", at("nested.manifest.json")}}}.dump();
    CHECK(run("rerun " + at("nested.manifest.json")) == 2);

    // --out whose weights twin would clobber an input
    CHECK(run("learn add --base " + p.base + " --tv " + p.tv_a + " --data " + p.data_a +
              " --epochs 1 --out " + at("a.json")) == 2);

    CHECK(run("--help") == 0);
}

TEST_CASE("fine-tuning for zero epochs copies the base weights bitwise") {
    const Pipeline& p = pipeline();
    run_ok("finetune --base " + p.base + " --data " + p.data_a + " --epochs 0 --out " +
           at("copy.tvck"));
    CHECK(read_file(at("copy.tvck")) == read_file(p.base));
}

TEST_CASE("repeated runs with one seed are byte-identical") {
    const Pipeline& p = pipeline();
    const std::string learn = "learn add --base " + p.base + " --tv " + p.tv_a + " --tv " +
                              p.tv_b + " --data " + p.data_a + " --data " + p.data_b +
                              " --epochs 4 --seed 3 --out ";
    run_ok(learn + at("rep1.json"));
    run_ok(learn + at("rep2.json"));
    CHECK(read_file(at("rep1.json")) == read_file(at("rep2.json")));
    CHECK(read_file(at("rep1.tvck")) == read_file(at("rep2.tvck")));
}

TEST_CASE("a manifest replays its command byte for byte") {
    const Pipeline& p = pipeline();
    run_ok("learn add --base " + p.base + " --tv " + p.tv_a + " --data " + p.data_a +
           " --epochs 4 --seed 5 --out " + at("replay.json"));
    const std::string before_report = read_file(at("replay.json"));
    const std::string before_weights = read_file(at("replay.tvck"));

    json manifest = read_json(at("replay.json.manifest.json"));
    CHECK(manifest.at("command") == "learn add");
    CHECK(manifest.at("seed") == 5);
    CHECK(manifest.at("outputs").size() == 2);
    CHECK(manifest.at("hashes").size() == 2);

    run_ok("rerun " + at("replay.json.manifest.json"));
    CHECK(read_file(at("replay.json")) == before_report);
    CHECK(read_file(at("replay.tvck")) == before_weights);
}

TEST_CASE("fine-tuning a low-noise task with defaults clears 95 percent") {
    const Pipeline& p = pipeline();
    run_ok("gen-data --id lownoise --seed 31 --noise 0.1 --rot 0.6 --out " + at("low.tvck"));
    run_ok("finetune --base " + p.base + " --data " + at("low.tvck") + " --seed 1 --out " +
           at("ft_low.tvck"));
    run_ok("eval acc --weights " + at("ft_low.tvck") + " --data " + at("low.tvck") +
           " --out " + at("low.csv"));
    CHECK(std::stod(csv_cell(read_file(at("low.csv")), 1, 1)) >= 95.0);
}

TEST_CASE("learned per-block coefficients agree with the grid alpha") {
    run_ok("gen-data --id gridtask --seed 33 --rot 0.8 --noise 1.0 --out " + at("gridtask.tvck"));
    const Pipeline& p = pipeline();
    run_ok("finetune --base " + p.base + " --data " + at("gridtask.tvck") + " --lr 1e-3 --out " +
           at("ft_grid.tvck"));
    run_ok("diff --base " + p.base + " --finetuned " + at("ft_grid.tvck") +
           " --id gridtask --out " + at("tv_grid.tvck"));
    run_ok("learn add --base " + p.base + " --tv " + at("tv_grid.tvck") + " --data " +
           at("gridtask.tvck") + " --wd 0.15 --seed 3 --out " + at("grid.json"));

    json report = read_json(at("grid.json"));
    const std::vector<double> coeffs = report.at("coeffs").get<std::vector<double>>();
    const double mean =
        std::accumulate(coeffs.begin(), coeffs.end(), 0.0) / static_cast<double>(coeffs.size());

    json meta;
    auto theta0 = load_weights(pipeline().base, &meta);
    auto model = ToyModel::from_meta(meta);
    std::vector<TaskVector> tvs{load_taskvector(at("tv_grid.tvck"))};
    auto data = load_dataset(at("gridtask.tvck"));
    auto [alpha, acc] = isotropic_grid(model, theta0, tvs, data.train);
    CHECK(std::abs(mean - alpha) <= 0.05);
}

TEST_CASE("negation forgets the target while the control survives") {
    run_ok("init-base --depth 2 --width 32 --in-dim 8 --seed 7 --out " + at("nbase.tvck"));
    run_ok("gen-data --id control --in-dim 8 --noise 0.4 --train-per-class 128 --seed 51"
           " --anchor-seed 5 --out " + at("nctl.tvck"));
    run_ok("gen-data --id target --in-dim 8 --noise 0.4 --train-per-class 128 --seed 52"
           " --anchor-seed 6 --out " + at("ntgt.tvck"));
    // pre-training covers both abilities; the edit must remove only one
    run_ok("finetune --base " + at("nbase.tvck") + " --data " + at("nctl.tvck") + " --data " +
           at("ntgt.tvck") + " --epochs 30 --lr 2e-3 --seed 1 --out " + at("npre.tvck"));
    run_ok("finetune --base " + at("npre.tvck") + " --data " + at("ntgt.tvck") +
           " --epochs 20 --lr 2e-3 --seed 2 --out " + at("nft.tvck"));
    run_ok("diff --base " + at("npre.tvck") + " --finetuned " + at("nft.tvck") +
           " --id target --out " + at("ntv.tvck"));
    run_ok("learn negate --base " + at("npre.tvck") + " --tv " + at("ntv.tvck") + " --data " +
           at("ntgt.tvck") + " --control " + at("nctl.tvck") +
           " --lr 0.01 --wd 0.2 --epochs 10 --seed 3 --out " + at("neg.json"));
    run_ok("eval negation --base " + at("npre.tvck") + " --edited " + at("neg.tvck") +
           " --target " + at("ntgt.tvck") + " --control " + at("nctl.tvck") + " --out " +
           at("negrep.json"));

    json rep = read_json(at("negrep.json"));
    CHECK(rep.at("pass").get<bool>());
    CHECK(rep.at("retention").get<double>() >= 0.95);

    run_ok("eval acc --weights " + at("npre.tvck") + " --data " + at("ntgt.tvck") + " --out " +
           at("npre.csv"));
    const double before = std::stod(csv_cell(read_file(at("npre.csv")), 1, 1));
    CHECK(before - rep.at("target_accuracy").get<double>() >= 20.0);
}

TEST_CASE("partitioned runs keep the flat composite reproducible") {
    const Pipeline& p = pipeline();
    const std::string flat = "learn add --base " + p.base + " --tv " + p.tv_a + " --data " +
                             p.data_a + " --epochs 4 --seed 3 --K 1 --out ";
    run_ok(flat + at("k1a.json"));
    run_ok(flat + at("k1b.json"));
    CHECK(read_file(at("k1a.tvck")) == read_file(at("k1b.tvck")));

    run_ok("learn add --base " + p.base + " --tv " + p.tv_a + " --data " + p.data_a +
           " --epochs 4 --seed 3 --K 4 --out " + at("k4.json"));
    json rep = read_json(at("k4.json"));
    CHECK(rep.at("K") == 4);
    CHECK(rep.at("coeffs").size() == rep.at("tv_ids").size() * rep.at("block_names").size() * 4);
}

TEST_CASE("zero-dimensional subspace row reports zero-shot accuracy") {
    const Pipeline& p = pipeline();
    run_ok("eval acc --weights " + p.base + " --data " + p.data_a + " --out " + at("zs.csv"));
    const double zero_shot = std::stod(csv_cell(read_file(at("zs.csv")), 1, 1));

    run_ok("eval intrinsic --base " + p.base + " --data " + p.data_a +
           " --basis random --bases 0 --ref 80 --seed 5 --out " + at("d0.csv"));
    const std::string csv = read_file(at("d0.csv"));
    CHECK(csv_cell(csv, 0, 0) == "basis_kind");
    CHECK(csv_cell(csv, 1, 1) == "0");
    CHECK(std::stod(csv_cell(csv, 1, 3)) == doctest::Approx(zero_shot).epsilon(1e-12));
    CHECK(std::stod(csv_cell(csv, 1, 4)) ==
          doctest::Approx(100.0 * zero_shot / 80.0).epsilon(1e-12));
}

TEST_CASE("disentanglement csv carries one row per ordered pair") {
    const Pipeline& p = pipeline();
    run_ok("learn add --base " + p.base + " --tv " + p.tv_a + " --tv " + p.tv_b + " --data " +
           p.data_a + " --data " + p.data_b + " --epochs 4 --seed 3 --out " + at("pair.json"));
    run_ok("eval disentangle --base " + p.base + " --coeffs " + at("pair.json") + " --tv " +
           p.tv_a + " --tv " + p.tv_b + " --data " + p.data_a + " --data " + p.data_b +
           " --out " + at("pair.csv"));
    const std::string csv = read_file(at("pair.csv"));
    CHECK(line_count(csv) == 3);
    CHECK(csv_cell(csv, 0, 0) == "first");
    CHECK(csv_cell(csv, 1, 0) == "taska");
    CHECK(csv_cell(csv, 1, 1) == "taskb");
    CHECK(csv_cell(csv, 2, 0) == "taskb");
    CHECK(csv_cell(csv, 2, 1) == "taska");
}

TEST_CASE("relative accuracy column tracks the reference") {
    const Pipeline& p = pipeline();
    run_ok("eval relacc --weights " + p.ft_a + " --data " + p.data_a +
           " --ref 80 --out " + at("rel.csv"));
    const std::string csv = read_file(at("rel.csv"));
    const double abs = std::stod(csv_cell(csv, 1, 1));
    const double rel = std::stod(csv_cell(csv, 1, 2));
    CHECK(rel == doctest::Approx(100.0 * abs / 80.0).epsilon(1e-9));
}

TEST_CASE("thread count falls back to the environment") {
    const Pipeline& p = pipeline();
    run_ok("eval acc --weights " + p.ft_a + " --data " + p.data_a + " --threads 1 --out " +
           at("t1.csv"));
    setenv("TVKIT_THREADS", "2", 1);
    const int rc = run("eval acc --weights " + p.ft_a + " --data " + p.data_a + " --out " +
                       at("t2.csv"));
    unsetenv("TVKIT_THREADS");
    REQUIRE(rc == 0);
    CHECK(read_file(at("t1.csv")) == read_file(at("t2.csv")));
}
