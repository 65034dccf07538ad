#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tvkit/blocks.hpp"
#include "tvkit/data.hpp"
#include "tvkit/errors.hpp"
#include "tvkit/evalx.hpp"
#include "tvkit/intrinsic.hpp"
#include "tvkit/learn.hpp"
#include "tvkit/lora.hpp"
#include "tvkit/net.hpp"
#include "tvkit/partition.hpp"
#include "tvkit/rng.hpp"
#include "tvkit/select.hpp"
#include "tvkit/tta.hpp"
#include "tvkit/tvck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tvkit;

namespace {

int dispatch(const std::vector<std::string>& args, int depth);

// Everything a run touches, recorded next to its first output so the command
// can be replayed byte for byte.
struct Manifest {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
};

std::uint64_t hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

void write_manifest(const Manifest& m, const std::vector<std::string>& argv, double wall_ms) {
    if (m.outputs.empty()) return;
    json hashes = json::object();
    for (const auto& out : m.outputs) hashes[out] = fingerprint_hex(hash_file(out));
    json j{{"command", m.command}, {"argv", argv},       {"config", m.config},
           {"seed", m.seed},       {"inputs", m.inputs}, {"outputs", m.outputs},
           {"hashes", hashes},     {"wall_clock_ms", wall_ms}};
    fs::path path = m.outputs.front() + ".manifest.json";
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    out << text;
}

void write_json_file(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path + " is not valid JSON: " + e.what());
    }
    return j;
}

struct LoadedModel {
    ToyModel model;
    BlockedTensor weights;
    json meta;
};

LoadedModel load_model(const std::string& path, Manifest& m) {
    m.inputs.push_back(path);
    json meta;
    auto weights = load_weights(path, &meta);
    return {ToyModel::from_meta(meta), std::move(weights), std::move(meta)};
}

Dataset load_data(const std::string& path, Manifest& m) {
    m.inputs.push_back(path);
    return load_dataset(path);
}

std::vector<TaskVector> load_tvs(const std::vector<std::string>& paths, Manifest& m) {
    std::vector<TaskVector> tvs;
    for (const auto& p : paths) {
        m.inputs.push_back(p);
        tvs.push_back(load_taskvector(p));
    }
    return tvs;
}

const Batch& split_of(const Dataset& data, const std::string& split) {
    if (split == "train") return data.train;
    if (split == "val") return data.val;
    if (split == "test") return data.test;
    throw ConfigError("unknown split " + split + " (train, val, test)");
}

// ------------------------------------------------------------------ init-base

struct InitOpts {
    std::size_t depth = 3, width = 64, in_dim = 16, emb_dim = 16, classes = 10;
    double logit_scale = 10.0;
    std::uint64_t head_seed = 0, seed = 0;
    std::string out;
};

void run_init_base(const InitOpts& o, Manifest& m) {
    NetConfig cfg;
    cfg.depth = o.depth;
    cfg.width = o.width;
    cfg.in_dim = o.in_dim;
    cfg.emb_dim = o.emb_dim;
    cfg.num_classes = o.classes;
    cfg.logit_scale = o.logit_scale;
    cfg.head_seed = o.head_seed;
    ToyModel model(cfg);
    auto theta0 = model.init_params(o.seed);

    m.command = "init-base";
    m.seed = o.seed;
    m.config = model.meta();
    m.outputs = {o.out};
    save_weights(o.out, theta0, model.meta());
    std::cout << "wrote base weights, " << model.param_count() << " parameters in "
              << model.num_blocks() << " blocks, fingerprint "
              << fingerprint_hex(theta0.fingerprint()) << "\n";
}

// ------------------------------------------------------------------- gen-data

struct GenOpts {
    std::string spec_path;
    TaskSpec spec;
    bool shifted = false;
    std::string out;
};

void run_gen_data(GenOpts& o, Manifest& m) {
    if (!o.spec_path.empty()) {
        m.inputs.push_back(o.spec_path);
        o.spec = TaskSpec::from_json(read_json_file(o.spec_path));
    }
    auto data = generate(o.spec, o.shifted);

    m.command = "gen-data";
    m.seed = o.spec.seed;
    m.config = o.spec.to_json();
    m.config["shifted"] = o.shifted;
    m.outputs = {o.out};
    save_dataset(o.out, data);
    std::cout << "wrote dataset " << data.id << ": " << data.train.size() << " train, "
              << data.val.size() << " val, " << data.test.size() << " test\n";
}

// ------------------------------------------------------------------- finetune

struct FinetuneOpts {
    std::string base, out, id = "lora";
    std::vector<std::string> data;
    std::size_t epochs = 20, batch = 32;
    double lr = 1e-3, wd = 0.0;
    std::uint64_t seed = 0;
    int threads = 1;
    std::size_t lora_rank = 0;
    std::vector<std::string> lora_blocks;
};

void run_finetune(const FinetuneOpts& o, Manifest& m) {
    auto lm = load_model(o.base, m);
    // Several --data flags concatenate train splits: multitask pre-training.
    auto data = load_data(o.data.front(), m);
    for (std::size_t i = 1; i < o.data.size(); ++i) {
        auto extra = load_data(o.data[i], m);
        if (extra.train.in_dim != data.train.in_dim)
            throw ShapeError("datasets disagree on input width");
        data.train.inputs.insert(data.train.inputs.end(), extra.train.inputs.begin(),
                                 extra.train.inputs.end());
        data.train.labels.insert(data.train.labels.end(), extra.train.labels.begin(),
                                 extra.train.labels.end());
        data.id += "+" + extra.id;
    }

    FinetuneConfig fc;
    fc.learning_rate = o.lr;
    fc.weight_decay = o.wd;
    fc.epochs = o.epochs;
    fc.batch_size = o.batch;
    fc.seed = o.seed;
    fc.threads = o.threads;

    m.command = "finetune";
    m.seed = o.seed;
    m.config = {{"epochs", o.epochs}, {"batch_size", o.batch},    {"learning_rate", o.lr},
                {"weight_decay", o.wd}, {"lora_rank", o.lora_rank}, {"task", data.id}};
    m.outputs = {o.out};

    if (o.lora_rank > 0) {
        const std::vector<std::string>* only =
            o.lora_blocks.empty() ? nullptr : &o.lora_blocks;
        auto tv = finetune_lora(lm.model, lm.weights, data.train, o.lora_rank, fc, only);
        tv.id = o.id;
        save_taskvector(o.out, tv);
        auto composed = apply_isotropic(lm.weights, 1.0, std::vector<TaskVector>{tv});
        std::cout << "wrote rank-" << o.lora_rank << " task vector " << tv.id
                  << ", test accuracy " << accuracy(lm.model, composed, data.test, o.threads)
                  << "\n";
        return;
    }

    BlockedTensor tuned =
        o.epochs == 0 ? lm.weights : finetune_weights(lm.model, lm.weights, data.train, fc);
    save_weights(o.out, tuned, lm.meta);
    std::cout << "wrote fine-tuned weights, test accuracy "
              << accuracy(lm.model, tuned, data.test, o.threads) << "\n";
}

// ----------------------------------------------------------------------- diff

struct DiffOpts {
    std::string base, finetuned, id = "tv", out;
};

void run_diff(const DiffOpts& o, Manifest& m) {
    auto lm = load_model(o.base, m);
    m.inputs.push_back(o.finetuned);
    auto tuned = load_weights(o.finetuned);
    auto tv = diff(tuned, lm.weights, o.id);

    m.command = "diff";
    m.config = {{"id", o.id}};
    m.outputs = {o.out};
    save_taskvector(o.out, tv);
    std::cout << "wrote task vector " << tv.id << " against base "
              << fingerprint_hex(tv.base_fingerprint) << "\n";
}

// ---------------------------------------------------------------------- learn

struct LearnOpts {
    std::string base, out, control_path, target_id;
    std::vector<std::string> tv_paths, data_paths;
    double lr = 0.1, wd = 0.1, l1 = 0.0, init = 0.0;
    std::size_t epochs = 10, batch = 128, K = 1, k = 16;
    std::uint64_t seed = 0;
    bool interleave = false, linearized = false;
    int threads = 1;
    std::string strategy;
    std::size_t budget = 0, group = 0;
    std::size_t trusted_cap = 100;
    double omega_start = 0.9, omega_end = 1.0, trusted_fraction = 0.25;
    double sharpen_exp = 0.5, weak_noise = 0.01, strong_noise = 0.1, dropout = 0.1;
};

TrainConfig train_config(const LearnOpts& o) {
    TrainConfig tc;
    tc.learning_rate = o.lr;
    tc.weight_decay = o.wd;
    tc.l1_penalty = o.l1;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.seed = o.seed;
    tc.init_coefficient = o.init;
    tc.interleave_tasks = o.interleave;
    tc.threads = o.threads;
    return tc;
}

// Budgeted candidate choice. Whole-vector strategies shrink the list;
// blockwise stitches one element per rank so each block trains only its own
// picks.
std::vector<TaskVector> apply_selection(const ToyModel& model, const BlockedTensor& theta0,
                                        std::vector<TaskVector> tvs, const Batch& target,
                                        const LearnOpts& o, json& config) {
    if (o.strategy.empty()) return tvs;
    if (o.budget < 1) throw ConfigError("selection needs --budget");
    SelectionPlan plan;
    if (o.strategy == "random") {
        plan = select_random(tvs, o.budget, o.seed);
    } else if (o.strategy == "grad-whole") {
        plan = select_by_gradient(model, theta0, tvs, target, o.budget, o.group,
                                  GradientMode::Whole, o.threads);
    } else if (o.strategy == "grad-blockwise") {
        plan = select_by_gradient(model, theta0, tvs, target, o.budget, o.group,
                                  GradientMode::Blockwise, o.threads);
    } else {
        throw ConfigError("unknown strategy " + o.strategy
                          + " (random, grad-whole, grad-blockwise)");
    }
    config["selection"] = plan.to_json();
    if (plan.strategy == SelectStrategy::GradientBlockwise)
        return std::move(make_tv_basis(tvs, o.budget, plan).elements);
    std::vector<TaskVector> kept;
    for (auto& tv : tvs)
        if (std::find(plan.whole.begin(), plan.whole.end(), tv.id) != plan.whole.end())
            kept.push_back(std::move(tv));
    return kept;
}

// Coefficients JSON beside a composed weights file; the weights name derives
// from the report path.
void write_learn_outputs(const std::string& out, const json& report,
                         const BlockedTensor& composite, const json& model_meta, Manifest& m) {
    fs::path weights = fs::path(out).replace_extension(".tvck");
    if (weights == fs::path(out)) weights = fs::path(out + "-weights.tvck");
    for (const auto& in : m.inputs)
        if (fs::path(in) == weights)
            throw ConfigError("composed weights path " + weights.string() +
                              " would overwrite an input; choose another --out");
    m.outputs = {out, weights.string()};
    write_json_file(out, report);
    save_weights(weights, composite, model_meta);
}

void run_learn(const std::string& mode, const LearnOpts& o, Manifest& m) {
    auto lm = load_model(o.base, m);
    auto tvs = load_tvs(o.tv_paths, m);
    auto tc = train_config(o);

    m.command = "learn " + mode;
    m.seed = o.seed;
    m.config = tc.to_json();
    m.config["mode"] = mode;

    if (mode == "add") {
        if (o.data_paths.empty()) throw ConfigError("add needs at least one --data");
        std::vector<Dataset> sets;
        for (const auto& p : o.data_paths) sets.push_back(load_data(p, m));
        std::vector<Batch> trains;
        for (const auto& d : sets) trains.push_back(d.train);

        auto chosen = apply_selection(lm.model, lm.weights, std::move(tvs), sets[0].train, o,
                                      m.config);
        std::optional<PartitionMasks> masks;
        if (o.K > 1) {
            masks = make_partitions(lm.model.specs(), o.K, stream_key(o.seed, "masks"));
            m.config["partitions"] = {{"K", o.K}, {"mask_seed", masks->seed}};
        }
        const PartitionMasks* mp = masks ? &*masks : nullptr;
        auto report = o.linearized
            ? learn_addition_linearized(lm.model, lm.weights, chosen, trains, tc, nullptr, mp)
            : learn_addition(lm.model, lm.weights, chosen, trains, tc, nullptr, mp);
        auto composite = masks ? apply_partitioned(lm.weights, report.coeffs, chosen, *masks)
                               : apply_anisotropic(lm.weights, report.coeffs, chosen);
        write_learn_outputs(o.out, learn_report_json(report, tc), composite, lm.meta, m);
        std::cout << "learned " << report.coeffs.values.size() << " coefficients, final loss "
                  << report.loss_trace.back() << "\n";
        return;
    }

    if (mode == "negate") {
        if (tvs.size() != 1) throw ConfigError("negate takes exactly one --tv");
        if (o.data_paths.size() != 1) throw ConfigError("negate takes exactly one --data");
        if (o.control_path.empty()) throw ConfigError("negate needs --control");
        auto target = load_data(o.data_paths[0], m);
        auto control = load_data(o.control_path, m);
        auto report = learn_negation(lm.model, lm.weights, tvs[0], target.train, control.train,
                                     tc);
        auto composite = apply_anisotropic(lm.weights, report.coeffs, tvs);
        write_learn_outputs(o.out, learn_report_json(report, tc), composite, lm.meta, m);
        double mean = 0.0;
        for (double v : report.coeffs.values) mean += v;
        mean /= static_cast<double>(report.coeffs.values.size());
        std::cout << "learned negation, mean coefficient " << mean << "\n";
        return;
    }

    if (mode == "fewshot") {
        if (o.data_paths.size() != 1) throw ConfigError("fewshot takes exactly one --data");
        auto target = load_data(o.data_paths[0], m);
        std::string target_id = o.target_id.empty() ? target.id : o.target_id;
        auto sample = kshot(target, o.k, o.seed);
        auto support = gather(target.train, sample.indices);
        m.config["k"] = o.k;
        m.config["target_id"] = target_id;

        auto chosen =
            apply_selection(lm.model, lm.weights, std::move(tvs), support, o, m.config);
        auto report = learn_fewshot(lm.model, lm.weights, chosen, target_id, support, tc);
        auto composite = apply_anisotropic(lm.weights, report.coeffs, chosen);
        write_learn_outputs(o.out, learn_report_json(report, tc), composite, lm.meta, m);
        std::cout << "learned from " << o.k << " shots per class, test accuracy "
                  << accuracy(lm.model, composite, target.test, o.threads) << "\n";
        return;
    }

    if (mode == "tta-ufm" || mode == "tta-entropy") {
        if (o.data_paths.size() != 1) throw ConfigError(mode + " takes exactly one --data");
        auto target = load_data(o.data_paths[0], m);
        Batch unlabeled = target.train;
        unlabeled.labels.clear();

        AdaptReport report;
        if (mode == "tta-ufm") {
            UfmConfig uc;
            uc.trusted_cap = o.trusted_cap;
            uc.omega_start = o.omega_start;
            uc.omega_end = o.omega_end;
            uc.trusted_fraction = o.trusted_fraction;
            uc.temperature_exponent = o.sharpen_exp;
            uc.weak_noise = o.weak_noise;
            uc.strong_noise = o.strong_noise;
            uc.strong_dropout = o.dropout;
            m.config["ufm"] = {{"trusted_cap", uc.trusted_cap},
                               {"omega_start", uc.omega_start},
                               {"omega_end", uc.omega_end},
                               {"trusted_fraction", uc.trusted_fraction}};
            report = adapt_ufm(lm.model, lm.weights, tvs, unlabeled, tc, uc);
        } else {
            report = adapt_entropy(lm.model, lm.weights, tvs, unlabeled, tc);
        }
        auto composite = apply_anisotropic(lm.weights, report.learn.coeffs, tvs);
        write_learn_outputs(o.out, adapt_report_json(report, tc), composite, lm.meta, m);
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
        std::cout << "adapted on " << unlabeled.size() << " unlabeled examples, test accuracy "
                  << accuracy(lm.model, composite, target.test, o.threads) << "\n";
        return;
    }

    throw ConfigError("unknown learn mode " + mode);
}

// ----------------------------------------------------------------------- eval

struct EvalOpts {
    std::string weights, base, edited, coeffs, target_path, control_path, out;
    std::vector<std::string> data_paths, tv_paths;
    std::vector<double> refs;
    std::string split = "test";
    std::string basis = "random";
    std::vector<std::size_t> bases;
    double ref = 0.0;
    std::string finetuned;
    double lr = 0.1, wd = 0.1;
    std::size_t epochs = 10, batch = 128;
    std::uint64_t seed = 0;
    int threads = 1;
};

void run_eval_acc(const EvalOpts& o, bool with_ref, Manifest& m) {
    auto lm = load_model(o.weights, m);
    if (with_ref && o.refs.size() != o.data_paths.size())
        throw ConfigError("one --ref per --data required");

    EvalReport report;
    for (std::size_t d = 0; d < o.data_paths.size(); ++d) {
        auto data = load_data(o.data_paths[d], m);
        double abs = accuracy(lm.model, lm.weights, split_of(data, o.split), o.threads);
        report.dataset_ids.push_back(data.id);
        report.absolute.push_back(abs);
        if (with_ref) report.relative.push_back(relative_accuracy(abs, o.refs[d]));
        std::cout << data.id << ": " << abs;
        if (with_ref) std::cout << " (" << report.relative.back() << " relative)";
        std::cout << "\n";
    }
    m.command = with_ref ? "eval relacc" : "eval acc";
    m.seed = 0;
    m.config = {{"split", o.split}};
    m.outputs = {o.out};
    write_text(o.out, accuracy_csv(report));
}

void run_eval_negation(const EvalOpts& o, Manifest& m) {
    auto lm = load_model(o.base, m);
    m.inputs.push_back(o.edited);
    auto edited = load_weights(o.edited);
    auto target = load_data(o.target_path, m);
    auto control = load_data(o.control_path, m);

    auto rep = negation_report(lm.model, lm.weights, edited, split_of(target, o.split),
                               split_of(control, o.split), o.threads);
    m.command = "eval negation";
    m.config = {{"split", o.split}};
    m.outputs = {o.out};
    write_json_file(o.out, json{{"target_accuracy", rep.target_accuracy},
                                {"control_accuracy", rep.control_accuracy},
                                {"control_reference", rep.control_reference},
                                {"retention", rep.retention},
                                {"pass", rep.pass}});
    std::cout << "target " << rep.target_accuracy << ", control " << rep.control_accuracy
              << " of " << rep.control_reference << " ("
              << (rep.pass ? "PASS" : "FAIL") << ")\n";
}

CoefficientSet coeffs_from_report(const json& j) {
    CoefficientSet c;
    try {
        c.tv_ids = j.at("tv_ids").get<std::vector<std::string>>();
        c.block_names = j.at("block_names").get<std::vector<std::string>>();
        c.K = j.at("K").get<std::size_t>();
        c.values = j.at("coeffs").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed coefficients file: ") + e.what());
    }
    if (c.values.size() != c.n() * c.m() * c.K)
        throw ShapeError("coefficient count does not match its axes");
    return c;
}

void run_eval_disentangle(const EvalOpts& o, Manifest& m) {
    auto lm = load_model(o.base, m);
    m.inputs.push_back(o.coeffs);
    auto coeffs = coeffs_from_report(read_json_file(o.coeffs));
    auto tvs = load_tvs(o.tv_paths, m);
    if (o.data_paths.size() != tvs.size())
        throw ConfigError("one --data per --tv required");

    // Reorder the vector/data pairs to the coefficient axis order.
    std::vector<TaskVector> ordered;
    std::vector<Batch> data;
    for (const auto& id : coeffs.tv_ids) {
        auto it = std::find_if(tvs.begin(), tvs.end(),
                               [&](const TaskVector& tv) { return tv.id == id; });
        if (it == tvs.end()) throw ConfigError("no --tv supplied for coefficient id " + id);
        data.push_back(split_of(load_data(o.data_paths[it - tvs.begin()], m), o.split));
        ordered.push_back(std::move(*it));
    }

    auto rep = disentanglement_matrix(lm.model, lm.weights, coeffs, ordered, data, o.threads);
    m.command = "eval disentangle";
    m.config = {{"split", o.split}};
    m.outputs = {o.out};
    write_text(o.out, disentanglement_csv(rep));
    std::cout << "mean interference " << rep.mean_xi << " percent over "
              << rep.ids.size() * (rep.ids.size() - 1) << " ordered pairs\n";
}

void run_eval_intrinsic(const EvalOpts& o, Manifest& m) {
    auto lm = load_model(o.base, m);
    if (o.data_paths.size() != 1) throw ConfigError("intrinsic takes exactly one --data");
    auto target = load_data(o.data_paths[0], m);
    if (o.bases.empty()) throw ConfigError("intrinsic needs at least one --bases value");

    double ref = o.ref;
    if (!o.finetuned.empty()) {
        m.inputs.push_back(o.finetuned);
        auto tuned = load_weights(o.finetuned);
        ref = accuracy(lm.model, tuned, target.test, o.threads);
    }
    if (!(ref > 0.0)) throw ConfigError("a positive --ref or a --finetuned model is required");

    TrainConfig tc;
    tc.learning_rate = o.lr;
    tc.weight_decay = o.wd;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.seed = o.seed;
    tc.threads = o.threads;

    auto tvs = load_tvs(o.tv_paths, m);
    std::vector<SubspaceRow> rows;
    for (std::size_t d : o.bases) {
        BasisSet basis;
        if (d > 0 && o.basis == "random") {
            basis = make_random_basis(lm.weights, d, o.seed);
        } else if (d > 0 && o.basis == "taskvector") {
            auto plan = select_by_gradient(lm.model, lm.weights, tvs, target.train, d, 0,
                                           GradientMode::Blockwise, o.threads);
            basis = make_tv_basis(tvs, d, plan);
        } else if (d > 0) {
            throw ConfigError("unknown basis kind " + o.basis + " (random, taskvector)");
        }
        auto point = run_subspace_experiment(lm.model, lm.weights, basis, target, ref, tc);
        rows.push_back({o.basis, point.d, o.seed, point.abs_acc, point.rel_acc});
        std::cout << "d=" << d << ": " << point.abs_acc << " absolute, " << point.rel_acc
                  << " relative\n";
    }

    m.command = "eval intrinsic";
    m.seed = o.seed;
    m.config = {{"basis", o.basis}, {"reference", ref}, {"config", tc.to_json()}};
    m.outputs = {o.out};
    write_text(o.out, subspace_csv(rows));
}

// ------------------------------------------------------------------- dispatch

int dispatch(const std::vector<std::string>& args, int depth) {
    CLI::App app{"task-vector toolkit"};
    app.require_subcommand(1);

    Manifest manifest;
    int threads_default = 1;

    auto add_threads = [&](CLI::App* cmd, int& slot) {
        cmd->add_option("--threads", slot, "worker threads")->envname("TVKIT_THREADS");
    };

    // init-base
    InitOpts init;
    auto* cmd_init = app.add_subcommand("init-base", "create base weights");
    cmd_init->add_option("--depth", init.depth);
    cmd_init->add_option("--width", init.width);
    cmd_init->add_option("--in-dim", init.in_dim);
    cmd_init->add_option("--emb-dim", init.emb_dim);
    cmd_init->add_option("--classes", init.classes);
    cmd_init->add_option("--logit-scale", init.logit_scale);
    cmd_init->add_option("--head-seed", init.head_seed);
    cmd_init->add_option("--seed", init.seed);
    cmd_init->add_option("--out", init.out)->required();
    cmd_init->callback([&] { run_init_base(init, manifest); });

    // gen-data
    GenOpts gen;
    auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic task");
    cmd_gen->add_option("--spec", gen.spec_path, "task spec JSON file");
    cmd_gen->add_option("--id", gen.spec.id);
    cmd_gen->add_option("--in-dim", gen.spec.in_dim);
    cmd_gen->add_option("--classes", gen.spec.num_classes);
    cmd_gen->add_option("--train-per-class", gen.spec.train_per_class);
    cmd_gen->add_option("--val-per-class", gen.spec.val_per_class);
    cmd_gen->add_option("--test-per-class", gen.spec.test_per_class);
    cmd_gen->add_option("--rot", gen.spec.rot_angle);
    cmd_gen->add_option("--shift", gen.spec.shift);
    cmd_gen->add_option("--noise", gen.spec.noise);
    cmd_gen->add_option("--domain-shift", gen.spec.domain_shift);
    cmd_gen->add_option("--seed", gen.spec.seed);
    cmd_gen->add_option("--anchor-seed", gen.spec.anchor_seed);
    cmd_gen->add_flag("--shifted", gen.shifted, "apply the domain shift");
    cmd_gen->add_option("--out", gen.out)->required();
    cmd_gen->callback([&] { run_gen_data(gen, manifest); });

    // finetune
    FinetuneOpts ft;
    auto* cmd_ft = app.add_subcommand("finetune", "fine-tune on one task");
    cmd_ft->add_option("--base", ft.base)->required();
    cmd_ft->add_option("--data", ft.data)->required();
    cmd_ft->add_option("--epochs", ft.epochs);
    cmd_ft->add_option("--lr", ft.lr);
    cmd_ft->add_option("--wd", ft.wd);
    cmd_ft->add_option("--batch", ft.batch);
    cmd_ft->add_option("--seed", ft.seed);
    cmd_ft->add_option("--lora-rank", ft.lora_rank, "train low-rank factors instead");
    cmd_ft->add_option("--lora-blocks", ft.lora_blocks, "restrict factors to these blocks");
    cmd_ft->add_option("--id", ft.id, "task-vector id for --lora-rank output");
    add_threads(cmd_ft, ft.threads);
    cmd_ft->add_option("--out", ft.out)->required();
    cmd_ft->callback([&] { run_finetune(ft, manifest); });

    // diff
    DiffOpts df;
    auto* cmd_diff = app.add_subcommand("diff", "cut a task vector");
    cmd_diff->add_option("--base", df.base)->required();
    cmd_diff->add_option("--finetuned", df.finetuned)->required();
    cmd_diff->add_option("--id", df.id);
    cmd_diff->add_option("--out", df.out)->required();
    cmd_diff->callback([&] { run_diff(df, manifest); });

    // learn
    LearnOpts lo;
    auto* cmd_learn = app.add_subcommand("learn", "learn composition coefficients");
    cmd_learn->require_subcommand(1);
    std::string learn_mode;
    for (const char* mode : {"add", "negate", "fewshot", "tta-ufm", "tta-entropy"}) {
        auto* sub = cmd_learn->add_subcommand(mode);
        sub->add_option("--base", lo.base)->required();
        sub->add_option("--tv", lo.tv_paths);
        sub->add_option("--data", lo.data_paths);
        sub->add_option("--lr", lo.lr);
        sub->add_option("--wd", lo.wd);
        sub->add_option("--l1", lo.l1);
        sub->add_option("--epochs", lo.epochs);
        sub->add_option("--batch", lo.batch);
        sub->add_option("--seed", lo.seed);
        sub->add_option("--init", lo.init);
        sub->add_flag("--interleave", lo.interleave, "round-robin task batches");
        add_threads(sub, lo.threads);
        sub->add_option("--out", lo.out)->required();
        std::string name = mode;
        if (name == "add") {
            sub->add_option("--K", lo.K, "partitions per block");
            sub->add_flag("--linearized", lo.linearized, "tangent-model objective");
        }
        if (name == "add" || name == "fewshot") {
            sub->add_option("--strategy", lo.strategy,
                            "random, grad-whole, or grad-blockwise");
            sub->add_option("--budget", lo.budget);
            sub->add_option("--group", lo.group);
        }
        if (name == "negate") sub->add_option("--control", lo.control_path)->required();
        if (name == "fewshot") {
            sub->add_option("--k", lo.k);
            sub->add_option("--target-id", lo.target_id);
        }
        if (name == "tta-ufm") {
            sub->add_option("--trusted-cap", lo.trusted_cap);
            sub->add_option("--omega-start", lo.omega_start);
            sub->add_option("--omega-end", lo.omega_end);
            sub->add_option("--trusted-fraction", lo.trusted_fraction);
            sub->add_option("--sharpen-exp", lo.sharpen_exp);
            sub->add_option("--weak-noise", lo.weak_noise);
            sub->add_option("--strong-noise", lo.strong_noise);
            sub->add_option("--dropout", lo.dropout);
        }
        sub->callback([&, name] { run_learn(name, lo, manifest); });
    }

    // eval
    EvalOpts eo;
    auto* cmd_eval = app.add_subcommand("eval", "score models and composites");
    cmd_eval->require_subcommand(1);

    auto* ev_acc = cmd_eval->add_subcommand("acc", "absolute accuracy");
    ev_acc->add_option("--weights", eo.weights)->required();
    ev_acc->add_option("--data", eo.data_paths)->required();
    ev_acc->add_option("--split", eo.split);
    add_threads(ev_acc, eo.threads);
    ev_acc->add_option("--out", eo.out)->required();
    ev_acc->callback([&] { run_eval_acc(eo, false, manifest); });

    auto* ev_rel = cmd_eval->add_subcommand("relacc", "accuracy against a reference");
    ev_rel->add_option("--weights", eo.weights)->required();
    ev_rel->add_option("--data", eo.data_paths)->required();
    ev_rel->add_option("--ref", eo.refs, "fine-tuned reference accuracy per dataset")
        ->required();
    ev_rel->add_option("--split", eo.split);
    add_threads(ev_rel, eo.threads);
    ev_rel->add_option("--out", eo.out)->required();
    ev_rel->callback([&] { run_eval_acc(eo, true, manifest); });

    auto* ev_neg = cmd_eval->add_subcommand("negation", "forgetting with control retention");
    ev_neg->add_option("--base", eo.base)->required();
    ev_neg->add_option("--edited", eo.edited)->required();
    ev_neg->add_option("--target", eo.target_path)->required();
    ev_neg->add_option("--control", eo.control_path)->required();
    ev_neg->add_option("--split", eo.split);
    add_threads(ev_neg, eo.threads);
    ev_neg->add_option("--out", eo.out)->required();
    ev_neg->callback([&] { run_eval_negation(eo, manifest); });

    auto* ev_dis = cmd_eval->add_subcommand("disentangle", "pairwise prediction interference");
    ev_dis->add_option("--base", eo.base)->required();
    ev_dis->add_option("--coeffs", eo.coeffs)->required();
    ev_dis->add_option("--tv", eo.tv_paths)->required();
    ev_dis->add_option("--data", eo.data_paths)->required();
    ev_dis->add_option("--split", eo.split);
    add_threads(ev_dis, eo.threads);
    ev_dis->add_option("--out", eo.out)->required();
    ev_dis->callback([&] { run_eval_disentangle(eo, manifest); });

    auto* ev_int = cmd_eval->add_subcommand("intrinsic", "subspace dimensionality sweep");
    ev_int->add_option("--base", eo.base)->required();
    ev_int->add_option("--data", eo.data_paths)->required();
    ev_int->add_option("--basis", eo.basis, "random or taskvector");
    ev_int->add_option("--bases", eo.bases, "subspace sizes, 0 = zero-shot")->required();
    ev_int->add_option("--ref", eo.ref, "fine-tuned reference accuracy");
    ev_int->add_option("--finetuned", eo.finetuned, "weights to score the reference from");
    ev_int->add_option("--tv", eo.tv_paths);
    ev_int->add_option("--lr", eo.lr);
    ev_int->add_option("--wd", eo.wd);
    ev_int->add_option("--epochs", eo.epochs);
    ev_int->add_option("--batch", eo.batch);
    ev_int->add_option("--seed", eo.seed);
    add_threads(ev_int, eo.threads);
    ev_int->add_option("--out", eo.out)->required();
    ev_int->callback([&] { run_eval_intrinsic(eo, manifest); });

    // rerun
    std::string manifest_path;
    auto* cmd_rerun = app.add_subcommand("rerun", "replay a command from its manifest");
    cmd_rerun->add_option("manifest", manifest_path)->required();

    (void)threads_default;
    auto started = std::chrono::steady_clock::now();
    try {
        std::vector<const char*> argv;
        argv.push_back("tvkit");
        for (const auto& a : args) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (*cmd_rerun) {
        if (depth > 0) throw ConfigError("manifest replays are not nestable");
        auto j = read_json_file(manifest_path);
        std::vector<std::string> replay;
        try {
            replay = j.at("argv").get<std::vector<std::string>>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("manifest lacks a usable argv: ") + e.what());
        }
        std::cout << "replaying: tvkit";
        for (const auto& a : replay) std::cout << " " << a;
        std::cout << "\n";
        return dispatch(replay, depth + 1);
    }

    double wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - started)
                         .count();
    write_manifest(manifest, args, wall_ms);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return dispatch(args, 0);
    } catch (const ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
