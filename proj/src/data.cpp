#include "tvkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "tvkit/errors.hpp"
#include "tvkit/rng.hpp"
#include "tvkit/tvck.hpp"

namespace tvkit {

namespace {

std::vector<double> unit_vector(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(d);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (double& x : v) {
            x = dist(rng);
            n2 += x * x;
        }
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
    return v;
}

// Orthonormal pair spanning the rotation plane.
void rotation_plane(std::uint64_t seed, std::size_t d, std::vector<double>& u,
                    std::vector<double>& v) {
    auto rng = make_rng(seed, "subspace");
    u = unit_vector(rng, d);
    v = unit_vector(rng, d);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += u[i] * v[i];
    double n2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        v[i] -= dot * u[i];
        n2 += v[i] * v[i];
    }
    if (n2 < 1e-12) throw NumericError("degenerate rotation plane");
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
}

// R x = x + (cos t - 1)((u.x)u + (v.x)v) + sin t ((u.x)v - (v.x)u)
void rotate_in_plane(std::vector<double>& x, const std::vector<double>& u,
                     const std::vector<double>& v, double angle) {
    double ux = 0.0, vx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ux += u[i] * x[i];
        vx += v[i] * x[i];
    }
    const double c = std::cos(angle) - 1.0;
    const double s = std::sin(angle);
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] += c * (ux * u[i] + vx * v[i]) + s * (ux * v[i] - vx * u[i]);
}

void fill_split(const TaskSpec& spec, const std::vector<double>& centers,
                std::size_t per_class, std::string_view stream, Batch& out) {
    out.in_dim = spec.in_dim;
    out.inputs.reserve(per_class * spec.num_classes * spec.in_dim);
    out.labels.reserve(per_class * spec.num_classes);
    auto rng = make_rng(spec.seed, stream);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        const double* center = centers.data() + c * spec.in_dim;
        for (std::size_t s = 0; s < per_class; ++s) {
            for (std::size_t i = 0; i < spec.in_dim; ++i)
                out.inputs.push_back(center[i] + spec.noise * dist(rng));
            out.labels.push_back(static_cast<int>(c));
        }
    }
}

std::uint32_t read_be_u32(std::istream& in, std::size_t at) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("truncated header", at);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

void TaskSpec::validate() const {
    if (num_classes < 2) throw ConfigError("task '" + id + "': need at least two classes");
    if (in_dim < 2) throw ConfigError("task '" + id + "': in_dim must be >= 2");
    if (!(noise > 0.0)) throw ConfigError("task '" + id + "': noise must be positive");
    if (train_per_class == 0) throw ConfigError("task '" + id + "': empty train split");
}

nlohmann::json TaskSpec::to_json() const {
    return {{"id", id},
            {"in_dim", in_dim},
            {"num_classes", num_classes},
            {"train_per_class", train_per_class},
            {"val_per_class", val_per_class},
            {"test_per_class", test_per_class},
            {"rot_angle", rot_angle},
            {"shift", shift},
            {"noise", noise},
            {"domain_shift", domain_shift},
            {"seed", seed},
            {"anchor_seed", anchor_seed}};
}

TaskSpec TaskSpec::from_json(const nlohmann::json& j) {
    TaskSpec s;
    try {
        s.id = j.at("id").get<std::string>();
        s.in_dim = j.at("in_dim").get<std::size_t>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.train_per_class = j.at("train_per_class").get<std::size_t>();
        s.val_per_class = j.at("val_per_class").get<std::size_t>();
        s.test_per_class = j.at("test_per_class").get<std::size_t>();
        s.rot_angle = j.at("rot_angle").get<double>();
        s.shift = j.at("shift").get<double>();
        s.noise = j.at("noise").get<double>();
        s.domain_shift = j.at("domain_shift").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.anchor_seed = j.at("anchor_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("task description incomplete: ") + e.what());
    }
    return s;
}

std::vector<double> class_centers(const TaskSpec& spec, bool shifted) {
    spec.validate();
    auto arng = make_rng(spec.anchor_seed, "anchors");
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> centers(spec.num_classes * spec.in_dim);
    for (double& x : centers) x = dist(arng);

    std::vector<double> u, v;
    rotation_plane(spec.seed, spec.in_dim, u, v);
    std::vector<double> shift_dir;
    {
        auto rng = make_rng(spec.seed, "shift");
        shift_dir = unit_vector(rng, spec.in_dim);
    }
    std::vector<double> domain_dir;
    if (shifted) {
        auto rng = make_rng(spec.seed, "domain");
        domain_dir = unit_vector(rng, spec.in_dim);
    }

    std::vector<double> row(spec.in_dim);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::copy_n(centers.begin() + c * spec.in_dim, spec.in_dim, row.begin());
        rotate_in_plane(row, u, v, spec.rot_angle);
        for (std::size_t i = 0; i < spec.in_dim; ++i) {
            row[i] += spec.shift * shift_dir[i];
            if (shifted) row[i] += spec.domain_shift * domain_dir[i];
        }
        std::copy(row.begin(), row.end(), centers.begin() + c * spec.in_dim);
    }
    return centers;
}

Dataset generate(const TaskSpec& spec, bool shifted) {
    const std::vector<double> centers = class_centers(spec, shifted);
    Dataset out;
    out.id = spec.id;
    out.in_dim = spec.in_dim;
    out.num_classes = spec.num_classes;
    fill_split(spec, centers, spec.train_per_class, "train", out.train);
    fill_split(spec, centers, spec.val_per_class, "val", out.val);
    fill_split(spec, centers, spec.test_per_class, "test", out.test);
    return out;
}

KShotSample kshot(const Dataset& data, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw ConfigError("k must be >= 1");
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (std::size_t i = 0; i < data.train.labels.size(); ++i)
        by_class[static_cast<std::size_t>(data.train.labels[i])].push_back(i);

    KShotSample out;
    out.k = k;
    out.seed = seed;
    for (std::size_t c = 0; c < data.num_classes; ++c) {
        auto& pool = by_class[c];
        if (pool.size() < k)
            throw ConfigError("class " + std::to_string(c) + " has " +
                              std::to_string(pool.size()) + " train examples, need " +
                              std::to_string(k));
        auto rng = make_rng(seed, "kshot", c);
        // partial Fisher-Yates: first k entries are a uniform sample
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        out.indices.insert(out.indices.end(), pool.begin(), pool.begin() + k);
    }
    return out;
}

Batch gather(const Batch& from, const std::vector<std::size_t>& indices) {
    Batch out;
    out.in_dim = from.in_dim;
    out.inputs.reserve(indices.size() * from.in_dim);
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= from.size()) throw ConfigError("gather index out of range");
        out.inputs.insert(out.inputs.end(), from.inputs.begin() + i * from.in_dim,
                          from.inputs.begin() + (i + 1) * from.in_dim);
        if (!from.labels.empty()) out.labels.push_back(from.labels[i]);
    }
    return out;
}

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw ConfigError("cannot open '" + images_path.string() + "'");
    const std::uint32_t magic_i = read_be_u32(img, 0);
    if (magic_i != 0x00000803u) throw FormatError("image magic mismatch", 0);
    const std::uint32_t n = read_be_u32(img, 4);
    const std::uint32_t rows = read_be_u32(img, 8);
    const std::uint32_t cols = read_be_u32(img, 12);
    std::vector<unsigned char> pixels(std::size_t(n) * rows * cols);
    img.read(reinterpret_cast<char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
    if (static_cast<std::size_t>(img.gcount()) != pixels.size())
        throw FormatError("truncated image payload", 16 + std::size_t(img.gcount()));

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw ConfigError("cannot open '" + labels_path.string() + "'");
    const std::uint32_t magic_l = read_be_u32(lab, 0);
    if (magic_l != 0x00000801u) throw FormatError("label magic mismatch", 0);
    const std::uint32_t nl = read_be_u32(lab, 4);
    if (nl != n)
        throw FormatError("label count " + std::to_string(nl) + " does not match image count " +
                              std::to_string(n),
                          4);
    std::vector<unsigned char> labels(nl);
    lab.read(reinterpret_cast<char*>(labels.data()),
             static_cast<std::streamsize>(labels.size()));
    if (static_cast<std::size_t>(lab.gcount()) != labels.size())
        throw FormatError("truncated label payload", 8 + std::size_t(lab.gcount()));

    Dataset out;
    out.id = images_path.stem().string();
    out.in_dim = std::size_t(rows) * cols;
    out.train.in_dim = out.in_dim;
    out.train.inputs.resize(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        out.train.inputs[i] = static_cast<double>(pixels[i]) / 255.0;
    out.train.labels.assign(labels.begin(), labels.end());
    int max_label = 0;
    for (int y : out.train.labels) max_label = std::max(max_label, y);
    out.num_classes = static_cast<std::size_t>(max_label) + 1;
    out.val.in_dim = out.in_dim;
    out.test.in_dim = out.in_dim;
    return out;
}

namespace {

void push_split(TvckFile& file, const std::string& name, const Batch& b, std::size_t in_dim) {
    const std::size_t n = b.size();
    file.blocks.push_back(
        {name + "_inputs", {n, in_dim}, "data", file.payload.size(), n * in_dim});
    for (double v : b.inputs) file.payload.push_back(static_cast<float>(v));
    file.blocks.push_back({name + "_labels", {n, 1}, "data", file.payload.size(), n});
    for (int y : b.labels) file.payload.push_back(static_cast<float>(y));
}

Batch pull_split(const TvckFile& file, const std::string& name, std::size_t in_dim,
                 bool labeled) {
    Batch out;
    out.in_dim = in_dim;
    for (const TvckBlockEntry& e : file.blocks) {
        if (e.name == name + "_inputs") {
            out.inputs.assign(file.payload.begin() + e.offset_elems,
                              file.payload.begin() + e.offset_elems + e.len_elems);
        } else if (labeled && e.name == name + "_labels") {
            out.labels.reserve(e.len_elems);
            for (std::size_t i = 0; i < e.len_elems; ++i)
                out.labels.push_back(static_cast<int>(file.payload[e.offset_elems + i]));
        }
    }
    return out;
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
    TvckFile file;
    file.kind = "dataset";
    file.meta = {{"id", data.id}, {"in_dim", data.in_dim}, {"num_classes", data.num_classes}};
    push_split(file, "train", data.train, data.in_dim);
    push_split(file, "val", data.val, data.in_dim);
    push_split(file, "test", data.test, data.in_dim);
    write_tvck(path, file);
}

Dataset load_dataset(const std::filesystem::path& path) {
    TvckFile file = read_tvck(path);
    if (file.kind != "dataset")
        throw ConfigError("'" + path.string() + "' holds kind '" + file.kind +
                          "', expected 'dataset'");
    Dataset out;
    out.id = file.meta.value("id", "");
    out.in_dim = file.meta.at("in_dim").get<std::size_t>();
    out.num_classes = file.meta.at("num_classes").get<std::size_t>();
    out.train = pull_split(file, "train", out.in_dim, true);
    out.val = pull_split(file, "val", out.in_dim, true);
    out.test = pull_split(file, "test", out.in_dim, true);
    return out;
}

TaskSpec pretrain_spec(std::uint64_t seed) {
    TaskSpec s;
    s.id = "base";
    s.in_dim = 8;
    s.rot_angle = 0.0;
    s.shift = 0.0;
    s.noise = 0.4;
    s.train_per_class = 128;
    s.seed = stream_key(seed, "pretrain-task");
    s.anchor_seed = stream_key(seed, "anchors");
    return s;
}

std::vector<TaskSpec> task_suite(std::uint64_t seed, std::size_t n) {
    std::vector<TaskSpec> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        TaskSpec s;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "task%02zu", i);
        s.id = buf;
        // Related-but-distinct: rotations large relative to the 8-dim anchor
        // geometry, so a model pretrained on the bare anchors transfers only
        // partially and composed vectors genuinely interfere.
        s.in_dim = 8;
        s.rot_angle = 0.8 + 0.3 * static_cast<double>(i);
        s.shift = 0.8;
        s.noise = 0.4;
        s.domain_shift = 1.0;
        s.seed = stream_key(seed, "task", i);
        s.anchor_seed = stream_key(seed, "anchors");
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace tvkit
