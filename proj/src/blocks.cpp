#include "tvkit/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace tvkit {

const char* to_string(BlockKind kind) {
    switch (kind) {
        case BlockKind::WeightMatrix: return "weight-matrix";
        case BlockKind::Bias: return "bias";
        case BlockKind::LnGain: return "ln-gain";
        case BlockKind::LnBias: return "ln-bias";
    }
    return "?";
}

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "weight-matrix") return BlockKind::WeightMatrix;
    if (s == "bias") return BlockKind::Bias;
    if (s == "ln-gain") return BlockKind::LnGain;
    if (s == "ln-bias") return BlockKind::LnBias;
    throw ConfigError("unknown block kind '" + s + "'");
}

std::size_t BlockSpec::numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void BlockSpec::validate() const {
    if (name.empty()) throw ShapeError("block with empty name");
    if (shape.empty()) throw ShapeError("block '" + name + "' has empty shape");
    for (std::size_t d : shape)
        if (d == 0) throw ShapeError("block '" + name + "' has a zero dimension");
    const std::size_t want_rank = kind == BlockKind::WeightMatrix ? 2 : 1;
    if (shape.size() != want_rank)
        throw ShapeError("block '" + name + "' of kind " + to_string(kind) + " must have rank " +
                         std::to_string(want_rank) + ", got " + std::to_string(shape.size()));
}

static void validate_spec_list(const std::vector<BlockSpec>& specs) {
    std::unordered_set<std::string> seen;
    for (const BlockSpec& s : specs) {
        s.validate();
        if (!seen.insert(s.name).second) throw ShapeError("duplicate block name '" + s.name + "'");
    }
}

BlockedTensor::BlockedTensor(std::vector<BlockSpec> specs) : specs_(std::move(specs)) {
    validate_spec_list(specs_);
    data_.reserve(specs_.size());
    for (const BlockSpec& s : specs_) data_.emplace_back(s.numel(), 0.0f);
}

BlockedTensor::BlockedTensor(std::vector<BlockSpec> specs, std::vector<std::vector<float>> data)
    : specs_(std::move(specs)), data_(std::move(data)) {
    validate_spec_list(specs_);
    if (data_.size() != specs_.size())
        throw ShapeError("block count mismatch: " + std::to_string(specs_.size()) + " specs, " +
                         std::to_string(data_.size()) + " data blocks");
    for (std::size_t j = 0; j < specs_.size(); ++j)
        if (data_[j].size() != specs_[j].numel())
            throw ShapeError("block '" + specs_[j].name + "' expects " +
                             std::to_string(specs_[j].numel()) + " elements, got " +
                             std::to_string(data_[j].size()));
}

std::size_t BlockedTensor::numel() const {
    std::size_t n = 0;
    for (const BlockSpec& s : specs_) n += s.numel();
    return n;
}

std::span<const float> BlockedTensor::block(std::size_t j) const {
    return {data_.at(j).data(), data_.at(j).size()};
}

std::span<float> BlockedTensor::block(std::size_t j) {
    return {data_.at(j).data(), data_.at(j).size()};
}

std::size_t BlockedTensor::block_index(const std::string& name) const {
    for (std::size_t j = 0; j < specs_.size(); ++j)
        if (specs_[j].name == name) return j;
    throw std::out_of_range("unknown block name '" + name + "'");
}

bool BlockedTensor::same_specs(const BlockedTensor& other) const {
    return specs_ == other.specs_;
}

void BlockedTensor::require_same_specs(const BlockedTensor& a, const BlockedTensor& b) {
    if (a.num_blocks() != b.num_blocks())
        throw ShapeError("block count mismatch: " + std::to_string(a.num_blocks()) + " vs " +
                         std::to_string(b.num_blocks()));
    for (std::size_t j = 0; j < a.num_blocks(); ++j)
        if (!(a.specs_[j] == b.specs_[j]))
            throw ShapeError("spec mismatch at block '" + a.specs_[j].name + "' vs '" +
                             b.specs_[j].name + "'");
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

static std::uint64_t hash_spec(const BlockSpec& s, std::uint64_t h) {
    h = fnv1a64(s.name.data(), s.name.size(), h);
    const unsigned char zero = 0;
    h = fnv1a64(&zero, 1, h);
    for (std::size_t d : s.shape) {
        std::uint64_t dim = d;
        h = fnv1a64(&dim, sizeof(dim), h);
    }
    const auto kind = static_cast<unsigned char>(s.kind);
    return fnv1a64(&kind, 1, h);
}

std::uint64_t BlockedTensor::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const BlockSpec& s : specs_) h = hash_spec(s, h);
    for (const auto& blk : data_)
        h = fnv1a64(blk.data(), blk.size() * sizeof(float), h);
    return h;
}

std::vector<double> BlockedTensor::to_f64() const {
    std::vector<double> flat;
    flat.reserve(numel());
    for (const auto& blk : data_)
        for (float v : blk) flat.push_back(static_cast<double>(v));
    return flat;
}

BlockedTensor BlockedTensor::from_f64(const std::vector<BlockSpec>& specs,
                                      std::span<const double> flat) {
    std::vector<std::vector<float>> data;
    data.reserve(specs.size());
    std::size_t off = 0;
    for (const BlockSpec& s : specs) {
        const std::size_t n = s.numel();
        if (off + n > flat.size())
            throw ShapeError("flat buffer too short for block '" + s.name + "'");
        std::vector<float> blk(n);
        for (std::size_t e = 0; e < n; ++e) blk[e] = static_cast<float>(flat[off + e]);
        off += n;
        data.push_back(std::move(blk));
    }
    if (off != flat.size())
        throw ShapeError("flat buffer has " + std::to_string(flat.size() - off) +
                         " trailing elements");
    return BlockedTensor(specs, std::move(data));
}

void LoraFactor::validate() const {
    if (rank < 1) throw ShapeError("factor '" + name + "': rank must be >= 1");
    if (rank > std::min(out_dim, in_dim))
        throw ShapeError("factor '" + name + "': rank " + std::to_string(rank) +
                         " exceeds min(out, in) = " + std::to_string(std::min(out_dim, in_dim)));
    if (a.size() != rank * in_dim || b.size() != out_dim * rank)
        throw ShapeError("factor '" + name + "': factor sizes do not match rank and dims");
}

std::uint64_t TaskVector::content_hash() const {
    std::uint64_t h = fnv1a64(id.data(), id.size());
    h = fnv1a64(&base_fingerprint, sizeof(base_fingerprint), h);
    if (dense) {
        std::uint64_t d = dense->fingerprint();
        h = fnv1a64(&d, sizeof(d), h);
    }
    for (const LoraFactor& f : factors) {
        h = fnv1a64(f.name.data(), f.name.size(), h);
        std::uint64_t r = f.rank;
        h = fnv1a64(&r, sizeof(r), h);
        h = fnv1a64(f.a.data(), f.a.size() * sizeof(float), h);
        h = fnv1a64(f.b.data(), f.b.size() * sizeof(float), h);
    }
    return h;
}

CoefficientSet CoefficientSet::zeros(std::vector<std::string> tv_ids,
                                     std::vector<std::string> block_names, std::size_t K) {
    CoefficientSet c;
    c.tv_ids = std::move(tv_ids);
    c.block_names = std::move(block_names);
    c.K = K;
    c.values.assign(c.tv_ids.size() * c.block_names.size() * K, 0.0);
    return c;
}

CoefficientSet CoefficientSet::isotropic(double alpha, std::vector<std::string> tv_ids,
                                         std::vector<std::string> block_names) {
    CoefficientSet c = zeros(std::move(tv_ids), std::move(block_names), 1);
    std::fill(c.values.begin(), c.values.end(), alpha);
    return c;
}

double& CoefficientSet::at(std::size_t i, std::size_t j, std::size_t k) {
    return values.at((i * m() + j) * K + k);
}

double CoefficientSet::at(std::size_t i, std::size_t j, std::size_t k) const {
    return values.at((i * m() + j) * K + k);
}

void CoefficientSet::validate_finite() const {
    for (double v : values)
        if (!std::isfinite(v)) throw NumericError("non-finite coefficient value");
}

TaskVector diff(const BlockedTensor& fine_tuned, const BlockedTensor& base, std::string id) {
    BlockedTensor::require_same_specs(fine_tuned, base);
    std::vector<std::vector<float>> data;
    data.reserve(base.num_blocks());
    for (std::size_t j = 0; j < base.num_blocks(); ++j) {
        auto ft = fine_tuned.block(j);
        auto b0 = base.block(j);
        std::vector<float> blk(ft.size());
        for (std::size_t e = 0; e < ft.size(); ++e)
            blk[e] = static_cast<float>(static_cast<double>(ft[e]) - static_cast<double>(b0[e]));
        data.push_back(std::move(blk));
    }
    TaskVector tv;
    tv.id = std::move(id);
    tv.base_fingerprint = base.fingerprint();
    tv.dense = BlockedTensor(base.specs(), std::move(data));
    return tv;
}

void check_composition(const BlockedTensor& base, const CoefficientSet& coeffs,
                       std::span<const TaskVector> tvs) {
    coeffs.validate_finite();
    const std::uint64_t base_fp = base.fingerprint();
    if (coeffs.n() != tvs.size())
        throw ShapeError("coefficient set indexes " + std::to_string(coeffs.n()) +
                         " task vectors, got " + std::to_string(tvs.size()));
    for (std::size_t i = 0; i < tvs.size(); ++i) {
        const TaskVector& tv = tvs[i];
        if (tv.base_fingerprint != base_fp)
            throw StaleTaskVectorError("task vector '" + tv.id +
                                       "' was derived from a different base model");
        if (coeffs.tv_ids[i] != tv.id)
            throw std::out_of_range("coefficient row " + std::to_string(i) + " names '" +
                                    coeffs.tv_ids[i] + "', task vector is '" + tv.id + "'");
        if (tv.is_dense()) {
            BlockedTensor::require_same_specs(*tv.dense, base);
        } else {
            for (const LoraFactor& f : tv.factors) {
                f.validate();
                const std::size_t j = base.block_index(f.name);  // throws out_of_range
                const BlockSpec& s = base.specs()[j];
                if (s.kind != BlockKind::WeightMatrix)
                    throw ShapeError("factor '" + f.name + "' targets a non-weight block");
                if (s.shape[0] != f.out_dim || s.shape[1] != f.in_dim)
                    throw ShapeError("factor '" + f.name + "' dims do not match block shape");
            }
        }
    }
    if (coeffs.m() != base.num_blocks())
        throw ShapeError("coefficient set indexes " + std::to_string(coeffs.m()) +
                         " blocks, base has " + std::to_string(base.num_blocks()));
    for (std::size_t j = 0; j < base.num_blocks(); ++j)
        if (coeffs.block_names[j] != base.specs()[j].name)
            throw std::out_of_range("coefficient column " + std::to_string(j) + " names '" +
                                    coeffs.block_names[j] + "', base block is '" +
                                    base.specs()[j].name + "'");
}

std::vector<double> compose_delta_f64(const BlockedTensor& base, const CoefficientSet& coeffs,
                                      std::span<const TaskVector> tvs) {
    check_composition(base, coeffs, tvs);
    if (coeffs.K != 1)
        throw ConfigError("compose with K > 1 requires partition masks; use apply_partitioned");
    std::vector<double> out(base.numel(), 0.0);
    std::vector<std::size_t> offsets(base.num_blocks());
    std::size_t off = 0;
    for (std::size_t j = 0; j < base.num_blocks(); ++j) {
        offsets[j] = off;
        off += base.specs()[j].numel();
    }
    for (std::size_t i = 0; i < tvs.size(); ++i) {
        const TaskVector& tv = tvs[i];
        if (tv.is_dense()) {
            for (std::size_t j = 0; j < base.num_blocks(); ++j) {
                const double lam = coeffs.at(i, j);
                if (lam == 0.0) continue;
                auto blk = tv.dense->block(j);
                double* dst = out.data() + offsets[j];
                for (std::size_t e = 0; e < blk.size(); ++e)
                    dst[e] += lam * static_cast<double>(blk[e]);
            }
        } else {
            for (const LoraFactor& f : tv.factors) {
                const std::size_t j = base.block_index(f.name);
                const double lam = coeffs.at(i, j);
                if (lam == 0.0) continue;
                // delta[o,c] = sum_r B[o,r] A[r,c], accumulated in place
                double* dst = out.data() + offsets[j];
                for (std::size_t o = 0; o < f.out_dim; ++o) {
                    for (std::size_t c = 0; c < f.in_dim; ++c) {
                        double s = 0.0;
                        for (std::size_t r = 0; r < f.rank; ++r)
                            s += static_cast<double>(f.b[o * f.rank + r]) *
                                 static_cast<double>(f.a[r * f.in_dim + c]);
                        dst[o * f.in_dim + c] += lam * s;
                    }
                }
            }
        }
    }
    return out;
}

std::vector<double> compose_f64(const BlockedTensor& base, const CoefficientSet& coeffs,
                                std::span<const TaskVector> tvs) {
    std::vector<double> out = compose_delta_f64(base, coeffs, tvs);
    const std::vector<double> b = base.to_f64();
    for (std::size_t e = 0; e < out.size(); ++e) out[e] += b[e];
    return out;
}

BlockedTensor apply_anisotropic(const BlockedTensor& base, const CoefficientSet& coeffs,
                                std::span<const TaskVector> tvs) {
    std::vector<double> flat = compose_f64(base, coeffs, tvs);
    return BlockedTensor::from_f64(base.specs(), flat);
}

BlockedTensor apply_isotropic(const BlockedTensor& base, double alpha,
                              std::span<const TaskVector> tvs) {
    std::vector<std::string> ids;
    ids.reserve(tvs.size());
    for (const TaskVector& tv : tvs) ids.push_back(tv.id);
    std::vector<std::string> names;
    names.reserve(base.num_blocks());
    for (const BlockSpec& s : base.specs()) names.push_back(s.name);
    return apply_anisotropic(base, CoefficientSet::isotropic(alpha, ids, names), tvs);
}

}  // namespace tvkit
