#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tvkit/errors.hpp"

namespace tvkit {

enum class BlockKind { WeightMatrix, Bias, LnGain, LnBias };

const char* to_string(BlockKind kind);
BlockKind block_kind_from_string(const std::string& s);

// One named parameter block: a weight matrix (rank 2) or a vector-shaped
// bias / layer-norm parameter (rank 1).
struct BlockSpec {
    std::string name;
    std::vector<std::size_t> shape;
    BlockKind kind = BlockKind::Bias;

    std::size_t numel() const;
    void validate() const;

    bool operator==(const BlockSpec&) const = default;
};

// An ordered set of named parameter blocks with 32-bit payloads. Houses
// model weights and dense task-vector deltas. Immutable by convention once
// built; arithmetic helpers return new tensors.
class BlockedTensor {
public:
    BlockedTensor() = default;
    explicit BlockedTensor(std::vector<BlockSpec> specs);  // zero-filled
    BlockedTensor(std::vector<BlockSpec> specs, std::vector<std::vector<float>> data);

    const std::vector<BlockSpec>& specs() const { return specs_; }
    std::size_t num_blocks() const { return specs_.size(); }
    std::size_t numel() const;

    std::span<const float> block(std::size_t j) const;
    std::span<float> block(std::size_t j);
    std::size_t block_index(const std::string& name) const;  // throws std::out_of_range

    bool same_specs(const BlockedTensor& other) const;
    // Throws ShapeError naming the first offending block.
    static void require_same_specs(const BlockedTensor& a, const BlockedTensor& b);

    // Stable 64-bit content hash over specs and payload bytes.
    std::uint64_t fingerprint() const;

    // Flat 64-bit view in block order, and back (values rounded to f32).
    std::vector<double> to_f64() const;
    static BlockedTensor from_f64(const std::vector<BlockSpec>& specs, std::span<const double> flat);

private:
    std::vector<BlockSpec> specs_;
    std::vector<std::vector<float>> data_;
};

// Rank-r factors of a weight-matrix delta: delta = B (out x r) times A (r x in).
struct LoraFactor {
    std::string name;
    std::size_t rank = 0;
    std::size_t out_dim = 0;
    std::size_t in_dim = 0;
    std::vector<float> a;  // rank x in_dim, row-major
    std::vector<float> b;  // out_dim x rank, row-major

    void validate() const;
};

// A weight delta relative to one specific base model, identified by the
// base's fingerprint. Payload is either dense (full block inventory) or
// factored (weight-matrix blocks only, everything else implicitly zero).
struct TaskVector {
    std::string id;
    std::uint64_t base_fingerprint = 0;
    std::optional<BlockedTensor> dense;
    std::vector<LoraFactor> factors;

    bool is_dense() const { return dense.has_value(); }
    std::uint64_t content_hash() const;
};

// The trainable state: one scalar per (task vector, block, partition).
struct CoefficientSet {
    std::vector<std::string> tv_ids;       // n
    std::vector<std::string> block_names;  // m
    std::size_t K = 1;
    std::vector<double> values;            // n*m*K, index (i*m + j)*K + k

    static CoefficientSet zeros(std::vector<std::string> tv_ids,
                                std::vector<std::string> block_names, std::size_t K = 1);
    static CoefficientSet isotropic(double alpha, std::vector<std::string> tv_ids,
                                    std::vector<std::string> block_names);

    std::size_t n() const { return tv_ids.size(); }
    std::size_t m() const { return block_names.size(); }
    double& at(std::size_t i, std::size_t j, std::size_t k = 0);
    double at(std::size_t i, std::size_t j, std::size_t k = 0) const;
    void validate_finite() const;
};

// tau = fine_tuned - base, elementwise per block.
TaskVector diff(const BlockedTensor& fine_tuned, const BlockedTensor& base, std::string id = "");

// theta_0 + sum_i Lambda_i tau_i with per-block scaling. K=1 path; factored
// payloads are expanded lazily into the composite, never materialised whole.
BlockedTensor apply_anisotropic(const BlockedTensor& base, const CoefficientSet& coeffs,
                                std::span<const TaskVector> tvs);

// theta_0 + alpha * sum_i tau_i, one shared scale.
BlockedTensor apply_isotropic(const BlockedTensor& base, double alpha,
                              std::span<const TaskVector> tvs);

// 64-bit composite used by the training and evaluation paths; apply_anisotropic
// is this plus rounding to f32.
std::vector<double> compose_f64(const BlockedTensor& base, const CoefficientSet& coeffs,
                                std::span<const TaskVector> tvs);

// The scaled task-vector sum alone, without the base added. Exactly zero where
// every coefficient is zero.
std::vector<double> compose_delta_f64(const BlockedTensor& base, const CoefficientSet& coeffs,
                                      std::span<const TaskVector> tvs);

// Validation shared by the composition paths: fingerprints match the base,
// coefficient axes index exactly these tvs and all base blocks.
void check_composition(const BlockedTensor& base, const CoefficientSet& coeffs,
                       std::span<const TaskVector> tvs);

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace tvkit
