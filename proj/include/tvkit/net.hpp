#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tvkit/blocks.hpp"

namespace tvkit {

struct NetConfig {
    std::size_t depth = 3;       // hidden layers; total linear layers = depth + 1
    std::size_t width = 64;
    std::size_t in_dim = 16;
    std::size_t emb_dim = 16;
    std::size_t num_classes = 10;
    double logit_scale = 10.0;
    std::uint64_t head_seed = 0;
};

struct Batch {
    std::size_t in_dim = 0;
    std::vector<double> inputs;  // B x in_dim, row-major
    std::vector<int> labels;     // B entries in [0, C); empty for unlabeled batches
    std::size_t size() const { return in_dim == 0 ? 0 : inputs.size() / in_dim; }
};

enum class LossKind { CrossEntropy, NegatedCrossEntropy, Entropy };

// LayerNorm -> linear -> GELU stack ending in an L2-normalised latent scored
// against a frozen unit-norm class-embedding matrix by scaled cosine.
class ToyModel {
 public:
    explicit ToyModel(NetConfig cfg);

    const NetConfig& config() const { return cfg_; }
    const std::vector<BlockSpec>& specs() const { return specs_; }
    std::size_t param_count() const { return param_count_; }
    std::size_t num_blocks() const { return specs_.size(); }
    std::size_t num_layers() const { return cfg_.depth + 1; }
    const std::vector<std::size_t>& block_offsets() const { return offsets_; }

    // Frozen head, C x emb_dim with unit-norm rows; never part of task vectors.
    const std::vector<double>& class_embeddings() const { return head_; }

    std::size_t layer_in_dim(std::size_t l) const { return l == 0 ? cfg_.in_dim : cfg_.width; }
    std::size_t layer_out_dim(std::size_t l) const {
        return l == cfg_.depth ? cfg_.emb_dim : cfg_.width;
    }

    BlockedTensor init_params(std::uint64_t seed) const;
    void require_matching(const BlockedTensor& theta) const;

    nlohmann::json meta() const;
    static ToyModel from_meta(const nlohmann::json& meta);

 private:
    NetConfig cfg_;
    std::vector<BlockSpec> specs_;
    std::vector<std::size_t> offsets_;
    std::size_t param_count_ = 0;
    std::vector<double> head_;
};

struct BackwardResult {
    double loss = 0.0;
    std::vector<double> grad;  // flat, model block layout
};

// 64-bit engine. theta / direction are flat arrays in the model's block layout;
// compose_f64 output feeds these directly.
std::vector<double> forward_f64(const ToyModel& model, std::span<const double> theta,
                                const Batch& batch, int threads = 1);
std::vector<double> embed_f64(const ToyModel& model, std::span<const double> theta,
                              const Batch& batch, int threads = 1);
BackwardResult backward_f64(const ToyModel& model, std::span<const double> theta,
                            const Batch& batch, LossKind loss, int threads = 1);
// loss = <cotangent, logits>; gradient is the plain vector-Jacobian product
// with no batch averaging.
BackwardResult backward_cotangent_f64(const ToyModel& model, std::span<const double> theta,
                                      const Batch& batch, std::span<const double> cotangent,
                                      int threads = 1);
std::vector<double> jvp_f64(const ToyModel& model, std::span<const double> theta,
                            std::span<const double> direction, const Batch& batch,
                            int threads = 1);

// Tangent-model logits: f(x; theta0) + jvp of the scaled task-vector sum.
std::vector<double> linearized_forward_f64(const ToyModel& model, const BlockedTensor& theta0,
                                           const CoefficientSet& coeffs,
                                           std::span<const TaskVector> tvs, const Batch& batch,
                                           int threads = 1);

// 32-bit entry points over BlockedTensor parameters.
std::vector<double> forward(const ToyModel& model, const BlockedTensor& theta,
                            const Batch& batch, int threads = 1);
BackwardResult backward(const ToyModel& model, const BlockedTensor& theta, const Batch& batch,
                        LossKind loss, int threads = 1);
std::vector<double> jvp(const ToyModel& model, const BlockedTensor& theta,
                        const BlockedTensor& direction, const Batch& batch, int threads = 1);

double loss_value(LossKind loss, std::span<const double> logits, const Batch& batch,
                  std::size_t num_classes);
// Batch-mean loss together with its logit gradient (1/B folded in), shaped to
// feed backward_cotangent_f64.
std::pair<double, std::vector<double>> loss_with_dlogits(LossKind loss,
                                                         std::span<const double> logits,
                                                         const Batch& batch,
                                                         std::size_t num_classes);
std::vector<double> softmax_rows(std::span<const double> logits, std::size_t rows,
                                 std::size_t cols);

// Central finite differences of the batch loss on the 64-bit path, for
// gradient cross-checks at selected flat coordinates.
std::vector<double> finite_difference_grad(const ToyModel& model, std::span<const double> theta,
                                           const Batch& batch, LossKind loss,
                                           std::span<const std::size_t> coords, double h = 1e-3);

}  // namespace tvkit
