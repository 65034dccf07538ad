#pragma once

#include <cstdint>
#include <vector>

#include "tvkit/blocks.hpp"
#include "tvkit/learn.hpp"
#include "tvkit/net.hpp"

namespace tvkit {

// Full out_dim x in_dim product B*A. Only for inspection and oracles; the
// composition and gradient paths consume factors directly.
std::vector<double> densify(const LoraFactor& factor);

// Low-rank fine-tuning: every weight-matrix block gets factors (B zero,
// A small Gaussian, so the starting delta is exactly zero) trained with
// AdamW while everything else stays frozen. Pass only_blocks to narrow the
// factored set. epochs = 0 returns the untrained (zero-delta) vector.
TaskVector finetune_lora(const ToyModel& model, const BlockedTensor& theta0, const Batch& train,
                         std::size_t rank, const FinetuneConfig& config,
                         const std::vector<std::string>* only_blocks = nullptr);

}  // namespace tvkit
