#pragma once

#include <cstdint>
#include <vector>

#include "tvkit/blocks.hpp"

namespace tvkit {

// Balanced random split of every block's element index space into K parts.
// Assignments are regenerated on demand from (seed, K, block name) and never
// stored or serialised; coefficient files carry only the seed and K.
struct PartitionMasks {
    std::uint64_t seed = 0;
    std::size_t K = 1;
    std::vector<BlockSpec> specs;

    // Element -> partition id in [0, K); sizes differ by at most one.
    std::vector<std::uint32_t> assignment(std::size_t block) const;
};

PartitionMasks make_partitions(const std::vector<BlockSpec>& specs, std::size_t K,
                               std::uint64_t seed);

// Per-element composition: element e of block j of tv i is scaled by
// lambda(i, j, mask_j(e)). Accumulation order matches the K=1 path, so
// replicated coefficients reproduce it exactly.
std::vector<double> compose_delta_partitioned_f64(const BlockedTensor& base,
                                                  const CoefficientSet& coeffs,
                                                  std::span<const TaskVector> tvs,
                                                  const PartitionMasks& masks);
std::vector<double> compose_partitioned_f64(const BlockedTensor& base,
                                            const CoefficientSet& coeffs,
                                            std::span<const TaskVector> tvs,
                                            const PartitionMasks& masks);
BlockedTensor apply_partitioned(const BlockedTensor& base, const CoefficientSet& coeffs,
                                std::span<const TaskVector> tvs, const PartitionMasks& masks);

// Replicates a K=1 coefficient set across all K partitions.
CoefficientSet replicate_coefficients(const CoefficientSet& flat, std::size_t K);

}  // namespace tvkit
