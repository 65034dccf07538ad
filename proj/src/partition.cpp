#include "tvkit/partition.hpp"

#include <algorithm>

#include "tvkit/errors.hpp"
#include "tvkit/rng.hpp"

namespace tvkit {

std::vector<std::uint32_t> PartitionMasks::assignment(std::size_t block) const {
    const std::size_t N = specs.at(block).numel();
    std::vector<std::uint32_t> out(N);
    for (std::size_t e = 0; e < N; ++e) out[e] = static_cast<std::uint32_t>(e % K);
    if (K == 1) return out;
    // Counter-based Fisher-Yates keyed by the block name: regenerable anywhere,
    // no stored state.
    const std::uint64_t key = stream_key(stream_key(seed, "masks"), specs[block].name);
    for (std::size_t i = N - 1; i > 0; --i)
        std::swap(out[i], out[counter_rand(key, i) % (i + 1)]);
    return out;
}

PartitionMasks make_partitions(const std::vector<BlockSpec>& specs, std::size_t K,
                               std::uint64_t seed) {
    if (K < 1) throw ConfigError("partition count must be >= 1");
    for (const BlockSpec& s : specs)
        if (K > s.numel())
            throw ConfigError("K = " + std::to_string(K) + " would leave empty partitions in '" +
                              s.name + "' (" + std::to_string(s.numel()) + " elements)");
    PartitionMasks m;
    m.seed = seed;
    m.K = K;
    m.specs = specs;
    return m;
}

namespace {

std::vector<std::size_t> block_offsets(const BlockedTensor& base) {
    std::vector<std::size_t> off(base.num_blocks());
    std::size_t o = 0;
    for (std::size_t j = 0; j < base.num_blocks(); ++j) {
        off[j] = o;
        o += base.specs()[j].numel();
    }
    return off;
}

}  // namespace

std::vector<double> compose_delta_partitioned_f64(const BlockedTensor& base,
                                                  const CoefficientSet& coeffs,
                                                  std::span<const TaskVector> tvs,
                                                  const PartitionMasks& masks) {
    check_composition(base, coeffs, tvs);
    if (masks.K != coeffs.K)
        throw ConfigError("coefficient set has K = " + std::to_string(coeffs.K) +
                          ", masks have K = " + std::to_string(masks.K));
    if (masks.specs != base.specs()) throw ShapeError("masks were built for different blocks");

    std::vector<double> out(base.numel(), 0.0);
    const auto off = block_offsets(base);
    std::vector<std::vector<std::uint32_t>> assign(base.num_blocks());
    for (std::size_t j = 0; j < base.num_blocks(); ++j) assign[j] = masks.assignment(j);

    for (std::size_t i = 0; i < tvs.size(); ++i) {
        const TaskVector& tv = tvs[i];
        if (tv.is_dense()) {
            for (std::size_t j = 0; j < base.num_blocks(); ++j) {
                auto blk = tv.dense->block(j);
                const auto& mask = assign[j];
                double* dst = out.data() + off[j];
                for (std::size_t e = 0; e < blk.size(); ++e)
                    dst[e] += coeffs.at(i, j, mask[e]) * static_cast<double>(blk[e]);
            }
        } else {
            for (const LoraFactor& f : tv.factors) {
                const std::size_t j = base.block_index(f.name);
                const auto& mask = assign[j];
                double* dst = out.data() + off[j];
                for (std::size_t o = 0; o < f.out_dim; ++o) {
                    for (std::size_t c = 0; c < f.in_dim; ++c) {
                        double s = 0.0;
                        for (std::size_t r = 0; r < f.rank; ++r)
                            s += static_cast<double>(f.b[o * f.rank + r]) *
                                 static_cast<double>(f.a[r * f.in_dim + c]);
                        const std::size_t e = o * f.in_dim + c;
                        dst[e] += coeffs.at(i, j, mask[e]) * s;
                    }
                }
            }
        }
    }
    return out;
}

std::vector<double> compose_partitioned_f64(const BlockedTensor& base,
                                            const CoefficientSet& coeffs,
                                            std::span<const TaskVector> tvs,
                                            const PartitionMasks& masks) {
    std::vector<double> out = compose_delta_partitioned_f64(base, coeffs, tvs, masks);
    const std::vector<double> b = base.to_f64();
    for (std::size_t e = 0; e < out.size(); ++e) out[e] += b[e];
    return out;
}

BlockedTensor apply_partitioned(const BlockedTensor& base, const CoefficientSet& coeffs,
                                std::span<const TaskVector> tvs, const PartitionMasks& masks) {
    return BlockedTensor::from_f64(base.specs(),
                                   compose_partitioned_f64(base, coeffs, tvs, masks));
}

CoefficientSet replicate_coefficients(const CoefficientSet& flat, std::size_t K) {
    if (flat.K != 1) throw ConfigError("replication expects a K=1 coefficient set");
    CoefficientSet out = CoefficientSet::zeros(flat.tv_ids, flat.block_names, K);
    for (std::size_t i = 0; i < flat.n(); ++i)
        for (std::size_t j = 0; j < flat.m(); ++j)
            for (std::size_t k = 0; k < K; ++k) out.at(i, j, k) = flat.at(i, j);
    return out;
}

}  // namespace tvkit
