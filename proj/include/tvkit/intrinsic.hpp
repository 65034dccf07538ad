#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tvkit/blocks.hpp"
#include "tvkit/data.hpp"
#include "tvkit/learn.hpp"
#include "tvkit/select.hpp"

namespace tvkit {

enum class BasisKind { Random, TaskVector };

const char* to_string(BasisKind k);

// A d-dimensional per-block search subspace. Each element is a dense vector in
// parameter space, so coefficient learning over the elements is the subspace
// optimisation.
struct BasisSet {
    BasisKind kind = BasisKind::Random;
    std::vector<TaskVector> elements;

    std::size_t d() const { return elements.size(); }
};

// Element b, block j drawn i.i.d. Gaussian with block j's mean and std from
// theta0; constant blocks get a 1e-6 std floor. Elements are drawn from
// per-element substreams, so a smaller d is a prefix of a larger one.
BasisSet make_random_basis(const BlockedTensor& theta0, std::size_t d, std::uint64_t seed);

// Element b, block j is block j of the b-th ranked task vector in the
// blockwise plan, so different blocks may pull from different vectors.
BasisSet make_tv_basis(std::span<const TaskVector> tvs, std::size_t d,
                       const SelectionPlan& plan);

struct SubspacePoint {
    std::size_t d = 0;
    double abs_acc = 0.0;
    double rel_acc = 0.0;
};

// Learns coefficients over the basis on the target's train split, scores the
// test split, and normalises by the fine-tuned reference. d = 0 is the
// zero-shot point.
SubspacePoint run_subspace_experiment(const ToyModel& model, const BlockedTensor& theta0,
                                      const BasisSet& basis, const Dataset& target,
                                      double finetuned_ref_acc, const TrainConfig& config);

struct SubspaceRow {
    std::string basis_kind;
    std::size_t d = 0;
    std::uint64_t seed = 0;
    double abs_acc = 0.0;
    double rel_acc = 0.0;
};

std::string subspace_csv(std::span<const SubspaceRow> rows);

}  // namespace tvkit
