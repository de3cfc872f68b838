#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "precofact/types.hpp"

namespace precofact {

// p = sum_i w_i * p_i^N, elementwise per class. Weights need not sum to 1.
struct EnsembleConfig {
    std::vector<double> weights;
    double power = 0.5;

    // k >= 1, every weight > 0, power > 0, one weight per member.
    void validate(std::size_t members) const;
};

// Rows are joined on sample id and emitted in the first member's order.
// The result is not renormalized; it is tagged "ensemble".
PredictionSet combine(std::span<const PredictionSet> members, const EnsembleConfig& config);

struct GridPoint {
    std::vector<double> weights;
    double power = 0.0;
    double weighted_f1 = 0.0;
};

struct GridSearchResult {
    EnsembleConfig best;
    double best_weighted_f1 = 0.0;
    std::vector<GridPoint> table; // weight-major, then power, in grid order
};

// Scores combine+argmax for every (weights, power) point. Grid weight
// vectors may contain zeros (a zero drops that member) but not be all zero.
// The first point reaching the best score wins. `labels` follow the first
// member's sample order.
GridSearchResult grid_search(std::span<const PredictionSet> members,
                             std::span<const std::vector<double>> weight_grid, std::span<const double> power_grid,
                             std::span<const int> labels);

// Every k-tuple over `values`, lexicographic, all-zero tuples skipped.
std::vector<std::vector<double>> cartesian_weight_grid(std::span<const double> values, std::size_t k);

} // namespace precofact
