#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include <json.hpp>

#include "precofact/types.hpp"

namespace precofact {

struct EvalReport {
    std::array<double, kNumClasses> precision{};
    std::array<double, kNumClasses> recall{};
    std::array<double, kNumClasses> per_class_f1{};
    std::array<std::size_t, kNumClasses> support{};
    // confusion[true][predicted]
    std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};
    double weighted_f1 = 0.0;
    double accuracy = 0.0;
    std::size_t samples = 0;
};

// Per-class precision/recall/F1 with 0/0 := 0, support-weighted F1.
EvalReport evaluate(std::span<const int> predictions, std::span<const int> labels);

// Index of the row maximum, lowest index on ties. Rows need not be
// normalized, so ensemble scores are accepted as-is.
std::vector<int> argmax_predict(std::span<const std::array<double, kNumClasses>> scores);

nlohmann::json to_json(const EvalReport& report);
// Aligned table: summary lines, per-class rows, confusion grid.
void print_report(std::ostream& os, const EvalReport& report);

} // namespace precofact
