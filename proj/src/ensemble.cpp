#include "precofact/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>

#include "precofact/errors.hpp"
#include "precofact/metrics.hpp"

namespace precofact {

void EnsembleConfig::validate(std::size_t members) const {
    if (members == 0) throw ContractError("ensemble needs at least one member");
    if (weights.size() != members)
        throw ContractError("ensemble has " + std::to_string(members) + " members but " +
                            std::to_string(weights.size()) + " weights");
    for (double w : weights)
        if (!(w > 0.0) || !std::isfinite(w)) throw ContractError("ensemble weights must be positive and finite");
    if (!(power > 0.0) || !std::isfinite(power)) throw ContractError("ensemble power must be positive and finite");
}

namespace {

// Row index of every sample id per member, aligned to member 0's order.
std::vector<std::vector<std::size_t>> join(std::span<const PredictionSet> members) {
    const auto& base = members.front();
    std::unordered_map<std::string, std::size_t> base_index;
    for (std::size_t i = 0; i < base.size(); ++i)
        if (!base_index.emplace(base.sample_ids[i], i).second)
            throw JoinError("duplicate sample id '" + base.sample_ids[i] + "' in member '" + base.model_tag + "'");

    std::vector<std::vector<std::size_t>> rows(members.size(), std::vector<std::size_t>(base.size()));
    for (std::size_t i = 0; i < base.size(); ++i) rows[0][i] = i;
    for (std::size_t m = 1; m < members.size(); ++m) {
        const auto& member = members[m];
        std::vector<bool> covered(base.size(), false);
        std::vector<std::string> differing;
        for (std::size_t r = 0; r < member.size(); ++r) {
            auto it = base_index.find(member.sample_ids[r]);
            if (it == base_index.end()) {
                differing.push_back(member.sample_ids[r]);
                continue;
            }
            if (covered[it->second])
                throw JoinError("duplicate sample id '" + member.sample_ids[r] + "' in member '" + member.model_tag +
                                "'");
            covered[it->second] = true;
            rows[m][it->second] = r;
        }
        for (std::size_t i = 0; i < base.size(); ++i)
            if (!covered[i]) differing.push_back(base.sample_ids[i]);
        if (!differing.empty()) {
            std::string list;
            for (std::size_t i = 0; i < differing.size() && i < 20; ++i) list += (i ? ", " : "") + differing[i];
            if (differing.size() > 20) list += ", ...";
            throw JoinError("member " + std::to_string(m) + " ('" + member.model_tag +
                            "') covers a different sample set; differing ids: " + list);
        }
    }
    return rows;
}

PredictionSet weighted_power_sum(std::span<const PredictionSet> members,
                                 const std::vector<std::vector<std::size_t>>& rows, std::span<const double> weights,
                                 double power) {
    PredictionSet out;
    out.model_tag = "ensemble";
    out.sample_ids = members.front().sample_ids;
    out.scores.assign(out.sample_ids.size(), {});
    for (std::size_t m = 0; m < members.size(); ++m) {
        if (weights[m] == 0.0) continue;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const auto& p = members[m].scores[rows[m][i]];
            for (std::size_t c = 0; c < kNumClasses; ++c) out.scores[i][c] += std::pow(p[c], power) * weights[m];
        }
    }
    return out;
}

} // namespace

PredictionSet combine(std::span<const PredictionSet> members, const EnsembleConfig& config) {
    config.validate(members.size());
    return weighted_power_sum(members, join(members), config.weights, config.power);
}

GridSearchResult grid_search(std::span<const PredictionSet> members,
                             std::span<const std::vector<double>> weight_grid, std::span<const double> power_grid,
                             std::span<const int> labels) {
    if (members.empty()) throw ContractError("grid search needs at least one member");
    if (weight_grid.empty() || power_grid.empty()) throw ContractError("grid search over an empty grid");
    if (labels.size() != members.front().size())
        throw ContractError("grid search: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(members.front().size()) + " samples");
    for (const auto& w : weight_grid) {
        if (w.size() != members.size())
            throw ContractError("grid weight vector has " + std::to_string(w.size()) + " entries for " +
                                std::to_string(members.size()) + " members");
        if (std::any_of(w.begin(), w.end(), [](double v) { return !(v >= 0.0) || !std::isfinite(v); }) ||
            std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; }))
            throw ContractError("grid weights must be non-negative and not all zero");
    }
    for (double n : power_grid)
        if (!(n > 0.0) || !std::isfinite(n)) throw ContractError("grid powers must be positive");

    const auto rows = join(members);
    GridSearchResult result;
    bool first = true;
    for (const auto& w : weight_grid) {
        for (double n : power_grid) {
            const auto combined = weighted_power_sum(members, rows, w, n);
            const double score = evaluate(argmax_predict(combined.scores), labels).weighted_f1;
            result.table.push_back({w, n, score});
            if (first || score > result.best_weighted_f1) {
                result.best = {w, n};
                result.best_weighted_f1 = score;
                first = false;
            }
        }
    }
    return result;
}

std::vector<std::vector<double>> cartesian_weight_grid(std::span<const double> values, std::size_t k) {
    std::vector<std::vector<double>> out;
    if (values.empty() || k == 0) return out;
    std::vector<std::size_t> idx(k, 0);
    while (true) {
        std::vector<double> w(k);
        for (std::size_t i = 0; i < k; ++i) w[i] = values[idx[i]];
        if (std::any_of(w.begin(), w.end(), [](double v) { return v != 0.0; })) out.push_back(std::move(w));
        std::size_t pos = k;
        while (pos > 0 && ++idx[pos - 1] == values.size()) idx[--pos] = 0;
        if (pos == 0) break;
    }
    return out;
}

} // namespace precofact
