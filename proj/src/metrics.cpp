#include "precofact/metrics.hpp"

#include <iomanip>
#include <ostream>
#include <string>

#include "precofact/errors.hpp"

namespace precofact {

EvalReport evaluate(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size())
        throw ContractError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    if (labels.empty()) throw ContractError("evaluate: no samples");
    auto check = [](int c, const char* what) {
        if (c < 0 || c >= static_cast<int>(kNumClasses))
            throw ContractError(std::string("evaluate: ") + what + " class id " + std::to_string(c) +
                                " is outside 0-4");
    };

    EvalReport r;
    r.samples = labels.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        check(labels[i], "label");
        check(predictions[i], "predicted");
        ++r.confusion[labels[i]][predictions[i]];
        correct += labels[i] == predictions[i] ? 1 : 0;
    }

    double weighted = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t predicted = 0;
        for (std::size_t t = 0; t < kNumClasses; ++t) {
            r.support[c] += r.confusion[c][t];
            predicted += r.confusion[t][c];
        }
        const double tp = static_cast<double>(r.confusion[c][c]);
        r.precision[c] = predicted ? tp / static_cast<double>(predicted) : 0.0;
        r.recall[c] = r.support[c] ? tp / static_cast<double>(r.support[c]) : 0.0;
        // 2PR/(P+R) rewritten over integer counts: 2TP / (predicted + support).
        const std::size_t denom = predicted + r.support[c];
        r.per_class_f1[c] = denom ? 2.0 * tp / static_cast<double>(denom) : 0.0;
        weighted += static_cast<double>(r.support[c]) * r.per_class_f1[c];
    }
    r.weighted_f1 = weighted / static_cast<double>(r.samples);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
    return r;
}

std::vector<int> argmax_predict(std::span<const std::array<double, kNumClasses>> scores) {
    std::vector<int> out;
    out.reserve(scores.size());
    for (const auto& row : scores) {
        int best = 0;
        for (std::size_t c = 1; c < kNumClasses; ++c)
            if (row[c] > row[best]) best = static_cast<int>(c);
        out.push_back(best);
    }
    return out;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::array();
    for (std::size_t c = 0; c < kNumClasses; ++c)
        per_class.push_back({{"class", kClassNames[c]},
                             {"precision", r.precision[c]},
                             {"recall", r.recall[c]},
                             {"f1", r.per_class_f1[c]},
                             {"support", r.support[c]}});
    return {{"samples", r.samples},
            {"weighted_f1", r.weighted_f1},
            {"accuracy", r.accuracy},
            {"per_class", per_class},
            {"confusion", r.confusion}};
}

void print_report(std::ostream& os, const EvalReport& r) {
    const auto flags = os.flags();
    os << std::fixed << std::setprecision(4);
    os << "samples      " << r.samples << '\n';
    os << "weighted_f1  " << r.weighted_f1 << '\n';
    os << "accuracy     " << r.accuracy << '\n';
    os << std::left << std::setw(26) << "class" << std::right << std::setw(10) << "precision" << std::setw(10)
       << "recall" << std::setw(10) << "f1" << std::setw(10) << "support" << '\n';
    for (std::size_t c = 0; c < kNumClasses; ++c)
        os << std::left << std::setw(26) << kClassNames[c] << std::right << std::setw(10) << r.precision[c]
           << std::setw(10) << r.recall[c] << std::setw(10) << r.per_class_f1[c] << std::setw(10) << r.support[c]
           << '\n';
    os << "confusion (rows = true, columns = predicted)\n";
    os << std::setw(8) << "";
    for (std::size_t c = 0; c < kNumClasses; ++c) os << std::setw(8) << ("p" + std::to_string(c));
    os << '\n';
    for (std::size_t t = 0; t < kNumClasses; ++t) {
        os << std::setw(8) << ("t" + std::to_string(t));
        for (std::size_t p = 0; p < kNumClasses; ++p) os << std::setw(8) << r.confusion[t][p];
        os << '\n';
    }
    os.flags(flags);
}

} // namespace precofact
