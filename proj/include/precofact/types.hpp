#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "precofact/tensor.hpp"

namespace precofact {

inline constexpr std::size_t kNumClasses = 5;

// Class ids 0-4 in this order.
inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "Support_Multimodal", "Support_Text", "Insufficient_Multimodal", "Insufficient_Text", "Refute"};

// Order of the four sources in files and in every per-source array.
enum class Source : std::size_t { claim_image = 0, claim_text = 1, doc_image = 2, doc_text = 3 };

inline constexpr std::size_t kNumSources = 4;
inline constexpr std::array<std::string_view, kNumSources> kSourceNames = {"claim_image", "claim_text",
                                                                           "doc_image", "doc_text"};

constexpr bool is_text(Source s) { return s == Source::claim_text || s == Source::doc_text; }
constexpr std::size_t index(Source s) { return static_cast<std::size_t>(s); }

inline constexpr std::size_t kMaxTextTokens = 512;

// One claim/document pair as token-level embeddings from the frozen encoders.
struct SampleEmbeddings {
    std::string id;
    std::array<Tensor<float>, kNumSources> sources; // each [tokens x width]
    std::optional<int> label;

    const Tensor<float>& operator[](Source s) const { return sources[index(s)]; }
    Tensor<float>& operator[](Source s) { return sources[index(s)]; }
};

// Per-sample class scores from one model (or an ensemble, whose rows are
// not renormalized).
struct PredictionSet {
    std::string model_tag;
    std::vector<std::string> sample_ids;
    std::vector<std::array<double, kNumClasses>> scores;

    std::size_t size() const { return sample_ids.size(); }
};

} // namespace precofact
