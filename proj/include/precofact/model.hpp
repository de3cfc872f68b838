#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "precofact/coattention.hpp"
#include "precofact/types.hpp"

namespace precofact {

enum class Variant {
    full,               // all four co-attention pairings
    no_coatt,           // classifier sees the four embeddings only
    same_modality_only, // image-image and text-text pairings only
};

std::string_view to_string(Variant v);
std::string_view to_string(Activation a);
Variant parse_variant(std::string_view s);
Activation parse_activation(std::string_view s);

struct ModelConfig {
    std::size_t input_width_text = 768;
    std::size_t input_width_image = 768;
    std::size_t d = 512;
    std::size_t heads = 4;
    std::size_t d_ff = 1024;
    std::size_t d_m1 = 256;
    std::size_t classes = kNumClasses;
    double dropout = 0.1;
    Activation activation = Activation::relu;
    Variant variant = Variant::full;
    // Biases on the embedding and classifier affine maps. Off reproduces the
    // bias-free classifier equations literally.
    bool affine_bias = true;
    double layer_norm_eps = 1e-5;

    void validate() const;
    std::size_t input_width(Source s) const { return is_text(s) ? input_width_text : input_width_image; }
    // Number of co-attention pairings the variant runs.
    std::size_t active_pairings() const;
    // Width of the classifier input Z.
    std::size_t classifier_input_width() const;
    CoAttentionOptions coattention_options() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

// Co-attention pairings in concatenation order. The first two are the
// same-modality pairings.
struct Pairing {
    Source a;
    Source b;
    std::string_view name;
};
inline constexpr std::array<Pairing, 4> kPairings = {{
    {Source::claim_image, Source::doc_image, "ci_di"},
    {Source::claim_text, Source::doc_text, "ct_dt"},
    {Source::claim_image, Source::doc_text, "ci_dt"},
    {Source::claim_text, Source::doc_image, "ct_di"},
}};

template <typename T>
struct NamedParameter {
    std::string name;
    Var<T> var;
};

// Every learnable weight. Move-only: Vars share nodes, so an accidental copy
// would alias; use clone() for an independent copy.
template <typename T>
class ModelParams {
public:
    ModelParams() = default;
    ModelParams(const ModelParams&) = delete;
    ModelParams& operator=(const ModelParams&) = delete;
    ModelParams(ModelParams&&) noexcept = default;
    ModelParams& operator=(ModelParams&&) noexcept = default;

    std::array<Affine<T>, kNumSources> embeddings;
    // All four pairings are allocated for every variant so checkpoints share
    // one layout; the variant decides which ones run.
    std::array<CoAttentionParams<T>, 4> pairings;
    Affine<T> classifier_z;
    Affine<T> classifier_m1;
    Affine<T> classifier_m2;

    // Stable order; this is the checkpoint record order.
    std::vector<NamedParameter<T>> named() const;
    std::size_t parameter_count() const;
    ModelParams clone() const;
    void zero_grad();
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Raw encoder outputs as (optionally padded) sequences, cast to T.
template <typename T>
std::array<TokenSequence<T>, kNumSources> to_sequences(const SampleEmbeddings& sample, const ModelConfig& config);

// E_X = act(X W_X + b_X) per token; padded rows stay zero.
template <typename T>
std::array<TokenSequence<T>, kNumSources> embed_sources(const std::array<TokenSequence<T>, kNumSources>& raw,
                                                        const ModelParams<T>& params, const ModelConfig& config);

// Runs the variant's pairings; returns (H_A, H_B) per pairing in kPairings
// order: 8, 4 or 0 sequences.
template <typename T>
std::vector<TokenSequence<T>> fuse(const std::array<TokenSequence<T>, kNumSources>& embedded,
                                   const ModelParams<T>& params, const ModelConfig& config, Mode mode, Rng* rng);

// Mean over valid tokens, [1 x d].
template <typename T>
Var<T> aggregate(const TokenSequence<T>& seq);

// Z = [fused aggregates..., E_CI, E_CT, E_DI, E_DT];
// softmax(act(act(Z W^Z) W^M1) W^M2), [1 x 5].
template <typename T>
Var<T> classify(std::span<const Var<T>> aggregates, const ModelParams<T>& params, const ModelConfig& config,
                Mode mode, Rng* rng);

template <typename T>
Var<T> forward_sequences(const std::array<TokenSequence<T>, kNumSources>& raw, const ModelParams<T>& params,
                         const ModelConfig& config, Mode mode, Rng* rng);

template <typename T>
Var<T> forward(const SampleEmbeddings& sample, const ModelParams<T>& params, const ModelConfig& config, Mode mode,
               Rng* rng);

// Eval-mode probabilities for every sample, computed on up to `threads`
// workers. Row order follows `samples`.
template <typename T>
PredictionSet predict(std::span<const SampleEmbeddings> samples, const ModelParams<T>& params,
                      const ModelConfig& config, std::string model_tag, std::size_t threads = 1);

// Validates a sample against the config: widths, non-empty sources, the
// text token ceiling, and the label range.
void validate_sample(const SampleEmbeddings& sample, const ModelConfig& config);

} // namespace precofact
