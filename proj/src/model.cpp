#include "precofact/model.hpp"

#include <algorithm>
#include <set>
#include <thread>

#include "precofact/errors.hpp"

namespace precofact {

std::string_view to_string(Variant v) {
    switch (v) {
    case Variant::full: return "full";
    case Variant::no_coatt: return "no_coatt";
    case Variant::same_modality_only: return "same_modality_only";
    }
    return "?";
}

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "mish"; }

Variant parse_variant(std::string_view s) {
    if (s == "full") return Variant::full;
    if (s == "no_coatt") return Variant::no_coatt;
    if (s == "same_modality_only") return Variant::same_modality_only;
    throw ConfigError("unknown variant '" + std::string(s) + "' (expected full, no_coatt, same_modality_only)");
}

Activation parse_activation(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "mish") return Activation::mish;
    throw ConfigError("unknown activation '" + std::string(s) + "' (expected relu, mish)");
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(input_width_text, "input_width_text");
    positive(input_width_image, "input_width_image");
    positive(d, "d");
    positive(heads, "heads");
    positive(d_ff, "d_ff");
    positive(d_m1, "d_m1");
    if (d % heads != 0)
        throw ConfigError("model.d (" + std::to_string(d) + ") is not divisible by model.heads (" +
                          std::to_string(heads) + ")");
    if (classes != kNumClasses) throw ConfigError("model.classes must be 5");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
    if (!(layer_norm_eps > 0.0)) throw ConfigError("model.layer_norm_eps must be positive");
}

std::size_t ModelConfig::active_pairings() const {
    switch (variant) {
    case Variant::full: return 4;
    case Variant::same_modality_only: return 2;
    case Variant::no_coatt: return 0;
    }
    return 0;
}

std::size_t ModelConfig::classifier_input_width() const { return (2 * active_pairings() + kNumSources) * d; }

CoAttentionOptions ModelConfig::coattention_options() const {
    return {.heads = heads, .dropout = dropout, .activation = activation, .layer_norm_eps = layer_norm_eps};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"input_width_text", c.input_width_text},
                       {"input_width_image", c.input_width_image},
                       {"d", c.d},
                       {"heads", c.heads},
                       {"d_ff", c.d_ff},
                       {"d_m1", c.d_m1},
                       {"classes", c.classes},
                       {"dropout", c.dropout},
                       {"activation", to_string(c.activation)},
                       {"variant", to_string(c.variant)},
                       {"affine_bias", c.affine_bias},
                       {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (!j.is_object()) throw ConfigError("model config must be an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "input_width_text") c.input_width_text = value.get<std::size_t>();
            else if (key == "input_width_image") c.input_width_image = value.get<std::size_t>();
            else if (key == "d") c.d = value.get<std::size_t>();
            else if (key == "heads") c.heads = value.get<std::size_t>();
            else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
            else if (key == "d_m1") c.d_m1 = value.get<std::size_t>();
            else if (key == "classes") c.classes = value.get<std::size_t>();
            else if (key == "dropout") c.dropout = value.get<double>();
            else if (key == "activation") c.activation = parse_activation(value.get<std::string>());
            else if (key == "variant") c.variant = parse_variant(value.get<std::string>());
            else if (key == "affine_bias") c.affine_bias = value.get<bool>();
            else if (key == "layer_norm_eps") c.layer_norm_eps = value.get<double>();
            else throw ConfigError("unknown key 'model." + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for 'model." + key + "': " + e.what());
        }
    }
}

namespace {

template <typename T, typename Params, typename F>
void visit_params(Params& p, F&& fn) {
    auto affine = [&](const std::string& prefix, auto& layer) {
        fn(prefix + ".weight", layer.weight);
        if (layer.bias) fn(prefix + ".bias", layer.bias);
    };
    for (std::size_t s = 0; s < kNumSources; ++s)
        affine("emb." + std::string(kSourceNames[s]), p.embeddings[s]);
    for (std::size_t k = 0; k < kPairings.size(); ++k) {
        const std::string base = "coatt." + std::string(kPairings[k].name);
        for (auto [tag, side] : {std::pair{"a", &p.pairings[k].a}, std::pair{"b", &p.pairings[k].b}}) {
            const std::string prefix = base + "." + tag;
            fn(prefix + ".query", side->query);
            fn(prefix + ".key", side->key);
            fn(prefix + ".value", side->value);
            fn(prefix + ".output", side->output);
            affine(prefix + ".ffn_in", side->ffn_in);
            affine(prefix + ".ffn_out", side->ffn_out);
            fn(prefix + ".norm1.gain", side->norm1_gain);
            fn(prefix + ".norm1.bias", side->norm1_bias);
            fn(prefix + ".norm2.gain", side->norm2_gain);
            fn(prefix + ".norm2.bias", side->norm2_bias);
        }
    }
    affine("classifier.z", p.classifier_z);
    affine("classifier.m1", p.classifier_m1);
    affine("classifier.m2", p.classifier_m2);
}

} // namespace

template <typename T>
std::vector<NamedParameter<T>> ModelParams<T>::named() const {
    std::vector<NamedParameter<T>> out;
    visit_params<T>(*this, [&](std::string name, const Var<T>& v) { out.push_back({std::move(name), v}); });
    return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    visit_params<T>(*this, [&](const std::string&, const Var<T>& v) { n += v.value().size(); });
    return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
    ModelParams out;
    out.embeddings = embeddings;
    out.pairings = pairings;
    out.classifier_z = classifier_z;
    out.classifier_m1 = classifier_m1;
    out.classifier_m2 = classifier_m2;
    visit_params<T>(out, [](const std::string&, Var<T>& v) { v = Var<T>::parameter(v.value()); });
    return out;
}

template <typename T>
void ModelParams<T>::zero_grad() {
    visit_params<T>(*this, [](const std::string&, Var<T>& v) { v.zero_grad(); });
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ModelParams<T> p;
    for (std::size_t s = 0; s < kNumSources; ++s)
        p.embeddings[s] = make_affine<T>(config.input_width(static_cast<Source>(s)), config.d, config.affine_bias, rng);
    for (auto& pairing : p.pairings) pairing = make_coattention_params<T>(config.d, config.d_ff, rng);
    p.classifier_z = make_affine<T>(config.classifier_input_width(), config.d, config.affine_bias, rng);
    p.classifier_m1 = make_affine<T>(config.d, config.d_m1, config.affine_bias, rng);
    p.classifier_m2 = make_affine<T>(config.d_m1, config.classes, config.affine_bias, rng);
    return p;
}

void validate_sample(const SampleEmbeddings& sample, const ModelConfig& config) {
    for (std::size_t s = 0; s < kNumSources; ++s) {
        const auto source = static_cast<Source>(s);
        const auto& t = sample[source];
        const std::string where = "sample '" + sample.id + "' " + std::string(kSourceNames[s]);
        if (t.empty() || t.rank() != 2) throw InvalidInputError(where + " has no tokens");
        if (t.cols() != config.input_width(source))
            throw DimensionError(where + " width " + std::to_string(t.cols()) + " does not match configured " +
                                 std::to_string(config.input_width(source)));
        if (is_text(source) && t.rows() > kMaxTextTokens)
            throw InvalidInputError(where + " has " + std::to_string(t.rows()) + " tokens (limit 512)");
    }
    if (sample.label && (*sample.label < 0 || *sample.label >= static_cast<int>(kNumClasses)))
        throw InvalidInputError("sample '" + sample.id + "' label " + std::to_string(*sample.label) +
                                " is outside 0-4");
}

template <typename T>
std::array<TokenSequence<T>, kNumSources> to_sequences(const SampleEmbeddings& sample, const ModelConfig& config) {
    validate_sample(sample, config);
    std::array<TokenSequence<T>, kNumSources> out;
    for (std::size_t s = 0; s < kNumSources; ++s) out[s] = TokenSequence<T>::from(sample.sources[s].template cast<T>());
    return out;
}

template <typename T>
std::array<TokenSequence<T>, kNumSources> embed_sources(const std::array<TokenSequence<T>, kNumSources>& raw,
                                                        const ModelParams<T>& params, const ModelConfig& config) {
    std::array<TokenSequence<T>, kNumSources> out;
    for (std::size_t s = 0; s < kNumSources; ++s) {
        const auto& in = raw[s];
        if (!in.tokens || in.valid_count() == 0)
            throw InvalidInputError(std::string(kSourceNames[s]) + " has no valid tokens");
        if (in.width() != config.input_width(static_cast<Source>(s)))
            throw DimensionError(std::string(kSourceNames[s]) + " width " + std::to_string(in.width()) +
                                 " does not match configured " +
                                 std::to_string(config.input_width(static_cast<Source>(s))));
        auto e = ad::activation(apply_affine(in.tokens, params.embeddings[s]), config.activation);
        out[s] = {ad::mask_rows(e, in.mask), in.mask};
    }
    return out;
}

template <typename T>
std::vector<TokenSequence<T>> fuse(const std::array<TokenSequence<T>, kNumSources>& embedded,
                                   const ModelParams<T>& params, const ModelConfig& config, Mode mode, Rng* rng) {
    std::vector<TokenSequence<T>> out;
    const auto options = config.coattention_options();
    for (std::size_t k = 0; k < config.active_pairings(); ++k) {
        const auto& pairing = kPairings[k];
        auto [h_a, h_b] =
            co_attend(embedded[index(pairing.a)], embedded[index(pairing.b)], params.pairings[k], options, mode, rng);
        out.push_back(std::move(h_a));
        out.push_back(std::move(h_b));
    }
    return out;
}

template <typename T>
Var<T> aggregate(const TokenSequence<T>& seq) {
    return ad::masked_mean_rows(seq.tokens, seq.mask);
}

template <typename T>
Var<T> classify(std::span<const Var<T>> aggregates, const ModelParams<T>& params, const ModelConfig& config,
                Mode mode, Rng* rng) {
    auto z = ad::concat_cols(aggregates);
    if (z.value().cols() != config.classifier_input_width())
        throw DimensionError("classifier input width " + std::to_string(z.value().cols()) + ", expected " +
                             std::to_string(config.classifier_input_width()) + " for variant " +
                             std::string(to_string(config.variant)));
    auto m1 = ad::dropout(ad::activation(apply_affine(z, params.classifier_z), config.activation), config.dropout,
                          mode, rng);
    auto m2 = ad::dropout(ad::activation(apply_affine(m1, params.classifier_m1), config.activation), config.dropout,
                          mode, rng);
    return ad::softmax_rows(apply_affine(m2, params.classifier_m2));
}

template <typename T>
Var<T> forward_sequences(const std::array<TokenSequence<T>, kNumSources>& raw, const ModelParams<T>& params,
                         const ModelConfig& config, Mode mode, Rng* rng) {
    auto embedded = embed_sources(raw, params, config);
    auto fused = fuse(embedded, params, config, mode, rng);
    std::vector<Var<T>> pooled;
    pooled.reserve(fused.size() + kNumSources);
    for (const auto& seq : fused) pooled.push_back(aggregate(seq));
    for (const auto& seq : embedded) pooled.push_back(aggregate(seq));
    return classify<T>(pooled, params, config, mode, rng);
}

template <typename T>
Var<T> forward(const SampleEmbeddings& sample, const ModelParams<T>& params, const ModelConfig& config, Mode mode,
               Rng* rng) {
    return forward_sequences(to_sequences<T>(sample, config), params, config, mode, rng);
}

template <typename T>
PredictionSet predict(std::span<const SampleEmbeddings> samples, const ModelParams<T>& params,
                      const ModelConfig& config, std::string model_tag, std::size_t threads) {
    PredictionSet out;
    out.model_tag = std::move(model_tag);
    out.sample_ids.reserve(samples.size());
    for (const auto& s : samples) out.sample_ids.push_back(s.id);
    out.scores.resize(samples.size());

    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            auto probs = forward(samples[i], params, config, Mode::eval, nullptr);
            for (std::size_t c = 0; c < kNumClasses; ++c) out.scores[i][c] = static_cast<double>(probs.value()[c]);
        }
    };
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, samples.size()));
    if (threads == 1) {
        work(0, samples.size());
        return out;
    }
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (samples.size() + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            const std::size_t begin = std::min(samples.size(), t * chunk);
            const std::size_t end = std::min(samples.size(), begin + chunk);
            pool.emplace_back([&, t, begin, end] {
                try {
                    work(begin, end);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

#define PRECOFACT_INSTANTIATE(T)                                                                                  \
    template class ModelParams<T>;                                                                                \
    template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                                    \
    template std::array<TokenSequence<T>, kNumSources> to_sequences<T>(const SampleEmbeddings&,                   \
                                                                       const ModelConfig&);                       \
    template std::array<TokenSequence<T>, kNumSources> embed_sources<T>(                                          \
        const std::array<TokenSequence<T>, kNumSources>&, const ModelParams<T>&, const ModelConfig&);            \
    template std::vector<TokenSequence<T>> fuse<T>(const std::array<TokenSequence<T>, kNumSources>&,              \
                                                   const ModelParams<T>&, const ModelConfig&, Mode, Rng*);        \
    template Var<T> aggregate<T>(const TokenSequence<T>&);                                                        \
    template Var<T> classify<T>(std::span<const Var<T>>, const ModelParams<T>&, const ModelConfig&, Mode, Rng*); \
    template Var<T> forward_sequences<T>(const std::array<TokenSequence<T>, kNumSources>&, const ModelParams<T>&, \
                                         const ModelConfig&, Mode, Rng*);                                         \
    template Var<T> forward<T>(const SampleEmbeddings&, const ModelParams<T>&, const ModelConfig&, Mode, Rng*);   \
    template PredictionSet predict<T>(std::span<const SampleEmbeddings>, const ModelParams<T>&,                   \
                                      const ModelConfig&, std::string, std::size_t);

PRECOFACT_INSTANTIATE(float)
PRECOFACT_INSTANTIATE(double)

#undef PRECOFACT_INSTANTIATE

} // namespace precofact
