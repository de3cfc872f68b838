#include "precofact/coattention.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "precofact/errors.hpp"

namespace precofact {

template <typename T>
std::size_t TokenSequence<T>::valid_count() const {
    if (mask.empty()) return length();
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

template <typename T>
TokenSequence<T> TokenSequence<T>::from(Tensor<T> tokens, Mask mask) {
    return {Var<T>::constant(std::move(tokens)), std::move(mask)};
}

namespace {

template <typename T>
CoAttentionSide<T> make_side(std::size_t d, std::size_t d_ff, Rng& rng) {
    CoAttentionSide<T> side;
    side.query = Var<T>::parameter(xavier_uniform<T>(d, d, rng));
    side.key = Var<T>::parameter(xavier_uniform<T>(d, d, rng));
    side.value = Var<T>::parameter(xavier_uniform<T>(d, d, rng));
    side.output = Var<T>::parameter(xavier_uniform<T>(d, d, rng));
    side.ffn_in = make_affine<T>(d, d_ff, true, rng);
    side.ffn_out = make_affine<T>(d_ff, d, true, rng);
    side.norm1_gain = Var<T>::parameter(Tensor<T>({d}, T(1)));
    side.norm1_bias = Var<T>::parameter(Tensor<T>({d}));
    side.norm2_gain = Var<T>::parameter(Tensor<T>({d}, T(1)));
    side.norm2_bias = Var<T>::parameter(Tensor<T>({d}));
    return side;
}

template <typename T>
void check_sequence(const char* which, const TokenSequence<T>& seq, std::size_t d) {
    if (!seq.tokens) throw InvalidInputError(std::string(which) + " sequence is empty");
    if (seq.tokens.value().rank() != 2 || seq.width() != d)
        throw DimensionError(std::string(which) + " sequence has shape " + shape_string(seq.tokens.shape()) +
                             ", expected width " + std::to_string(d));
    if (!seq.mask.empty() && seq.mask.size() != seq.length())
        throw DimensionError(std::string(which) + " mask length " + std::to_string(seq.mask.size()) +
                             " does not match " + std::to_string(seq.length()) + " tokens");
    if (seq.valid_count() == 0) throw InvalidInputError(std::string(which) + " sequence has no valid tokens");
}

template <typename T>
TokenSequence<T> attend_side(const TokenSequence<T>& own, const TokenSequence<T>& other,
                             const CoAttentionSide<T>& own_params, const CoAttentionSide<T>& other_params,
                             const CoAttentionOptions& options, Mode mode, Rng* rng) {
    const AttentionWeights<T> weights{own_params.query, other_params.key, other_params.value, own_params.output};
    const T eps = static_cast<T>(options.layer_norm_eps);

    auto attended = ad::dropout(multi_head_cross_attention(own, other, weights, options.heads), options.dropout,
                                mode, rng);
    auto h_tilde = ad::layer_norm(ad::add(own.tokens, attended), own_params.norm1_gain, own_params.norm1_bias, eps);

    auto inner = ad::activation(apply_affine(h_tilde, own_params.ffn_in), options.activation);
    auto ffn = ad::dropout(apply_affine(inner, own_params.ffn_out), options.dropout, mode, rng);
    auto h = ad::layer_norm(ad::add(h_tilde, ffn), own_params.norm2_gain, own_params.norm2_bias, eps);
    return {ad::mask_rows(h, own.mask), own.mask};
}

} // namespace

template <typename T>
CoAttentionParams<T> make_coattention_params(std::size_t d, std::size_t d_ff, Rng& rng) {
    CoAttentionParams<T> params;
    params.a = make_side<T>(d, d_ff, rng);
    params.b = make_side<T>(d, d_ff, rng);
    return params;
}

template <typename T>
Var<T> multi_head_cross_attention(const TokenSequence<T>& queries, const TokenSequence<T>& keys_values,
                                  const AttentionWeights<T>& weights, std::size_t heads) {
    const std::size_t d = weights.query.value().rows();
    if (heads == 0 || d % heads != 0)
        throw DimensionError("head count " + std::to_string(heads) + " does not divide width " + std::to_string(d));
    check_sequence("query", queries, d);
    check_sequence("key/value", keys_values, d);

    auto q = ad::matmul(queries.tokens, weights.query);
    auto k = ad::matmul(keys_values.tokens, weights.key);
    auto v = ad::matmul(keys_values.tokens, weights.value);

    const std::size_t head_width = d / heads;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_width)));
    std::vector<Var<T>> per_head;
    per_head.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = heads == 1 ? q : ad::slice_cols(q, h * head_width, head_width);
        auto kh = heads == 1 ? k : ad::slice_cols(k, h * head_width, head_width);
        auto vh = heads == 1 ? v : ad::slice_cols(v, h * head_width, head_width);
        auto logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        auto attention = ad::softmax_rows(logits, keys_values.mask);
        per_head.push_back(ad::matmul(attention, vh));
    }
    auto joined = heads == 1 ? per_head.front() : ad::concat_cols<T>(per_head);
    return ad::matmul(joined, weights.output);
}

template <typename T>
std::pair<TokenSequence<T>, TokenSequence<T>> co_attend(const TokenSequence<T>& e_a, const TokenSequence<T>& e_b,
                                                        const CoAttentionParams<T>& params,
                                                        const CoAttentionOptions& options, Mode mode, Rng* rng) {
    const std::size_t d = params.width();
    check_sequence("A-side", e_a, d);
    check_sequence("B-side", e_b, d);
    auto h_a = attend_side(e_a, e_b, params.a, params.b, options, mode, rng);
    auto h_b = attend_side(e_b, e_a, params.b, params.a, options, mode, rng);
    return {std::move(h_a), std::move(h_b)};
}

template struct TokenSequence<float>;
template struct TokenSequence<double>;
template CoAttentionParams<float> make_coattention_params<float>(std::size_t, std::size_t, Rng&);
template CoAttentionParams<double> make_coattention_params<double>(std::size_t, std::size_t, Rng&);
template Var<float> multi_head_cross_attention(const TokenSequence<float>&, const TokenSequence<float>&,
                                               const AttentionWeights<float>&, std::size_t);
template Var<double> multi_head_cross_attention(const TokenSequence<double>&, const TokenSequence<double>&,
                                                const AttentionWeights<double>&, std::size_t);
template std::pair<TokenSequence<float>, TokenSequence<float>>
co_attend(const TokenSequence<float>&, const TokenSequence<float>&, const CoAttentionParams<float>&,
          const CoAttentionOptions&, Mode, Rng*);
template std::pair<TokenSequence<double>, TokenSequence<double>>
co_attend(const TokenSequence<double>&, const TokenSequence<double>&, const CoAttentionParams<double>&,
          const CoAttentionOptions&, Mode, Rng*);

} // namespace precofact
