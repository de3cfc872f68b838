#pragma once

#include <cstddef>
#include <utility>

#include "precofact/autodiff.hpp"
#include "precofact/layers.hpp"

namespace precofact {

// A token matrix [n x d] and its validity mask. Padded rows are zero.
template <typename T>
struct TokenSequence {
    Var<T> tokens;
    Mask mask; // empty = every token valid

    std::size_t length() const { return tokens.value().rows(); }
    std::size_t width() const { return tokens.value().cols(); }
    std::size_t valid_count() const;

    static TokenSequence from(Tensor<T> tokens, Mask mask = {});
};

// Weights owned by one side of a co-attention block. The side's own
// sequence is projected through query/key/value; its output is produced by
// `output` (W^O), a position-wise FFN and two LayerNorms.
template <typename T>
struct CoAttentionSide {
    Var<T> query;
    Var<T> key;
    Var<T> value;
    Var<T> output;
    Affine<T> ffn_in;
    Affine<T> ffn_out;
    Var<T> norm1_gain, norm1_bias;
    Var<T> norm2_gain, norm2_bias;
};

template <typename T>
struct CoAttentionParams {
    CoAttentionSide<T> a;
    CoAttentionSide<T> b;

    CoAttentionParams swapped() const { return {b, a}; }
    std::size_t width() const { return a.query.value().rows(); }
};

struct CoAttentionOptions {
    std::size_t heads = 4;
    double dropout = 0.1;
    Activation activation = Activation::relu;
    double layer_norm_eps = 1e-5;
};

// The four projections one attention direction needs: queries come from one
// sequence, keys/values from the other.
template <typename T>
struct AttentionWeights {
    Var<T> query;
    Var<T> key;
    Var<T> value;
    Var<T> output;
};

template <typename T>
CoAttentionParams<T> make_coattention_params(std::size_t d, std::size_t d_ff, Rng& rng);

// softmax(Q K^T / sqrt(d_h)) V per head, heads concatenated, then W^O.
// Padded keys get zero weight. Result is [n_q x d]; padded query rows are
// not zeroed here.
template <typename T>
Var<T> multi_head_cross_attention(const TokenSequence<T>& queries, const TokenSequence<T>& keys_values,
                                  const AttentionWeights<T>& weights, std::size_t heads);

// Bidirectional block:
//   H~_A = Norm(E_A + MultiHead(Q_A, K_B, V_B)),  H_A = Norm(H~_A + FFN(H~_A))
// and symmetrically for B. Output masks equal input masks.
template <typename T>
std::pair<TokenSequence<T>, TokenSequence<T>> co_attend(const TokenSequence<T>& e_a, const TokenSequence<T>& e_b,
                                                        const CoAttentionParams<T>& params,
                                                        const CoAttentionOptions& options, Mode mode, Rng* rng);

} // namespace precofact
