#pragma once

#include <cstddef>

#include "precofact/autodiff.hpp"

namespace precofact {

// x * weight (+ bias). bias may be empty (strict-equation mode).
template <typename T>
struct Affine {
    Var<T> weight;
    Var<T> bias;
};

template <typename T>
Var<T> apply_affine(const Var<T>& x, const Affine<T>& layer);

// Glorot/Xavier uniform in [-sqrt(6/(in+out)), sqrt(6/(in+out))].
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

template <typename T>
Affine<T> make_affine(std::size_t fan_in, std::size_t fan_out, bool with_bias, Rng& rng);

} // namespace precofact
