#include "precofact/layers.hpp"

#include <cmath>

namespace precofact {

template <typename T>
Var<T> apply_affine(const Var<T>& x, const Affine<T>& layer) {
    auto y = ad::matmul(x, layer.weight);
    return layer.bias ? ad::add_bias(y, layer.bias) : y;
}

template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor<T> w({fan_in, fan_out});
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
    return w;
}

template <typename T>
Affine<T> make_affine(std::size_t fan_in, std::size_t fan_out, bool with_bias, Rng& rng) {
    Affine<T> layer;
    layer.weight = Var<T>::parameter(xavier_uniform<T>(fan_in, fan_out, rng));
    if (with_bias) layer.bias = Var<T>::parameter(Tensor<T>({fan_out}));
    return layer;
}

template Var<float> apply_affine(const Var<float>&, const Affine<float>&);
template Var<double> apply_affine(const Var<double>&, const Affine<double>&);
template Tensor<float> xavier_uniform<float>(std::size_t, std::size_t, Rng&);
template Tensor<double> xavier_uniform<double>(std::size_t, std::size_t, Rng&);
template Affine<float> make_affine<float>(std::size_t, std::size_t, bool, Rng&);
template Affine<double> make_affine<double>(std::size_t, std::size_t, bool, Rng&);

} // namespace precofact
