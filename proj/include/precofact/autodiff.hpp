#pragma once

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "precofact/tensor.hpp"

namespace precofact {

enum class Activation { relu, mish };
enum class Mode { train, eval };

using Rng = std::mt19937_64;

// true = real token, false = padding. An empty mask means "all valid".
using Mask = std::vector<bool>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node>> parents;
    // Pushes this node's grad into its parents' grads.
    std::function<void(Node&)> backward;
    bool requires_grad = false;
    bool leaf = true;
};

// Handle to a graph node. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value);
    static Var parameter(Tensor<T> value);

    explicit operator bool() const noexcept { return static_cast<bool>(node_); }

    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    // Direct access for optimizers and finite-difference probes.
    Tensor<T>& mutable_value() { return node_->value; }
    Tensor<T>& mutable_grad() { return node_->grad; }

    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.fill(T(0)); }

    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Populates grads of every reachable node. Intermediate grads are reset on
// each call; leaf grads (parameters) accumulate until zero_grad().
template <typename T>
void backward(const Var<T>& loss);

namespace ad {

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
// x [m x n] + bias [n] broadcast over rows.
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T factor);
template <typename T> Var<T> sum(const Var<T>& x);

// Row-wise softmax over unmasked columns; masked columns come out as 0.
template <typename T> Var<T> softmax_rows(const Var<T>& x, const Mask& key_mask = {});

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);

template <typename T> Var<T> activation(const Var<T>& x, Activation kind);

// Inverted dropout; identity in eval mode or at rate 0. rng may be null then.
template <typename T> Var<T> dropout(const Var<T>& x, double rate, Mode mode, Rng* rng);

template <typename T> Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t width);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);

// Zeroes rows whose mask entry is false.
template <typename T> Var<T> mask_rows(const Var<T>& x, const Mask& mask);

// Mean over valid rows, [1 x n].
template <typename T> Var<T> masked_mean_rows(const Var<T>& x, const Mask& mask = {});

// Mean over the batch of -log(max(p[label], 1e-12)).
template <typename T> Var<T> cross_entropy(const Var<T>& probabilities, std::span<const int> labels);

} // namespace ad

// Scalar helpers shared with the oracle tests.
double softplus(double x);
double mish(double x);

inline constexpr double kProbabilityFloor = 1e-12;

} // namespace precofact
