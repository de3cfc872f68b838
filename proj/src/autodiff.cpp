#include "precofact/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "precofact/errors.hpp"

namespace precofact {

double softplus(double x) {
    // log(1 + e^x) == x to within e^-20 past the cutoff.
    if (x > 20.0) return x;
    return std::log1p(std::exp(x));
}

double mish(double x) { return x * std::tanh(softplus(x)); }

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->grad = Tensor<T>(value.shape());
    node->value = std::move(value);
    return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
    auto v = constant(std::move(value));
    v.node_->requires_grad = true;
    return v;
}

template <typename T>
void backward(const Var<T>& loss) {
    if (!loss) throw ContractError("backward called on an empty variable");
    if (loss.value().size() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS; reversing it gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order)
        if (!node->leaf) node->grad.fill(T(0));
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

namespace ad {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<NodePtr<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    auto node = std::make_shared<Node<T>>();
    node->grad = Tensor<T>(value.shape());
    node->value = std::move(value);
    node->leaf = false;
    node->requires_grad =
        std::any_of(parents.begin(), parents.end(), [](const NodePtr<T>& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

void require_matrix(const char* op, const Shape& s) {
    if (s.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(s));
}

void require_same(const char* op, const Shape& a, const Shape& b) {
    if (a != b)
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a) + " vs " + shape_string(b));
}

void require_mask(const char* op, const Mask& mask, std::size_t n) {
    if (!mask.empty() && mask.size() != n)
        throw DimensionError(std::string(op) + " mask length " + std::to_string(mask.size()) +
                             " does not match " + std::to_string(n));
}

inline bool valid(const Mask& mask, std::size_t i) { return mask.empty() || mask[i]; }

// out[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x k] += g[m x n] * b[k x n]^T
template <typename T>
void gemm_nt(std::span<const T> g, std::span<const T> b, std::span<T> out, std::size_t m, std::size_t n,
             std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b.data() + p * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            out[i * k + p] += acc;
        }
    }
}

// out[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> g, std::span<T> out, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            T* orow = out.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
        }
    }
}

} // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_matrix("matmul", a.shape());
    require_matrix("matmul", b.shape());
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    Tensor<T> out({m, n});
    gemm_nn<T>(a.value().data(), b.value().data(), out.data(), m, k, n);
    return make_result<T>("matmul", std::move(out), {a.node(), b.node()}, [m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) gemm_nt<T>(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
        if (pb.requires_grad) gemm_tn<T>(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    require_matrix("transpose", a.shape());
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
    return make_result<T>("transpose", std::move(out), {a.node()}, [m, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pa.grad.at(i, j) += self.grad.at(j, i);
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same("add", a.shape(), b.shape());
    Tensor<T> out = a.value();
    auto bd = b.value().data();
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
    return make_result<T>("add", std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto g = p->grad.data();
            auto s = self.grad.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
        }
    });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
    require_matrix("add_bias", x.shape());
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (bias.value().size() != n)
        throw DimensionError("add_bias width mismatch: " + shape_string(x.shape()) + " vs bias " +
                             shape_string(bias.shape()));
    Tensor<T> out = x.value();
    auto bd = bias.value().data();
    for (std::size_t i = 0; i < m; ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < n; ++j) r[j] += bd[j];
    }
    return make_result<T>("add_bias", std::move(out), {x.node(), bias.node()}, [m, n](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
            auto g = px.grad.data();
            auto s = self.grad.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
        }
        if (pb.requires_grad) {
            auto g = pb.grad.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same("mul", a.shape(), b.shape());
    Tensor<T> out = a.value();
    auto bd = b.value().data();
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
    return make_result<T>("mul", std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        auto s = self.grad.data();
        if (pa.requires_grad) {
            auto g = pa.grad.data();
            auto v = pb.value.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i] * v[i];
        }
        if (pb.requires_grad) {
            auto g = pb.grad.data();
            auto v = pa.value.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i] * v[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    return make_result<T>("scale", std::move(out), {x.node()}, [factor](Node<T>& self) {
        auto g = self.parents[0]->grad.data();
        auto s = self.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i] * factor;
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T total = T(0);
    for (auto v : x.value().data()) total += v;
    return make_result<T>("sum", Tensor<T>({1}, std::vector<T>{total}), {x.node()}, [](Node<T>& self) {
        const T s = self.grad[0];
        for (auto& g : self.parents[0]->grad.data()) g += s;
    });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x, const Mask& key_mask) {
    require_matrix("softmax_rows", x.shape());
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    require_mask("softmax_rows", key_mask, n);
    if (!key_mask.empty() && std::none_of(key_mask.begin(), key_mask.end(), [](bool b) { return b; }))
        throw InvalidMaskError("softmax_rows: every column is masked");

    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        auto in = x.value().row(i);
        auto o = out.row(i);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (valid(key_mask, j)) mx = std::max(mx, in[j]);
        T z = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = valid(key_mask, j) ? std::exp(in[j] - mx) : T(0);
            z += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    return make_result<T>("softmax_rows", std::move(out), {x.node()}, [m, n](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i) {
            auto y = self.value.row(i);
            auto dy = self.grad.row(i);
            auto dx = px.grad.row(i);
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    require_matrix("layer_norm", x.shape());
    const std::size_t m = x.shape()[0], d = x.shape()[1];
    if (gain.value().size() != d || bias.value().size() != d)
        throw DimensionError("layer_norm gain/bias width mismatch: input " + shape_string(x.shape()) + ", gain " +
                             shape_string(gain.shape()) + ", bias " + shape_string(bias.shape()));
    if (!(eps > T(0))) throw ContractError("layer_norm eps must be positive");

    Tensor<T> out({m, d});
    auto xhat = std::make_shared<std::vector<T>>(m * d);
    auto rstd = std::make_shared<std::vector<T>>(m);
    auto g = gain.value().data();
    auto b = bias.value().data();
    for (std::size_t i = 0; i < m; ++i) {
        auto in = x.value().row(i);
        T mean = T(0);
        for (auto v : in) mean += v;
        mean /= T(d);
        T var = T(0);
        for (auto v : in) var += (v - mean) * (v - mean);
        var /= T(d);
        const T r = T(1) / std::sqrt(var + eps);
        (*rstd)[i] = r;
        auto o = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (in[j] - mean) * r;
            (*xhat)[i * d + j] = h;
            o[j] = h * g[j] + b[j];
        }
    }
    return make_result<T>(
        "layer_norm", std::move(out), {x.node(), gain.node(), bias.node()}, [m, d, xhat, rstd](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            auto g = pg.value.data();
            std::vector<T> dxhat(d);
            for (std::size_t i = 0; i < m; ++i) {
                auto dy = self.grad.row(i);
                const T* h = xhat->data() + i * d;
                if (pg.requires_grad)
                    for (std::size_t j = 0; j < d; ++j) pg.grad[j] += dy[j] * h[j];
                if (pb.requires_grad)
                    for (std::size_t j = 0; j < d; ++j) pb.grad[j] += dy[j];
                if (!px.requires_grad) continue;
                T mean_dxhat = T(0), mean_dxhat_h = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    dxhat[j] = dy[j] * g[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_h += dxhat[j] * h[j];
                }
                mean_dxhat /= T(d);
                mean_dxhat_h /= T(d);
                auto dx = px.grad.row(i);
                const T r = (*rstd)[i];
                for (std::size_t j = 0; j < d; ++j) dx[j] += r * (dxhat[j] - mean_dxhat - h[j] * mean_dxhat_h);
            }
        });
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
    Tensor<T> out = x.value();
    if (kind == Activation::relu) {
        for (auto& v : out.data()) v = std::max(v, T(0));
        return make_result<T>("relu", std::move(out), {x.node()}, [](Node<T>& self) {
            auto& px = *self.parents[0];
            auto in = px.value.data();
            auto s = self.grad.data();
            auto g = px.grad.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (in[i] > T(0)) g[i] += s[i];
        });
    }
    for (auto& v : out.data()) v = static_cast<T>(mish(static_cast<double>(v)));
    return make_result<T>("mish", std::move(out), {x.node()}, [](Node<T>& self) {
        auto& px = *self.parents[0];
        auto in = px.value.data();
        auto s = self.grad.data();
        auto g = px.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = in[i];
            const double t = std::tanh(softplus(v));
            const double sigmoid = 1.0 / (1.0 + std::exp(-v));
            g[i] += s[i] * static_cast<T>(t + v * (1.0 - t * t) * sigmoid);
        }
    });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Mode mode, Rng* rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
    if (mode == Mode::eval || rate == 0.0) return x;
    if (!rng) throw ContractError("dropout in training mode needs a generator");
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto factors = std::make_shared<std::vector<T>>(x.value().size());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& f : *factors) f = unit(*rng) < rate ? T(0) : keep_scale;
    Tensor<T> out = x.value();
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] *= (*factors)[i];
    return make_result<T>("dropout", std::move(out), {x.node()}, [factors](Node<T>& self) {
        auto g = self.parents[0]->grad.data();
        auto s = self.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i] * (*factors)[i];
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t width) {
    require_matrix("slice_cols", x.shape());
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (width == 0 || start + width > n)
        throw DimensionError("slice_cols [" + std::to_string(start) + ", " + std::to_string(start + width) +
                             ") out of range for " + shape_string(x.shape()));
    Tensor<T> out({m, width});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.value().row(i).begin() + start, width, out.row(i).begin());
    return make_result<T>("slice_cols", std::move(out), {x.node()}, [m, start, width](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i) {
            auto dx = px.grad.row(i);
            auto dy = self.grad.row(i);
            for (std::size_t j = 0; j < width; ++j) dx[start + j] += dy[j];
        }
    });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    if (parts.empty()) throw DimensionError("concat_cols needs at least one input");
    const std::size_t m = parts.front().value().rows();
    std::size_t total = 0;
    std::vector<std::size_t> offsets;
    std::vector<NodePtr<T>> parents;
    for (const auto& p : parts) {
        if (p.value().rows() != m)
            throw DimensionError("concat_cols row mismatch: " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        offsets.push_back(total);
        total += p.value().cols();
        parents.push_back(p.node());
    }
    Tensor<T> out({m, total});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& v = parts[k].value();
        for (std::size_t i = 0; i < m; ++i) std::copy(v.row(i).begin(), v.row(i).end(), out.row(i).begin() + offsets[k]);
    }
    return make_result<T>("concat_cols", std::move(out), std::move(parents), [m, offsets](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            const std::size_t w = p.value.cols();
            for (std::size_t i = 0; i < m; ++i) {
                auto dx = p.grad.row(i);
                auto dy = self.grad.row(i);
                for (std::size_t j = 0; j < w; ++j) dx[j] += dy[offsets[k] + j];
            }
        }
    });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) throw DimensionError("concat_rows needs at least one input");
    const std::size_t n = parts.front().value().cols();
    std::size_t total = 0;
    std::vector<std::size_t> offsets;
    std::vector<NodePtr<T>> parents;
    for (const auto& p : parts) {
        if (p.value().cols() != n)
            throw DimensionError("concat_rows column mismatch: " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        offsets.push_back(total);
        total += p.value().rows();
        parents.push_back(p.node());
    }
    std::vector<T> data;
    data.reserve(total * n);
    for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    return make_result<T>("concat_rows", Tensor<T>({total, n}, std::move(data)), std::move(parents),
                          [n, offsets](Node<T>& self) {
                              for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                  auto& p = *self.parents[k];
                                  if (!p.requires_grad) continue;
                                  auto g = p.grad.data();
                                  auto s = self.grad.data().subspan(offsets[k] * n, g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
                              }
                          });
}

template <typename T>
Var<T> mask_rows(const Var<T>& x, const Mask& mask) {
    require_matrix("mask_rows", x.shape());
    const std::size_t m = x.shape()[0];
    require_mask("mask_rows", mask, m);
    if (mask.empty() || std::all_of(mask.begin(), mask.end(), [](bool b) { return b; })) return x;
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < m; ++i)
        if (!mask[i]) std::fill(out.row(i).begin(), out.row(i).end(), T(0));
    return make_result<T>("mask_rows", std::move(out), {x.node()}, [mask, m](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i) {
            if (!mask[i]) continue;
            auto dx = px.grad.row(i);
            auto dy = self.grad.row(i);
            for (std::size_t j = 0; j < dx.size(); ++j) dx[j] += dy[j];
        }
    });
}

template <typename T>
Var<T> masked_mean_rows(const Var<T>& x, const Mask& mask) {
    require_matrix("masked_mean_rows", x.shape());
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    require_mask("masked_mean_rows", mask, m);
    std::size_t count = 0;
    for (std::size_t i = 0; i < m; ++i) count += valid(mask, i) ? 1 : 0;
    if (count == 0) throw InvalidInputError("mean aggregation over a sequence with no valid tokens");
    Tensor<T> out({1, n});
    for (std::size_t i = 0; i < m; ++i) {
        if (!valid(mask, i)) continue;
        auto r = x.value().row(i);
        for (std::size_t j = 0; j < n; ++j) out[j] += r[j];
    }
    const T inv = T(1) / T(count);
    for (auto& v : out.data()) v *= inv;
    return make_result<T>("masked_mean_rows", std::move(out), {x.node()}, [mask, m, n, inv](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i) {
            if (!valid(mask, i)) continue;
            auto dx = px.grad.row(i);
            for (std::size_t j = 0; j < n; ++j) dx[j] += self.grad[j] * inv;
        }
    });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& probabilities, std::span<const int> labels) {
    require_matrix("cross_entropy", probabilities.shape());
    const std::size_t b = probabilities.shape()[0], c = probabilities.shape()[1];
    if (labels.size() != b)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(b) + " rows");
    for (int label : labels)
        if (label < 0 || static_cast<std::size_t>(label) >= c)
            throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(c) + ")");
    const T floor = static_cast<T>(kProbabilityFloor);
    T total = T(0);
    for (std::size_t i = 0; i < b; ++i) total -= std::log(std::max(probabilities.value().at(i, labels[i]), floor));
    std::vector<int> owned(labels.begin(), labels.end());
    return make_result<T>("cross_entropy", Tensor<T>({1}, std::vector<T>{total / T(b)}), {probabilities.node()},
                          [owned = std::move(owned), b, floor](Node<T>& self) {
                              auto& pp = *self.parents[0];
                              const T s = self.grad[0] / T(b);
                              for (std::size_t i = 0; i < b; ++i) {
                                  const T p = pp.value.at(i, owned[i]);
                                  if (p > floor) pp.grad.at(i, owned[i]) -= s / p;
                              }
                          });
}

} // namespace ad

#define PRECOFACT_INSTANTIATE(T)                                                                          \
    template class Var<T>;                                                                                \
    template void backward<T>(const Var<T>&);                                                             \
    template Var<T> ad::matmul<T>(const Var<T>&, const Var<T>&);                                          \
    template Var<T> ad::transpose<T>(const Var<T>&);                                                      \
    template Var<T> ad::add<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> ad::add_bias<T>(const Var<T>&, const Var<T>&);                                        \
    template Var<T> ad::mul<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> ad::scale<T>(const Var<T>&, T);                                                       \
    template Var<T> ad::sum<T>(const Var<T>&);                                                            \
    template Var<T> ad::softmax_rows<T>(const Var<T>&, const Mask&);                                      \
    template Var<T> ad::layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                    \
    template Var<T> ad::activation<T>(const Var<T>&, Activation);                                         \
    template Var<T> ad::dropout<T>(const Var<T>&, double, Mode, Rng*);                                    \
    template Var<T> ad::slice_cols<T>(const Var<T>&, std::size_t, std::size_t);                           \
    template Var<T> ad::concat_cols<T>(std::span<const Var<T>>);                                          \
    template Var<T> ad::concat_rows<T>(std::span<const Var<T>>);                                          \
    template Var<T> ad::mask_rows<T>(const Var<T>&, const Mask&);                                         \
    template Var<T> ad::masked_mean_rows<T>(const Var<T>&, const Mask&);                                  \
    template Var<T> ad::cross_entropy<T>(const Var<T>&, std::span<const int>);

PRECOFACT_INSTANTIATE(float)
PRECOFACT_INSTANTIATE(double)

#undef PRECOFACT_INSTANTIATE

} // namespace precofact
