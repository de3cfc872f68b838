#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "precofact/autodiff.hpp"
#include "precofact/dataio.hpp"
#include "precofact/model.hpp"
#include "precofact/types.hpp"

namespace testing {

using namespace precofact;

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double a, double n, double floor = 1e-6) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

// Central differences on every element of every parameter against the
// reverse-mode gradient. `loss` rebuilds the graph from the current
// parameter values and returns a scalar.
inline GradCheckResult grad_check(std::vector<std::pair<std::string, Var<double>>> params,
                                  const std::function<Var<double>()>& loss, double h = 1e-5) {
    for (auto& [name, p] : params) p.zero_grad();
    backward(loss());
    GradCheckResult result;
    for (auto& [name, p] : params) {
        const Tensor<double> analytic = p.grad();
        auto values = p.mutable_value().data();
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double saved = values[k];
            values[k] = saved + h;
            const double up = loss().value()[0];
            values[k] = saved - h;
            const double down = loss().value()[0];
            values[k] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = relative_error(analytic[k], numeric);
            ++result.checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst = name + "[" + std::to_string(k) + "]";
            }
        }
    }
    return result;
}

inline GradCheckResult grad_check_model(ModelParams<double>& params, const std::function<Var<double>()>& loss,
                                        double h = 1e-5) {
    std::vector<std::pair<std::string, Var<double>>> list;
    for (auto& p : params.named()) list.emplace_back(p.name, p.var);
    return grad_check(std::move(list), loss, h);
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
    return t;
}

// Toy architecture used across tests: d=8, h=2, d_m1=6.
inline ModelConfig toy_config(Variant variant = Variant::full, Activation act = Activation::mish) {
    ModelConfig c;
    c.input_width_text = 6;
    c.input_width_image = 5;
    c.d = 8;
    c.heads = 2;
    c.d_ff = 12;
    c.d_m1 = 6;
    c.dropout = 0.0;
    c.activation = act;
    c.variant = variant;
    return c;
}

inline SampleEmbeddings random_sample(const ModelConfig& c, Rng& rng, std::size_t min_tokens = 2,
                                      std::size_t max_tokens = 3, std::optional<int> label = std::nullopt,
                                      std::string id = "s") {
    std::uniform_int_distribution<std::size_t> n(min_tokens, max_tokens);
    SampleEmbeddings s;
    s.id = std::move(id);
    for (std::size_t k = 0; k < kNumSources; ++k)
        s.sources[k] = random_tensor<float>({n(rng), c.input_width(static_cast<Source>(k))}, rng);
    s.label = label;
    return s;
}

inline std::vector<SampleEmbeddings> random_samples(const ModelConfig& c, std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<SampleEmbeddings> out;
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(random_sample(c, rng, 2, 3, static_cast<int>(i % kNumClasses), "r" + std::to_string(i)));
    return out;
}

// Per-class TP/FP/FN by direct counting, F1 with 0/0 := 0.
struct BruteForceScores {
    std::array<double, kNumClasses> f1{};
    std::array<std::size_t, kNumClasses> support{};
    double weighted_f1 = 0.0;
};

inline BruteForceScores brute_force_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
    BruteForceScores out;
    double total = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const bool p = preds[i] == static_cast<int>(c);
            const bool l = labels[i] == static_cast<int>(c);
            if (p && l) ++tp;
            if (p && !l) ++fp;
            if (!p && l) ++fn;
        }
        out.support[c] = tp + fn;
        const double denom = static_cast<double>(2 * tp + fp + fn);
        out.f1[c] = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
        out.weighted_f1 += out.f1[c] * static_cast<double>(out.support[c]);
        total += static_cast<double>(out.support[c]);
    }
    out.weighted_f1 = total == 0.0 ? 0.0 : out.weighted_f1 / total;
    return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("precofact-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace testing
