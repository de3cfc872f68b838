#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "precofact/errors.hpp"
#include "precofact/metrics.hpp"
#include "precofact/training.hpp"
#include "support/support.hpp"

using namespace precofact;
using testing::toy_config;

namespace {

std::vector<NamedParameter<double>> scalar_param(double value) {
    return {{"x", Var<double>::parameter(Tensor<double>::matrix(1, 1, {value}))}};
}

template <typename T>
bool params_equal(const ModelParams<T>& a, const ModelParams<T>& b) {
    const auto na = a.named();
    const auto nb = b.named();
    if (na.size() != nb.size()) return false;
    for (std::size_t i = 0; i < na.size(); ++i)
        if (!(na[i].var.value() == nb[i].var.value())) return false;
    return true;
}

template <typename T>
double max_abs_diff(const ModelParams<T>& a, const ModelParams<T>& b) {
    const auto na = a.named();
    const auto nb = b.named();
    double m = 0.0;
    for (std::size_t i = 0; i < na.size(); ++i) {
        const auto x = na[i].var.value().data();
        const auto y = nb[i].var.value().data();
        for (std::size_t k = 0; k < x.size(); ++k) m = std::max(m, std::abs(double(x[k]) - double(y[k])));
    }
    return m;
}

TrainConfig small_train(std::size_t epochs = 3) {
    TrainConfig t;
    t.batch_size = 4;
    t.epochs = epochs;
    t.learning_rate = 1e-2;
    t.seed = 41;
    return t;
}

ModelConfig dropout_toy() {
    auto c = toy_config();
    c.dropout = 0.1;
    return c;
}

} // namespace

TEST_SUITE("adam") {
    TEST_CASE("zero gradients leave parameters unchanged and advance the step") {
        auto p = scalar_param(0.5);
        auto state = make_adam_state<double>(p);
        adam_step<double>(p, state, 0.1);
        CHECK(p[0].var.value()[0] == 0.5);
        CHECK(state.step == 1);
    }

    TEST_CASE("first step moves by lr times the gradient sign") {
        for (double g : {3.0, -0.02, 1e-3}) {
            auto p = scalar_param(1.0);
            auto state = make_adam_state<double>(p);
            p[0].var.mutable_grad()[0] = g;
            adam_step<double>(p, state, 0.01);
            // m_hat = g, v_hat = g^2: update lr * g / (|g| + eps).
            const double expected = 1.0 - 0.01 * g / (std::abs(g) + 1e-8);
            CHECK(std::abs(p[0].var.value()[0] - expected) < 1e-15);
            CHECK(std::abs(std::abs(p[0].var.value()[0] - 1.0) - 0.01) < 1e-7);
        }
    }

    TEST_CASE("constant gradient decreases the parameter monotonically") {
        auto p = scalar_param(0.0);
        auto state = make_adam_state<double>(p);
        double prev = 0.0;
        for (int i = 0; i < 200; ++i) {
            p[0].var.mutable_grad()[0] = 0.7;
            adam_step<double>(p, state, 1e-3);
            CHECK(p[0].var.value()[0] < prev);
            prev = p[0].var.value()[0];
        }
    }

    TEST_CASE("matches a hand-rolled second step") {
        auto p = scalar_param(0.0);
        auto state = make_adam_state<double>(p);
        const double g1 = 0.5, g2 = -0.25, lr = 0.1, b1 = 0.9, b2 = 0.999;
        p[0].var.mutable_grad()[0] = g1;
        adam_step<double>(p, state, lr);
        p[0].var.mutable_grad()[0] = g2;
        adam_step<double>(p, state, lr);
        double x = 0.0, m = 0.0, v = 0.0;
        for (int t = 1; t <= 2; ++t) {
            const double g = t == 1 ? g1 : g2;
            m = b1 * m + (1 - b1) * g;
            v = b2 * v + (1 - b2) * g * g;
            const double mh = m / (1 - std::pow(b1, t));
            const double vh = v / (1 - std::pow(b2, t));
            x -= lr * mh / (std::sqrt(vh) + 1e-8);
        }
        CHECK(std::abs(p[0].var.value()[0] - x) < 1e-15);
    }

    TEST_CASE("non-finite gradient aborts before any update") {
        std::vector<NamedParameter<double>> p = {
            {"a", Var<double>::parameter(Tensor<double>::matrix(1, 1, {1.0}))},
            {"b", Var<double>::parameter(Tensor<double>::matrix(1, 2, {2.0, 3.0}))}};
        auto state = make_adam_state<double>(p);
        p[0].var.mutable_grad()[0] = 1.0;
        p[1].var.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
        try {
            adam_step<double>(p, state, 0.1);
            FAIL("expected a numeric error");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("'b'") != std::string::npos);
        }
        CHECK(p[0].var.value()[0] == 1.0);
        CHECK(state.step == 0);
    }
}

TEST_SUITE("config") {
    TEST_CASE("defaults") {
        TrainConfig t;
        CHECK(t.batch_size == 32);
        CHECK(t.epochs == 30);
        CHECK(t.learning_rate == 3e-5);
        CHECK(t.seed == 41);
        CHECK(t.adam.beta1 == 0.9);
        CHECK(t.adam.beta2 == 0.999);
        CHECK(t.adam.eps == 1e-8);
    }

    TEST_CASE("validation and json") {
        TrainConfig t;
        t.batch_size = 0;
        CHECK_THROWS_AS(t.validate(), ConfigError);
        t = TrainConfig{};
        t.learning_rate = -1.0;
        CHECK_THROWS_AS(t.validate(), ConfigError);
        t = small_train();
        t.learning_rate = 2e-5;
        t.seed = 42;
        nlohmann::json j = t;
        CHECK(j.at("lr") == 2e-5);
        CHECK(nlohmann::json(j.get<TrainConfig>()) == j);
        try {
            nlohmann::json{{"momentum", 0.9}}.get<TrainConfig>();
            FAIL("expected a config error");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("train.momentum") != std::string::npos);
        }
    }

    TEST_CASE("epoch record json") {
        EpochRecord r{3, 0.25, 0.75, 1.5};
        const auto j = to_json(r);
        CHECK(j.at("epoch") == 3);
        CHECK(j.at("val_weighted_f1") == 0.75);
        const auto back = epoch_record_from_json(j);
        CHECK(back.train_loss == 0.25);
        EpochRecord none{1, 0.5, std::nullopt, 0.0};
        CHECK(to_json(none).at("val_weighted_f1").is_null());
        CHECK_FALSE(epoch_record_from_json(to_json(none)).val_weighted_f1.has_value());
    }
}

TEST_SUITE("loop") {
    TEST_CASE("epoch order is a permutation") {
        Rng rng(1);
        for (std::size_t n : {0u, 1u, 7u, 64u}) {
            auto order = epoch_order(n, rng);
            std::sort(order.begin(), order.end());
            std::vector<std::size_t> iota(n);
            std::iota(iota.begin(), iota.end(), std::size_t{0});
            CHECK(order == iota);
        }
    }

    TEST_CASE("identical seeds give identical runs") {
        const auto c = dropout_toy();
        const auto data = testing::random_samples(c, 10, 2);
        const auto a = train<float>(data, {}, c, small_train());
        const auto b = train<float>(data, {}, c, small_train());
        REQUIRE(a.log.size() == 3);
        for (std::size_t e = 0; e < a.log.size(); ++e) CHECK(a.log[e].train_loss == b.log[e].train_loss);
        CHECK(params_equal(a.params, b.params));
        auto other = small_train();
        other.seed = 42;
        CHECK_FALSE(params_equal(a.params, train<float>(data, {}, c, other).params));
    }

    TEST_CASE("zero learning rate leaves parameters identical") {
        const auto c = dropout_toy();
        const auto data = testing::random_samples(c, 6, 3);
        auto t = small_train(2);
        t.learning_rate = 0.0;
        const auto result = train<float>(data, {}, c, t);
        const auto fresh = start_training<float>(c, t);
        CHECK(params_equal(result.params, fresh.params));
    }

    TEST_CASE("loss on a fixed batch decreases over the first 5 steps") {
        const auto c = toy_config();
        const auto data = testing::random_samples(c, 8, 4);
        TrainConfig t;
        t.learning_rate = 1e-3;
        auto state = start_training<double>(c, t);
        std::vector<const SampleEmbeddings*> batch;
        for (const auto& s : data) batch.push_back(&s);
        auto batch_loss = [&] {
            std::vector<Var<double>> out;
            std::vector<int> labels;
            for (const auto* s : batch) {
                out.push_back(forward(*s, state.params, c, Mode::eval, nullptr));
                labels.push_back(*s->label);
            }
            return ad::cross_entropy(ad::concat_rows<double>(out), labels).value()[0];
        };
        double prev = batch_loss();
        for (int step = 0; step < 5; ++step) {
            const double reported = train_step<double>(state, batch, c, t);
            CHECK(std::abs(reported - prev) < 1e-12);
            const double now = batch_loss();
            CHECK(now < prev);
            prev = now;
        }
        CHECK(state.adam.step == 5);
    }

    TEST_CASE("epoch loss is the sample-weighted batch mean") {
        const auto c = toy_config();
        const auto data = testing::random_samples(c, 5, 5);
        auto t = small_train(1);
        t.batch_size = 5;
        t.learning_rate = 0.0;
        const auto r = train<double>(data, {}, c, t);
        double total = 0.0;
        const auto p = start_training<double>(c, t);
        for (const auto& s : data)
            total += -std::log(std::max(forward(s, p.params, c, Mode::eval, nullptr).value()[*s.label], 1e-12));
        CHECK(std::abs(r.log[0].train_loss - total / 5.0) < 1e-12);
    }

    TEST_CASE("empty or unlabeled data is rejected") {
        const auto c = toy_config();
        CHECK_THROWS_AS(train<float>({}, {}, c, small_train()), InvalidInputError);
        auto data = testing::random_samples(c, 4, 6);
        data[2].label.reset();
        CHECK_THROWS_AS(train<float>(data, {}, c, small_train()), InvalidInputError);
        auto val = testing::random_samples(c, 2, 7);
        val[0].label.reset();
        CHECK_THROWS_AS(train<float>(testing::random_samples(c, 4, 8), val, c, small_train()), InvalidInputError);
    }

    TEST_CASE("best validation epoch is selected") {
        const auto c = toy_config();
        const auto data = testing::random_samples(c, 10, 9);
        const auto val = testing::random_samples(c, 10, 10);
        std::vector<EpochRecord> seen;
        TrainHooks hooks;
        hooks.on_epoch = [&](const EpochRecord& r) { seen.push_back(r); };
        const auto r = train<float>(data, val, c, small_train(6), hooks);
        REQUIRE(seen.size() == 6);
        std::size_t best = 0;
        for (std::size_t e = 0; e < seen.size(); ++e) {
            REQUIRE(seen[e].val_weighted_f1.has_value());
            if (*seen[e].val_weighted_f1 > *seen[best].val_weighted_f1) best = e;
        }
        CHECK(r.selected_epoch == best + 1);
        const auto preds = predict<float>(val, r.params, c, "m", 1);
        std::vector<int> labels;
        for (const auto& s : val) labels.push_back(*s.label);
        CHECK(evaluate(argmax_predict(preds.scores), labels).weighted_f1 == *seen[best].val_weighted_f1);
    }

    TEST_CASE("without validation the final epoch is selected") {
        const auto c = toy_config();
        const auto r = train<float>(testing::random_samples(c, 6, 11), {}, c, small_train(2));
        CHECK(r.selected_epoch == 2);
    }

    TEST_CASE("checkpoint hook cadence") {
        const auto c = toy_config();
        auto t = small_train(5);
        t.checkpoint_every = 2;
        std::vector<std::size_t> calls;
        TrainHooks hooks;
        hooks.on_checkpoint = [&](std::size_t e) { calls.push_back(e); };
        train<float>(testing::random_samples(c, 4, 12), {}, c, t, hooks);
        CHECK(calls == std::vector<std::size_t>{2, 4});
    }
}

TEST_SUITE("resume") {
    TEST_CASE("64-bit resume from a cloned state is bitwise identical") {
        const auto c = dropout_toy();
        const auto data = testing::random_samples(c, 9, 13);
        const auto val = testing::random_samples(c, 5, 14);
        const auto t = small_train(4);

        auto full = start_training<double>(c, t);
        run_training<double>(full, data, val, c, t);

        auto part = start_training<double>(c, t);
        TrainHooks stop;
        stop.stop_after = 2;
        run_training<double>(part, data, val, c, t, stop);
        CHECK(part.epochs_done == 2);
        auto resumed = part.clone();
        run_training<double>(resumed, data, val, c, t);

        CHECK(resumed.epochs_done == 4);
        CHECK(params_equal(full.params, resumed.params));
        CHECK(full.best_epoch == resumed.best_epoch);
        for (std::size_t e = 0; e < 4; ++e) CHECK(full.log[e].train_loss == resumed.log[e].train_loss);
    }

    TEST_CASE("32-bit resume through a state file matches an uninterrupted run") {
        testing::TempDir dir("resume");
        const auto c = dropout_toy();
        const auto data = testing::random_samples(c, 9, 15);
        const auto val = testing::random_samples(c, 5, 16);
        const auto t = small_train(4);

        auto full = start_training<float>(c, t);
        run_training<float>(full, data, val, c, t);

        auto part = start_training<float>(c, t);
        TrainHooks stop;
        stop.stop_after = 2;
        run_training<float>(part, data, val, c, t, stop);
        save_train_state(dir / "state.pcfm", part, c, t);
        auto loaded = load_train_state<float>(dir / "state.pcfm");
        CHECK(nlohmann::json(loaded.config) == nlohmann::json(t));
        CHECK(nlohmann::json(loaded.model) == nlohmann::json(c));
        CHECK(loaded.state.epochs_done == 2);
        CHECK(loaded.state.log.size() == 2);
        run_training<float>(loaded.state, data, val, loaded.model, loaded.config);

        CHECK(max_abs_diff(full.params, loaded.state.params) <= 1e-6);
        CHECK(params_equal(full.params, loaded.state.params));
    }

    TEST_CASE("corrupt state files are rejected") {
        testing::TempDir dir("state");
        const auto c = toy_config();
        const auto t = small_train(1);
        auto s = start_training<float>(c, t);
        save_train_state(dir / "s.pcfm", s, c, t);
        auto bytes = testing::read_bytes(dir / "s.pcfm");
        bytes[bytes.size() / 2] ^= 0x5a;
        testing::write_bytes(dir / "s.pcfm", bytes);
        CHECK_THROWS_AS(load_train_state<float>(dir / "s.pcfm"), Error);
        save_model(dir / "m.pcfm", s.params, c);
        CHECK_THROWS_AS(load_train_state<float>(dir / "m.pcfm"), Error);
    }
}
