#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "precofact/errors.hpp"
#include "precofact/metrics.hpp"
#include "support/support.hpp"

using namespace precofact;

namespace {

std::pair<std::vector<int>, std::vector<int>> random_case(Rng& rng, std::size_t max_len = 50) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::uniform_int_distribution<int> cls(0, kNumClasses - 1);
    const std::size_t n = len(rng);
    std::vector<int> p(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = cls(rng);
        l[i] = cls(rng);
    }
    return {p, l};
}

} // namespace

TEST_SUITE("evaluate") {
    TEST_CASE("hand case scores 0.6") {
        const std::vector<int> labels{0, 0, 1, 1, 1}, preds{0, 1, 1, 1, 0};
        const auto r = evaluate(preds, labels);
        CHECK(r.per_class_f1[0] == 0.5);
        CHECK(r.per_class_f1[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
        CHECK(r.weighted_f1 == 0.6);
        CHECK(r.support[0] == 2);
        CHECK(r.support[1] == 3);
        CHECK(r.accuracy == 0.6);
    }

    TEST_CASE("perfect predictions") {
        const std::vector<int> labels{0, 1, 2, 3, 4, 4, 2};
        const auto r = evaluate(labels, labels);
        CHECK(r.weighted_f1 == 1.0);
        for (std::size_t t = 0; t < kNumClasses; ++t)
            for (std::size_t p = 0; p < kNumClasses; ++p)
                CHECK(r.confusion[t][p] == (t == p ? r.support[t] : 0u));
    }

    TEST_CASE("absent class has zero F1 and zero support") {
        const std::vector<int> labels{0, 1, 1}, preds{0, 1, 0};
        const auto r = evaluate(preds, labels);
        for (int c : {2, 3, 4}) {
            CHECK(r.per_class_f1[c] == 0.0);
            CHECK(r.support[c] == 0);
        }
        const auto oracle = testing::brute_force_f1(preds, labels);
        CHECK(r.weighted_f1 == oracle.weighted_f1);
    }

    TEST_CASE("matches the brute-force oracle on 1000 random cases") {
        Rng rng(2024);
        for (int trial = 0; trial < 1000; ++trial) {
            const auto [p, l] = random_case(rng);
            const auto r = evaluate(p, l);
            const auto o = testing::brute_force_f1(p, l);
            for (std::size_t c = 0; c < kNumClasses; ++c) {
                REQUIRE(r.per_class_f1[c] == o.f1[c]);
                REQUIRE(r.support[c] == o.support[c]);
            }
            REQUIRE(r.weighted_f1 == o.weighted_f1);
        }
    }

    TEST_CASE("confusion sums") {
        Rng rng(5);
        for (int trial = 0; trial < 100; ++trial) {
            const auto [p, l] = random_case(rng);
            const auto r = evaluate(p, l);
            std::size_t total = 0;
            for (std::size_t t = 0; t < kNumClasses; ++t) {
                const auto row = std::accumulate(r.confusion[t].begin(), r.confusion[t].end(), std::size_t{0});
                CHECK(row == r.support[t]);
                total += row;
            }
            CHECK(total == p.size());
            CHECK(r.samples == p.size());
        }
    }

    TEST_CASE("sample order does not matter") {
        Rng rng(6);
        for (int trial = 0; trial < 100; ++trial) {
            auto [p, l] = random_case(rng);
            const auto before = evaluate(p, l);
            std::vector<std::size_t> perm(p.size());
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            std::vector<int> p2, l2;
            for (auto i : perm) {
                p2.push_back(p[i]);
                l2.push_back(l[i]);
            }
            const auto after = evaluate(p2, l2);
            CHECK(after.per_class_f1 == before.per_class_f1);
            CHECK(after.weighted_f1 == doctest::Approx(before.weighted_f1).epsilon(1e-15));
        }
    }

    TEST_CASE("relabeling classes permutes per-class F1") {
        Rng rng(7);
        for (int trial = 0; trial < 100; ++trial) {
            auto [p, l] = random_case(rng);
            std::array<int, kNumClasses> pi{0, 1, 2, 3, 4};
            std::shuffle(pi.begin(), pi.end(), rng);
            std::vector<int> p2, l2;
            for (std::size_t i = 0; i < p.size(); ++i) {
                p2.push_back(pi[p[i]]);
                l2.push_back(pi[l[i]]);
            }
            const auto a = evaluate(p, l);
            const auto b = evaluate(p2, l2);
            for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(b.per_class_f1[pi[c]] == a.per_class_f1[c]);
            CHECK(b.weighted_f1 == doctest::Approx(a.weighted_f1).epsilon(1e-12));
        }
    }

    TEST_CASE("contract errors") {
        const std::vector<int> two{0, 1}, three{0, 1, 2}, bad{0, 5}, negative{-1, 0};
        CHECK_THROWS_AS(evaluate(two, three), ContractError);
        CHECK_THROWS_AS(evaluate(bad, two), ContractError);
        CHECK_THROWS_AS(evaluate(two, negative), ContractError);
        CHECK_THROWS_AS(evaluate(std::vector<int>{}, std::vector<int>{}), ContractError);
    }
}

TEST_SUITE("argmax") {
    TEST_CASE("examples") {
        const std::vector<std::array<double, kNumClasses>> rows{{0.1, 0.2, 0.4, 0.2, 0.1},
                                                                {0.3, 0.3, 0.2, 0.1, 0.1},
                                                                {0.0, 0.0, 0.0, 0.0, 0.0},
                                                                {1.2, 3.4, 0.0, 3.4, 0.5}};
        CHECK(argmax_predict(rows) == std::vector<int>{2, 0, 0, 1});
    }

    TEST_CASE("square root preserves the decision") {
        Rng rng(8);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<std::array<double, kNumClasses>> rows(200), roots(200);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < kNumClasses; ++c) {
                rows[i][c] = u(rng);
                roots[i][c] = std::sqrt(rows[i][c]);
            }
        CHECK(argmax_predict(rows) == argmax_predict(roots));
    }
}

TEST_SUITE("report") {
    TEST_CASE("json and table") {
        const std::vector<int> labels{0, 0, 1, 1, 1}, preds{0, 1, 1, 1, 0};
        const auto r = evaluate(preds, labels);
        const auto j = to_json(r);
        CHECK(j.at("weighted_f1") == 0.6);
        CHECK(j.at("samples") == 5);
        CHECK(j.at("confusion").size() == kNumClasses);
        std::ostringstream os;
        print_report(os, r);
        CHECK(os.str().find("0.6") != std::string::npos);
        CHECK(os.str().find("Refute") != std::string::npos);
    }
}
