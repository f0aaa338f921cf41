#include <catch2/catch_amalgamated.hpp>

#include "dctext/attention.hpp"
#include "dctext/oracle.hpp"
#include "helpers.hpp"

using namespace dctext;

namespace {

template <typename Real>
Mat<Real> random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    Mat<Real> m(r, c);
    for (auto& x : m.v) x = static_cast<Real>(rng.normal() * scale);
    return m;
}

AttentionMask random_mask(Rng& rng, int n, double density) {
    AttentionMask m = AttentionMask::all_ones(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) m.bits.set(i, j, rng.uniform() < density);
        m.bits.set(i, static_cast<int>(rng.uniform_int(0, n - 1)), true);  // keep the row alive
    }
    return m;
}

}  // namespace

TEST_CASE("all-ones mask reproduces unmasked attention bit for bit") {
    Rng rng(41);
    const int n = 12, d = 8;
    const auto q = random_mat<double>(rng, n, d);
    const auto k = random_mat<double>(rng, n, d);
    const auto v = random_mat<double>(rng, n, d);
    const Matd a = masked_attention(q, k, v, AttentionMask::all_ones(n));
    const Matd b = unmasked_attention(q, k, v);
    CHECK(a.v == b.v);
}

TEST_CASE("single allowed key returns that value row exactly") {
    Rng rng(42);
    const int n = 6, d = 4;
    const auto q = random_mat<double>(rng, n, d);
    const auto k = random_mat<double>(rng, n, d);
    const auto v = random_mat<double>(rng, n, d);
    AttentionMask m = AttentionMask::all_ones(n);
    for (int j = 0; j < n; ++j) m.bits.set(2, j, j == 5);
    const Matd out = masked_attention(q, k, v, m);
    for (int c = 0; c < d; ++c) CHECK(out(2, c) == v(5, c));
}

TEST_CASE("kernel matches the -inf reference on random masked cases") {
    Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(2, 48));
        const int d = static_cast<int>(rng.uniform_int(1, 16));
        const auto q = random_mat<double>(rng, n, d);
        const auto k = random_mat<double>(rng, n, d);
        const auto v = random_mat<double>(rng, n, d);
        const AttentionMask m = random_mask(rng, n, rng.uniform(0.2, 0.9));
        const Matd got = masked_attention(q, k, v, m);
        const Matd want = reference_attention(q, k, v, m);
        for (size_t i = 0; i < got.v.size(); ++i)
            REQUIRE(std::abs(got.v[i] - want.v[i]) <= 1e-12);
    }
}

TEST_CASE("f32 kernel matches the f32 reference within 1e-6") {
    Rng rng(44);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 24, d = 8;
        const auto q = random_mat<float>(rng, n, d);
        const auto k = random_mat<float>(rng, n, d);
        const auto v = random_mat<float>(rng, n, d);
        const AttentionMask m = random_mask(rng, n, 0.5);
        const Matf got = masked_attention(q, k, v, m);
        const Matf want = reference_attention(q, k, v, m);
        for (size_t i = 0; i < got.v.size(); ++i)
            REQUIRE(std::abs(got.v[i] - want.v[i]) <= 1e-6f);
    }
}

TEST_CASE("attention rows are a convex combination over allowed keys") {
    Rng rng(45);
    const int n = 10;
    // V = identity exposes the weight matrix directly
    const auto q = random_mat<double>(rng, n, n);
    const auto k = random_mat<double>(rng, n, n);
    Matd v(n, n);
    for (int i = 0; i < n; ++i) v(i, i) = 1.0;
    const AttentionMask m = random_mask(rng, n, 0.4);
    const Matd w = masked_attention(q, k, v, m);
    for (int i = 0; i < n; ++i) {
        double sum = 0;
        for (int j = 0; j < n; ++j) {
            if (!m.at(i, j)) CHECK(w(i, j) == 0.0);  // exact, not small
            CHECK(w(i, j) >= 0.0);
            sum += w(i, j);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("attention error paths") {
    Rng rng(46);
    const auto q = random_mat<double>(rng, 4, 4);
    const auto k = random_mat<double>(rng, 5, 4);
    CHECK_THROWS_AS(masked_attention(q, k, q, AttentionMask::all_ones(4)), ShapeMismatch);
    CHECK_THROWS_AS(masked_attention(q, q, q, AttentionMask::all_ones(6)), ShapeMismatch);

    AttentionMask empty_row = AttentionMask::all_ones(4);
    for (int j = 0; j < 4; ++j) empty_row.bits.set(1, j, false);
    CHECK_THROWS_AS(masked_attention(q, q, q, empty_row), EmptyRow);
    CHECK_THROWS_AS(reference_attention(q, q, q, empty_row), EmptyRow);
}

TEST_CASE("pool_prompt_embeddings averages") {
    const std::vector<double> v{1.0, -2.0, 0.5};
    CHECK(pool_prompt_embeddings({v, v, v}) == v);

    std::vector<double> neg = v;
    for (double& x : neg) x = -x;
    for (double x : pool_prompt_embeddings({v, neg})) CHECK(x == 0.0);

    Rng rng(47);
    std::vector<std::vector<double>> set;
    for (int i = 0; i < 7; ++i) {
        std::vector<double> u(5);
        for (double& x : u) x = rng.normal();
        set.push_back(u);
    }
    const auto mean = pool_prompt_embeddings(set);
    for (int j = 0; j < 5; ++j) {
        double s = 0;
        for (const auto& u : set) s += u[j];
        CHECK(std::abs(mean[j] - s / 7.0) <= 1e-12);
    }
    CHECK_THROWS_AS(pool_prompt_embeddings({}), EmptyList);
}
