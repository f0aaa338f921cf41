#include <catch2/catch_amalgamated.hpp>

#include "dctext/io.hpp"
#include "dctext/synth.hpp"
#include "helpers.hpp"

using namespace dctext;

TEST_CASE("glyph library patterns are distinct") {
    const auto& lib = glyph_library();
    REQUIRE(lib.size() == 4);
    for (size_t a = 0; a < lib.size(); ++a)
        for (size_t b = a + 1; b < lib.size(); ++b) {
            int dist = 0;
            for (int i = 0; i < 16; ++i) dist += lib[a][i] != lib[b][i];
            CHECK(dist >= 6);
        }
}

TEST_CASE("stamped samples decode to their own specs") {
    const auto ds = gen_dataset(40, 3, 16, 16, 123);
    REQUIRE(ds.size() == 40);
    for (const auto& s : ds) {
        CHECK(region_accuracy(s.x0, s.specs) == 1.0);
        CHECK(s.textual_tokens.size() == s.specs.size());
        CHECK(s.global_tokens.size() == 2 * s.specs.size());
        for (size_t i = 0; i < s.specs.size(); ++i) {
            CHECK(s.textual_tokens[i][0] == s.specs[i].glyph);
            CHECK(s.global_tokens[2 * i] == s.specs[i].glyph);
        }
    }
}

TEST_CASE("gen_dataset is seed stable") {
    const auto a = gen_dataset(10, 3, 16, 16, 7);
    const auto b = gen_dataset(10, 3, 16, 16, 7);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].x0.v == b[i].x0.v);
        CHECK(a[i].global_tokens == b[i].global_tokens);
    }
    const auto c = gen_dataset(10, 3, 16, 16, 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i].x0.v != c[i].x0.v;
    CHECK(any_diff);

    CHECK(gen_dataset(0, 3, 16, 16, 7).empty());
    CHECK_THROWS_AS(gen_dataset(1, 17, 16, 16, 7), InfeasiblePacking);
    CHECK_THROWS_AS(gen_dataset(1, 2, 10, 10, 7), InfeasiblePacking);
}

TEST_CASE("region_accuracy on clean, wrong, and noise images") {
    const Sample s = make_sample({0, 5}, {1, 3}, 16, 16, 1);
    CHECK(region_accuracy(s.x0, s.specs) == 1.0);

    std::vector<GlyphSpec> wrong = s.specs;
    for (auto& sp : wrong) sp.glyph = (sp.glyph + 1) % glyph_count();
    CHECK(region_accuracy(s.x0, wrong) == 0.0);

    // chance rate on pure noise is 1/G by symmetry of the uniform label draw
    Rng rng(55);
    int matched = 0;
    const int trials = 2000;
    for (int i = 0; i < trials; ++i) {
        Latent img(1, 4, 4);
        for (auto& v : img.v) v = rng.normal();
        const int truth = static_cast<int>(rng.uniform_int(0, glyph_count() - 1));
        matched += match_glyph(img, {0, 4, 0, 4}) == truth;
    }
    const double rate = static_cast<double>(matched) / trials;
    CHECK(std::abs(rate - 0.25) < 0.05);
}

TEST_CASE("template matching ties resolve to the lowest glyph id") {
    const auto& lib = glyph_library();
    // midpoint between glyphs 0 and 1: flip half of their differing cells
    GlyphPattern bits = lib[0];
    std::vector<int> diff;
    for (int i = 0; i < 16; ++i)
        if (lib[0][i] != lib[1][i]) diff.push_back(i);
    for (size_t i = 0; i < diff.size() / 2; ++i) bits[diff[i]] = lib[1][diff[i]];

    auto dist = [&](const GlyphPattern& p) {
        int d = 0;
        for (int i = 0; i < 16; ++i) d += bits[i] != p[i];
        return d;
    };
    REQUIRE(dist(lib[0]) == dist(lib[1]));
    REQUIRE(dist(lib[0]) < dist(lib[2]));
    REQUIRE(dist(lib[0]) < dist(lib[3]));

    Latent img(1, 4, 4);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            img.at(0, r, c) = bits[r * 4 + c] ? kForeground : kBackground;
    CHECK(match_glyph(img, {0, 4, 0, 4}) == 0);
}

TEST_CASE("train_toy with lr=0 leaves parameters untouched") {
    DenoiserConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.n_double = 1;
    cfg.n_single = 1;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.vocab = synth_vocab(8, 8);
    cfg.ff_mult = 2;
    ToyDenoiser model = ToyDenoiser::random_init(cfg, 31);
    const std::string before = checkpoint_to_bytes(model);
    const auto ds = gen_dataset(8, 2, 8, 8, 32);
    train_toy(model, ds, 5, 0.0, 33);
    CHECK(checkpoint_to_bytes(model) == before);
}

TEST_CASE("train_toy reports divergence") {
    DenoiserConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.n_double = 1;
    cfg.n_single = 0;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.vocab = synth_vocab(8, 8);
    cfg.ff_mult = 2;
    ToyDenoiser model = ToyDenoiser::random_init(cfg, 34);
    model.p.unembed_w(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const auto ds = gen_dataset(4, 2, 8, 8, 35);
    CHECK_THROWS_AS(train_toy(model, ds, 3, 1e-3, 36), DivergenceDetected);
}

TEST_CASE("short training run reduces the loss") {
    DenoiserConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.n_double = 1;
    cfg.n_single = 1;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.vocab = synth_vocab(8, 8);
    cfg.ff_mult = 2;
    ToyDenoiser model = ToyDenoiser::random_init(cfg, 37);
    const auto ds = gen_dataset(32, 2, 8, 8, 38);
    const TrainResult tr = train_toy(model, ds, 200, 3e-3, 39);
    REQUIRE(tr.loss_curve.size() == 200);
    CHECK(tr.window_mean(false) < tr.window_mean(true));
}

TEST_CASE("dataset dump round-trips") {
    const auto ds = gen_dataset(6, 3, 16, 16, 40);
    const auto back = dataset_from_bytes(dataset_to_bytes(ds));
    REQUIRE(back.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(back[i].x0.v == ds[i].x0.v);
        CHECK(back[i].global_tokens == ds[i].global_tokens);
        CHECK(back[i].textual_tokens == ds[i].textual_tokens);
        REQUIRE(back[i].specs.size() == ds[i].specs.size());
        for (size_t j = 0; j < ds[i].specs.size(); ++j) {
            CHECK(back[i].specs[j].glyph == ds[i].specs[j].glyph);
            CHECK(back[i].specs[j].rect == ds[i].specs[j].rect);
        }
    }
}

TEST_CASE("emergence diagnostic runs deterministically") {
    DenoiserConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.n_double = 1;
    cfg.n_single = 1;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.vocab = synth_vocab(8, 8);
    cfg.ff_mult = 2;
    const ToyDenoiser model = ToyDenoiser::random_init(cfg, 41);
    const Sample s = make_sample({0, 3}, {1, 2}, 8, 8, 1);
    const Schedule sched = make_schedule(8, 1, 2, 2, 0.7);
    const auto a = region_emergence_diagnostic(model, s, 42, sched);
    const auto b = region_emergence_diagnostic(model, s, 42, sched);
    REQUIRE(a.size() == 2);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].early_match == b[i].early_match);
        CHECK(a[i].final_match == b[i].final_match);
    }
}
