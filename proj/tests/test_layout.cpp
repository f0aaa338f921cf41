#include <catch2/catch_amalgamated.hpp>

#include "dctext/layout.hpp"
#include "helpers.hpp"

using namespace dctext;

TEST_CASE("rasterize_bbox full frame") {
    const PatchRect r = rasterize_bbox({0, 0, 1, 1}, 16, 16);
    CHECK(r == PatchRect{0, 16, 0, 16});
}

TEST_CASE("rasterize_bbox outer cover by floor/ceil") {
    // x in [0.25,0.75] -> cols [4,12); y in [0.25,0.5] -> rows [4,8)
    const PatchRect r = rasterize_bbox({0.25, 0.25, 0.75, 0.5}, 16, 16);
    CHECK(r == PatchRect{4, 8, 4, 12});
}

TEST_CASE("rasterize_bbox rejects degenerate boxes") {
    CHECK_THROWS_AS(rasterize_bbox({0.5, 0.1, 0.5, 0.9}, 16, 16), DegenerateBox);
    CHECK_THROWS_AS(rasterize_bbox({-0.1, 0.0, 0.5, 0.5}, 16, 16), DegenerateBox);
    CHECK_THROWS_AS(rasterize_bbox({0.0, 0.3, 0.5, 0.2}, 16, 16), DegenerateBox);
}

TEST_CASE("rasterize_bbox idempotent on rects") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const int gh = static_cast<int>(rng.uniform_int(1, 61));
        const int gw = static_cast<int>(rng.uniform_int(1, 61));
        const int r0 = static_cast<int>(rng.uniform_int(0, gh - 1));
        const int r1 = static_cast<int>(rng.uniform_int(r0 + 1, gh));
        const int c0 = static_cast<int>(rng.uniform_int(0, gw - 1));
        const int c1 = static_cast<int>(rng.uniform_int(c0 + 1, gw));
        const PatchRect rect{r0, r1, c0, c1};
        CHECK(rasterize_bbox(rect_to_bbox(rect, gh, gw), gh, gw) == rect);
    }
}

TEST_CASE("build_region_partition areas on a 4x4 grid") {
    const std::vector<BBox> boxes = {{0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}};
    const std::vector<int> region = build_region_partition(boxes, 4, 4);
    int counts[3] = {0, 0, 0};
    for (int r : region) ++counts[r];
    CHECK(counts[0] == 4);
    CHECK(counts[1] == 4);
    CHECK(counts[2] == 8);
}

TEST_CASE("build_region_partition rejects overlap") {
    const std::vector<BBox> boxes = {{0, 0, 0.6, 0.6}, {0.4, 0.4, 1, 1}};
    CHECK_THROWS_AS(build_region_partition(boxes, 8, 8), OverlappingRegions);
}

TEST_CASE("build_region_partition matches containment oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int gh = static_cast<int>(rng.uniform_int(4, 16));
        const int gw = static_cast<int>(rng.uniform_int(4, 16));
        const auto rects = dctest::random_disjoint_rects(rng, gh, gw, static_cast<int>(rng.uniform_int(1, 5)));
        if (rects.empty()) continue;
        std::vector<BBox> boxes;
        for (const auto& r : rects) boxes.push_back(rect_to_bbox(r, gh, gw));
        const std::vector<int> region = build_region_partition(boxes, gh, gw);
        // double-loop containment oracle
        for (int row = 0; row < gh; ++row)
            for (int col = 0; col < gw; ++col) {
                int expect = static_cast<int>(rects.size());
                for (size_t i = 0; i < rects.size(); ++i)
                    if (rects[i].contains(row, col)) expect = static_cast<int>(i);
                CHECK(region[static_cast<size_t>(row) * gw + col] == expect);
            }
    }
}

TEST_CASE("box order permutes region ids but not the background") {
    Rng rng(23);
    const auto rects = dctest::random_disjoint_rects(rng, 12, 12, 3);
    REQUIRE(rects.size() == 3);
    std::vector<BBox> boxes;
    for (const auto& r : rects) boxes.push_back(rect_to_bbox(r, 12, 12));
    const auto a = build_region_partition(boxes, 12, 12);
    const std::vector<BBox> swapped = {boxes[2], boxes[0], boxes[1]};
    const auto b = build_region_partition(swapped, 12, 12);
    const int bg = 3;
    const int perm[3] = {1, 2, 0};  // id in `a` -> id in `b`
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == bg)
            CHECK(b[i] == bg);
        else
            CHECK(b[i] == perm[a[i]]);
    }
}

TEST_CASE("build_token_layout spans and sizes") {
    const std::vector<BBox> boxes = {{0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}};
    const TokenLayout lt = build_token_layout({4, 4, 8}, boxes, 4, 4);
    CHECK(lt.L_T == 16);
    CHECK(lt.L_I == 16);
    REQUIRE(lt.prompt_spans.size() == 3);
    CHECK(lt.prompt_spans[0] == std::pair<int, int>(0, 4));
    CHECK(lt.prompt_spans[1] == std::pair<int, int>(4, 8));
    CHECK(lt.prompt_spans[2] == std::pair<int, int>(8, 16));
}

TEST_CASE("build_token_layout arity errors") {
    CHECK_THROWS_AS(build_token_layout({3}, {}, 4, 4), InvalidArity);
    const std::vector<BBox> one = {{0, 0, 0.5, 0.5}};
    CHECK_THROWS_AS(build_token_layout({2, 2, 4}, one, 4, 4), InvalidArity);
}

TEST_CASE("background count equals complement of region areas") {
    Rng rng(5);
    const auto rects = dctest::random_disjoint_rects(rng, 8, 8, 3);
    REQUIRE(rects.size() == 3);
    std::vector<BBox> boxes;
    int area = 0;
    for (const auto& r : rects) {
        boxes.push_back(rect_to_bbox(r, 8, 8));
        area += r.area();
    }
    const TokenLayout lt = build_token_layout({2, 2, 2, 6}, boxes, 8, 8);
    CHECK(lt.L_T == 12);
    CHECK(lt.L_I == 64);
    int bg = 0;
    for (int r : lt.region_of_patch) bg += r == lt.background_group();
    CHECK(bg == 64 - area);
}

TEST_CASE("membership vectors partition the joint sequence") {
    const std::vector<BBox> boxes = {{0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}};
    const TokenLayout lt = build_token_layout({4, 4, 8}, boxes, 4, 4);
    const MembershipVectors mv = membership_vectors(lt);

    for (int t = 0; t < lt.L_T; ++t) CHECK(mv.m_p[0][t] == (t < 4 ? 1 : 0));

    size_t total = 0;
    for (const auto& joint : mv.m_joint)
        for (uint8_t b : joint) total += b;
    CHECK(total == static_cast<size_t>(lt.L_T + lt.L_I));

    Rng rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        const auto rl = dctest::random_layout(rng);
        const MembershipVectors m = membership_vectors(rl.layout);
        for (int col = 0; col < m.total_tokens(); ++col) {
            int ones = 0;
            for (int g = 0; g < m.groups(); ++g) ones += m.m_joint[g][col];
            CHECK(ones == 1);
        }
        CHECK(m.m_joint[m.n] == [&] {
            // global group covers exactly p_g plus background patches
            std::vector<uint8_t> expect(m.total_tokens(), 0);
            for (int t = rl.layout.prompt_spans[m.n].first; t < rl.layout.prompt_spans[m.n].second; ++t)
                expect[t] = 1;
            for (int p = 0; p < m.L_I; ++p)
                if (rl.layout.is_background(p)) expect[m.L_T + p] = 1;
            return expect;
        }());
    }
}
