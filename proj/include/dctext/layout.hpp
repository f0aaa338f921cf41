#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"

namespace dctext {

// Normalized bounding box, fractions of image width/height.
struct BBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Half-open rectangle in patch-grid indices.
struct PatchRect {
    int row_start = 0, row_end = 0, col_start = 0, col_end = 0;

    int height() const { return row_end - row_start; }
    int width() const { return col_end - col_start; }
    int area() const { return height() * width(); }
    bool contains(int r, int c) const {
        return r >= row_start && r < row_end && c >= col_start && c < col_end;
    }
    bool operator==(const PatchRect& o) const {
        return row_start == o.row_start && row_end == o.row_end && col_start == o.col_start &&
               col_end == o.col_end;
    }
};

// Joint token sequence structure. Text tokens come first, in prompt order
// p_1..p_n then the global prompt, followed by image patches row-major.
// region_of_patch values are 0..n-1 for the textual regions and n for the
// background group (the global prompt's group).
struct TokenLayout {
    int n = 0;  // number of textual prompts / regions
    std::vector<std::pair<int, int>> prompt_spans;  // n+1 half-open ranges over [0, L_T)
    int grid_h = 0, grid_w = 0;
    std::vector<int> region_of_patch;  // length L_I, row-major
    int L_T = 0, L_I = 0;

    int background_group() const { return n; }
    int total_tokens() const { return L_T + L_I; }
    bool is_background(int patch) const { return region_of_patch[patch] == n; }

    // Group of a joint token index (text token -> owning prompt, image token
    // -> owning region or background).
    int group_of_token(int joint) const {
        if (joint < L_T) {
            for (int i = 0; i <= n; ++i)
                if (joint >= prompt_spans[i].first && joint < prompt_spans[i].second) return i;
            throw OutOfBounds("group_of_token: text index outside all spans");
        }
        return region_of_patch[joint - L_T];
    }
};

// Per-group indicator vectors over text tokens, image tokens, and the joint
// sequence. Group i activates prompt p_i and region r_i; group n is the
// global prompt with the background.
struct MembershipVectors {
    int n = 0;
    int L_T = 0, L_I = 0;
    std::vector<std::vector<uint8_t>> m_p;      // (n+1) × L_T
    std::vector<std::vector<uint8_t>> m_r;      // (n+1) × L_I
    std::vector<std::vector<uint8_t>> m_joint;  // (n+1) × (L_T+L_I)

    int groups() const { return n + 1; }
    int total_tokens() const { return L_T + L_I; }
};

namespace detail {
// Snap values that are within eps of a grid line before flooring/ceiling, so
// that boxes expressed as exact patch fractions rasterize to the same rect
// they came from.
inline constexpr double kGridSnapEps = 1e-9;

inline int floor_snapped(double x) {
    const double r = std::round(x);
    if (std::abs(x - r) < kGridSnapEps) return static_cast<int>(r);
    return static_cast<int>(std::floor(x));
}

inline int ceil_snapped(double x) {
    const double r = std::round(x);
    if (std::abs(x - r) < kGridSnapEps) return static_cast<int>(r);
    return static_cast<int>(std::ceil(x));
}
}  // namespace detail

// Outer-cover discretization: the rect never loses area the box asked for.
inline PatchRect rasterize_bbox(const BBox& b, int grid_h, int grid_w) {
    if (grid_h < 1 || grid_w < 1) throw InvalidArgument("rasterize_bbox: empty grid");
    if (!(b.x1 >= 0.0 && b.x1 < b.x2 && b.x2 <= 1.0) ||
        !(b.y1 >= 0.0 && b.y1 < b.y2 && b.y2 <= 1.0)) {
        throw DegenerateBox("rasterize_bbox: box violates 0 <= lo < hi <= 1");
    }
    PatchRect r;
    r.col_start = std::max(0, detail::floor_snapped(b.x1 * grid_w));
    r.col_end = std::min(grid_w, detail::ceil_snapped(b.x2 * grid_w));
    r.row_start = std::max(0, detail::floor_snapped(b.y1 * grid_h));
    r.row_end = std::min(grid_h, detail::ceil_snapped(b.y2 * grid_h));
    if (r.row_end <= r.row_start || r.col_end <= r.col_start)
        throw DegenerateBox("rasterize_bbox: box rasterizes to an empty rectangle");
    return r;
}

inline BBox rect_to_bbox(const PatchRect& r, int grid_h, int grid_w) {
    return BBox{static_cast<double>(r.col_start) / grid_w, static_cast<double>(r.row_start) / grid_h,
                static_cast<double>(r.col_end) / grid_w, static_cast<double>(r.row_end) / grid_h};
}

// Assigns each patch to the region whose rasterized rect contains it, or to
// the background sentinel n. Shared patches are a hard error; there is no
// priority order between boxes.
inline std::vector<int> build_region_partition(const std::vector<BBox>& boxes, int grid_h,
                                               int grid_w) {
    const int n = static_cast<int>(boxes.size());
    std::vector<int> region(static_cast<size_t>(grid_h) * grid_w, n);
    for (int i = 0; i < n; ++i) {
        const PatchRect r = rasterize_bbox(boxes[i], grid_h, grid_w);
        for (int row = r.row_start; row < r.row_end; ++row) {
            for (int col = r.col_start; col < r.col_end; ++col) {
                int& slot = region[static_cast<size_t>(row) * grid_w + col];
                if (slot != n)
                    throw OverlappingRegions("build_region_partition: boxes " +
                                             std::to_string(slot) + " and " + std::to_string(i) +
                                             " share patch (" + std::to_string(row) + "," +
                                             std::to_string(col) + ")");
                slot = i;
            }
        }
    }
    return region;
}

// prompt_lengths holds n textual prompt lengths followed by the global
// prompt's length; boxes holds the n region boxes in prompt order.
inline TokenLayout build_token_layout(const std::vector<int>& prompt_lengths,
                                      const std::vector<BBox>& boxes, int grid_h, int grid_w) {
    if (prompt_lengths.size() < 2)
        throw InvalidArity("build_token_layout: need at least one textual prompt plus the global prompt");
    const int n = static_cast<int>(prompt_lengths.size()) - 1;
    if (static_cast<int>(boxes.size()) != n)
        throw InvalidArity("build_token_layout: " + std::to_string(boxes.size()) + " boxes for " +
                           std::to_string(n) + " textual prompts");
    for (int len : prompt_lengths)
        if (len < 1) throw InvalidArity("build_token_layout: every prompt needs at least one token");

    TokenLayout layout;
    layout.n = n;
    layout.grid_h = grid_h;
    layout.grid_w = grid_w;
    int offset = 0;
    for (int len : prompt_lengths) {
        layout.prompt_spans.emplace_back(offset, offset + len);
        offset += len;
    }
    layout.L_T = offset;
    layout.L_I = grid_h * grid_w;
    layout.region_of_patch = build_region_partition(boxes, grid_h, grid_w);
    return layout;
}

inline MembershipVectors membership_vectors(const TokenLayout& layout) {
    MembershipVectors mv;
    mv.n = layout.n;
    mv.L_T = layout.L_T;
    mv.L_I = layout.L_I;
    const int g = layout.n + 1;
    mv.m_p.assign(g, std::vector<uint8_t>(layout.L_T, 0));
    mv.m_r.assign(g, std::vector<uint8_t>(layout.L_I, 0));
    mv.m_joint.assign(g, std::vector<uint8_t>(layout.L_T + layout.L_I, 0));
    for (int i = 0; i < g; ++i) {
        for (int t = layout.prompt_spans[i].first; t < layout.prompt_spans[i].second; ++t) {
            mv.m_p[i][t] = 1;
            mv.m_joint[i][t] = 1;
        }
    }
    for (int p = 0; p < layout.L_I; ++p) {
        const int i = layout.region_of_patch[p];
        mv.m_r[i][p] = 1;
        mv.m_joint[i][layout.L_T + p] = 1;
    }
    return mv;
}

}  // namespace dctext
