#pragma once

#include <vector>

#include "dctext/core.hpp"
#include "dctext/layout.hpp"
#include "dctext/masks.hpp"

namespace dctest {

using namespace dctext;

// Random pairwise-disjoint integer rects on a grid (rejection sampling).
inline std::vector<PatchRect> random_disjoint_rects(Rng& rng, int grid_h, int grid_w, int want,
                                                    int max_side = 0) {
    if (max_side <= 0) max_side = std::max(1, std::min(grid_h, grid_w) / 2);
    std::vector<PatchRect> rects;
    int tries = 0;
    while (static_cast<int>(rects.size()) < want && tries < 1000) {
        ++tries;
        const int h = static_cast<int>(rng.uniform_int(1, max_side));
        const int w = static_cast<int>(rng.uniform_int(1, max_side));
        const int r0 = static_cast<int>(rng.uniform_int(0, grid_h - h));
        const int c0 = static_cast<int>(rng.uniform_int(0, grid_w - w));
        PatchRect cand{r0, r0 + h, c0, c0 + w};
        bool clash = false;
        for (const auto& r : rects)
            clash = clash || !(cand.row_end <= r.row_start || r.row_end <= cand.row_start ||
                               cand.col_end <= r.col_start || r.col_end <= cand.col_start);
        if (!clash) rects.push_back(cand);
    }
    return rects;
}

struct RandomLayout {
    TokenLayout layout;
    std::vector<PatchRect> rects;
    std::vector<BBox> boxes;
    std::vector<int> lengths;
};

// Layout with n in [1,max_regions], prompt lengths in [2,8], grid up to 16.
inline RandomLayout random_layout(Rng& rng, int max_regions = 5, int max_grid = 16) {
    RandomLayout out;
    const int grid_h = static_cast<int>(rng.uniform_int(4, max_grid));
    const int grid_w = static_cast<int>(rng.uniform_int(4, max_grid));
    std::vector<PatchRect> rects;
    while (rects.empty()) {
        const int want = static_cast<int>(rng.uniform_int(1, max_regions));
        rects = random_disjoint_rects(rng, grid_h, grid_w, want);
    }
    const int n = static_cast<int>(rects.size());
    for (const auto& r : rects) out.boxes.push_back(rect_to_bbox(r, grid_h, grid_w));
    for (int i = 0; i <= n; ++i) out.lengths.push_back(static_cast<int>(rng.uniform_int(2, 8)));
    out.layout = build_token_layout(out.lengths, out.boxes, grid_h, grid_w);
    out.rects = std::move(rects);
    return out;
}

// Independent per-pair rule evaluation of the three masks, used as the test
// oracle against the block-structured construction.
inline bool oracle_mask_entry(const TokenLayout& lt, MaskKind kind,
                              const std::set<PartialMask>& drop, int a, int b) {
    const int bg = lt.n;
    const bool a_text = a < lt.L_T;
    const bool b_text = b < lt.L_T;
    const int ga = lt.group_of_token(a);
    const int gb = lt.group_of_token(b);
    if (ga == gb) return true;  // isolation core
    if (kind == MaskKind::Isolation) return false;

    bool allowed = false;
    if (a_text && b_text && !drop.count(PartialMask::PiToPg)) allowed |= gb == bg;
    if (a_text && !b_text) {
        if (!drop.count(PartialMask::PiToRc)) allowed |= gb == bg;
        if (!drop.count(PartialMask::PgToRi)) allowed |= ga == bg;
    }
    if (!a_text && !b_text && !drop.count(PartialMask::RcToRi)) allowed |= ga == bg;
    if (kind == MaskKind::Expansion && !a_text && !b_text) allowed |= gb == bg;
    return allowed;
}

}  // namespace dctest
