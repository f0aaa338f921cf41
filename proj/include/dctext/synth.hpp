#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/layout.hpp"
#include "dctext/model.hpp"
#include "dctext/pipeline.hpp"

namespace dctext {

// ---------------------------------------------------------------------------
// Glyph task: stamp one of G fixed 4×4 binary patterns inside each target
// region of an otherwise flat image. Token codebook: ids [0,G) name glyphs,
// ids [G, G+cells) name the 4×4-aligned lattice cell a region occupies.
// ---------------------------------------------------------------------------

inline constexpr int kGlyphSide = 4;
inline constexpr double kForeground = 1.0;
inline constexpr double kBackground = -1.0;

using GlyphPattern = std::array<uint8_t, kGlyphSide * kGlyphSide>;

inline const std::vector<GlyphPattern>& glyph_library() {
    // T, L, X, O
    static const std::vector<GlyphPattern> lib = {
        GlyphPattern{1, 1, 1, 1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0},
        GlyphPattern{1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1},
        GlyphPattern{1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1},
        GlyphPattern{1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1},
    };
    return lib;
}

inline int glyph_count() { return static_cast<int>(glyph_library().size()); }

struct GlyphSpec {
    int glyph = 0;
    PatchRect rect;
};

struct Sample {
    Latent x0;
    std::vector<int> global_tokens;                // [glyph, cell, glyph, cell, ...]
    std::vector<std::vector<int>> textual_tokens;  // one single-glyph prompt per region
    std::vector<GlyphSpec> specs;
};

struct LatticeInfo {
    int cells_h = 0, cells_w = 0;
    int cells() const { return cells_h * cells_w; }
};

inline LatticeInfo glyph_lattice(int grid_h, int grid_w) {
    if (grid_h % kGlyphSide != 0 || grid_w % kGlyphSide != 0 || grid_h < kGlyphSide ||
        grid_w < kGlyphSide)
        throw InfeasiblePacking("glyph_lattice: grid must be a positive multiple of " +
                                std::to_string(kGlyphSide));
    return {grid_h / kGlyphSide, grid_w / kGlyphSide};
}

inline PatchRect lattice_cell_rect(int cell, int grid_h, int grid_w) {
    const LatticeInfo lat = glyph_lattice(grid_h, grid_w);
    const int cr = cell / lat.cells_w;
    const int cc = cell % lat.cells_w;
    return PatchRect{cr * kGlyphSide, (cr + 1) * kGlyphSide, cc * kGlyphSide, (cc + 1) * kGlyphSide};
}

inline int position_token(int cell) { return glyph_count() + cell; }

// Vocabulary large enough for the glyph + position codebooks on this grid.
inline int synth_vocab(int grid_h, int grid_w) {
    return glyph_count() + glyph_lattice(grid_h, grid_w).cells();
}

inline void stamp_glyph(Latent& img, int glyph, const PatchRect& rect) {
    if (glyph < 0 || glyph >= glyph_count()) throw OutOfBounds("stamp_glyph: glyph id");
    if (rect.height() < kGlyphSide || rect.width() < kGlyphSide)
        throw InvalidArgument("stamp_glyph: rect smaller than a glyph");
    const GlyphPattern& pat = glyph_library()[glyph];
    const int r0 = rect.row_start + (rect.height() - kGlyphSide) / 2;
    const int c0 = rect.col_start + (rect.width() - kGlyphSide) / 2;
    for (int r = 0; r < kGlyphSide; ++r)
        for (int c = 0; c < kGlyphSide; ++c)
            for (int ch = 0; ch < img.channels; ++ch)
                img.at(ch, r0 + r, c0 + c) = pat[r * kGlyphSide + c] ? kForeground : kBackground;
}

// Binarize the central 4×4 window of each rect and match it to the nearest
// library pattern by Hamming distance (ties -> lowest id).
inline int match_glyph(const Latent& img, const PatchRect& rect) {
    if (rect.row_start < 0 || rect.col_start < 0 || rect.row_end > img.height ||
        rect.col_end > img.width)
        throw OutOfBounds("match_glyph: rect outside image");
    const int r0 = rect.row_start + (rect.height() - kGlyphSide) / 2;
    const int c0 = rect.col_start + (rect.width() - kGlyphSide) / 2;
    GlyphPattern bits{};
    for (int r = 0; r < kGlyphSide; ++r)
        for (int c = 0; c < kGlyphSide; ++c)
            bits[r * kGlyphSide + c] = img.at(0, r0 + r, c0 + c) > 0.0 ? 1 : 0;
    int best = 0, best_dist = kGlyphSide * kGlyphSide + 1;
    for (int g = 0; g < glyph_count(); ++g) {
        const GlyphPattern& pat = glyph_library()[g];
        int dist = 0;
        for (int i = 0; i < kGlyphSide * kGlyphSide; ++i) dist += bits[i] != pat[i];
        if (dist < best_dist) {
            best_dist = dist;
            best = g;
        }
    }
    return best;
}

inline double region_accuracy(const Latent& img, const std::vector<GlyphSpec>& specs) {
    if (specs.empty()) return 1.0;
    int matched = 0;
    for (const auto& s : specs)
        if (match_glyph(img, s.rect) == s.glyph) ++matched;
    return static_cast<double>(matched) / static_cast<double>(specs.size());
}

inline Sample make_sample(const std::vector<int>& cells, const std::vector<int>& glyphs,
                          int grid_h, int grid_w, int channels) {
    if (cells.size() != glyphs.size() || cells.empty())
        throw InvalidArity("make_sample: cells and glyphs must pair up");
    Sample s;
    s.x0 = Latent(channels, grid_h, grid_w, kBackground);
    for (size_t i = 0; i < cells.size(); ++i) {
        GlyphSpec spec{glyphs[i], lattice_cell_rect(cells[i], grid_h, grid_w)};
        stamp_glyph(s.x0, spec.glyph, spec.rect);
        s.specs.push_back(spec);
        s.textual_tokens.push_back({glyphs[i]});
        s.global_tokens.push_back(glyphs[i]);
        s.global_tokens.push_back(position_token(cells[i]));
    }
    return s;
}

// Reproducible dataset of stamped images. Regions occupy distinct lattice
// cells, so rects are pairwise disjoint by construction.
inline std::vector<Sample> gen_dataset(int n_samples, int max_regions, int grid_h, int grid_w,
                                       uint64_t seed, int channels = 1) {
    const LatticeInfo lat = glyph_lattice(grid_h, grid_w);
    if (max_regions < 1 || max_regions > lat.cells())
        throw InfeasiblePacking("gen_dataset: " + std::to_string(max_regions) +
                                " regions cannot pack " + std::to_string(lat.cells()) + " cells");
    if (max_regions > glyph_count())
        throw InfeasiblePacking("gen_dataset: distinct glyph per region needs max_regions <= " +
                                std::to_string(glyph_count()));
    if (n_samples < 0) throw InvalidArgument("gen_dataset: negative sample count");
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(n_samples);
    for (int si = 0; si < n_samples; ++si) {
        const int k = static_cast<int>(rng.uniform_int(1, max_regions));
        // draw k distinct cells, keep raster order as the canonical order
        std::vector<int> cells;
        while (static_cast<int>(cells.size()) < k) {
            const int cell = static_cast<int>(rng.uniform_int(0, lat.cells() - 1));
            bool dup = false;
            for (int c : cells) dup = dup || c == cell;
            if (!dup) cells.push_back(cell);
        }
        std::sort(cells.begin(), cells.end());
        // distinct glyph per region, mirroring distinct target texts
        std::vector<int> pool(glyph_count());
        for (int g = 0; g < glyph_count(); ++g) pool[g] = g;
        std::vector<int> glyphs;
        for (int i = 0; i < k; ++i) {
            const int pick = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1));
            glyphs.push_back(pool[pick]);
            pool.erase(pool.begin() + pick);
        }
        out.push_back(make_sample(cells, glyphs, grid_h, grid_w, channels));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flow-matching trainer
// ---------------------------------------------------------------------------

// One supervised view of a sample: a clean image plus the prompts it should
// be denoised under (the whole frame with the global prompt, or one region's
// crop with its own single prompt). Crop views can be embedded at local
// coordinates or at the rect's true offset, so the backbone learns to render
// a glyph from its prompt wherever the patches sit.
struct TrainView {
    Latent x0;
    std::vector<std::vector<int>> prompts;
    int row0 = 0, col0 = 0;
};

inline TrainView full_frame_view(const Sample& s) { return {s.x0, {s.global_tokens}, 0, 0}; }

inline TrainView crop_view(const Sample& s, int region, bool at_true_offset = false) {
    if (region < 0 || region >= static_cast<int>(s.specs.size()))
        throw OutOfBounds("crop_view: region index");
    const PatchRect& r = s.specs[region].rect;
    return {extract_region(s.x0, r), {s.textual_tokens[region]},
            at_true_offset ? r.row_start : 0, at_true_offset ? r.col_start : 0};
}

// Loss of v_theta(x_t, t, prompts) against (eps - x0) with
// x_t = (1-t) x0 + t eps, averaged over elements. Gradients accumulate when
// `grads` is non-null.
inline double flow_loss(const ToyDenoiser& model, const TrainView& view, double t,
                        const Latent& eps, const AttentionMask* m, ModelParams* grads) {
    if (!eps.same_shape(view.x0)) throw ShapeMismatch("flow_loss: noise shape");
    Latent x_t = view.x0;
    for (size_t i = 0; i < x_t.v.size(); ++i) x_t.v[i] = (1.0 - t) * view.x0.v[i] + t * eps.v[i];

    ForwardCache cache;
    const Latent v = model.forward_cached(x_t, view.prompts, t, m, cache, view.row0, view.col0);
    const double inv_count = 1.0 / static_cast<double>(v.v.size());
    double loss = 0.0;
    Latent dv(v.channels, v.height, v.width);
    for (size_t i = 0; i < v.v.size(); ++i) {
        const double diff = v.v[i] - (eps.v[i] - view.x0.v[i]);
        loss += diff * diff * inv_count;
        dv.v[i] = 2.0 * diff * inv_count;
    }
    if (grads) model.backward(cache, dv, m, *grads);
    return loss;
}

struct TrainOptions {
    int batch = 4;
    double crop_prob = 0.5;  // fraction of views drawn as region crops
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct TrainResult {
    std::vector<double> loss_curve;  // one entry per step (batch mean)

    double window_mean(bool head) const {
        const size_t n = loss_curve.size();
        const size_t w = std::max<size_t>(1, n / 10);
        double s = 0;
        if (head)
            for (size_t i = 0; i < w; ++i) s += loss_curve[i];
        else
            for (size_t i = n - w; i < n; ++i) s += loss_curve[i];
        return s / static_cast<double>(w);
    }
};

// Adam on the flow-matching objective over a mixture of full-frame and
// region-crop views.
inline TrainResult train_toy(ToyDenoiser& model, const std::vector<Sample>& dataset, int steps,
                             double lr, uint64_t seed, const TrainOptions& opt = {}) {
    if (steps < 1) throw InvalidArgument("train_toy: steps must be >= 1");
    if (dataset.empty()) throw EmptyList("train_toy: empty dataset");

    ModelParams grads = ToyDenoiser(model.cfg).p;   // zero tensors with matching shapes
    ModelParams adam_m = grads, adam_v = grads;
    std::vector<Matd*> params = model.p.collect();
    std::vector<Matd*> gs = grads.collect();
    std::vector<Matd*> ms = adam_m.collect();
    std::vector<Matd*> vs = adam_v.collect();

    Rng rng(seed);
    TrainResult res;
    res.loss_curve.reserve(steps);

    for (int step = 1; step <= steps; ++step) {
        for (Matd* g : gs) g->zero();
        double loss = 0.0;
        for (int b = 0; b < opt.batch; ++b) {
            const Sample& s = dataset[rng.uniform_int(0, static_cast<int64_t>(dataset.size()) - 1)];
            TrainView view =
                (rng.uniform() < opt.crop_prob && !s.specs.empty())
                    ? crop_view(s,
                                static_cast<int>(rng.uniform_int(
                                    0, static_cast<int64_t>(s.specs.size()) - 1)),
                                rng.uniform() < 0.5)
                    : full_frame_view(s);
            const double t = rng.uniform();
            Latent eps(view.x0.channels, view.x0.height, view.x0.width);
            for (double& x : eps.v) x = rng.normal();
            loss += flow_loss(model, view, t, eps, nullptr, &grads);
        }
        loss /= opt.batch;
        if (!std::isfinite(loss))
            throw DivergenceDetected("train_toy: loss diverged at step " + std::to_string(step));
        res.loss_curve.push_back(loss);

        const double bias1 = 1.0 - std::pow(opt.beta1, step);
        const double bias2 = 1.0 - std::pow(opt.beta2, step);
        const double inv_batch = 1.0 / opt.batch;
        for (size_t i = 0; i < params.size(); ++i) {
            Matd& w = *params[i];
            Matd& g = *gs[i];
            Matd& m1 = *ms[i];
            Matd& m2 = *vs[i];
            for (size_t j = 0; j < w.v.size(); ++j) {
                const double gj = g.v[j] * inv_batch;
                m1.v[j] = opt.beta1 * m1.v[j] + (1.0 - opt.beta1) * gj;
                m2.v[j] = opt.beta2 * m2.v[j] + (1.0 - opt.beta2) * gj * gj;
                w.v[j] -= lr * (m1.v[j] / bias1) / (std::sqrt(m2.v[j] / bias2) + opt.adam_eps);
            }
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

inline PipelineInput sample_to_pipeline_input(const Sample& s, uint64_t seed,
                                              const Schedule& sched,
                                              const PipelineOptions& opts = {}) {
    PipelineInput in;
    in.seed = seed;
    in.grid_h = s.x0.height;
    in.grid_w = s.x0.width;
    in.channels = s.x0.channels;
    in.textual_tokens = s.textual_tokens;
    for (const auto& spec : s.specs)
        in.boxes.push_back(rect_to_bbox(spec.rect, s.x0.height, s.x0.width));
    in.global_tokens = s.global_tokens;
    in.sched = sched;
    in.opts = opts;
    return in;
}

// Emergence diagnostic: each region's noise crop is denoised on its own for
// the focus-stage budget; a region whose glyph fails to surface early is
// expected to miss in the final image unless the global stage recovers it.
struct RegionDiagnostic {
    bool early_match = false;
    bool final_match = false;
};

inline std::vector<RegionDiagnostic> region_emergence_diagnostic(const ToyDenoiser& model,
                                                                 const Sample& s, uint64_t seed,
                                                                 const Schedule& sched) {
    PipelineInput in = sample_to_pipeline_input(s, seed, sched);
    Rng rng(seed);
    const Latent z_T = sample_noise(rng, in.channels, in.grid_h, in.grid_w);

    std::vector<RegionDiagnostic> out(s.specs.size());
    const int probe_steps = sched.T_init + sched.T_focus;
    for (size_t i = 0; i < s.specs.size(); ++i) {
        Latent crop = extract_region(z_T, s.specs[i].rect);
        const std::vector<std::vector<int>> prompts{s.textual_tokens[i]};
        const std::vector<double> pooled = model.prompt_pooled(s.textual_tokens[i]);
        for (int k = 0; k < probe_steps; ++k) {
            const Conditioning c{sched.timesteps[k], pooled, sched.guidance};
            const Latent v = model.forward(crop, prompts, c, nullptr);
            crop = euler_step(crop, v, sched.timesteps[k], sched.timesteps[k + 1]);
        }
        const PatchRect local{0, crop.height, 0, crop.width};
        out[i].early_match = match_glyph(crop, local) == s.specs[i].glyph;
    }

    const RunResult run = run_dctext(model, in);
    for (size_t i = 0; i < s.specs.size(); ++i)
        out[i].final_match = match_glyph(run.final, s.specs[i].rect) == s.specs[i].glyph;
    return out;
}

}  // namespace dctext
