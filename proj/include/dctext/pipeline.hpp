#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/layout.hpp"
#include "dctext/masks.hpp"
#include "dctext/model.hpp"

namespace dctext {

// Stage plan: T total steps split into init / focus / expansion / global.
struct Schedule {
    int T = 0;
    int T_init = 0, T_focus = 0, T_expn = 0;
    double alpha = 0.7;
    double guidance = 5.0;
    std::vector<double> timesteps;  // length T+1, strictly decreasing 1..0

    int global_steps() const { return T - (T_init + T_focus + T_expn); }
};

inline Schedule make_schedule(int T, int T_init, int T_focus, int T_expn, double alpha,
                              double guidance = 5.0) {
    if (T < 1) throw InvalidArgument("make_schedule: T must be >= 1");
    if (T_init < 0 || T_focus < 0 || T_expn < 0)
        throw InvalidArgument("make_schedule: stage counts must be >= 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("make_schedule: alpha outside [0,1]");
    if (T_init + T_focus + T_expn > T)
        throw ScheduleOverflow("make_schedule: T_init+T_focus+T_expn = " +
                               std::to_string(T_init + T_focus + T_expn) + " exceeds T = " +
                               std::to_string(T));
    Schedule s;
    s.T = T;
    s.T_init = T_init;
    s.T_focus = T_focus;
    s.T_expn = T_expn;
    s.alpha = alpha;
    s.guidance = guidance;
    s.timesteps.resize(T + 1);
    for (int k = 0; k <= T; ++k) s.timesteps[k] = static_cast<double>(T - k) / T;
    return s;
}

// One explicit-Euler step of the flow ODE dz/dt = v along the linear
// interpolant convention (v predicts noise minus data).
inline Latent euler_step(const Latent& z, const Latent& v, double t_from, double t_to) {
    if (!z.same_shape(v)) throw ShapeMismatch("euler_step: latent/velocity shape");
    if (!(t_from > t_to)) throw NonMonotoneTime("euler_step: t_from must exceed t_to");
    Latent out = z;
    const double dt = t_to - t_from;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += dt * v.v[i];
    return out;
}

inline Latent extract_region(const Latent& z, const PatchRect& r) {
    if (r.row_start < 0 || r.col_start < 0 || r.row_end > z.height || r.col_end > z.width ||
        r.height() < 1 || r.width() < 1)
        throw OutOfBounds("extract_region: rect outside latent");
    Latent out(z.channels, r.height(), r.width());
    for (int c = 0; c < z.channels; ++c)
        for (int row = 0; row < r.height(); ++row)
            for (int col = 0; col < r.width(); ++col)
                out.at(c, row, col) = z.at(c, r.row_start + row, r.col_start + col);
    return out;
}

// Writes alpha*patch_orig + (1-alpha)*patch_denoised into the rect; every
// value outside the rect is left untouched.
inline Latent reinsert_blend(const Latent& z, const PatchRect& r, const Latent& patch_orig,
                             const Latent& patch_denoised, double alpha) {
    if (r.row_start < 0 || r.col_start < 0 || r.row_end > z.height || r.col_end > z.width)
        throw OutOfBounds("reinsert_blend: rect outside latent");
    if (patch_orig.channels != z.channels || patch_orig.height != r.height() ||
        patch_orig.width != r.width() || !patch_orig.same_shape(patch_denoised))
        throw ShapeMismatch("reinsert_blend: patch shapes inconsistent with rect");
    Latent out = z;
    for (int c = 0; c < z.channels; ++c)
        for (int row = 0; row < r.height(); ++row)
            for (int col = 0; col < r.width(); ++col)
                out.at(c, r.row_start + row, r.col_start + col) =
                    alpha * patch_orig.at(c, row, col) +
                    (1.0 - alpha) * patch_denoised.at(c, row, col);
    return out;
}

enum class Stage : uint8_t { Init = 0, Focus = 1, Expn = 2, Global = 3 };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::Init: return "init";
        case Stage::Focus: return "focus";
        case Stage::Expn: return "expn";
        case Stage::Global: return "global";
    }
    return "?";
}

struct StepRecord {
    int k = 0;  // schedule step index
    Stage stage = Stage::Global;
    double t_from = 0, t_to = 0;
    std::string mask;  // "none", "focus", "expn", ...
    double flops = 0;
};

struct Trace {
    std::vector<StepRecord> steps;

    double total_flops() const {
        double f = 0;
        for (const auto& s : steps) f += s.flops;
        return f;
    }
    std::vector<int> stage_lengths() const {
        std::vector<int> len(4, 0);
        for (const auto& s : steps) ++len[static_cast<int>(s.stage)];
        return len;
    }
};

struct PipelineOptions {
    std::set<PartialMask> drop;      // drop-one ablation of the focus mask
    bool isolation_override = false; // use the isolation mask in both masked stages
    std::set<std::string> snapshot_stages;  // subset of {"init","focus","expn","global"}
};

struct RunResult {
    Latent final;
    Trace trace;
    std::map<std::string, Latent> snapshots;  // keyed by stage name
    TokenLayout layout;
};

struct PipelineInput {
    uint64_t seed = 0;
    int grid_h = 16, grid_w = 16, channels = 1;
    std::vector<std::vector<int>> textual_tokens;  // p_1..p_n
    std::vector<BBox> boxes;                       // one per textual prompt
    std::vector<int> global_tokens;                // p_g
    Schedule sched;
    PipelineOptions opts;
    std::optional<Latent> initial_noise;  // replaces the seeded z_T draw when set
};

inline Latent sample_noise(Rng& rng, int channels, int h, int w) {
    Latent z(channels, h, w);
    for (double& x : z.v) x = rng.normal();
    return z;
}

// Each region's crop of the original noise is denoised on its own, as a
// standalone mini-image with local coordinates and only its own prompt, then
// blended back at weight alpha on the original patch. Crops all read from the
// incoming latent, so the region order cannot matter for disjoint rects.
inline Latent localized_noise_init(const ToyDenoiser& model, const Latent& z_T,
                                   const std::vector<PatchRect>& rects,
                                   const std::vector<std::vector<int>>& textual_tokens,
                                   const Schedule& sched, Trace* trace = nullptr) {
    if (rects.size() != textual_tokens.size())
        throw InvalidArity("localized_noise_init: one prompt per region required");
    if (sched.T_init == 0) return z_T;
    Latent out = z_T;
    std::vector<double> step_flops(sched.T_init, 0.0);
    for (size_t i = 0; i < rects.size(); ++i) {
        const Latent orig = extract_region(z_T, rects[i]);
        Latent crop = orig;
        const std::vector<std::vector<int>> prompts{textual_tokens[i]};
        const Conditioning cond_base{0.0, model.prompt_pooled(textual_tokens[i]), sched.guidance};
        for (int k = 0; k < sched.T_init; ++k) {
            Conditioning c = cond_base;
            c.t = sched.timesteps[k];
            const Latent v = model.forward(crop, prompts, c, nullptr);
            crop = euler_step(crop, v, sched.timesteps[k], sched.timesteps[k + 1]);
            step_flops[k] += model.flops_forward(static_cast<int>(textual_tokens[i].size()),
                                                 rects[i].area());
        }
        out = reinsert_blend(out, rects[i], orig, crop, sched.alpha);
    }
    if (trace)
        for (int k = 0; k < sched.T_init; ++k)
            trace->steps.push_back({k, Stage::Init, sched.timesteps[k], sched.timesteps[k + 1],
                                    "none", step_flops[k]});
    return out;
}

// Plain flow sampling under the global prompt only: the reference the full
// pipeline must reduce to when every special stage has zero steps.
inline Latent baseline_sample(const ToyDenoiser& model, uint64_t seed, int channels, int h, int w,
                              const std::vector<int>& global_tokens, const Schedule& sched,
                              Trace* trace = nullptr) {
    Rng rng(seed);
    Latent z = sample_noise(rng, channels, h, w);
    const std::vector<std::vector<int>> prompts{global_tokens};
    const std::vector<double> pooled = model.prompt_pooled(global_tokens);
    for (int k = 0; k < sched.T; ++k) {
        const Conditioning c{sched.timesteps[k], pooled, sched.guidance};
        const Latent v = model.forward(z, prompts, c, nullptr);
        z = euler_step(z, v, sched.timesteps[k], sched.timesteps[k + 1]);
        if (trace)
            trace->steps.push_back({k, Stage::Global, sched.timesteps[k], sched.timesteps[k + 1],
                                    "none",
                                    model.flops_forward(static_cast<int>(global_tokens.size()),
                                                        h * w)});
    }
    return z;
}

// The full four-stage pipeline: localized noise initialization, text-focus
// denoising, context-expansion denoising, then global denoising on the global
// prompt alone.
inline RunResult run_dctext(const ToyDenoiser& model, const PipelineInput& in) {
    RunResult res;
    std::vector<int> lengths;
    for (const auto& p : in.textual_tokens) lengths.push_back(static_cast<int>(p.size()));
    lengths.push_back(static_cast<int>(in.global_tokens.size()));
    res.layout = build_token_layout(lengths, in.boxes, in.grid_h, in.grid_w);

    const MembershipVectors mv = membership_vectors(res.layout);
    AttentionMask m_focus = in.opts.isolation_override ? isolation_mask(mv)
                                                       : focus_mask(mv, in.opts.drop);
    AttentionMask m_expn = in.opts.isolation_override ? isolation_mask(mv) : expansion_mask(mv);

    std::vector<PatchRect> rects;
    rects.reserve(in.boxes.size());
    for (const auto& b : in.boxes) rects.push_back(rasterize_bbox(b, in.grid_h, in.grid_w));

    const Schedule& sched = in.sched;
    Rng rng(in.seed);
    Latent z = in.initial_noise ? *in.initial_noise
                                : sample_noise(rng, in.channels, in.grid_h, in.grid_w);
    if (z.channels != in.channels || z.height != in.grid_h || z.width != in.grid_w)
        throw ShapeMismatch("run_dctext: initial noise shape disagrees with the grid");

    auto snapshot = [&](const char* stage) {
        if (in.opts.snapshot_stages.count(stage)) res.snapshots.emplace(stage, z);
    };

    // stage 1: localized noise initialization
    z = localized_noise_init(model, z, rects, in.textual_tokens, sched, &res.trace);
    snapshot("init");

    // stages 2+3: masked denoising with the full prompt set
    std::vector<std::vector<int>> all_prompts = in.textual_tokens;
    all_prompts.push_back(in.global_tokens);
    const std::vector<double> pooled_all = model.compute_pooled(all_prompts);
    const double masked_flops = model.flops_forward(res.layout.L_T, res.layout.L_I);

    int k = sched.T_init;
    auto masked_stage = [&](Stage stage, int steps, const AttentionMask& mask) {
        for (int s = 0; s < steps; ++s, ++k) {
            const Conditioning c{sched.timesteps[k], pooled_all, sched.guidance};
            const Latent v = model.forward(z, all_prompts, c, &mask);
            z = euler_step(z, v, sched.timesteps[k], sched.timesteps[k + 1]);
            res.trace.steps.push_back({k, stage, sched.timesteps[k], sched.timesteps[k + 1],
                                       to_string(mask.kind), masked_flops});
        }
    };
    masked_stage(Stage::Focus, sched.T_focus, m_focus);
    snapshot("focus");
    masked_stage(Stage::Expn, sched.T_expn, m_expn);
    snapshot("expn");

    // stage 4: global denoising, global prompt only, no mask
    const std::vector<std::vector<int>> global_prompts{in.global_tokens};
    const std::vector<double> pooled_g = model.prompt_pooled(in.global_tokens);
    const double global_flops =
        model.flops_forward(static_cast<int>(in.global_tokens.size()), res.layout.L_I);
    for (; k < sched.T; ++k) {
        const Conditioning c{sched.timesteps[k], pooled_g, sched.guidance};
        const Latent v = model.forward(z, global_prompts, c, nullptr);
        z = euler_step(z, v, sched.timesteps[k], sched.timesteps[k + 1]);
        res.trace.steps.push_back({k, Stage::Global, sched.timesteps[k], sched.timesteps[k + 1],
                                   "none", global_flops});
    }
    snapshot("global");

    res.final = std::move(z);
    return res;
}

}  // namespace dctext
