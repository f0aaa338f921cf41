#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dctext/attention.hpp"
#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/masks.hpp"

namespace dctext {

struct DenoiserConfig {
    int dim = 32;
    int heads = 4;
    int n_double = 2;
    int n_single = 2;
    int channels = 1;
    int grid_h = 16;  // largest patch grid the positional tables cover
    int grid_w = 16;
    int vocab = 64;
    int max_text_len = 32;
    int ff_mult = 4;
    int time_features = 8;  // even: sin/cos pairs

    int d_ff() const { return dim * ff_mult; }
    int head_dim() const { return dim / heads; }

    void validate() const {
        if (dim < 1 || heads < 1 || dim % heads != 0)
            throw InvalidArgument("DenoiserConfig: dim must be a positive multiple of heads");
        if (n_double < 0 || n_single < 0 || n_double + n_single < 1)
            throw InvalidArgument("DenoiserConfig: need at least one block");
        if (channels < 1 || grid_h < 1 || grid_w < 1 || vocab < 1 || max_text_len < 1)
            throw InvalidArgument("DenoiserConfig: sizes must be positive");
        if (time_features < 2 || time_features % 2 != 0)
            throw InvalidArgument("DenoiserConfig: time_features must be even and >= 2");
    }

    bool operator==(const DenoiserConfig& o) const {
        return dim == o.dim && heads == o.heads && n_double == o.n_double &&
               n_single == o.n_single && channels == o.channels && grid_h == o.grid_h &&
               grid_w == o.grid_w && vocab == o.vocab && max_text_len == o.max_text_len &&
               ff_mult == o.ff_mult && time_features == o.time_features;
    }
};

// Scalar time plus pooled prompt embedding. The guidance scale is carried for
// reporting only; it does not enter any computation here.
struct Conditioning {
    double t = 0.0;
    std::vector<double> pooled;
    double guidance = 5.0;
};

// One attention+FFN parameter set. Double blocks own two of these (text and
// image streams); single blocks own one for the whole joint sequence.
struct StreamParams {
    Matd mod_attn_w, mod_attn_b;  // 2d×d, 2d×1 -> (scale, shift) before attention
    Matd qkv_w, qkv_b;            // 3d×d, 3d×1
    Matd out_w, out_b;            // d×d, d×1
    Matd mod_mlp_w, mod_mlp_b;    // 2d×d, 2d×1 -> (scale, shift) before the MLP
    Matd ff1_w, ff1_b;            // dff×d, dff×1
    Matd ff2_w, ff2_b;            // d×dff, d×1

    void collect(std::vector<Matd*>& out) {
        out.push_back(&mod_attn_w);
        out.push_back(&mod_attn_b);
        out.push_back(&qkv_w);
        out.push_back(&qkv_b);
        out.push_back(&out_w);
        out.push_back(&out_b);
        out.push_back(&mod_mlp_w);
        out.push_back(&mod_mlp_b);
        out.push_back(&ff1_w);
        out.push_back(&ff1_b);
        out.push_back(&ff2_w);
        out.push_back(&ff2_b);
    }
};

struct DoubleBlockParams {
    StreamParams txt, img;
};

// All learnable tensors. Checkpoints serialize them in collect() order, which
// follows declaration order.
struct ModelParams {
    Matd tok_embed;   // vocab×d
    Matd txt_pos;     // max_text_len×d (position within a prompt)
    Matd patch_w;     // d×channels
    Matd patch_b;     // d×1
    Matd row_embed;   // grid_h×d
    Matd col_embed;   // grid_w×d
    Matd time_w;      // d×F
    Matd time_b;      // d×1
    Matd pool_w;      // d×d
    Matd pool_b;      // d×1
    std::vector<DoubleBlockParams> dbl;
    std::vector<StreamParams> sgl;
    Matd unembed_w;  // channels×d
    Matd unembed_b;  // channels×1

    std::vector<Matd*> collect() {
        std::vector<Matd*> out;
        out.push_back(&tok_embed);
        out.push_back(&txt_pos);
        out.push_back(&patch_w);
        out.push_back(&patch_b);
        out.push_back(&row_embed);
        out.push_back(&col_embed);
        out.push_back(&time_w);
        out.push_back(&time_b);
        out.push_back(&pool_w);
        out.push_back(&pool_b);
        for (auto& b : dbl) {
            b.txt.collect(out);
            b.img.collect(out);
        }
        for (auto& s : sgl) s.collect(out);
        out.push_back(&unembed_w);
        out.push_back(&unembed_b);
        return out;
    }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

// y = x * W^T + b  (x: N×in, W: out×in, b: out×1)
inline Matd linear(const Matd& x, const Matd& w, const Matd& b) {
    Matd y = matmul_nt(x, w);
    for (int i = 0; i < y.rows; ++i)
        for (int j = 0; j < y.cols; ++j) y(i, j) += b(j, 0);
    return y;
}

// Accumulates dW += dy^T * x, db += column-sums(dy); returns dx = dy * W.
inline Matd linear_backward(const Matd& x, const Matd& w, const Matd& dy, Matd& dw, Matd& db) {
    matmul_tn_acc(dy, x, dw);
    for (int i = 0; i < dy.rows; ++i)
        for (int j = 0; j < dy.cols; ++j) db(j, 0) += dy(i, j);
    return matmul(dy, w);
}

struct LnCache {
    Matd xhat;                 // normalized rows
    std::vector<double> rstd;  // per row
};

inline constexpr double kLnEps = 1e-6;

inline Matd layernorm(const Matd& x, LnCache* cache) {
    Matd y(x.rows, x.cols);
    if (cache) {
        cache->xhat = Matd(x.rows, x.cols);
        cache->rstd.assign(x.rows, 0.0);
    }
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double mean = 0;
        for (int j = 0; j < x.cols; ++j) mean += xi[j];
        mean /= x.cols;
        double var = 0;
        for (int j = 0; j < x.cols; ++j) {
            const double dxj = xi[j] - mean;
            var += dxj * dxj;
        }
        var /= x.cols;
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        double* yi = y.row(i);
        for (int j = 0; j < x.cols; ++j) yi[j] = (xi[j] - mean) * rstd;
        if (cache) {
            cache->rstd[i] = rstd;
            for (int j = 0; j < x.cols; ++j) cache->xhat(i, j) = yi[j];
        }
    }
    return y;
}

inline Matd layernorm_backward(const Matd& dxhat, const LnCache& cache) {
    const int n = dxhat.rows, d = dxhat.cols;
    Matd dx(n, d);
    for (int i = 0; i < n; ++i) {
        const double* g = dxhat.row(i);
        const double* xh = cache.xhat.row(i);
        double g_mean = 0, gx_mean = 0;
        for (int j = 0; j < d; ++j) {
            g_mean += g[j];
            gx_mean += g[j] * xh[j];
        }
        g_mean /= d;
        gx_mean /= d;
        double* out = dx.row(i);
        for (int j = 0; j < d; ++j) out[j] = cache.rstd[i] * (g[j] - g_mean - xh[j] * gx_mean);
    }
    return dx;
}

}  // namespace detail

// Token descriptors recorded during embedding, reused by the backward pass.
struct EmbedInfo {
    std::vector<std::pair<int, int>> text_tokens;  // (token id, position in prompt)
    int L_T = 0;
    int h = 0, w = 0;        // patch grid of this forward call
    int row0 = 0, col0 = 0;  // positional-table offset of patch (0,0)
};

struct BlockCache {
    Matd x_in;
    detail::LnCache ln1;
    Matd h1;
    Matd qkv;  // N×3d
    std::vector<Matd> attn_w;  // per head, N×N
    Matd attn_out;             // N×d
    Matd x_mid;
    detail::LnCache ln2;
    Matd h2;
    Matd ff_u;  // N×dff preactivation
    Matd ff_s;  // silu(ff_u)
    // per segment: scale/shift for attention and MLP modulation
    std::vector<std::array<std::vector<double>, 4>> segmod;
};

struct ForwardCache {
    EmbedInfo embed;
    Latent z;  // input latent (for patch projection gradients)
    std::vector<std::vector<int>> prompts;
    std::vector<double> phi;       // time features
    std::vector<double> cond_raw;  // pre-silu conditioning
    std::vector<double> cond_vec;
    std::vector<double> pooled;
    bool pooled_from_prompts = false;  // whether pooled was derived from tok_embed
    std::vector<BlockCache> blocks;
    detail::LnCache ln_final;  // over image rows only
    Matd y_final;              // normalized image rows (L_I×d)
};

// Miniature MM-DiT flow denoiser: prompt tokens and image patches embed into
// one sequence, n_double two-stream blocks run followed by n_single
// single-stream blocks, all sharing one attention mask, and image tokens
// unembed to a velocity field. Forward passes are pure; parameters are only
// mutated by a trainer.
class ToyDenoiser {
public:
    DenoiserConfig cfg;
    ModelParams p;

    explicit ToyDenoiser(const DenoiserConfig& c) : cfg(c) {
        cfg.validate();
        const int d = cfg.dim;
        p.tok_embed = Matd(cfg.vocab, d);
        p.txt_pos = Matd(cfg.max_text_len, d);
        p.patch_w = Matd(d, cfg.channels);
        p.patch_b = Matd(d, 1);
        p.row_embed = Matd(cfg.grid_h, d);
        p.col_embed = Matd(cfg.grid_w, d);
        p.time_w = Matd(d, cfg.time_features);
        p.time_b = Matd(d, 1);
        p.pool_w = Matd(d, d);
        p.pool_b = Matd(d, 1);
        p.dbl.resize(cfg.n_double);
        for (auto& b : p.dbl) {
            init_stream(b.txt);
            init_stream(b.img);
        }
        p.sgl.resize(cfg.n_single);
        for (auto& s : p.sgl) init_stream(s);
        p.unembed_w = Matd(cfg.channels, d);
        p.unembed_b = Matd(cfg.channels, 1);
    }

    static ToyDenoiser random_init(const DenoiserConfig& c, uint64_t seed) {
        ToyDenoiser m(c);
        Rng rng(seed);
        const int d = c.dim;
        auto fill = [&rng](Matd& t, double stddev) {
            for (double& x : t.v) x = rng.normal(0.0, stddev);
        };
        fill(m.p.tok_embed, 0.5);
        fill(m.p.txt_pos, 0.3);
        fill(m.p.patch_w, 1.0 / std::sqrt(static_cast<double>(c.channels)));
        fill(m.p.row_embed, 0.3);
        fill(m.p.col_embed, 0.3);
        fill(m.p.time_w, 1.0 / std::sqrt(static_cast<double>(c.time_features)));
        fill(m.p.pool_w, 0.5 / std::sqrt(static_cast<double>(d)));
        auto fill_stream = [&](StreamParams& s) {
            fill(s.mod_attn_w, 0.02);
            fill(s.qkv_w, 1.0 / std::sqrt(static_cast<double>(d)));
            fill(s.out_w, 0.5 / std::sqrt(static_cast<double>(d)));
            fill(s.mod_mlp_w, 0.02);
            fill(s.ff1_w, 1.0 / std::sqrt(static_cast<double>(d)));
            fill(s.ff2_w, 0.5 / std::sqrt(static_cast<double>(c.d_ff())));
        };
        for (auto& b : m.p.dbl) {
            fill_stream(b.txt);
            fill_stream(b.img);
        }
        for (auto& s : m.p.sgl) fill_stream(s);
        fill(m.p.unembed_w, 1.0 / std::sqrt(static_cast<double>(d)));
        return m;
    }

    // ---- conditioning ------------------------------------------------------

    std::vector<double> time_features(double t) const {
        std::vector<double> phi(cfg.time_features);
        for (int k = 0; k < cfg.time_features / 2; ++k) {
            const double omega = M_PI * std::pow(2.0, k);
            phi[2 * k] = std::sin(omega * t);
            phi[2 * k + 1] = std::cos(omega * t);
        }
        return phi;
    }

    std::vector<double> prompt_pooled(const std::vector<int>& tokens) const {
        if (tokens.empty()) throw EmptyList("prompt_pooled: empty prompt");
        std::vector<double> mean(cfg.dim, 0.0);
        for (int id : tokens) {
            check_token(id);
            for (int j = 0; j < cfg.dim; ++j) mean[j] += p.tok_embed(id, j);
        }
        for (double& x : mean) x /= static_cast<double>(tokens.size());
        return mean;
    }

    // Mean of per-prompt pooled embeddings over the whole prompt set.
    std::vector<double> compute_pooled(const std::vector<std::vector<int>>& prompts) const {
        std::vector<std::vector<double>> per;
        per.reserve(prompts.size());
        for (const auto& pr : prompts) per.push_back(prompt_pooled(pr));
        return pool_prompt_embeddings(per);
    }

    std::vector<double> conditioning_vector(const Conditioning& c,
                                            std::vector<double>* raw_out = nullptr,
                                            std::vector<double>* phi_out = nullptr) const {
        if (!(c.t >= 0.0 && c.t <= 1.0)) throw InvalidArgument("Conditioning: t outside [0,1]");
        if (static_cast<int>(c.pooled.size()) != cfg.dim)
            throw ShapeMismatch("Conditioning: pooled dim != model dim");
        const std::vector<double> phi = time_features(c.t);
        std::vector<double> raw(cfg.dim);
        for (int i = 0; i < cfg.dim; ++i) {
            double s = p.time_b(i, 0) + p.pool_b(i, 0);
            for (int k = 0; k < cfg.time_features; ++k) s += p.time_w(i, k) * phi[k];
            for (int k = 0; k < cfg.dim; ++k) s += p.pool_w(i, k) * c.pooled[k];
            raw[i] = s;
        }
        std::vector<double> vec(cfg.dim);
        for (int i = 0; i < cfg.dim; ++i) vec[i] = detail::silu(raw[i]);
        if (raw_out) *raw_out = raw;
        if (phi_out) *phi_out = phi;
        return vec;
    }

    // ---- embedding ---------------------------------------------------------

    // `row0`/`col0` shift which rows of the positional tables the patches
    // use, so a crop can be embedded either as its own little image or at the
    // position it occupies in the full frame.
    Matd embed_tokens(const Latent& z, const std::vector<std::vector<int>>& prompts,
                      EmbedInfo& info, int row0 = 0, int col0 = 0) const {
        if (prompts.empty()) throw EmptyList("embed_tokens: no prompts");
        if (z.channels != cfg.channels) throw ShapeMismatch("embed_tokens: channel count");
        if (row0 < 0 || col0 < 0 || z.height < 1 || z.width < 1 ||
            row0 + z.height > cfg.grid_h || col0 + z.width > cfg.grid_w)
            throw ShapeMismatch("embed_tokens: grid exceeds positional tables");
        info.text_tokens.clear();
        info.row0 = row0;
        info.col0 = col0;
        for (const auto& pr : prompts) {
            if (pr.empty()) throw EmptyList("embed_tokens: empty prompt");
            if (static_cast<int>(pr.size()) > cfg.max_text_len)
                throw ShapeMismatch("embed_tokens: prompt longer than max_text_len");
            for (size_t pos = 0; pos < pr.size(); ++pos) {
                check_token(pr[pos]);
                info.text_tokens.emplace_back(pr[pos], static_cast<int>(pos));
            }
        }
        info.L_T = static_cast<int>(info.text_tokens.size());
        info.h = z.height;
        info.w = z.width;
        const int L_I = z.height * z.width;
        Matd x(info.L_T + L_I, cfg.dim);
        for (int t = 0; t < info.L_T; ++t) {
            const auto [id, pos] = info.text_tokens[t];
            for (int j = 0; j < cfg.dim; ++j) x(t, j) = p.tok_embed(id, j) + p.txt_pos(pos, j);
        }
        for (int r = 0; r < z.height; ++r)
            for (int c = 0; c < z.width; ++c) {
                const int row = info.L_T + r * z.width + c;
                for (int j = 0; j < cfg.dim; ++j) {
                    double s = p.patch_b(j, 0) + p.row_embed(row0 + r, j) + p.col_embed(col0 + c, j);
                    for (int ch = 0; ch < cfg.channels; ++ch) s += p.patch_w(j, ch) * z.at(ch, r, c);
                    x(row, j) = s;
                }
            }
        return x;
    }

    // ---- blocks ------------------------------------------------------------

    struct Segment {
        int begin, end;
        const StreamParams* sp;
    };

    // One transformer block over X. Token mixing happens only inside the
    // masked attention; everything else is token-local.
    Matd block_forward(const Matd& x, const std::vector<Segment>& segs, const AttentionMask* m,
                       const std::vector<double>& cond_vec, BlockCache* cache) const {
        const int n = x.rows;
        const int d = cfg.dim;
        const int dff = cfg.d_ff();
        if (m && m->size() != n) throw ShapeMismatch("block_forward: mask size != token count");

        detail::LnCache ln1_local;
        detail::LnCache* ln1 = cache ? &cache->ln1 : &ln1_local;
        const Matd xhat1 = detail::layernorm(x, ln1);

        std::vector<std::array<std::vector<double>, 4>> segmod(segs.size());
        Matd h1(n, d);
        Matd qkv(n, 3 * d);
        for (size_t si = 0; si < segs.size(); ++si) {
            const auto& sg = segs[si];
            auto [sa, ba] = modulation(sg.sp->mod_attn_w, sg.sp->mod_attn_b, cond_vec);
            segmod[si][0] = sa;
            segmod[si][1] = ba;
            for (int i = sg.begin; i < sg.end; ++i)
                for (int j = 0; j < d; ++j) h1(i, j) = xhat1(i, j) * (1.0 + sa[j]) + ba[j];
            // per-segment QKV projection
            for (int i = sg.begin; i < sg.end; ++i) {
                const double* hi = h1.row(i);
                double* qi = qkv.row(i);
                for (int o = 0; o < 3 * d; ++o) {
                    const double* wrow = sg.sp->qkv_w.row(o);
                    double s = sg.sp->qkv_b(o, 0);
                    for (int j = 0; j < d; ++j) s += wrow[j] * hi[j];
                    qi[o] = s;
                }
            }
        }

        // joint attention per head
        const int dh = cfg.head_dim();
        Matd attn_out(n, d);
        if (cache) cache->attn_w.assign(cfg.heads, Matd());
        for (int h = 0; h < cfg.heads; ++h) {
            Matd qh(n, dh), kh(n, dh), vh(n, dh);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dh; ++j) {
                    qh(i, j) = qkv(i, h * dh + j);
                    kh(i, j) = qkv(i, d + h * dh + j);
                    vh(i, j) = qkv(i, 2 * d + h * dh + j);
                }
            Matd* wcache = cache ? &cache->attn_w[h] : nullptr;
            const Matd oh = detail::softmax_attention<double>(qh, kh, vh, m, wcache);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dh; ++j) attn_out(i, j + h * dh) = oh(i, j);
        }

        Matd x_mid = x;
        for (const auto& sg : segs)
            for (int i = sg.begin; i < sg.end; ++i) {
                const double* ai = attn_out.row(i);
                double* xi = x_mid.row(i);
                for (int o = 0; o < d; ++o) {
                    const double* wrow = sg.sp->out_w.row(o);
                    double s = sg.sp->out_b(o, 0);
                    for (int j = 0; j < d; ++j) s += wrow[j] * ai[j];
                    xi[o] += s;
                }
            }

        detail::LnCache ln2_local;
        detail::LnCache* ln2 = cache ? &cache->ln2 : &ln2_local;
        const Matd xhat2 = detail::layernorm(x_mid, ln2);

        Matd h2(n, d), ff_u(n, dff), ff_s(n, dff);
        Matd x_out = x_mid;
        for (size_t si = 0; si < segs.size(); ++si) {
            const auto& sg = segs[si];
            auto [sm, bm] = modulation(sg.sp->mod_mlp_w, sg.sp->mod_mlp_b, cond_vec);
            segmod[si][2] = sm;
            segmod[si][3] = bm;
            for (int i = sg.begin; i < sg.end; ++i) {
                double* h2i = h2.row(i);
                for (int j = 0; j < d; ++j) h2i[j] = xhat2(i, j) * (1.0 + sm[j]) + bm[j];
                double* ui = ff_u.row(i);
                double* ssi = ff_s.row(i);
                for (int o = 0; o < dff; ++o) {
                    const double* wrow = sg.sp->ff1_w.row(o);
                    double s = sg.sp->ff1_b(o, 0);
                    for (int j = 0; j < d; ++j) s += wrow[j] * h2i[j];
                    ui[o] = s;
                    ssi[o] = detail::silu(s);
                }
                double* xi = x_out.row(i);
                for (int o = 0; o < d; ++o) {
                    const double* wrow = sg.sp->ff2_w.row(o);
                    double s = sg.sp->ff2_b(o, 0);
                    for (int j = 0; j < dff; ++j) s += wrow[j] * ssi[j];
                    xi[o] += s;
                }
            }
        }

        if (cache) {
            cache->x_in = x;
            cache->h1 = std::move(h1);
            cache->qkv = std::move(qkv);
            cache->attn_out = std::move(attn_out);
            cache->x_mid = std::move(x_mid);
            cache->h2 = std::move(h2);
            cache->ff_u = std::move(ff_u);
            cache->ff_s = std::move(ff_s);
            cache->segmod = std::move(segmod);
        }
        return x_out;
    }

    std::vector<Segment> double_segments(int block, int L_T, int n_total) const {
        return {{0, L_T, &p.dbl[block].txt}, {L_T, n_total, &p.dbl[block].img}};
    }

    std::vector<Segment> single_segments(int block, int n_total) const {
        return {{0, n_total, &p.sgl[block]}};
    }

    // Runs all blocks over an already-embedded token matrix. Exposed so tests
    // can probe token-level influence directly.
    Matd run_blocks(const Matd& x0, int L_T, const std::vector<double>& cond_vec,
                    const AttentionMask* m, std::vector<BlockCache>* caches = nullptr) const {
        if (L_T < 0 || L_T > x0.rows) throw ShapeMismatch("run_blocks: bad text length");
        Matd x = x0;
        if (caches) caches->assign(cfg.n_double + cfg.n_single, BlockCache{});
        for (int b = 0; b < cfg.n_double; ++b)
            x = block_forward(x, double_segments(b, L_T, x.rows), m, cond_vec,
                              caches ? &(*caches)[b] : nullptr);
        for (int b = 0; b < cfg.n_single; ++b)
            x = block_forward(x, single_segments(b, x.rows), m, cond_vec,
                              caches ? &(*caches)[cfg.n_double + b] : nullptr);
        return x;
    }

    // Double-stream block as a standalone operation on (text, image) pairs.
    std::pair<Matd, Matd> double_block(int block, const Matd& text, const Matd& img,
                                       const Conditioning& c, const AttentionMask* m) const {
        if (block < 0 || block >= cfg.n_double) throw OutOfBounds("double_block: index");
        if (text.cols != cfg.dim || img.cols != cfg.dim)
            throw ShapeMismatch("double_block: feature width");
        Matd x(text.rows + img.rows, cfg.dim);
        for (int i = 0; i < text.rows; ++i)
            for (int j = 0; j < cfg.dim; ++j) x(i, j) = text(i, j);
        for (int i = 0; i < img.rows; ++i)
            for (int j = 0; j < cfg.dim; ++j) x(text.rows + i, j) = img(i, j);
        const std::vector<double> cond = conditioning_vector(c);
        const Matd y = block_forward(x, double_segments(block, text.rows, x.rows), m, cond, nullptr);
        Matd ty(text.rows, cfg.dim), iy(img.rows, cfg.dim);
        for (int i = 0; i < text.rows; ++i)
            for (int j = 0; j < cfg.dim; ++j) ty(i, j) = y(i, j);
        for (int i = 0; i < img.rows; ++i)
            for (int j = 0; j < cfg.dim; ++j) iy(i, j) = y(text.rows + i, j);
        return {ty, iy};
    }

    Matd single_block(int block, const Matd& joint, const Conditioning& c,
                      const AttentionMask* m) const {
        if (block < 0 || block >= cfg.n_single) throw OutOfBounds("single_block: index");
        if (joint.cols != cfg.dim) throw ShapeMismatch("single_block: feature width");
        const std::vector<double> cond = conditioning_vector(c);
        return block_forward(joint, single_segments(block, joint.rows), m, cond, nullptr);
    }

    // ---- full forward ------------------------------------------------------

    Latent unembed(const Matd& x, int L_T, int h, int w, detail::LnCache* ln_cache = nullptr,
                   Matd* y_out = nullptr) const {
        const int L_I = h * w;
        if (x.rows != L_T + L_I) throw ShapeMismatch("unembed: row count");
        Matd img(L_I, cfg.dim);
        for (int i = 0; i < L_I; ++i)
            for (int j = 0; j < cfg.dim; ++j) img(i, j) = x(L_T + i, j);
        const Matd y = detail::layernorm(img, ln_cache);
        Latent v(cfg.channels, h, w);
        for (int i = 0; i < L_I; ++i) {
            const double* yi = y.row(i);
            for (int ch = 0; ch < cfg.channels; ++ch) {
                double s = p.unembed_b(ch, 0);
                for (int j = 0; j < cfg.dim; ++j) s += p.unembed_w(ch, j) * yi[j];
                v.v[static_cast<size_t>(ch) * L_I + i] = s;
            }
        }
        if (y_out) *y_out = y;
        return v;
    }

    // Predicts the flow velocity for latent z under the given prompts and
    // conditioning. A null mask runs full attention.
    Latent forward(const Latent& z, const std::vector<std::vector<int>>& prompts,
                   const Conditioning& c, const AttentionMask* m) const {
        EmbedInfo info;
        const Matd x0 = embed_tokens(z, prompts, info);
        if (m && m->size() != x0.rows)
            throw ShapeMismatch("forward: mask size " + std::to_string(m->size()) +
                                " != token count " + std::to_string(x0.rows));
        const std::vector<double> cond = conditioning_vector(c);
        const Matd xf = run_blocks(x0, info.L_T, cond, m);
        return unembed(xf, info.L_T, info.h, info.w);
    }

    // Forward pass that retains everything the backward pass needs. The
    // pooled embedding is derived from the prompt set so that its gradient
    // path into the token table is part of training.
    Latent forward_cached(const Latent& z, const std::vector<std::vector<int>>& prompts, double t,
                          const AttentionMask* m, ForwardCache& cache, int row0 = 0,
                          int col0 = 0) const {
        cache = ForwardCache{};
        cache.z = z;
        cache.prompts = prompts;
        cache.pooled = compute_pooled(prompts);
        cache.pooled_from_prompts = true;
        Conditioning c{t, cache.pooled, 0.0};
        cache.cond_vec = conditioning_vector(c, &cache.cond_raw, &cache.phi);
        const Matd x0 = embed_tokens(z, prompts, cache.embed, row0, col0);
        if (m && m->size() != x0.rows) throw ShapeMismatch("forward_cached: mask size");
        const Matd xf = run_blocks(x0, cache.embed.L_T, cache.cond_vec, m, &cache.blocks);
        return unembed(xf, cache.embed.L_T, cache.embed.h, cache.embed.w, &cache.ln_final,
                       &cache.y_final);
    }

    // ---- backward ----------------------------------------------------------

    // Accumulates parameter gradients of a scalar loss whose gradient w.r.t.
    // the predicted velocity is `dout`. The mask used in forward_cached must
    // be passed again.
    void backward(const ForwardCache& cache, const Latent& dout, const AttentionMask* m,
                  ModelParams& grads) const {
        const int d = cfg.dim;
        const int L_T = cache.embed.L_T;
        const int L_I = cache.embed.h * cache.embed.w;
        const int n = L_T + L_I;

        // unembed + final LN
        Matd dy(L_I, d);
        for (int i = 0; i < L_I; ++i)
            for (int ch = 0; ch < cfg.channels; ++ch) {
                const double g = dout.v[static_cast<size_t>(ch) * L_I + i];
                grads.unembed_b(ch, 0) += g;
                for (int j = 0; j < d; ++j) {
                    grads.unembed_w(ch, j) += g * cache.y_final(i, j);
                    dy(i, j) += g * p.unembed_w(ch, j);
                }
            }
        const Matd dimg = detail::layernorm_backward(dy, cache.ln_final);
        Matd dx(n, d);
        for (int i = 0; i < L_I; ++i)
            for (int j = 0; j < d; ++j) dx(L_T + i, j) = dimg(i, j);

        std::vector<double> dcond(d, 0.0);

        // blocks in reverse
        for (int b = cfg.n_double + cfg.n_single - 1; b >= 0; --b) {
            const bool is_double = b < cfg.n_double;
            std::vector<Segment> segs = is_double ? double_segments(b, L_T, n)
                                                  : single_segments(b - cfg.n_double, n);
            std::vector<StreamParams*> gsegs;
            if (is_double)
                gsegs = {&grads.dbl[b].txt, &grads.dbl[b].img};
            else
                gsegs = {&grads.sgl[b - cfg.n_double]};
            dx = block_backward(cache.blocks[b], segs, gsegs, m, cache.cond_vec, dx, dcond);
        }

        // embedding gradients
        for (int t = 0; t < L_T; ++t) {
            const auto [id, pos] = cache.embed.text_tokens[t];
            for (int j = 0; j < d; ++j) {
                grads.tok_embed(id, j) += dx(t, j);
                grads.txt_pos(pos, j) += dx(t, j);
            }
        }
        for (int r = 0; r < cache.embed.h; ++r)
            for (int c = 0; c < cache.embed.w; ++c) {
                const int row = L_T + r * cache.embed.w + c;
                for (int j = 0; j < d; ++j) {
                    const double g = dx(row, j);
                    grads.patch_b(j, 0) += g;
                    grads.row_embed(cache.embed.row0 + r, j) += g;
                    grads.col_embed(cache.embed.col0 + c, j) += g;
                    for (int ch = 0; ch < cfg.channels; ++ch)
                        grads.patch_w(j, ch) += g * cache.z.at(ch, r, c);
                }
            }

        // conditioning gradients
        std::vector<double> draw(d);
        for (int i = 0; i < d; ++i) draw[i] = dcond[i] * detail::silu_grad(cache.cond_raw[i]);
        std::vector<double> dpooled(d, 0.0);
        for (int i = 0; i < d; ++i) {
            grads.time_b(i, 0) += draw[i];
            grads.pool_b(i, 0) += draw[i];
            for (int k = 0; k < cfg.time_features; ++k) grads.time_w(i, k) += draw[i] * cache.phi[k];
            for (int k = 0; k < d; ++k) {
                grads.pool_w(i, k) += draw[i] * cache.pooled[k];
                dpooled[k] += draw[i] * p.pool_w(i, k);
            }
        }
        if (cache.pooled_from_prompts) {
            const double inv_m = 1.0 / static_cast<double>(cache.prompts.size());
            for (const auto& pr : cache.prompts) {
                const double scale = inv_m / static_cast<double>(pr.size());
                for (int id : pr)
                    for (int j = 0; j < d; ++j) grads.tok_embed(id, j) += scale * dpooled[j];
            }
        }
    }

    // ---- cost model ---------------------------------------------------------

    // Deterministic multiply-add count (2 FLOPs per multiply-add) for one
    // forward pass at the given sequence sizes. Used for the stage trace and
    // the init-cost comparisons; softmax overhead is counted per entry.
    double flops_forward(int L_T, int L_I) const {
        const double n = L_T + L_I;
        const double d = cfg.dim;
        const double dff = cfg.d_ff();
        const double blocks = cfg.n_double + cfg.n_single;
        double f = 0;
        f += 2.0 * L_I * d * cfg.channels;                    // patch embed
        f += 2.0 * d * cfg.time_features + 2.0 * d * d;       // conditioning
        const double streams_total = 2.0 * cfg.n_double + cfg.n_single;
        f += streams_total * 2.0 * (2.0 * d) * d * 2.0;       // modulation linears
        f += blocks * (2.0 * n * 3.0 * d * d);                // qkv
        f += blocks * (2.0 * 2.0 * n * n * d);                // logits + weighted sum
        f += blocks * (4.0 * n * n);                          // softmax passes
        f += blocks * (2.0 * n * d * d);                      // out proj
        f += blocks * (2.0 * 2.0 * n * d * dff);              // ffn
        f += blocks * (2.0 * 8.0 * n * d);                    // layernorms + modulation apply
        f += 2.0 * L_I * d * cfg.channels;                    // unembed
        return f;
    }

private:
    void init_stream(StreamParams& s) const {
        const int d = cfg.dim;
        const int dff = cfg.d_ff();
        s.mod_attn_w = Matd(2 * d, d);
        s.mod_attn_b = Matd(2 * d, 1);
        s.qkv_w = Matd(3 * d, d);
        s.qkv_b = Matd(3 * d, 1);
        s.out_w = Matd(d, d);
        s.out_b = Matd(d, 1);
        s.mod_mlp_w = Matd(2 * d, d);
        s.mod_mlp_b = Matd(2 * d, 1);
        s.ff1_w = Matd(dff, d);
        s.ff1_b = Matd(dff, 1);
        s.ff2_w = Matd(d, dff);
        s.ff2_b = Matd(d, 1);
    }

    void check_token(int id) const {
        if (id < 0 || id >= cfg.vocab)
            throw OutOfBounds("token id " + std::to_string(id) + " outside vocab " +
                              std::to_string(cfg.vocab));
    }

    // (scale, shift), each d wide, from the conditioning vector.
    std::pair<std::vector<double>, std::vector<double>> modulation(
        const Matd& w, const Matd& b, const std::vector<double>& cond) const {
        const int d = cfg.dim;
        std::vector<double> scale(d), shift(d);
        for (int o = 0; o < 2 * d; ++o) {
            const double* wrow = w.row(o);
            double s = b(o, 0);
            for (int j = 0; j < d; ++j) s += wrow[j] * cond[j];
            (o < d ? scale[o] : shift[o - d]) = s;
        }
        return {scale, shift};
    }

    Matd block_backward(const BlockCache& cache, const std::vector<Segment>& segs,
                        const std::vector<StreamParams*>& gsegs, const AttentionMask* m,
                        const std::vector<double>& cond_vec, const Matd& dx_out,
                        std::vector<double>& dcond) const {
        const int n = dx_out.rows;
        const int d = cfg.dim;
        const int dff = cfg.d_ff();
        const int dh = cfg.head_dim();

        // FFN branch
        Matd dx_mid = dx_out;  // residual path
        Matd dxhat2(n, d);
        for (size_t si = 0; si < segs.size(); ++si) {
            const auto& sg = segs[si];
            StreamParams* g = gsegs[si];
            const auto& sm = cache.segmod[si][2];
            std::vector<double> dsm(d, 0.0), dbm(d, 0.0);
            for (int i = sg.begin; i < sg.end; ++i) {
                const double* ddelta = dx_out.row(i);
                // ff2 backward
                std::vector<double> ds(dff, 0.0);
                for (int o = 0; o < d; ++o) {
                    const double go = ddelta[o];
                    if (go == 0.0) continue;
                    g->ff2_b(o, 0) += go;
                    const double* srow = cache.ff_s.row(i);
                    double* gw = g->ff2_w.row(o);
                    for (int j = 0; j < dff; ++j) {
                        gw[j] += go * srow[j];
                        ds[j] += go * sg.sp->ff2_w(o, j);
                    }
                }
                // silu + ff1 backward
                const double* urow = cache.ff_u.row(i);
                std::vector<double> dh2(d, 0.0);
                for (int o = 0; o < dff; ++o) {
                    const double du = ds[o] * detail::silu_grad(urow[o]);
                    if (du == 0.0) continue;
                    g->ff1_b(o, 0) += du;
                    const double* h2row = cache.h2.row(i);
                    double* gw = g->ff1_w.row(o);
                    for (int j = 0; j < d; ++j) {
                        gw[j] += du * h2row[j];
                        dh2[j] += du * sg.sp->ff1_w(o, j);
                    }
                }
                // modulation backward (h2 = xhat2*(1+sm) + bm)
                const double* xh = cache.ln2.xhat.row(i);
                for (int j = 0; j < d; ++j) {
                    dxhat2(i, j) = dh2[j] * (1.0 + sm[j]);
                    dsm[j] += dh2[j] * xh[j];
                    dbm[j] += dh2[j];
                }
            }
            accumulate_modulation(g->mod_mlp_w, g->mod_mlp_b, sg.sp->mod_mlp_w, cond_vec, dsm, dbm,
                                  dcond);
        }
        dx_mid = add(dx_mid, detail::layernorm_backward(dxhat2, cache.ln2));

        // attention branch
        Matd dattn(n, d);
        for (size_t si = 0; si < segs.size(); ++si) {
            const auto& sg = segs[si];
            StreamParams* g = gsegs[si];
            for (int i = sg.begin; i < sg.end; ++i) {
                const double* ddelta = dx_mid.row(i);
                const double* arow = cache.attn_out.row(i);
                double* da = dattn.row(i);
                for (int o = 0; o < d; ++o) {
                    const double go = ddelta[o];
                    if (go == 0.0) continue;
                    g->out_b(o, 0) += go;
                    double* gw = g->out_w.row(o);
                    for (int j = 0; j < d; ++j) {
                        gw[j] += go * arow[j];
                        da[j] += go * sg.sp->out_w(o, j);
                    }
                }
            }
        }

        // attention backward per head
        Matd dqkv(n, 3 * d);
        for (int h = 0; h < cfg.heads; ++h) {
            const Matd& a = cache.attn_w[h];
            Matd qh(n, dh), kh(n, dh), vh(n, dh), doh(n, dh);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dh; ++j) {
                    qh(i, j) = cache.qkv(i, h * dh + j);
                    kh(i, j) = cache.qkv(i, d + h * dh + j);
                    vh(i, j) = cache.qkv(i, 2 * d + h * dh + j);
                    doh(i, j) = dattn(i, h * dh + j);
                }
            // dV = A^T dO ; dA = dO V^T ; dS = A ∘ (dA - rowsum(A∘dA)) ; scaled
            Matd dvh(n, dh);
            matmul_tn_acc(a, doh, dvh);
            Matd da = matmul_nt(doh, vh);
            Matd dsm(n, n);
            for (int i = 0; i < n; ++i) {
                double gsum = 0;
                for (int j = 0; j < n; ++j) gsum += a(i, j) * da(i, j);
                for (int j = 0; j < n; ++j) dsm(i, j) = a(i, j) * (da(i, j) - gsum);
            }
            const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            Matd dqh(n, dh);
            matmul_acc(dsm, kh, dqh);
            Matd dkh(n, dh);
            matmul_tn_acc(dsm, qh, dkh);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dh; ++j) {
                    dqkv(i, h * dh + j) = dqh(i, j) * scale;
                    dqkv(i, d + h * dh + j) = dkh(i, j) * scale;
                    dqkv(i, 2 * d + h * dh + j) = dvh(i, j);
                }
        }

        // qkv projection + first modulation + LN1
        Matd dxhat1(n, d);
        for (size_t si = 0; si < segs.size(); ++si) {
            const auto& sg = segs[si];
            StreamParams* g = gsegs[si];
            const auto& sa = cache.segmod[si][0];
            std::vector<double> dsa(d, 0.0), dba(d, 0.0);
            for (int i = sg.begin; i < sg.end; ++i) {
                const double* dq = dqkv.row(i);
                const double* h1row = cache.h1.row(i);
                std::vector<double> dh1(d, 0.0);
                for (int o = 0; o < 3 * d; ++o) {
                    const double go = dq[o];
                    if (go == 0.0) continue;
                    g->qkv_b(o, 0) += go;
                    double* gw = g->qkv_w.row(o);
                    for (int j = 0; j < d; ++j) {
                        gw[j] += go * h1row[j];
                        dh1[j] += go * sg.sp->qkv_w(o, j);
                    }
                }
                const double* xh = cache.ln1.xhat.row(i);
                for (int j = 0; j < d; ++j) {
                    dxhat1(i, j) = dh1[j] * (1.0 + sa[j]);
                    dsa[j] += dh1[j] * xh[j];
                    dba[j] += dh1[j];
                }
            }
            accumulate_modulation(g->mod_attn_w, g->mod_attn_b, sg.sp->mod_attn_w, cond_vec, dsa,
                                  dba, dcond);
        }
        return add(dx_mid, detail::layernorm_backward(dxhat1, cache.ln1));
    }

    static Matd add(const Matd& a, const Matd& b) {
        Matd c = a;
        for (size_t i = 0; i < c.v.size(); ++i) c.v[i] += b.v[i];
        return c;
    }

    void accumulate_modulation(Matd& gw, Matd& gb, const Matd& w,
                               const std::vector<double>& cond, const std::vector<double>& dscale,
                               const std::vector<double>& dshift,
                               std::vector<double>& dcond) const {
        const int d = cfg.dim;
        for (int o = 0; o < 2 * d; ++o) {
            const double go = o < d ? dscale[o] : dshift[o - d];
            if (go == 0.0) continue;
            gb(o, 0) += go;
            double* gr = gw.row(o);
            const double* wr = w.row(o);
            for (int j = 0; j < d; ++j) {
                gr[j] += go * cond[j];
                dcond[j] += go * wr[j];
            }
        }
    }
};

}  // namespace dctext
