#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/masks.hpp"
#include "dctext/model.hpp"
#include "dctext/synth.hpp"

namespace dctext {

// All binary formats are explicit little-endian byte streams with a short
// magic+version prefix.

namespace detail {

inline void put_u32(std::string& out, uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_i32(std::string& out, int32_t x) { put_u32(out, static_cast<uint32_t>(x)); }

inline void put_f64(std::string& out, double x) {
    uint64_t bits;
    std::memcpy(&bits, &x, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& s;
    size_t pos = 0;

    explicit Reader(const std::string& data) : s(data) {}

    void need(size_t n) const {
        if (pos + n > s.size()) throw InvalidArgument("binary payload truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
        pos += 4;
        return x;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    double f64() {
        need(8);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<uint64_t>(static_cast<uint8_t>(s[pos + i])) << (8 * i);
        pos += 8;
        double x;
        std::memcpy(&x, &bits, 8);
        return x;
    }
    void expect_magic(const char* magic) {
        const size_t n = std::strlen(magic);
        need(n);
        if (s.compare(pos, n, magic) != 0)
            throw InvalidArgument(std::string("bad magic, expected ") + magic);
        pos += n;
    }
};

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw Error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace detail

// ---- latent snapshots ------------------------------------------------------

inline std::string latent_to_bytes(const Latent& z) {
    std::string out = "DCLT1";
    detail::put_u32(out, static_cast<uint32_t>(z.channels));
    detail::put_u32(out, static_cast<uint32_t>(z.height));
    detail::put_u32(out, static_cast<uint32_t>(z.width));
    for (double x : z.v) detail::put_f64(out, x);
    return out;
}

inline Latent latent_from_bytes(const std::string& data) {
    detail::Reader r(data);
    r.expect_magic("DCLT1");
    const int c = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    Latent z(c, h, w);
    for (double& x : z.v) x = r.f64();
    return z;
}

inline void save_latent(const Latent& z, const std::string& path) {
    detail::write_file(path, latent_to_bytes(z));
}

inline Latent load_latent(const std::string& path) {
    return latent_from_bytes(detail::read_file(path));
}

// ---- model checkpoints -------------------------------------------------------

inline std::string checkpoint_to_bytes(const ToyDenoiser& model) {
    std::string out = "DCTCKPT1";
    const DenoiserConfig& c = model.cfg;
    for (int x : {c.dim, c.heads, c.n_double, c.n_single, c.channels, c.grid_h, c.grid_w, c.vocab,
                  c.max_text_len, c.ff_mult, c.time_features})
        detail::put_i32(out, x);
    ModelParams& p = const_cast<ToyDenoiser&>(model).p;
    for (const Matd* t : p.collect())
        for (double x : t->v) detail::put_f64(out, x);
    return out;
}

inline ToyDenoiser checkpoint_from_bytes(const std::string& data) {
    detail::Reader r(data);
    r.expect_magic("DCTCKPT1");
    DenoiserConfig c;
    c.dim = r.i32();
    c.heads = r.i32();
    c.n_double = r.i32();
    c.n_single = r.i32();
    c.channels = r.i32();
    c.grid_h = r.i32();
    c.grid_w = r.i32();
    c.vocab = r.i32();
    c.max_text_len = r.i32();
    c.ff_mult = r.i32();
    c.time_features = r.i32();
    ToyDenoiser model(c);
    for (Matd* t : model.p.collect())
        for (double& x : t->v) x = r.f64();
    if (r.pos != data.size()) throw InvalidArgument("checkpoint has trailing bytes");
    return model;
}

inline void save_checkpoint(const ToyDenoiser& model, const std::string& path) {
    detail::write_file(path, checkpoint_to_bytes(model));
}

inline ToyDenoiser load_checkpoint(const std::string& path) {
    return checkpoint_from_bytes(detail::read_file(path));
}

// ---- dataset dumps -----------------------------------------------------------

inline std::string dataset_to_bytes(const std::vector<Sample>& ds) {
    std::string out = "DCTDATA1";
    detail::put_u32(out, static_cast<uint32_t>(ds.size()));
    for (const Sample& s : ds) {
        detail::put_u32(out, static_cast<uint32_t>(s.x0.channels));
        detail::put_u32(out, static_cast<uint32_t>(s.x0.height));
        detail::put_u32(out, static_cast<uint32_t>(s.x0.width));
        for (double x : s.x0.v) detail::put_f64(out, x);
        detail::put_u32(out, static_cast<uint32_t>(s.global_tokens.size()));
        for (int t : s.global_tokens) detail::put_i32(out, t);
        detail::put_u32(out, static_cast<uint32_t>(s.specs.size()));
        for (size_t i = 0; i < s.specs.size(); ++i) {
            detail::put_u32(out, static_cast<uint32_t>(s.textual_tokens[i].size()));
            for (int t : s.textual_tokens[i]) detail::put_i32(out, t);
            detail::put_i32(out, s.specs[i].glyph);
            detail::put_i32(out, s.specs[i].rect.row_start);
            detail::put_i32(out, s.specs[i].rect.row_end);
            detail::put_i32(out, s.specs[i].rect.col_start);
            detail::put_i32(out, s.specs[i].rect.col_end);
        }
    }
    return out;
}

inline std::vector<Sample> dataset_from_bytes(const std::string& data) {
    detail::Reader r(data);
    r.expect_magic("DCTDATA1");
    const uint32_t n = r.u32();
    std::vector<Sample> ds(n);
    for (Sample& s : ds) {
        const int c = static_cast<int>(r.u32());
        const int h = static_cast<int>(r.u32());
        const int w = static_cast<int>(r.u32());
        s.x0 = Latent(c, h, w);
        for (double& x : s.x0.v) x = r.f64();
        s.global_tokens.resize(r.u32());
        for (int& t : s.global_tokens) t = r.i32();
        const uint32_t k = r.u32();
        s.textual_tokens.resize(k);
        s.specs.resize(k);
        for (uint32_t i = 0; i < k; ++i) {
            s.textual_tokens[i].resize(r.u32());
            for (int& t : s.textual_tokens[i]) t = r.i32();
            s.specs[i].glyph = r.i32();
            s.specs[i].rect.row_start = r.i32();
            s.specs[i].rect.row_end = r.i32();
            s.specs[i].rect.col_start = r.i32();
            s.specs[i].rect.col_end = r.i32();
        }
    }
    return ds;
}

inline void save_dataset(const std::vector<Sample>& ds, const std::string& path) {
    detail::write_file(path, dataset_to_bytes(ds));
}

inline std::vector<Sample> load_dataset(const std::string& path) {
    return dataset_from_bytes(detail::read_file(path));
}

// ---- mask dumps ----------------------------------------------------------------

inline void save_mask(const AttentionMask& m, const std::string& path) {
    const std::vector<uint8_t> bytes = mask_to_bytes(m);
    detail::write_file(path, std::string(bytes.begin(), bytes.end()));
}

inline AttentionMask load_mask(const std::string& path) {
    const std::string data = detail::read_file(path);
    return mask_from_bytes(std::vector<uint8_t>(data.begin(), data.end()));
}

// ---- image export ---------------------------------------------------------------

// Portable graymap of channel 0 after affine min-max tone mapping. A constant
// image maps to mid-gray.
inline std::string latent_to_pgm(const Latent& z) {
    std::string out = "P5\n" + std::to_string(z.width) + " " + std::to_string(z.height) + "\n255\n";
    double lo = z.v.empty() ? 0.0 : z.at(0, 0, 0), hi = lo;
    for (int r = 0; r < z.height; ++r)
        for (int c = 0; c < z.width; ++c) {
            lo = std::min(lo, z.at(0, r, c));
            hi = std::max(hi, z.at(0, r, c));
        }
    for (int r = 0; r < z.height; ++r)
        for (int c = 0; c < z.width; ++c) {
            int val = 128;
            if (hi > lo) val = static_cast<int>(std::lround(255.0 * (z.at(0, r, c) - lo) / (hi - lo)));
            out.push_back(static_cast<char>(std::min(255, std::max(0, val))));
        }
    return out;
}

inline void save_pgm(const Latent& z, const std::string& path) {
    detail::write_file(path, latent_to_pgm(z));
}

}  // namespace dctext
