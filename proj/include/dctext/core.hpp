#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "dctext/errors.hpp"

namespace dctext {

// ---------------------------------------------------------------------------
// Dense row-major matrix. Small and transparent on purpose: every kernel in
// this library is written against plain loops so that exact-zero influence
// arguments hold at the instruction level.
// ---------------------------------------------------------------------------
template <typename Real = double>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<Real> v;

    Mat() = default;
    Mat(int r, int c, Real fill = Real(0)) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}

    Real& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    Real operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    Real* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const Real* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), Real(0)); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

using Matd = Mat<double>;
using Matf = Mat<float>;

// C += A * B  (A: m×k, B: k×n). i-k-j order so the inner loop walks rows.
template <typename Real>
void matmul_acc(const Mat<Real>& a, const Mat<Real>& b, Mat<Real>& c) {
    if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols)
        throw ShapeMismatch("matmul_acc: incompatible shapes");
    for (int i = 0; i < a.rows; ++i) {
        const Real* ar = a.row(i);
        Real* cr = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const Real aik = ar[k];
            if (aik == Real(0)) continue;
            const Real* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) cr[j] += aik * br[j];
        }
    }
}

template <typename Real>
Mat<Real> matmul(const Mat<Real>& a, const Mat<Real>& b) {
    Mat<Real> c(a.rows, b.cols);
    matmul_acc(a, b, c);
    return c;
}

// C += A * B^T  (A: m×k, B: n×k) -> m×n
template <typename Real>
void matmul_nt_acc(const Mat<Real>& a, const Mat<Real>& b, Mat<Real>& c) {
    if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows)
        throw ShapeMismatch("matmul_nt_acc: incompatible shapes");
    for (int i = 0; i < a.rows; ++i) {
        const Real* ar = a.row(i);
        Real* cr = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const Real* br = b.row(j);
            Real s = 0;
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            cr[j] += s;
        }
    }
}

template <typename Real>
Mat<Real> matmul_nt(const Mat<Real>& a, const Mat<Real>& b) {
    Mat<Real> c(a.rows, b.rows);
    matmul_nt_acc(a, b, c);
    return c;
}

// C += A^T * B  (A: k×m, B: k×n) -> m×n
template <typename Real>
void matmul_tn_acc(const Mat<Real>& a, const Mat<Real>& b, Mat<Real>& c) {
    if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols)
        throw ShapeMismatch("matmul_tn_acc: incompatible shapes");
    for (int k = 0; k < a.rows; ++k) {
        const Real* ar = a.row(k);
        const Real* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const Real aki = ar[i];
            if (aki == Real(0)) continue;
            Real* cr = c.row(i);
            for (int j = 0; j < b.cols; ++j) cr[j] += aki * br[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Boolean matrix, one byte per entry. Big enough for desk-scale token counts,
// simple enough to audit.
// ---------------------------------------------------------------------------
struct BoolMat {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> v;

    BoolMat() = default;
    BoolMat(int r, int c, bool fill = false)
        : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill ? 1 : 0) {}

    uint8_t at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    void set(int r, int c, bool b) { v[static_cast<size_t>(r) * cols + c] = b ? 1 : 0; }

    bool operator==(const BoolMat& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
    bool operator!=(const BoolMat& o) const { return !(*this == o); }
};

// ---------------------------------------------------------------------------
// Latent: channels × height × width tensor of doubles. Patch size is 1, so
// height/width coincide with the patch grid of the governing layout.
// ---------------------------------------------------------------------------
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> v;

    Latent() = default;
    Latent(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), v(static_cast<size_t>(c) * h * w, fill) {}

    double& at(int c, int r, int col) { return v[(static_cast<size_t>(c) * height + r) * width + col]; }
    double at(int c, int r, int col) const { return v[(static_cast<size_t>(c) * height + r) * width + col]; }

    size_t size() const { return v.size(); }
    bool same_shape(const Latent& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    bool operator==(const Latent& o) const { return same_shape(o) && v == o.v; }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 raw draws are converted manually so that the
// stream does not depend on libstdc++'s distribution internals.
// ---------------------------------------------------------------------------
struct Rng {
    uint64_t s;

    explicit Rng(uint64_t seed) : s(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    // splitmix64
    uint64_t next_u64() {
        uint64_t z = (s += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // standard normal via Box-Muller (no cached spare: two draws per call keep
    // the stream position independent of call parity)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace dctext
