#pragma once

#include <cmath>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/masks.hpp"

namespace dctext {

namespace detail {

// Shared row-softmax attention. A null mask means every key is allowed; the
// loops and arithmetic are identical either way, so the unmasked path and an
// all-ones mask produce bit-identical results. Disallowed keys are never
// read, which keeps zero-influence properties exact rather than approximate.
// If `weights_out` is non-null it receives the N×N attention weights
// (disallowed entries stay 0) for use by the backward pass.
template <typename Real>
Mat<Real> softmax_attention(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v,
                            const AttentionMask* m, Mat<Real>* weights_out = nullptr) {
    const int n = q.rows;
    const int d = q.cols;
    if (k.rows != n || v.rows != n || k.cols != d || v.cols != q.cols || v.cols != d)
        throw ShapeMismatch("masked_attention: Q/K/V shapes disagree");
    if (m && m->size() != n) throw ShapeMismatch("masked_attention: mask size != token count");

    const Real scale = Real(1) / std::sqrt(static_cast<Real>(d));
    Mat<Real> out(n, v.cols);
    if (weights_out) *weights_out = Mat<Real>(n, n);
    std::vector<Real> logits(static_cast<size_t>(n));

    for (int i = 0; i < n; ++i) {
        const Real* qi = q.row(i);
        Real maxlog = -std::numeric_limits<Real>::infinity();
        bool any = false;
        for (int j = 0; j < n; ++j) {
            if (m && !m->at(i, j)) continue;
            const Real* kj = k.row(j);
            Real s = 0;
            for (int c = 0; c < d; ++c) s += qi[c] * kj[c];
            s *= scale;
            logits[j] = s;
            if (s > maxlog) maxlog = s;
            any = true;
        }
        if (!any) throw EmptyRow("masked_attention: row " + std::to_string(i) + " has no allowed key");

        Real denom = 0;
        for (int j = 0; j < n; ++j) {
            if (m && !m->at(i, j)) continue;
            logits[j] = std::exp(logits[j] - maxlog);
            denom += logits[j];
        }
        Real* oi = out.row(i);
        for (int j = 0; j < n; ++j) {
            if (m && !m->at(i, j)) continue;
            const Real w = logits[j] / denom;
            if (weights_out) (*weights_out)(i, j) = w;
            const Real* vj = v.row(j);
            for (int c = 0; c < v.cols; ++c) oi[c] += w * vj[c];
        }
    }
    return out;
}

}  // namespace detail

// Joint attention with an additive-in-log-space binary mask: weight on any
// disallowed key is exactly zero and each row's weights sum to one over the
// allowed set.
template <typename Real>
Mat<Real> masked_attention(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v,
                           const AttentionMask& m) {
    return detail::softmax_attention<Real>(q, k, v, &m);
}

template <typename Real>
Mat<Real> unmasked_attention(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v) {
    return detail::softmax_attention<Real>(q, k, v, nullptr);
}

// Arithmetic mean of per-prompt pooled embeddings.
inline std::vector<double> pool_prompt_embeddings(const std::vector<std::vector<double>>& pooled) {
    if (pooled.empty()) throw EmptyList("pool_prompt_embeddings: no embeddings");
    const size_t d = pooled.front().size();
    std::vector<double> mean(d, 0.0);
    for (const auto& v : pooled) {
        if (v.size() != d) throw ShapeMismatch("pool_prompt_embeddings: dim mismatch");
        for (size_t i = 0; i < d; ++i) mean[i] += v[i];
    }
    for (double& x : mean) x /= static_cast<double>(pooled.size());
    return mean;
}

}  // namespace dctext
