#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/masks.hpp"

namespace dctext {

// Brute-force references. Nothing here shares code with the main kernels:
// these are the comparison targets.

// Literal route: build the full logit matrix, add log(M) (0 or -inf), then
// softmax rows and form the weighted sum over every key.
template <typename Real>
Mat<Real> reference_attention(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v,
                              const AttentionMask& m) {
    const int n = q.rows;
    const int d = q.cols;
    if (k.rows != n || v.rows != n || k.cols != d || m.size() != n)
        throw ShapeMismatch("reference_attention: shapes disagree");

    const Real neg_inf = -std::numeric_limits<Real>::infinity();
    Mat<Real> logits(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            Real s = 0;
            for (int c = 0; c < d; ++c) s += q(i, c) * k(j, c);
            s /= std::sqrt(static_cast<Real>(d));
            logits(i, j) = m.at(i, j) ? s : s + neg_inf;
        }

    Mat<Real> out(n, v.cols);
    for (int i = 0; i < n; ++i) {
        Real mx = neg_inf;
        for (int j = 0; j < n; ++j) mx = std::max(mx, logits(i, j));
        if (mx == neg_inf)
            throw EmptyRow("reference_attention: row " + std::to_string(i) + " fully masked");
        Real denom = 0;
        for (int j = 0; j < n; ++j) {
            logits(i, j) = std::exp(logits(i, j) - mx);
            denom += logits(i, j);
        }
        for (int j = 0; j < n; ++j) {
            const Real w = logits(i, j) / denom;
            for (int c = 0; c < v.cols; ++c) out(i, c) += w * v(j, c);
        }
    }
    return out;
}

// R = M  OR  M^2  OR ... OR  M^hops over the boolean semiring. R(a,b) answers
// "can information at key b reach query a within `hops` attention layers".
inline BoolMat mask_reachability(const AttentionMask& m, int hops) {
    if (hops < 1) throw InvalidArgument("mask_reachability: hops must be >= 1");
    const int n = m.size();
    BoolMat reach = m.bits;
    BoolMat power = m.bits;
    for (int h = 2; h <= hops; ++h) {
        BoolMat next(n, n, false);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) {
                if (!power.at(i, k)) continue;
                const uint8_t* mk = m.bits.v.data() + static_cast<size_t>(k) * n;
                uint8_t* ni = next.v.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) ni[j] |= mk[j];
            }
        power = next;
        for (size_t i = 0; i < reach.v.size(); ++i) reach.v[i] |= power.v[i];
    }
    return reach;
}

// Perturb each token's input row in turn and mark which outputs move at all.
// The evaluator must be deterministic; detection is exact comparison, not a
// tolerance, which is valid because unreachable outputs repeat the identical
// float operations.
inline BoolMat empirical_influence(const std::function<Matd(const Matd&)>& forward,
                                    const Matd& base_input, double probe_magnitude = 1.0) {
    const int n = base_input.rows;
    const Matd base_out = forward(base_input);
    BoolMat influence(base_out.rows, n, false);
    for (int b = 0; b < n; ++b) {
        Matd probed = base_input;
        // alternating signs: a uniform shift would be invisible to layer
        // normalization inside the evaluator
        for (int c = 0; c < probed.cols; ++c)
            probed(b, c) += (c % 2 == 0 ? probe_magnitude : -probe_magnitude);
        const Matd out = forward(probed);
        if (out.rows != base_out.rows || out.cols != base_out.cols)
            throw ShapeMismatch("empirical_influence: evaluator changed output shape");
        for (int a = 0; a < out.rows; ++a) {
            bool moved = false;
            for (int c = 0; c < out.cols && !moved; ++c) moved = out(a, c) != base_out(a, c);
            influence.set(a, b, moved);
        }
    }
    return influence;
}

}  // namespace dctext
