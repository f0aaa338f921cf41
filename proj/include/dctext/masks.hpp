#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dctext/core.hpp"
#include "dctext/errors.hpp"
#include "dctext/layout.hpp"

namespace dctext {

enum class MaskKind : uint8_t { Isolation = 0, Focus = 1, Expansion = 2, Ablation = 3 };

// The four directional flows the focus mask adds on top of isolation.
enum class PartialMask : uint8_t {
    RcToRi = 0,  // background patches -> textual regions (image/image block)
    PiToRc = 1,  // all prompts -> background patches (text/image block)
    PgToRi = 2,  // global prompt -> all image patches (text/image block)
    PiToPg = 3,  // all prompts -> global prompt (text/text block)
};

inline const char* to_string(PartialMask p) {
    switch (p) {
        case PartialMask::RcToRi: return "rc_to_ri";
        case PartialMask::PiToRc: return "pi_to_rc";
        case PartialMask::PgToRi: return "pg_to_ri";
        case PartialMask::PiToPg: return "pi_to_pg";
    }
    return "?";
}

inline const char* to_string(MaskKind k) {
    switch (k) {
        case MaskKind::Isolation: return "isolation";
        case MaskKind::Focus: return "focus";
        case MaskKind::Expansion: return "expansion";
        case MaskKind::Ablation: return "ablation";
    }
    return "?";
}

inline PartialMask parse_partial_mask(const std::string& s) {
    if (s == "rc_to_ri") return PartialMask::RcToRi;
    if (s == "pi_to_rc") return PartialMask::PiToRc;
    if (s == "pg_to_ri") return PartialMask::PgToRi;
    if (s == "pi_to_pg") return PartialMask::PiToPg;
    throw UnknownPartialMask("unknown partial mask '" + s + "'");
}

// Boolean attention mask over the joint sequence. Row = query, column = key.
struct AttentionMask {
    BoolMat bits;
    MaskKind kind = MaskKind::Isolation;
    std::set<PartialMask> dropped;  // only meaningful for kind == Ablation

    int size() const { return bits.rows; }
    uint8_t at(int q, int k) const { return bits.at(q, k); }

    static AttentionMask all_ones(int n) {
        AttentionMask m;
        m.bits = BoolMat(n, n, true);
        m.kind = MaskKind::Ablation;
        return m;
    }
};

// Each group's joint indicator, OR-accumulated as an outer product: a pair
// (query, key) is allowed iff some group contains both.
inline AttentionMask isolation_mask(const MembershipVectors& mv) {
    const int total = mv.total_tokens();
    AttentionMask m;
    m.kind = MaskKind::Isolation;
    m.bits = BoolMat(total, total, false);
    for (int i = 0; i < mv.groups(); ++i) {
        const auto& joint = mv.m_joint[i];
        for (int a = 0; a < total; ++a) {
            if (!joint[a]) continue;
            uint8_t* row = m.bits.v.data() + static_cast<size_t>(a) * total;
            for (int b = 0; b < total; ++b)
                if (joint[b]) row[b] = 1;
        }
    }
    return m;
}

// Isolation plus the four directional flows, each placed in its block of the
// joint matrix: text/text gets prompts->global, text/image gets
// prompts->background OR global->regions, image/text gets nothing, and
// image/image gets background->regions. `drop` removes individual flows for
// the drop-one ablations.
inline AttentionMask focus_mask(const MembershipVectors& mv,
                                const std::set<PartialMask>& drop = {}) {
    const int L_T = mv.L_T;
    const int L_I = mv.L_I;
    const int total = L_T + L_I;
    const int bg = mv.n;  // background / global-prompt group

    AttentionMask m = isolation_mask(mv);
    m.kind = drop.empty() ? MaskKind::Focus : MaskKind::Ablation;
    m.dropped = drop;

    const auto& pg = mv.m_p[bg];   // global prompt indicator over text tokens
    const auto& rc = mv.m_r[bg];   // background indicator over image tokens

    if (!drop.count(PartialMask::PiToPg)) {
        // all text rows × global-prompt columns
        for (int a = 0; a < L_T; ++a)
            for (int b = 0; b < L_T; ++b)
                if (pg[b]) m.bits.set(a, b, true);
    }
    if (!drop.count(PartialMask::PiToRc)) {
        // all text rows × background columns
        for (int a = 0; a < L_T; ++a)
            for (int b = 0; b < L_I; ++b)
                if (rc[b]) m.bits.set(a, L_T + b, true);
    }
    if (!drop.count(PartialMask::PgToRi)) {
        // global-prompt rows × all image columns
        for (int a = 0; a < L_T; ++a) {
            if (!pg[a]) continue;
            for (int b = 0; b < L_I; ++b) m.bits.set(a, L_T + b, true);
        }
    }
    if (!drop.count(PartialMask::RcToRi)) {
        // background rows × all image columns
        for (int a = 0; a < L_I; ++a) {
            if (!rc[a]) continue;
            for (int b = 0; b < L_I; ++b) m.bits.set(L_T + a, L_T + b, true);
        }
    }
    return m;
}

// Focus (canonical, no drops) plus region->background flow: every image row
// gains the background columns. Ablation drops never propagate here.
inline AttentionMask expansion_mask(const MembershipVectors& mv) {
    AttentionMask m = focus_mask(mv);
    m.kind = MaskKind::Expansion;
    const int L_T = mv.L_T;
    const auto& rc = mv.m_r[mv.n];
    for (int a = 0; a < mv.L_I; ++a)
        for (int b = 0; b < mv.L_I; ++b)
            if (rc[b]) m.bits.set(L_T + a, L_T + b, true);
    return m;
}

// --- portable bitmap dump -------------------------------------------------
// Header: u32 size (LE), u8 kind, u8 dropped-flow bitmask. Payload: row-major
// bits packed 8 per byte, little-endian bit order (bit k of a byte is column
// offset k).

inline std::vector<uint8_t> mask_to_bytes(const AttentionMask& m) {
    const uint32_t size = static_cast<uint32_t>(m.size());
    std::vector<uint8_t> out;
    out.reserve(6 + (static_cast<size_t>(size) * size + 7) / 8);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((size >> (8 * i)) & 0xff));
    out.push_back(static_cast<uint8_t>(m.kind));
    uint8_t dropbits = 0;
    for (PartialMask p : m.dropped) dropbits |= static_cast<uint8_t>(1u << static_cast<int>(p));
    out.push_back(dropbits);
    uint8_t acc = 0;
    int nbits = 0;
    for (size_t i = 0; i < m.bits.v.size(); ++i) {
        if (m.bits.v[i]) acc |= static_cast<uint8_t>(1u << nbits);
        if (++nbits == 8) {
            out.push_back(acc);
            acc = 0;
            nbits = 0;
        }
    }
    if (nbits > 0) out.push_back(acc);
    return out;
}

inline AttentionMask mask_from_bytes(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 6) throw InvalidArgument("mask_from_bytes: truncated header");
    uint32_t size = 0;
    for (int i = 0; i < 4; ++i) size |= static_cast<uint32_t>(bytes[i]) << (8 * i);
    AttentionMask m;
    m.kind = static_cast<MaskKind>(bytes[4]);
    const uint8_t dropbits = bytes[5];
    for (int p = 0; p < 4; ++p)
        if (dropbits & (1u << p)) m.dropped.insert(static_cast<PartialMask>(p));
    const size_t nbits = static_cast<size_t>(size) * size;
    if (bytes.size() != 6 + (nbits + 7) / 8)
        throw InvalidArgument("mask_from_bytes: payload size mismatch");
    m.bits = BoolMat(static_cast<int>(size), static_cast<int>(size), false);
    for (size_t i = 0; i < nbits; ++i)
        m.bits.v[i] = (bytes[6 + i / 8] >> (i % 8)) & 1u;
    return m;
}

}  // namespace dctext
