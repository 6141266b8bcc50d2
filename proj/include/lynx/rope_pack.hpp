#pragma once

// Spatio-temporal frame packing: heterogeneous image/video token sequences
// concatenated into one long sequence, block-diagonal attention masks, and
// per-segment 3D rotary position factors whose positions restart at (0,0,0)
// for every packed sample.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lynx/common.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

struct Grid {
    int64_t t = 0, h = 0, w = 0;
    int64_t count() const { return t * h * w; }
    bool operator==(const Grid&) const = default;
};

// Patch tokens of one sample: (len, dim) with its token-grid dims.
struct TokenSeq {
    Tensor data;  // (len, dim)
    Grid grid;

    int64_t len() const { return data.rows(); }
    int64_t dim() const { return data.cols(); }
};

inline TokenSeq make_token_seq(Tensor data, Grid grid) {
    if (grid.count() != data.rows())
        throw runtime_error("token_seq: grid (" + std::to_string(grid.t) + ", " +
                            std::to_string(grid.h) + ", " + std::to_string(grid.w) +
                            ") product != len " + std::to_string(data.rows()));
    return TokenSeq{std::move(data), grid};
}

// Several samples concatenated into one sequence. `boundaries` covers real
// segments only; `pad_len` trailing zero rows (a null segment) may follow
// them inside `tokens` so shapes can be fixed to the budget.
struct PackedBatch {
    Tensor tokens;  // (boundaries.back() + pad_len, dim)
    std::vector<int64_t> boundaries;
    std::vector<Grid> grids;
    int64_t budget = 0;
    int64_t pad_len = 0;

    int64_t total_len() const { return boundaries.back(); }
    int64_t padded_len() const { return total_len() + pad_len; }
    int64_t num_segments() const { return int64_t(boundaries.size()) - 1; }
    int64_t segment_len(int64_t s) const { return boundaries[size_t(s + 1)] - boundaries[size_t(s)]; }
};

inline void validate_boundaries(const std::vector<int64_t>& b) {
    if (b.size() < 2 || b.front() != 0)
        throw runtime_error("boundaries: must start at 0 and contain at least one segment");
    for (size_t i = 1; i < b.size(); ++i)
        if (b[i] <= b[i - 1])
            throw runtime_error("boundaries: not strictly increasing at index " +
                                std::to_string(i));
}

// Segment-id representation of the block-diagonal mask; -1 marks the null
// padding segment. allowed(i, j) <=> segment(i) == segment(j).
struct AttentionMask {
    std::vector<int32_t> seg;

    int64_t len() const { return int64_t(seg.size()); }
    bool allowed(int64_t i, int64_t j) const { return seg[size_t(i)] == seg[size_t(j)]; }

    int64_t allowed_count() const {
        int64_t total = 0;
        for (size_t i = 0; i < seg.size(); ++i)
            for (size_t j = 0; j < seg.size(); ++j)
                if (seg[i] == seg[j]) ++total;
        return total;
    }

    std::vector<uint8_t> to_dense() const {
        const size_t n = seg.size();
        std::vector<uint8_t> m(n * n, 0);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) m[i * n + j] = seg[i] == seg[j] ? 1 : 0;
        return m;
    }
};

inline AttentionMask build_mask(const std::vector<int64_t>& boundaries, int64_t pad_to = -1) {
    validate_boundaries(boundaries);
    const int64_t total = boundaries.back();
    const int64_t padded = pad_to < 0 ? total : pad_to;
    if (padded < total) throw runtime_error("build_mask: pad_to below total length");
    AttentionMask mask;
    mask.seg.assign(size_t(padded), -1);
    for (size_t s = 0; s + 1 < boundaries.size(); ++s)
        for (int64_t i = boundaries[s]; i < boundaries[s + 1]; ++i)
            mask.seg[size_t(i)] = int32_t(s);
    return mask;
}

// Rotary band widths over the head dimension: (t, h, w), each even.
struct RopeBands {
    int64_t t = 0, h = 0, w = 0;
    int64_t total() const { return t + h + w; }
};

// t gets ceil(d/3) rounded up to even; the rest splits across h and w with h
// taking the even-rounded-up half. Fixed here so checkpoints stay compatible.
inline RopeBands default_bands(int64_t head_dim) {
    auto even_ceil = [](int64_t x) { return (x + 1) / 2 * 2; };
    RopeBands b;
    b.t = even_ceil((head_dim + 2) / 3);
    const int64_t rem = head_dim - b.t;
    b.h = even_ceil(rem / 2);
    b.w = rem - b.h;
    return b;
}

inline void validate_bands(const RopeBands& b, int64_t head_dim) {
    if (b.t + b.h + b.w != head_dim)
        throw runtime_error("rope bands: widths " + std::to_string(b.t) + "+" +
                            std::to_string(b.h) + "+" + std::to_string(b.w) + " != head_dim " +
                            std::to_string(head_dim));
    for (int64_t v : {b.t, b.h, b.w})
        if (v < 2 || v % 2 != 0)
            throw runtime_error("rope bands: each band must be even and >= 2, got (" +
                                std::to_string(b.t) + ", " + std::to_string(b.h) + ", " +
                                std::to_string(b.w) + ")");
}

// Per-token (cos, sin) rotation factors for one head width. Pair k of a band
// with width b rotates by pos * base^(-2k/b); positions restart at (0,0,0)
// for each segment. Padding rows get the identity rotation.
struct RopeTable {
    int64_t len = 0;
    int64_t head_dim = 0;
    RopeBands bands;
    std::shared_ptr<const std::vector<double>> cos;  // (len, head_dim/2)
    std::shared_ptr<const std::vector<double>> sin;
};

inline RopeTable rope_3d(const std::vector<Grid>& grids, const std::vector<int64_t>& boundaries,
                         int64_t head_dim, const RopeBands& bands, double base_freq = 10000.0,
                         int64_t pad_to = -1) {
    validate_boundaries(boundaries);
    validate_bands(bands, head_dim);
    if (grids.size() + 1 != boundaries.size())
        throw runtime_error("rope_3d: grids/boundaries segment count mismatch");
    const int64_t total = boundaries.back();
    const int64_t padded = pad_to < 0 ? total : pad_to;
    if (padded < total) throw runtime_error("rope_3d: pad_to below total length");
    const int64_t half = head_dim / 2;

    auto cos_tab = std::make_shared<std::vector<double>>(size_t(padded * half), 1.0);
    auto sin_tab = std::make_shared<std::vector<double>>(size_t(padded * half), 0.0);

    for (size_t s = 0; s < grids.size(); ++s) {
        const Grid& g = grids[s];
        if (g.count() != boundaries[s + 1] - boundaries[s])
            throw runtime_error("rope_3d: grid product != segment length at segment " +
                                std::to_string(s));
        for (int64_t k = 0; k < g.count(); ++k) {
            const int64_t row = boundaries[s] + k;
            const int64_t ti = k / (g.h * g.w);
            const int64_t hi = (k / g.w) % g.h;
            const int64_t wi = k % g.w;
            double* crow = cos_tab->data() + row * half;
            double* srow = sin_tab->data() + row * half;
            int64_t pair = 0;
            const int64_t axis_pos[3] = {ti, hi, wi};
            const int64_t widths[3] = {bands.t, bands.h, bands.w};
            for (int axis = 0; axis < 3; ++axis) {
                const int64_t bw = widths[axis];
                for (int64_t kk = 0; kk < bw / 2; ++kk, ++pair) {
                    const double inv_freq = std::pow(base_freq, -2.0 * double(kk) / double(bw));
                    const double angle = double(axis_pos[axis]) * inv_freq;
                    crow[pair] = std::cos(angle);
                    srow[pair] = std::sin(angle);
                }
            }
        }
    }
    return RopeTable{padded, head_dim, bands, std::move(cos_tab), std::move(sin_tab)};
}

inline Tensor apply_rope(const Tensor& q_or_k, const RopeTable& table) {
    if (q_or_k.cols() != table.head_dim)
        throw runtime_error("apply_rope: width " + std::to_string(q_or_k.cols()) +
                            " != table head_dim " + std::to_string(table.head_dim));
    if (q_or_k.rows() != table.len)
        throw runtime_error("apply_rope: rows " + std::to_string(q_or_k.rows()) +
                            " != table len " + std::to_string(table.len));
    return rope_rotate(q_or_k, table.cos, table.sin);
}

// Greedy packing in arrival order: append to the current pack while it fits,
// otherwise start a new one. Samples are never split or reordered.
inline std::vector<PackedBatch> pack(const std::vector<TokenSeq>& samples, int64_t budget) {
    if (budget <= 0) throw runtime_error("pack: budget must be positive");
    std::vector<PackedBatch> packs;
    std::vector<const TokenSeq*> current;
    int64_t current_len = 0;

    auto flush = [&]() {
        if (current.empty()) return;
        PackedBatch pb;
        pb.budget = budget;
        pb.boundaries.push_back(0);
        std::vector<Tensor> parts;
        for (const TokenSeq* s : current) {
            parts.push_back(s->data);
            pb.boundaries.push_back(pb.boundaries.back() + s->len());
            pb.grids.push_back(s->grid);
        }
        pb.tokens = concat_rows(parts);
        packs.push_back(std::move(pb));
        current.clear();
        current_len = 0;
    };

    for (const TokenSeq& s : samples) {
        if (s.len() > budget)
            throw runtime_error("pack: sample of length " + std::to_string(s.len()) +
                                " exceeds budget " + std::to_string(budget));
        if (current_len + s.len() > budget) flush();
        current.push_back(&s);
        current_len += s.len();
    }
    flush();
    return packs;
}

inline std::vector<TokenSeq> unpack(const PackedBatch& packed) {
    validate_boundaries(packed.boundaries);
    if (packed.num_segments() != int64_t(packed.grids.size()))
        throw runtime_error("unpack: corrupted batch, segment/grid count mismatch");
    if (packed.tokens.rows() != packed.padded_len())
        throw runtime_error("unpack: corrupted batch, token rows != padded length");
    std::vector<TokenSeq> out;
    for (int64_t s = 0; s < packed.num_segments(); ++s)
        out.push_back(make_token_seq(
            slice_rows(packed.tokens, packed.boundaries[size_t(s)], packed.segment_len(s)),
            packed.grids[size_t(s)]));
    return out;
}

// Append a zero-token null segment so the batch fills its budget. The null
// segment is excluded from loss and attends only to itself.
inline PackedBatch pad_to_budget(const PackedBatch& packed) {
    const int64_t pad = packed.budget - packed.total_len();
    if (pad < 0) throw runtime_error("pad_to_budget: batch exceeds its budget");
    PackedBatch out = packed;
    if (pad == 0 || packed.pad_len > 0) return out;
    out.tokens = concat_rows({packed.tokens, Tensor::zeros(pad, packed.tokens.cols())});
    out.pad_len = pad;
    return out;
}

inline double padding_waste_fraction(const std::vector<PackedBatch>& packs) {
    if (packs.empty()) return 0.0;
    double waste = 0.0, capacity = 0.0;
    for (const auto& p : packs) {
        waste += double(p.budget - p.total_len());
        capacity += double(p.budget);
    }
    return waste / capacity;
}

}  // namespace lynx
