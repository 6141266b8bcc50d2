#pragma once

// Desk-scale DiT video backbone: patchification, timestep conditioning,
// masked spatio-temporal self-attention with 3D rotary factors, text
// cross-attention, and a gated MLP, all over packed token sequences.
//
// Stand-ins for the parts a full-scale system would inherit from a
// pretrained base model (latent encoder, text encoder) live in
// encoders.hpp; reference values of the full-scale configuration are kept
// in FullScaleReference as documentation constants.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lynx/common.hpp"
#include "lynx/nn.hpp"
#include "lynx/rope_pack.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// Full-scale reference values mirrored by this desk-scale build.
struct FullScaleReference {
    static constexpr int64_t identity_token_dim = 5120;
    static constexpr int64_t face_embed_dim = 512;
    static constexpr int64_t id_token_count = 16;
    static constexpr int64_t register_token_count = 16;
    static constexpr int64_t image_stage_iters = 40000;
    static constexpr int64_t video_stage_iters = 60000;
};

struct PatchSpec {
    int64_t pt = 1, ph = 2, pw = 2;

    int64_t volume() const { return pt * ph * pw; }
    bool divides(int64_t t, int64_t h, int64_t w) const {
        return t % pt == 0 && h % ph == 0 && w % pw == 0;
    }
};

struct ModelConfig {
    int64_t hidden_dim = 64;
    int64_t num_blocks = 4;
    int64_t num_heads = 4;
    PatchSpec patch;
    int64_t text_dim = 32;
    int64_t latent_channels = 4;

    // identity adapter
    int64_t face_dim = 64;
    int64_t n_id_tokens = FullScaleReference::id_token_count;
    int64_t n_register_tokens = FullScaleReference::register_token_count;
    int64_t resampler_depth = 2;
    int64_t resampler_heads = 4;

    double rope_base = 10000.0;
    // Initial scale of the velocity output projection; sized so initial
    // predictions span the latent magnitudes the desk experiments use.
    double out_proj_init_std = 0.4;

    int64_t head_dim() const { return hidden_dim / num_heads; }
    int64_t patch_len() const { return patch.volume() * latent_channels; }

    void validate() const {
        auto positive = [](int64_t v, const char* field) {
            if (v <= 0) throw config_error(std::string("model.") + field + " must be positive");
        };
        positive(hidden_dim, "hidden_dim");
        positive(num_blocks, "num_blocks");
        positive(num_heads, "num_heads");
        positive(text_dim, "text_dim");
        positive(latent_channels, "latent_channels");
        positive(patch.pt, "patch.pt");
        positive(patch.ph, "patch.ph");
        positive(patch.pw, "patch.pw");
        positive(face_dim, "face_dim");
        positive(n_id_tokens, "n_id_tokens");
        if (n_register_tokens < 0) throw config_error("model.n_register_tokens must be >= 0");
        positive(resampler_depth, "resampler_depth");
        positive(resampler_heads, "resampler_heads");
        if (hidden_dim % num_heads != 0)
            throw config_error("model.hidden_dim " + std::to_string(hidden_dim) +
                               " not divisible by num_heads " + std::to_string(num_heads));
        if (head_dim() % 2 != 0)
            throw config_error("model.head_dim " + std::to_string(head_dim()) + " must be even");
        validate_bands(default_bands(head_dim()), head_dim());
    }
};

// Dense (t, h, w, channels) latent array; the unit every model pass
// consumes or produces.
struct LatentVideo {
    int64_t t = 0, h = 0, w = 0, c = 1;
    std::vector<double> data;  // row-major (t, h, w, c)

    int64_t size() const { return t * h * w * c; }
    double& at(int64_t ti, int64_t hi, int64_t wi, int64_t ci) {
        return data[size_t(((ti * h + hi) * w + wi) * c + ci)];
    }
    double at(int64_t ti, int64_t hi, int64_t wi, int64_t ci) const {
        return data[size_t(((ti * h + hi) * w + wi) * c + ci)];
    }

    static LatentVideo zeros(int64_t t, int64_t h, int64_t w, int64_t c) {
        return LatentVideo{t, h, w, c, std::vector<double>(size_t(t * h * w * c), 0.0)};
    }

    void check(const std::string& context) const {
        if (int64_t(data.size()) != size())
            throw runtime_error(context + ": latent data size mismatch");
        if (!all_finite(data)) throw runtime_error(context + ": non-finite latent values");
    }
};

inline Grid token_grid(const LatentVideo& x, const PatchSpec& p) {
    if (!p.divides(x.t, x.h, x.w))
        throw runtime_error("patchify: patch (" + std::to_string(p.pt) + ", " +
                            std::to_string(p.ph) + ", " + std::to_string(p.pw) +
                            ") does not divide latent extents (" + std::to_string(x.t) + ", " +
                            std::to_string(x.h) + ", " + std::to_string(x.w) + ")");
    return Grid{x.t / p.pt, x.h / p.ph, x.w / p.pw};
}

// Flatten each (pt, ph, pw, c) patch to one row, row-major over the token
// grid. Pure rearrangement; no projection.
inline Tensor patch_vectors(const LatentVideo& x, const PatchSpec& p) {
    const Grid g = token_grid(x, p);
    const int64_t plen = p.volume() * x.c;
    std::vector<double> out(size_t(g.count() * plen));
    int64_t row = 0;
    for (int64_t ti = 0; ti < g.t; ++ti)
        for (int64_t hi = 0; hi < g.h; ++hi)
            for (int64_t wi = 0; wi < g.w; ++wi, ++row) {
                double* dst = out.data() + row * plen;
                int64_t k = 0;
                for (int64_t dt = 0; dt < p.pt; ++dt)
                    for (int64_t dh = 0; dh < p.ph; ++dh)
                        for (int64_t dw = 0; dw < p.pw; ++dw)
                            for (int64_t ci = 0; ci < x.c; ++ci, ++k)
                                dst[k] = x.at(ti * p.pt + dt, hi * p.ph + dh, wi * p.pw + dw, ci);
            }
    return Tensor::from_data(std::move(out), g.count(), plen);
}

// Inverse rearrangement of patch_vectors.
inline LatentVideo latent_from_patch_vectors(const Tensor& pv, const Grid& g, const PatchSpec& p,
                                             int64_t channels) {
    const int64_t plen = p.volume() * channels;
    if (pv.rows() != g.count() || pv.cols() != plen)
        throw runtime_error("unpatchify: tokens (" + std::to_string(pv.rows()) + ", " +
                            std::to_string(pv.cols()) + ") inconsistent with grid (" +
                            std::to_string(g.t) + ", " + std::to_string(g.h) + ", " +
                            std::to_string(g.w) + ") and patch volume " + std::to_string(plen));
    LatentVideo x = LatentVideo::zeros(g.t * p.pt, g.h * p.ph, g.w * p.pw, channels);
    const auto& v = pv.data();
    int64_t row = 0;
    for (int64_t ti = 0; ti < g.t; ++ti)
        for (int64_t hi = 0; hi < g.h; ++hi)
            for (int64_t wi = 0; wi < g.w; ++wi, ++row) {
                const double* src = v.data() + row * plen;
                int64_t k = 0;
                for (int64_t dt = 0; dt < p.pt; ++dt)
                    for (int64_t dh = 0; dh < p.ph; ++dh)
                        for (int64_t dw = 0; dw < p.pw; ++dw)
                            for (int64_t ci = 0; ci < channels; ++ci, ++k)
                                x.at(ti * p.pt + dt, hi * p.ph + dh, wi * p.pw + dw, ci) = src[k];
            }
    return x;
}

inline TokenSeq patchify(const LatentVideo& x, const PatchSpec& p, const Linear& proj) {
    x.check("patchify");
    return make_token_seq(proj.forward(patch_vectors(x, p)), token_grid(x, p));
}

inline LatentVideo unpatchify(const TokenSeq& tokens, const PatchSpec& p, const Linear& proj_out,
                              int64_t channels) {
    return latent_from_patch_vectors(proj_out.forward(tokens.data), tokens.grid, p, channels);
}

// Sinusoidal timestep embedding: [sin(t * f_0..), cos(t * f_0..)] with
// f_i = base^(-i / (dim/2)). The top frequency is 1, so t in [0,1] never
// wraps and distinct t give distinct embeddings.
inline Tensor timestep_embed(double t, int64_t dim, double base = 10000.0) {
    if (!(t >= 0.0 && t <= 1.0))
        throw runtime_error("timestep_embed: t = " + std::to_string(t) + " outside [0, 1]");
    if (dim < 2 || dim % 2 != 0)
        throw runtime_error("timestep_embed: dim must be even and >= 2");
    const int64_t half = dim / 2;
    std::vector<double> out(static_cast<size_t>(dim));
    for (int64_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -double(i) / double(half));
        out[size_t(i)] = std::sin(t * freq);
        out[size_t(half + i)] = std::cos(t * freq);
    }
    return Tensor::from_data(std::move(out), 1, dim);
}

// Six per-block modulation vectors derived from the timestep conditioning:
// shift/scale/gate for the self-attention sublayer and for the MLP sublayer.
struct BlockModulation {
    Tensor shift_attn, scale_attn, gate_attn;
    Tensor shift_mlp, scale_mlp, gate_mlp;
};

struct DitBlock {
    AttentionWeights self_attn;  // hidden -> hidden, rope on q/k
    AttentionWeights text_attn;  // kv from text_dim
    Linear mlp_fc1, mlp_fc2;     // hidden -> 4*hidden -> hidden
    Linear ada_head;             // hidden -> 6*hidden, zero-init

    DitBlock() = default;

    DitBlock(Rng& rng, const ModelConfig& cfg)
        : self_attn(rng, cfg.hidden_dim, cfg.hidden_dim, cfg.num_heads),
          text_attn(rng, cfg.hidden_dim, cfg.text_dim, cfg.num_heads),
          mlp_fc1(rng, cfg.hidden_dim, 4 * cfg.hidden_dim),
          mlp_fc2(rng, 4 * cfg.hidden_dim, cfg.hidden_dim),
          ada_head(rng, cfg.hidden_dim, 6 * cfg.hidden_dim, 0.0) {}

    BlockModulation modulation(const Tensor& t_cond) const {
        const int64_t d = ada_head.out_dim / 6;
        Tensor mod = ada_head.forward(silu(t_cond));  // (1, 6d)
        BlockModulation m;
        m.shift_attn = slice_cols(mod, 0, d);
        m.scale_attn = slice_cols(mod, d, d);
        m.gate_attn = slice_cols(mod, 2 * d, d);
        m.shift_mlp = slice_cols(mod, 3 * d, d);
        m.scale_mlp = slice_cols(mod, 4 * d, d);
        m.gate_mlp = slice_cols(mod, 5 * d, d);
        return m;
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        self_attn.collect_params(prefix + ".self_attn", reg);
        text_attn.collect_params(prefix + ".text_attn", reg);
        mlp_fc1.collect_params(prefix + ".mlp.fc1", reg);
        mlp_fc2.collect_params(prefix + ".mlp.fc2", reg);
        ada_head.collect_params(prefix + ".ada_head", reg);
    }
};

// Per-segment conditioning for one packed forward pass.
struct SegmentCond {
    Tensor text;  // (text_len, text_dim)
    double t = 0.0;
};

// Row-broadcast per-segment modulation vectors into an (L, D) matrix
// aligned with the packed layout; padding rows get zeros.
inline Tensor assemble_rows(const std::vector<Tensor>& per_segment,
                            const std::vector<int64_t>& boundaries, int64_t pad_len) {
    std::vector<Tensor> parts;
    for (size_t s = 0; s + 1 < boundaries.size(); ++s)
        parts.push_back(broadcast_rows(per_segment[s], boundaries[s + 1] - boundaries[s]));
    if (pad_len > 0) parts.push_back(Tensor::zeros(pad_len, per_segment[0].cols()));
    return concat_rows(parts);
}

class Backbone {
public:
    ModelConfig cfg;
    Linear proj_in;         // patch_len -> hidden
    Linear t_mlp1, t_mlp2;  // timestep conditioning MLP
    std::vector<DitBlock> blocks;
    Linear final_ada;  // hidden -> 2*hidden (shift, scale), zero-init
    Linear proj_out;   // hidden -> patch_len

    Backbone() = default;

    Backbone(const ModelConfig& config, Rng& rng) : cfg(config) {
        cfg.validate();
        proj_in = Linear(rng, cfg.patch_len(), cfg.hidden_dim);
        t_mlp1 = Linear(rng, cfg.hidden_dim, cfg.hidden_dim);
        t_mlp2 = Linear(rng, cfg.hidden_dim, cfg.hidden_dim);
        for (int64_t b = 0; b < cfg.num_blocks; ++b) blocks.emplace_back(rng, cfg);
        final_ada = Linear(rng, cfg.hidden_dim, 2 * cfg.hidden_dim, 0.0);
        proj_out = Linear(rng, cfg.hidden_dim, cfg.patch_len(), cfg.out_proj_init_std);
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        proj_in.collect_params(prefix + ".proj_in", reg);
        t_mlp1.collect_params(prefix + ".t_mlp1", reg);
        t_mlp2.collect_params(prefix + ".t_mlp2", reg);
        for (size_t b = 0; b < blocks.size(); ++b)
            blocks[b].collect_params(prefix + ".blocks." + std::to_string(b), reg);
        final_ada.collect_params(prefix + ".final_ada", reg);
        proj_out.collect_params(prefix + ".proj_out", reg);
    }

    ParamRegistry params() const {
        ParamRegistry reg;
        collect_params("backbone", reg);
        return reg;
    }

    Tensor timestep_condition(double t) const {
        return t_mlp2.forward(silu(t_mlp1.forward(timestep_embed(t, cfg.hidden_dim))));
    }

    // Hook invoked between the text cross-attention and the MLP of block b;
    // returns the replacement hidden state. Adapters inject here.
    using InjectHook = std::function<Tensor(int64_t block, const Tensor& x)>;
    // Tap invoked on the hidden state right after block b's self-attention.
    using TapHook = std::function<void(int64_t block, const Tensor& x)>;

    // Packed forward over visual tokens: returns predicted velocity patch
    // vectors with the input's segment layout. `conds` is per segment.
    // `final_hidden`, when given, receives the hidden stream after the last
    // block (before the output norm/projection).
    PackedBatch forward(const PackedBatch& packed, const std::vector<SegmentCond>& conds,
                        const InjectHook& inject = nullptr, const TapHook& tap = nullptr,
                        Tensor* final_hidden = nullptr) const {
        validate_boundaries(packed.boundaries);
        if (int64_t(conds.size()) != packed.num_segments())
            throw runtime_error("backbone: " + std::to_string(conds.size()) +
                                " segment conditions for " +
                                std::to_string(packed.num_segments()) + " segments");
        if (packed.tokens.rows() != packed.padded_len())
            throw runtime_error("backbone: token rows != padded length");
        if (packed.tokens.cols() != cfg.hidden_dim)
            throw runtime_error("backbone: token dim " + std::to_string(packed.tokens.cols()) +
                                " != hidden_dim " + std::to_string(cfg.hidden_dim));

        const AttentionMask mask = build_mask(packed.boundaries, packed.padded_len());
        const RopeTable rope = rope_3d(packed.grids, packed.boundaries, cfg.head_dim(),
                                       default_bands(cfg.head_dim()), cfg.rope_base,
                                       packed.padded_len());

        std::vector<Tensor> t_conds;
        for (const auto& c : conds) t_conds.push_back(timestep_condition(c.t));

        Tensor x = packed.tokens;
        for (size_t b = 0; b < blocks.size(); ++b) {
            const DitBlock& blk = blocks[b];

            // adaLN-modulated self-attention
            std::vector<Tensor> sh, sc, ga;
            for (const auto& tc : t_conds) {
                BlockModulation m = blk.modulation(tc);
                sh.push_back(m.shift_attn);
                sc.push_back(m.scale_attn);
                ga.push_back(m.gate_attn);
            }
            Tensor h = layer_norm_rows(x);
            h = add(mul(h, add_const(assemble_rows(sc, packed.boundaries, packed.pad_len), 1.0)),
                    assemble_rows(sh, packed.boundaries, packed.pad_len));
            Tensor attn_out = attention(blk.self_attn, h, h, &rope, &mask.seg);
            x = add(x, mul(attn_out, assemble_rows(ga, packed.boundaries, packed.pad_len)));

            if (tap) tap(int64_t(b), x);

            // text cross-attention, per segment
            {
                Tensor hn = layer_norm_rows(x);
                std::vector<Tensor> rows;
                for (int64_t s = 0; s < packed.num_segments(); ++s) {
                    Tensor qs = slice_rows(hn, packed.boundaries[size_t(s)], packed.segment_len(s));
                    rows.push_back(attention(blk.text_attn, qs, conds[size_t(s)].text));
                }
                if (packed.pad_len > 0)
                    rows.push_back(Tensor::zeros(packed.pad_len, cfg.hidden_dim));
                x = add(x, concat_rows(rows));
            }

            if (inject) x = inject(int64_t(b), x);

            // adaLN-modulated MLP
            std::vector<Tensor> sh2, sc2, ga2;
            for (const auto& tc : t_conds) {
                BlockModulation m = blk.modulation(tc);
                sh2.push_back(m.shift_mlp);
                sc2.push_back(m.scale_mlp);
                ga2.push_back(m.gate_mlp);
            }
            Tensor hm = layer_norm_rows(x);
            hm = add(mul(hm, add_const(assemble_rows(sc2, packed.boundaries, packed.pad_len), 1.0)),
                     assemble_rows(sh2, packed.boundaries, packed.pad_len));
            Tensor mlp_out = blk.mlp_fc2.forward(silu(blk.mlp_fc1.forward(hm)));
            x = add(x, mul(mlp_out, assemble_rows(ga2, packed.boundaries, packed.pad_len)));

            check_finite(x, "backbone block " + std::to_string(b));
        }

        if (final_hidden) *final_hidden = x;

        // final norm, timestep shift/scale, projection to velocity patches
        Tensor h = layer_norm_rows(x);
        std::vector<Tensor> fsh, fsc;
        for (const auto& tc : t_conds) {
            Tensor mod = final_ada.forward(silu(tc));
            fsh.push_back(slice_cols(mod, 0, cfg.hidden_dim));
            fsc.push_back(slice_cols(mod, cfg.hidden_dim, cfg.hidden_dim));
        }
        h = add(mul(h, add_const(assemble_rows(fsc, packed.boundaries, packed.pad_len), 1.0)),
                assemble_rows(fsh, packed.boundaries, packed.pad_len));
        Tensor out = proj_out.forward(h);

        PackedBatch result = packed;
        result.tokens = out;
        return result;
    }
};

}  // namespace lynx
