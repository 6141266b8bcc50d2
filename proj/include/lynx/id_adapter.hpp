#pragma once

// Identity conditioning path: a face-recognition embedding is resampled into
// a fixed-length identity token sequence, register tokens are appended, and
// every DiT block cross-attends to the combined sequence with a
// zero-initialized gate so the adapted model starts out transparent.

#include <cmath>
#include <string>
#include <vector>

#include "lynx/backbone.hpp"
#include "lynx/common.hpp"
#include "lynx/nn.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// L2-normalized face feature vector (full-scale dimension 512; the desk
// stub embedder emits 64).
struct FaceEmbedding {
    std::vector<double> v;

    static FaceEmbedding from(std::vector<double> values) {
        if (!all_finite(values)) throw runtime_error("face embedding: non-finite values");
        double norm = 0.0;
        for (double x : values) norm += x * x;
        norm = std::sqrt(norm);
        if (std::abs(norm - 1.0) > 1e-6)
            throw runtime_error("face embedding: not L2-normalized (norm = " +
                                std::to_string(norm) + ")");
        return FaceEmbedding{std::move(values)};
    }

    int64_t dim() const { return int64_t(v.size()); }
};

// Identity token sequence handed to the per-block cross-attentions:
// n_id resampled tokens followed by n_reg register tokens.
struct IdentityTokens {
    Tensor tokens;  // (n_id + n_reg, hidden)
    int64_t n_id = 0;
    int64_t n_reg = 0;

    int64_t len() const { return tokens.rows(); }
};

// Learned latent queries cross-attend to the projected face feature through
// `depth` blocks; output length is always n_id regardless of the input.
class Resampler {
public:
    Tensor latent_queries;  // (n_id, hidden)
    Linear face_proj;       // face_dim -> hidden
    struct Block {
        AttentionWeights attn;
        Linear fc1, fc2;
    };
    std::vector<Block> blocks;
    Linear proj_out;  // hidden -> hidden

    Resampler() = default;

    Resampler(const ModelConfig& cfg, Rng& rng) {
        latent_queries = Tensor::randn(rng, cfg.n_id_tokens, cfg.hidden_dim,
                                       1.0 / std::sqrt(double(cfg.hidden_dim)));
        face_proj = Linear(rng, cfg.face_dim, cfg.hidden_dim);
        for (int64_t i = 0; i < cfg.resampler_depth; ++i)
            blocks.push_back({AttentionWeights(rng, cfg.hidden_dim, cfg.hidden_dim,
                                               cfg.resampler_heads),
                              Linear(rng, cfg.hidden_dim, 4 * cfg.hidden_dim),
                              Linear(rng, 4 * cfg.hidden_dim, cfg.hidden_dim)});
        proj_out = Linear(rng, cfg.hidden_dim, cfg.hidden_dim);
    }

    Tensor forward(const FaceEmbedding& face) const {
        if (face.dim() != face_proj.in_dim)
            throw runtime_error("resampler: face dim " + std::to_string(face.dim()) +
                                " != expected " + std::to_string(face_proj.in_dim));
        Tensor kv = face_proj.forward(
            Tensor::from_data(face.v, 1, face.dim()));  // (1, hidden)
        Tensor x = latent_queries;
        for (const auto& blk : blocks) {
            x = add(x, attention(blk.attn, layer_norm_rows(x), kv));
            x = add(x, blk.fc2.forward(silu(blk.fc1.forward(layer_norm_rows(x)))));
        }
        return proj_out.forward(layer_norm_rows(x));  // (n_id, hidden)
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        reg.add(prefix + ".latent_queries", latent_queries);
        face_proj.collect_params(prefix + ".face_proj", reg);
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = prefix + ".blocks." + std::to_string(i);
            blocks[i].attn.collect_params(p + ".attn", reg);
            blocks[i].fc1.collect_params(p + ".fc1", reg);
            blocks[i].fc2.collect_params(p + ".fc2", reg);
        }
        proj_out.collect_params(prefix + ".proj_out", reg);
    }
};

inline IdentityTokens with_registers(const Tensor& id_part, const Tensor& registers) {
    if (registers.defined() && registers.rows() > 0) {
        if (registers.cols() != id_part.cols())
            throw runtime_error("with_registers: token dim mismatch " +
                                std::to_string(id_part.cols()) + " vs " +
                                std::to_string(registers.cols()));
        return IdentityTokens{concat_rows({id_part, registers}), id_part.rows(),
                              registers.rows()};
    }
    return IdentityTokens{id_part, id_part.rows(), 0};
}

class IdAdapter {
public:
    Resampler resampler;
    Tensor registers;    // (n_reg, hidden), shared across blocks
    Tensor null_tokens;  // (n_id, hidden), identity-dropout replacement
    struct BlockInject {
        AttentionWeights attn;
        Tensor gate;  // (1, hidden), zero-init
    };
    std::vector<BlockInject> blocks;

    IdAdapter() = default;

    IdAdapter(const ModelConfig& cfg, Rng& rng) {
        resampler = Resampler(cfg, rng);
        registers = cfg.n_register_tokens > 0
                        ? Tensor::randn(rng, cfg.n_register_tokens, cfg.hidden_dim,
                                        1.0 / std::sqrt(double(cfg.hidden_dim)))
                        : Tensor();
        null_tokens = Tensor::randn(rng, cfg.n_id_tokens, cfg.hidden_dim,
                                    1.0 / std::sqrt(double(cfg.hidden_dim)));
        for (int64_t b = 0; b < cfg.num_blocks; ++b)
            blocks.push_back({AttentionWeights(rng, cfg.hidden_dim, cfg.hidden_dim,
                                               cfg.num_heads),
                              Tensor::zeros(1, cfg.hidden_dim)});
    }

    IdentityTokens tokens_for(const FaceEmbedding& face) const {
        return with_registers(resampler.forward(face), registers);
    }

    // Identity-dropout / unconditional path.
    IdentityTokens null_tokens_set() const { return with_registers(null_tokens, registers); }

    // out = visual + gate * CrossAttn(q = visual, kv = identity tokens)
    Tensor inject(int64_t block, const Tensor& visual, const IdentityTokens& idt) const {
        if (block < 0 || block >= int64_t(blocks.size()))
            throw runtime_error("id adapter: block index " + std::to_string(block) +
                                " out of range");
        if (idt.tokens.cols() != visual.cols())
            throw runtime_error("id adapter: token dim " + std::to_string(idt.tokens.cols()) +
                                " != visual dim " + std::to_string(visual.cols()));
        const BlockInject& bi = blocks[size_t(block)];
        Tensor delta = attention(bi.attn, layer_norm_rows(visual), idt.tokens);
        return add(visual, mul_rowvec(delta, bi.gate));
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        resampler.collect_params(prefix + ".resampler", reg);
        if (registers.defined()) reg.add(prefix + ".registers", registers);
        reg.add(prefix + ".null_tokens", null_tokens);
        for (size_t b = 0; b < blocks.size(); ++b) {
            const std::string p = prefix + ".blocks." + std::to_string(b);
            blocks[b].attn.collect_params(p + ".attn", reg);
            reg.add(p + ".gate", blocks[b].gate);
        }
    }

    ParamRegistry params() const {
        ParamRegistry reg;
        collect_params("id_adapter", reg);
        return reg;
    }
};

}  // namespace lynx
