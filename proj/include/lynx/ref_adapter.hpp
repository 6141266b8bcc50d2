#pragma once

// Reference conditioning path: the reference image runs through a frozen
// copy of the backbone at noise level 0 with the fixed prompt
// "image of a face"; the hidden state after each block's self-attention is
// collected and injected into the matching generation block through its own
// cross-attention, gated from zero.

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lynx/backbone.hpp"
#include "lynx/common.hpp"
#include "lynx/encoders.hpp"
#include "lynx/nn.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// Per-block reference token sequences from the frozen pass.
struct RefActivationSet {
    std::vector<Tensor> per_block;  // each (ref_len, hidden), detached
    Grid ref_grid;

    int64_t num_blocks() const { return int64_t(per_block.size()); }
    int64_t ref_len() const { return per_block.empty() ? 0 : per_block[0].rows(); }
};

// Read-only view of backbone parameters with the content hash recorded at
// creation. Shares storage when the backbone is frozen for the whole stage;
// deep-copies otherwise.
class FrozenCopyHandle {
public:
    static FrozenCopyHandle share(std::shared_ptr<const Backbone> backbone) {
        FrozenCopyHandle h;
        h.model_ = std::move(backbone);
        h.hash_ = h.model_->params().content_hash();
        return h;
    }

    // A plain Backbone copy shares Tensor storage; detach every parameter so
    // the frozen copy owns its values.
    static FrozenCopyHandle deep_copy(const Backbone& backbone) {
        auto rebuilt = std::make_shared<Backbone>(backbone);
        detach_linear(rebuilt->proj_in);
        detach_linear(rebuilt->t_mlp1);
        detach_linear(rebuilt->t_mlp2);
        for (auto& blk : rebuilt->blocks) {
            detach_attention(blk.self_attn);
            detach_attention(blk.text_attn);
            detach_linear(blk.mlp_fc1);
            detach_linear(blk.mlp_fc2);
            detach_linear(blk.ada_head);
        }
        detach_linear(rebuilt->final_ada);
        detach_linear(rebuilt->proj_out);
        FrozenCopyHandle h;
        h.model_ = rebuilt;
        h.hash_ = rebuilt->params().content_hash();
        return h;
    }

    const Backbone& model() const { return *model_; }
    uint64_t content_hash() const { return hash_; }
    uint64_t current_hash() const { return model_->params().content_hash(); }
    bool valid() const { return model_ != nullptr; }

private:
    static void detach_linear(Linear& l) {
        l.weight = l.weight.detached_copy();
        if (l.bias.defined()) l.bias = l.bias.detached_copy();
    }
    static void detach_attention(AttentionWeights& a) {
        detach_linear(a.q);
        detach_linear(a.k);
        detach_linear(a.v);
        detach_linear(a.out);
    }

    std::shared_ptr<const Backbone> model_;
    uint64_t hash_ = 0;
};

// Frozen forward of a single-frame reference latent. Runs with timestep 0
// and the fixed prompt; fully detached, so no gradient can reach the frozen
// parameters (or anything else).
inline RefActivationSet encode_reference(const LatentVideo& ref_latent,
                                         const FrozenCopyHandle& frozen) {
    if (!frozen.valid()) throw runtime_error("encode_reference: invalid frozen handle");
    if (ref_latent.t != 1)
        throw runtime_error("encode_reference: reference must be a single frame, got t = " +
                            std::to_string(ref_latent.t));
    ref_latent.check("encode_reference");

    NoGradGuard no_grad;
    const Backbone& bb = frozen.model();
    TokenSeq tokens = patchify(ref_latent, bb.cfg.patch, bb.proj_in);

    PackedBatch packed;
    packed.tokens = tokens.data;
    packed.boundaries = {0, tokens.len()};
    packed.grids = {tokens.grid};
    packed.budget = tokens.len();

    RefActivationSet set;
    set.ref_grid = tokens.grid;
    set.per_block.resize(size_t(bb.cfg.num_blocks));
    SegmentCond cond{embed_text("image of a face", bb.cfg.text_dim), 0.0};
    bb.forward(packed, {cond}, nullptr, [&](int64_t block, const Tensor& x) {
        set.per_block[size_t(block)] = x.detached_copy();
    });
    return set;
}

class RefAdapter {
public:
    struct BlockInject {
        AttentionWeights attn;
        Tensor gate;  // (1, hidden), zero-init
    };
    std::vector<BlockInject> blocks;  // separate weights per layer

    RefAdapter() = default;

    RefAdapter(const ModelConfig& cfg, Rng& rng) {
        for (int64_t b = 0; b < cfg.num_blocks; ++b)
            blocks.push_back({AttentionWeights(rng, cfg.hidden_dim, cfg.hidden_dim,
                                               cfg.num_heads),
                              Tensor::zeros(1, cfg.hidden_dim)});
    }

    // out = visual + gate_l * CrossAttn(q = visual, kv = reference tokens of
    // layer l); block-l activations always meet block-l weights.
    Tensor inject(int64_t block, const Tensor& visual, const Tensor& ref_tokens) const {
        if (block < 0 || block >= int64_t(blocks.size()))
            throw runtime_error("ref adapter: block index " + std::to_string(block) +
                                " out of range");
        if (ref_tokens.cols() != visual.cols())
            throw runtime_error("ref adapter: reference dim " +
                                std::to_string(ref_tokens.cols()) + " != visual dim " +
                                std::to_string(visual.cols()));
        const BlockInject& bi = blocks[size_t(block)];
        Tensor delta = attention(bi.attn, layer_norm_rows(visual), ref_tokens);
        return add(visual, mul_rowvec(delta, bi.gate));
    }

    void collect_params(const std::string& prefix, ParamRegistry& reg) const {
        for (size_t b = 0; b < blocks.size(); ++b) {
            const std::string p = prefix + ".blocks." + std::to_string(b);
            blocks[b].attn.collect_params(p + ".attn", reg);
            reg.add(p + ".gate", blocks[b].gate);
        }
    }

    ParamRegistry params() const {
        ParamRegistry reg;
        collect_params("ref_adapter", reg);
        return reg;
    }
};

// Content-addressed cache of reference activations keyed by the latent bytes
// and the frozen-copy hash, so repeated epochs skip the frozen pass.
class RefActivationCache {
public:
    explicit RefActivationCache(std::string dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    static std::string key_for(const LatentVideo& latent, const FrozenCopyHandle& frozen) {
        uint64_t h = fnv1a(latent.data.data(), latent.data.size() * sizeof(double));
        const uint64_t fh = frozen.content_hash();
        h = fnv1a(&fh, sizeof(fh), h);
        return hex64(h);
    }

    std::optional<RefActivationSet> load(const std::string& key) const {
        const std::string path = file_for(key);
        std::ifstream in(path, std::ios::binary);
        if (!in) return std::nullopt;
        auto read_i64 = [&in]() {
            int64_t v = 0;
            in.read(reinterpret_cast<char*>(&v), sizeof(v));
            return v;
        };
        RefActivationSet set;
        set.ref_grid.t = read_i64();
        set.ref_grid.h = read_i64();
        set.ref_grid.w = read_i64();
        const int64_t blocks = read_i64();
        const int64_t rows = read_i64();
        const int64_t cols = read_i64();
        for (int64_t b = 0; b < blocks; ++b) {
            std::vector<double> data(size_t(rows * cols));
            in.read(reinterpret_cast<char*>(data.data()),
                    std::streamsize(data.size() * sizeof(double)));
            set.per_block.push_back(Tensor::from_data(std::move(data), rows, cols));
        }
        if (!in) return std::nullopt;
        return set;
    }

    void store(const std::string& key, const RefActivationSet& set) const {
        const std::string path = file_for(key);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw runtime_error("ref cache: cannot write " + path);
        auto write_i64 = [&out](int64_t v) {
            out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        };
        write_i64(set.ref_grid.t);
        write_i64(set.ref_grid.h);
        write_i64(set.ref_grid.w);
        write_i64(set.num_blocks());
        write_i64(set.ref_len());
        write_i64(set.per_block.empty() ? 0 : set.per_block[0].cols());
        for (const auto& t : set.per_block)
            out.write(reinterpret_cast<const char*>(t.data().data()),
                      std::streamsize(t.data().size() * sizeof(double)));
    }

private:
    std::string file_for(const std::string& key) const { return dir_ + "/" + key + ".ref"; }
    std::string dir_;
};

}  // namespace lynx
