#pragma once

// The assembled identity-conditioned model: backbone plus both adapters.
// Injection order inside each block is text cross-attention, then identity
// tokens, then reference tokens, then the MLP. With both adapter gates at
// their zero init the full model equals the bare backbone bit for bit.

#include <memory>
#include <string>
#include <vector>

#include "lynx/backbone.hpp"
#include "lynx/common.hpp"
#include "lynx/id_adapter.hpp"
#include "lynx/ref_adapter.hpp"

namespace lynx {

// Per-segment conditioning for the full model. Null idt/ref skip that
// injection for the segment.
struct CondSlot {
    Tensor text;  // (text_len, text_dim)
    double t = 0.0;
    const IdentityTokens* idt = nullptr;
    const RefActivationSet* ref = nullptr;
};

class LynxModel {
public:
    ModelConfig cfg;
    Backbone backbone;
    IdAdapter id_adapter;
    RefAdapter ref_adapter;

    LynxModel() = default;

    LynxModel(const ModelConfig& config, uint64_t seed) : cfg(config) {
        cfg.validate();
        Rng rng(seed);
        backbone = Backbone(cfg, rng);
        id_adapter = IdAdapter(cfg, rng);
        ref_adapter = RefAdapter(cfg, rng);
    }

    PackedBatch forward(const PackedBatch& packed, const std::vector<CondSlot>& conds,
                        bool use_adapters = true, Tensor* final_hidden = nullptr) const {
        if (int64_t(conds.size()) != packed.num_segments())
            throw runtime_error("model: " + std::to_string(conds.size()) +
                                " condition slots for " + std::to_string(packed.num_segments()) +
                                " segments");
        for (const auto& c : conds)
            if (c.ref && c.ref->num_blocks() != cfg.num_blocks)
                throw runtime_error("model: reference activations cover " +
                                    std::to_string(c.ref->num_blocks()) + " blocks, backbone has " +
                                    std::to_string(cfg.num_blocks));

        std::vector<SegmentCond> base;
        base.reserve(conds.size());
        for (const auto& c : conds) base.push_back({c.text, c.t});

        Backbone::InjectHook hook;
        if (use_adapters) {
            hook = [this, &packed, &conds](int64_t block, const Tensor& x) {
                Tensor cur = per_segment(x, packed, [&](int64_t s, const Tensor& xs) {
                    return conds[size_t(s)].idt ? id_adapter.inject(block, xs, *conds[size_t(s)].idt)
                                                : xs;
                });
                cur = per_segment(cur, packed, [&](int64_t s, const Tensor& xs) {
                    return conds[size_t(s)].ref
                               ? ref_adapter.inject(block, xs,
                                                    conds[size_t(s)].ref->per_block[size_t(block)])
                               : xs;
                });
                return cur;
            };
        }
        return backbone.forward(packed, base, hook, nullptr, final_hidden);
    }

    // Single-sample convenience wrapper.
    TokenSeq forward_single(const TokenSeq& tokens, const CondSlot& cond,
                            bool use_adapters = true) const {
        PackedBatch packed;
        packed.tokens = tokens.data;
        packed.boundaries = {0, tokens.len()};
        packed.grids = {tokens.grid};
        packed.budget = tokens.len();
        PackedBatch out = forward(packed, {cond}, use_adapters);
        return make_token_seq(out.tokens, tokens.grid);
    }

    ParamRegistry backbone_params() const { return backbone.params(); }

    ParamRegistry adapter_params() const {
        ParamRegistry reg;
        id_adapter.collect_params("id_adapter", reg);
        ref_adapter.collect_params("ref_adapter", reg);
        return reg;
    }

    ParamRegistry all_params() const {
        ParamRegistry reg = backbone_params();
        reg.merge(adapter_params());
        return reg;
    }

    // Adapters train; the backbone is frozen in every stage.
    void configure_trainable() {
        backbone_params().set_requires_grad(false);
        adapter_params().set_requires_grad(true);
    }

    FrozenCopyHandle frozen_backbone() const {
        // Non-owning view: the backbone is frozen for the whole run, so the
        // reference pass shares its storage.
        return FrozenCopyHandle::share(
            std::shared_ptr<const Backbone>(std::shared_ptr<const Backbone>(), &backbone));
    }

private:
    template <typename Fn>
    Tensor per_segment(const Tensor& x, const PackedBatch& packed, Fn&& fn) const {
        std::vector<Tensor> rows;
        rows.reserve(size_t(packed.num_segments()) + 1);
        for (int64_t s = 0; s < packed.num_segments(); ++s)
            rows.push_back(fn(s, slice_rows(x, packed.boundaries[size_t(s)],
                                            packed.segment_len(s))));
        if (packed.pad_len > 0)
            rows.push_back(slice_rows(x, packed.total_len(), packed.pad_len));
        return concat_rows(rows);
    }
};

}  // namespace lynx
