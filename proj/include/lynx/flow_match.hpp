#pragma once

// Flow-matching objective on the rectified linear interpolant
// xt = (1 - t) x0 + t noise with velocity target noise - x0, a two-stage
// progressive trainer (image pretrain, then video) that updates adapters
// only, and a plain Euler sampler integrating the learned field from t = 1
// down to 0.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lynx/backbone.hpp"
#include "lynx/common.hpp"
#include "lynx/model.hpp"
#include "lynx/nn.hpp"
#include "lynx/ref_adapter.hpp"
#include "lynx/rope_pack.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

struct TDist {
    enum class Kind { uniform, fixed };
    Kind kind = Kind::uniform;
    double value = 0.5;

    double draw(Rng& rng) const { return kind == Kind::fixed ? value : rng.uniform(); }
};

struct FlowSample {
    LatentVideo x0;
    LatentVideo noise;
    LatentVideo xt;        // (1 - t) x0 + t noise, exact by construction
    LatentVideo v_target;  // noise - x0, exact by construction
    double t = 0.0;
};

inline FlowSample make_flow_sample(const LatentVideo& x0, Rng& rng,
                                   const TDist& t_dist = TDist{}) {
    x0.check("make_flow_sample");
    FlowSample s;
    s.x0 = x0;
    s.t = t_dist.draw(rng);
    s.noise = LatentVideo::zeros(x0.t, x0.h, x0.w, x0.c);
    for (auto& v : s.noise.data) v = rng.normal();
    s.xt = x0;
    s.v_target = x0;
    for (size_t i = 0; i < x0.data.size(); ++i) {
        s.xt.data[i] = (1.0 - s.t) * x0.data[i] + s.t * s.noise.data[i];
        s.v_target.data[i] = s.noise.data[i] - x0.data[i];
    }
    return s;
}

// Mean squared error over the rows whose mask is nonzero (padding rows are
// excluded exactly).
inline Tensor fm_loss(const Tensor& pred, const Tensor& target,
                      const std::vector<double>& row_mask) {
    return mse_masked(pred, target, row_mask);
}

enum class Stage { image, video };

inline const char* stage_name(Stage s) { return s == Stage::image ? "image" : "video"; }

struct TrainConfig {
    int64_t image_iters = 500;  // full-scale reference: 40000
    int64_t video_iters = 500;  // full-scale reference: 60000
    double lr = 1e-4;
    int64_t pack_budget = 256;
    int64_t samples_per_step = 4;
    uint64_t seed = 0;
    double id_dropout = 0.1;

    int64_t total_iters() const { return image_iters + video_iters; }

    void validate() const {
        if (image_iters <= 0) throw config_error("train.image_iters must be positive");
        if (video_iters <= 0) throw config_error("train.video_iters must be positive");
        if (lr < 0.0) throw config_error("train.lr must be >= 0");
        if (pack_budget <= 0) throw config_error("train.pack_budget must be positive");
        if (samples_per_step <= 0) throw config_error("train.samples_per_step must be positive");
        if (id_dropout < 0.0 || id_dropout > 1.0)
            throw config_error("train.id_dropout must be in [0, 1]");
    }
};

struct StagePos {
    Stage stage;
    int64_t local_step;
};

// Image stage first, then video; checkpoints land at stage boundaries.
inline std::vector<std::pair<Stage, int64_t>> stage_schedule(const TrainConfig& cfg) {
    cfg.validate();
    return {{Stage::image, cfg.image_iters}, {Stage::video, cfg.video_iters}};
}

inline StagePos stage_at(const TrainConfig& cfg, int64_t global_step) {
    cfg.validate();
    if (global_step < 0) throw runtime_error("stage_at: negative step");
    if (global_step < cfg.image_iters) return {Stage::image, global_step};
    if (global_step < cfg.total_iters())
        return {Stage::video, global_step - cfg.image_iters};
    throw runtime_error("resume: step " + std::to_string(global_step) +
                        " is beyond the schedule end " + std::to_string(cfg.total_iters()) +
                        "; both stages already completed");
}

struct SamplerConfig {
    int64_t num_steps = 16;
    std::optional<double> guidance;  // v = v_uncond + g (v_cond - v_uncond)

    void validate() const {
        if (num_steps < 1) throw config_error("sampler.num_steps must be >= 1");
    }
};

// One prepared person-text-target tuple.
struct TrainItem {
    LatentVideo clip;        // target latent, t >= 1 frames
    FaceEmbedding face;
    LatentVideo ref_latent;  // condition image latent, single frame
    std::string caption;
};

struct StepMetrics {
    int64_t step = 0;
    Stage stage = Stage::image;
    double loss = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

inline LatentVideo first_frame(const LatentVideo& clip) {
    LatentVideo out = LatentVideo::zeros(1, clip.h, clip.w, clip.c);
    std::copy(clip.data.begin(), clip.data.begin() + clip.h * clip.w * clip.c,
              out.data.begin());
    return out;
}

// Owns the optimizer over the adapter parameters; the backbone stays frozen
// in both stages. Per-step randomness is derived statelessly from
// (seed, step), so a resumed run replays the exact same draws.
class Trainer {
public:
    // pick(draw_index) -> item index; defaults to a seeded uniform pick.
    using PickFn = std::function<int64_t(uint64_t draw_index)>;

    Trainer(LynxModel& model, TrainConfig cfg, std::vector<TrainItem> items,
            PickFn pick = nullptr, RefActivationCache* disk_cache = nullptr)
        : model_(model), cfg_(std::move(cfg)), items_(std::move(items)),
          pick_(std::move(pick)), disk_cache_(disk_cache),
          frozen_(model.frozen_backbone()) {
        cfg_.validate();
        if (items_.empty()) throw config_error("trainer: no training items");
        for (size_t i = 0; i < items_.size(); ++i) {
            items_[i].clip.check("train item " + std::to_string(i) + " clip");
            if (items_[i].ref_latent.t != 1)
                throw config_error("train item " + std::to_string(i) +
                                   ": reference latent must be a single frame");
        }
        model_.configure_trainable();
        ParamRegistry adapters = model_.adapter_params();
        std::vector<Tensor> trainable;
        for (const auto& [_, t] : adapters.items()) trainable.push_back(t);
        opt_ = std::make_unique<Adam>(std::move(trainable), cfg_.lr);
        if (!pick_) {
            const uint64_t seed = cfg_.seed;
            const int64_t n = int64_t(items_.size());
            pick_ = [seed, n](uint64_t draw) {
                Rng r = Rng::derive(seed, "pick", draw);
                return int64_t(r.below(uint64_t(n)));
            };
        }
    }

    const FrozenCopyHandle& frozen() const { return frozen_; }
    Adam& optimizer() { return *opt_; }
    const TrainConfig& config() const { return cfg_; }

    StepMetrics step(int64_t global_step) {
        const auto t_start = std::chrono::steady_clock::now();
        const StagePos pos = stage_at(cfg_, global_step);
        Rng rng = Rng::derive(cfg_.seed, "step", uint64_t(global_step));

        // draw and prepare the step's samples
        std::vector<TokenSeq> token_seqs;
        std::vector<Tensor> targets;
        std::vector<IdentityTokens> idts;
        std::vector<const RefActivationSet*> refs;
        std::vector<Tensor> texts;
        std::vector<double> ts;
        for (int64_t j = 0; j < cfg_.samples_per_step; ++j) {
            const uint64_t draw = uint64_t(global_step) * uint64_t(cfg_.samples_per_step) +
                                  uint64_t(j);
            const int64_t idx = pick_(draw);
            const TrainItem& item = items_.at(size_t(idx));
            const LatentVideo x0 =
                pos.stage == Stage::image ? first_frame(item.clip) : item.clip;
            FlowSample fs = make_flow_sample(x0, rng);
            const bool drop_id = rng.bernoulli(cfg_.id_dropout);

            token_seqs.push_back(
                patchify(fs.xt, model_.cfg.patch, model_.backbone.proj_in));
            targets.push_back(patch_vectors(fs.v_target, model_.cfg.patch));
            idts.push_back(drop_id ? model_.id_adapter.null_tokens_set()
                                   : model_.id_adapter.tokens_for(item.face));
            refs.push_back(&ref_activations(idx));
            texts.push_back(embed_text(item.caption, model_.cfg.text_dim));
            ts.push_back(fs.t);
        }

        const std::vector<PackedBatch> packs = pack(token_seqs, cfg_.pack_budget);

        // loss over all packs, weighted by their active token counts
        int64_t total_active = 0;
        for (const auto& p : packs) total_active += p.total_len();
        Tensor loss;
        int64_t sample_cursor = 0;
        for (const auto& p : packs) {
            const PackedBatch padded = pad_to_budget(p);
            std::vector<CondSlot> conds;
            std::vector<Tensor> target_parts;
            for (int64_t s = 0; s < p.num_segments(); ++s) {
                const int64_t k = sample_cursor + s;
                conds.push_back({texts[size_t(k)], ts[size_t(k)], &idts[size_t(k)],
                                 refs[size_t(k)]});
                target_parts.push_back(targets[size_t(k)]);
            }
            if (padded.pad_len > 0)
                target_parts.push_back(Tensor::zeros(padded.pad_len, targets[0].cols()));
            const Tensor target = concat_rows(target_parts);
            std::vector<double> row_mask(size_t(padded.padded_len()), 1.0);
            for (int64_t i = padded.total_len(); i < padded.padded_len(); ++i)
                row_mask[size_t(i)] = 0.0;

            const PackedBatch pred = model_.forward(padded, conds);
            Tensor pack_loss = fm_loss(pred.tokens, target, row_mask);
            pack_loss = scale(pack_loss, double(p.total_len()) / double(total_active));
            loss = loss.defined() ? add(loss, pack_loss) : pack_loss;
            sample_cursor += p.num_segments();
        }

        const double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw runtime_error("train step " + std::to_string(global_step) +
                                " (stage " + stage_name(pos.stage) + ", local " +
                                std::to_string(pos.local_step) + "): non-finite loss " +
                                std::to_string(loss_value));

        opt_->zero_grad();
        loss.backward();
        const double gnorm = opt_->grad_norm();
        opt_->step();

        const auto t_end = std::chrono::steady_clock::now();
        StepMetrics m;
        m.step = global_step;
        m.stage = pos.stage;
        m.loss = loss_value;
        m.grad_norm = gnorm;
        m.wall_ms = std::chrono::duration<double, std::milli>(t_end - t_start).count();
        return m;
    }

    // Reference activations are constant while the backbone is frozen, so
    // they are computed once per item (and optionally spilled to disk).
    const RefActivationSet& ref_activations(int64_t item_index) {
        auto it = ref_memo_.find(item_index);
        if (it != ref_memo_.end()) return it->second;
        const TrainItem& item = items_.at(size_t(item_index));
        if (disk_cache_) {
            const std::string key = RefActivationCache::key_for(item.ref_latent, frozen_);
            if (auto cached = disk_cache_->load(key))
                return ref_memo_.emplace(item_index, std::move(*cached)).first->second;
            RefActivationSet fresh = encode_reference(item.ref_latent, frozen_);
            disk_cache_->store(key, fresh);
            return ref_memo_.emplace(item_index, std::move(fresh)).first->second;
        }
        return ref_memo_.emplace(item_index, encode_reference(item.ref_latent, frozen_))
            .first->second;
    }

    const std::vector<TrainItem>& items() const { return items_; }

private:
    LynxModel& model_;
    TrainConfig cfg_;
    std::vector<TrainItem> items_;
    PickFn pick_;
    RefActivationCache* disk_cache_;
    FrozenCopyHandle frozen_;
    std::unique_ptr<Adam> opt_;
    std::unordered_map<int64_t, RefActivationSet> ref_memo_;
};

// Conditioning for one sampled video.
struct SampleConds {
    Tensor text;
    const IdentityTokens* idt = nullptr;
    const RefActivationSet* ref = nullptr;
};

// Velocity field evaluation at state x, time t.
inline LatentVideo predict_velocity(const LynxModel& model, const LatentVideo& x, double t,
                                    const SampleConds& conds) {
    TokenSeq tokens = patchify(x, model.cfg.patch, model.backbone.proj_in);
    CondSlot slot{conds.text, t, conds.idt, conds.ref};
    TokenSeq pred = model.forward_single(tokens, slot);
    return latent_from_patch_vectors(pred.data, tokens.grid, model.cfg.patch,
                                     model.cfg.latent_channels);
}

// Euler integration of a velocity field from t = 1 down to 0:
// x <- x - dt * v(x, t) over num_steps uniform steps. Constant fields
// integrate exactly for any step count.
using VelocityField = std::function<LatentVideo(const LatentVideo& x, double t)>;

inline LatentVideo euler_integrate(const VelocityField& field, LatentVideo x,
                                   int64_t num_steps) {
    if (num_steps < 1) throw config_error("euler_integrate: num_steps must be >= 1");
    const double dt = 1.0 / double(num_steps);
    for (int64_t k = num_steps; k >= 1; --k) {
        const double tk = double(k) / double(num_steps);
        const LatentVideo v = field(x, tk);
        for (size_t i = 0; i < x.data.size(); ++i) x.data[i] -= dt * v.data[i];
        if (!all_finite(x.data))
            throw runtime_error("sample: non-finite state at integration step " +
                                std::to_string(k));
    }
    return x;
}

// Sample a latent video from standard normal noise at t = 1. Guidance, when
// set, mixes a conditional and a null-identity pass.
inline LatentVideo sample_video(const LynxModel& model, const SampleConds& conds, int64_t t,
                                int64_t h, int64_t w, const SamplerConfig& scfg, Rng& rng) {
    scfg.validate();
    NoGradGuard no_grad;
    LatentVideo x = LatentVideo::zeros(t, h, w, model.cfg.latent_channels);
    for (auto& v : x.data) v = rng.normal();

    IdentityTokens null_idt;
    SampleConds uncond = conds;
    if (scfg.guidance) {
        null_idt = model.id_adapter.null_tokens_set();
        uncond.idt = &null_idt;
    }

    VelocityField field = [&](const LatentVideo& state, double tk) {
        LatentVideo v = predict_velocity(model, state, tk, conds);
        if (scfg.guidance) {
            const LatentVideo vu = predict_velocity(model, state, tk, uncond);
            const double g = *scfg.guidance;
            for (size_t i = 0; i < v.data.size(); ++i)
                v.data[i] = vu.data[i] + g * (v.data[i] - vu.data[i]);
        }
        return v;
    };
    return euler_integrate(field, std::move(x), scfg.num_steps);
}

}  // namespace lynx
