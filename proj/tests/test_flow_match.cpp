#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lynx/flow_match.hpp"
#include "lynx/model.hpp"

using namespace lynx;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.hidden_dim = 16;
    cfg.num_blocks = 2;
    cfg.num_heads = 2;
    cfg.text_dim = 8;
    cfg.latent_channels = 2;
    cfg.face_dim = 8;
    cfg.n_id_tokens = 4;
    cfg.n_register_tokens = 2;
    cfg.resampler_heads = 2;
    return cfg;
}

LatentVideo random_latent(Rng& rng, int64_t t, int64_t h, int64_t w, int64_t c) {
    LatentVideo x = LatentVideo::zeros(t, h, w, c);
    for (auto& v : x.data) v = rng.normal();
    return x;
}

FaceEmbedding unit_face(int64_t dim, int64_t axis) {
    std::vector<double> v(static_cast<size_t>(dim), 0.0);
    v[static_cast<size_t>(axis)] = 1.0;
    return FaceEmbedding::from(std::move(v));
}

std::vector<TrainItem> tiny_items(const ModelConfig& cfg, uint64_t seed, int n = 2) {
    Rng rng(seed);
    std::vector<TrainItem> items;
    for (int i = 0; i < n; ++i)
        items.push_back({random_latent(rng, 2, 4, 4, cfg.latent_channels),
                         unit_face(cfg.face_dim, i),
                         random_latent(rng, 1, 4, 4, cfg.latent_channels),
                         "caption " + std::to_string(i)});
    return items;
}

}  // namespace

TEST_CASE("flow sample interpolant endpoints hold exactly") {
    Rng rng(1);
    LatentVideo x0 = random_latent(rng, 2, 2, 2, 3);

    Rng r0(2);
    FlowSample s0 = make_flow_sample(x0, r0, TDist{TDist::Kind::fixed, 0.0});
    CHECK(s0.xt.data == x0.data);

    Rng r1(3);
    FlowSample s1 = make_flow_sample(x0, r1, TDist{TDist::Kind::fixed, 1.0});
    CHECK(s1.xt.data == s1.noise.data);

    // t = 0.5 with x0 = 0: interpolant is half the noise
    LatentVideo zeros = LatentVideo::zeros(2, 2, 2, 3);
    Rng rh(4);
    FlowSample sh = make_flow_sample(zeros, rh, TDist{TDist::Kind::fixed, 0.5});
    for (size_t i = 0; i < sh.xt.data.size(); ++i)
        CHECK(sh.xt.data[i] == 0.5 * sh.noise.data[i]);

    // invariants: xt and v_target follow from (x0, noise, t) exactly
    Rng ru(5);
    FlowSample su = make_flow_sample(x0, ru);
    for (size_t i = 0; i < su.xt.data.size(); ++i) {
        CHECK(su.xt.data[i] == (1.0 - su.t) * x0.data[i] + su.t * su.noise.data[i]);
        CHECK(su.v_target.data[i] == su.noise.data[i] - x0.data[i]);
    }
}

TEST_CASE("flow-matching loss") {
    Rng rng(6);
    Tensor pred = Tensor::randn(rng, 4, 3);
    std::vector<double> ones_mask(4, 1.0);
    CHECK(fm_loss(pred, pred, ones_mask).item() == 0.0);

    Tensor shifted = add_const(pred, 1.0);
    CHECK(fm_loss(shifted, pred, ones_mask).item() == Catch::Approx(1.0));

    // hand-computed masked mean: rows i have constant error i+1
    std::vector<double> pd(4 * 2, 0.0), td(4 * 2, 0.0);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 2; ++j) pd[size_t(i * 2 + j)] = double(i + 1);
    Tensor p2 = Tensor::from_data(pd, 4, 2);
    Tensor t2 = Tensor::from_data(td, 4, 2);
    CHECK(fm_loss(p2, t2, {1, 1, 1, 1}).item() ==
          Catch::Approx((1.0 + 4.0 + 9.0 + 16.0) / 4.0));
    CHECK(fm_loss(p2, t2, {1, 0, 1, 0}).item() == Catch::Approx((1.0 + 9.0) / 2.0));

    CHECK_THROWS_AS(fm_loss(p2, t2, std::vector<double>{0, 0, 0, 0}), Error);
}

TEST_CASE("padding contributes exactly zero to the loss") {
    Rng rng(7);
    Tensor real = Tensor::randn(rng, 6, 4);
    Tensor target = Tensor::randn(rng, 6, 4);
    Tensor garbage = Tensor::randn(rng, 3, 4);

    Tensor padded_pred = concat_rows({real, garbage});
    Tensor padded_target = concat_rows({target, Tensor::zeros(3, 4)});
    std::vector<double> mask{1, 1, 1, 1, 1, 1, 0, 0, 0};
    CHECK(fm_loss(padded_pred, padded_target, mask).item() ==
          fm_loss(real, target, std::vector<double>(6, 1.0)).item());
}

TEST_CASE("stage schedule and resume arithmetic") {
    TrainConfig full;
    full.image_iters = FullScaleReference::image_stage_iters;
    full.video_iters = FullScaleReference::video_stage_iters;
    auto sched = stage_schedule(full);
    REQUIRE(sched.size() == 2);
    CHECK(sched[0].first == Stage::image);
    CHECK(sched[0].second == 40000);
    CHECK(sched[1].first == Stage::video);
    CHECK(sched[1].second == 60000);

    TrainConfig desk;
    desk.image_iters = 500;
    desk.video_iters = 500;
    auto ds = stage_schedule(desk);
    CHECK(ds[0].first == Stage::image);
    CHECK(ds[1].first == Stage::video);

    StagePos pos = stage_at(desk, 600);
    CHECK(pos.stage == Stage::video);
    CHECK(pos.local_step == 100);
    CHECK(stage_at(desk, 0).stage == Stage::image);
    CHECK(stage_at(desk, 499).local_step == 499);
    CHECK_THROWS_AS(stage_at(desk, 1000), Error);  // resuming past completion
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 21);
    TrainConfig tc;
    tc.image_iters = 2;
    tc.video_iters = 2;
    tc.lr = 0.0;
    tc.pack_budget = 64;
    tc.samples_per_step = 2;
    Trainer trainer(model, tc, tiny_items(cfg, 22));

    ParamRegistry adapters = model.adapter_params();
    std::vector<std::vector<double>> before;
    for (const auto& [_, t] : adapters.items()) before.push_back(t.data());
    trainer.step(0);
    trainer.step(1);
    size_t i = 0;
    for (const auto& [_, t] : adapters.items()) CHECK(t.data() == before[i++]);
}

TEST_CASE("only the configured trainable set moves under training") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 23);
    TrainConfig tc;
    tc.image_iters = 4;
    tc.video_iters = 4;
    tc.lr = 1e-3;
    tc.pack_budget = 64;
    tc.samples_per_step = 2;
    Trainer trainer(model, tc, tiny_items(cfg, 24));

    ParamRegistry frozen = model.backbone_params();
    std::vector<std::vector<double>> backbone_before;
    for (const auto& [_, t] : frozen.items()) backbone_before.push_back(t.data());

    ParamRegistry adapters = model.adapter_params();
    std::vector<std::vector<double>> adapters_before;
    for (const auto& [_, t] : adapters.items()) adapters_before.push_back(t.data());

    for (int64_t s = 0; s < 6; ++s) trainer.step(s);

    size_t i = 0;
    for (const auto& [_, t] : frozen.items()) CHECK(t.data() == backbone_before[i++]);

    bool any_moved = false;
    i = 0;
    for (const auto& [_, t] : adapters.items())
        if (t.data() != adapters_before[i++]) any_moved = true;
    CHECK(any_moved);
}

TEST_CASE("identical config, seed, and data give identical loss curves") {
    ModelConfig cfg = tiny_config();
    auto run = [&]() {
        LynxModel model(cfg, 31);
        TrainConfig tc;
        tc.image_iters = 3;
        tc.video_iters = 3;
        tc.lr = 5e-4;
        tc.pack_budget = 64;
        tc.samples_per_step = 2;
        tc.seed = 17;
        Trainer trainer(model, tc, tiny_items(cfg, 32));
        std::vector<double> losses;
        for (int64_t s = 0; s < 6; ++s) losses.push_back(trainer.step(s).loss);
        return losses;
    };
    CHECK(run() == run());  // to the last ulp
}

TEST_CASE("non-finite items are rejected with diagnostics") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 41);
    auto items = tiny_items(cfg, 42);
    items[0].clip.data[0] = std::numeric_limits<double>::infinity();
    TrainConfig tc;
    tc.image_iters = 1;
    tc.video_iters = 1;
    CHECK_THROWS_AS(Trainer(model, tc, items), Error);
}

TEST_CASE("euler sampler integrates constant fields exactly") {
    Rng rng(51);
    LatentVideo x0 = random_latent(rng, 2, 2, 2, 3);
    LatentVideo noise = random_latent(rng, 2, 2, 2, 3);

    for (int64_t steps : {1, 4, 16}) {
        LatentVideo x = noise;
        const double dt = 1.0 / double(steps);
        for (int64_t k = steps; k >= 1; --k)
            for (size_t i = 0; i < x.data.size(); ++i)
                x.data[i] -= dt * (noise.data[i] - x0.data[i]);
        double max_err = 0;
        for (size_t i = 0; i < x.data.size(); ++i)
            max_err = std::max(max_err, std::abs(x.data[i] - x0.data[i]));
        CHECK(max_err <= 1e-10);
    }
}

TEST_CASE("a model predicting zero velocity returns the initial noise") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 61);
    // zero the output projection: velocity is identically zero
    std::fill(model.backbone.proj_out.weight.data_mut().begin(),
              model.backbone.proj_out.weight.data_mut().end(), 0.0);
    std::fill(model.backbone.proj_out.bias.data_mut().begin(),
              model.backbone.proj_out.bias.data_mut().end(), 0.0);

    SampleConds conds{embed_text("still", cfg.text_dim), nullptr, nullptr};
    SamplerConfig scfg;
    scfg.num_steps = 4;
    Rng sample_rng(77);
    LatentVideo out = sample_video(model, conds, 1, 4, 4, scfg, sample_rng);

    Rng expect_rng(77);
    LatentVideo expect = LatentVideo::zeros(1, 4, 4, cfg.latent_channels);
    for (auto& v : expect.data) v = expect_rng.normal();
    CHECK(out.data == expect.data);
}

TEST_CASE("single-step sampling is one Euler update") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 62);
    SampleConds conds{embed_text("one step", cfg.text_dim), nullptr, nullptr};
    SamplerConfig scfg;
    scfg.num_steps = 1;

    Rng sample_rng(88);
    LatentVideo out = sample_video(model, conds, 1, 4, 4, scfg, sample_rng);

    Rng expect_rng(88);
    LatentVideo noise = LatentVideo::zeros(1, 4, 4, cfg.latent_channels);
    for (auto& v : noise.data) v = expect_rng.normal();
    NoGradGuard ng;
    LatentVideo v = predict_velocity(model, noise, 1.0, conds);
    for (size_t i = 0; i < noise.data.size(); ++i)
        CHECK(out.data[i] == noise.data[i] - v.data[i]);
}

TEST_CASE("sampler validates its config") {
    SamplerConfig bad;
    bad.num_steps = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("guidance scale one reduces to the conditional pass") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 63);
    // open the id gates so conditional and unconditional passes differ
    for (auto& blk : model.id_adapter.blocks)
        std::fill(blk.gate.data_mut().begin(), blk.gate.data_mut().end(), 0.4);

    FaceEmbedding face = unit_face(cfg.face_dim, 1);
    IdentityTokens idt = model.id_adapter.tokens_for(face);
    SampleConds conds{embed_text("guided", cfg.text_dim), &idt, nullptr};

    SamplerConfig plain;
    plain.num_steps = 2;
    SamplerConfig guided = plain;
    guided.guidance = 1.0;  // v_u + 1 * (v_c - v_u) == v_c

    Rng r1(99), r2(99);
    LatentVideo a = sample_video(model, conds, 1, 4, 4, plain, r1);
    LatentVideo b = sample_video(model, conds, 1, 4, 4, guided, r2);
    for (size_t i = 0; i < a.data.size(); ++i)
        CHECK(a.data[i] == Catch::Approx(b.data[i]).margin(1e-12));
}
