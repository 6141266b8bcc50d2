#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "lynx/flow_match.hpp"
#include "lynx/model.hpp"
#include "lynx/ref_adapter.hpp"
#include "support/gradcheck.hpp"

using namespace lynx;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.hidden_dim = 16;
    cfg.num_blocks = 3;
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

std::vector<TrainItem> tiny_items(const ModelConfig& cfg, Rng& rng) {
    std::vector<TrainItem> items;
    for (int i = 0; i < 2; ++i) {
        TrainItem item{random_latent(rng, 2, 4, 4, cfg.latent_channels),
                       unit_face(cfg.face_dim, i),
                       random_latent(rng, 1, 4, 4, cfg.latent_channels),
                       "clip " + std::to_string(i)};
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace

TEST_CASE("encode_reference collects one activation set per block") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 5);
    Rng rng(1);
    LatentVideo ref = random_latent(rng, 1, 4, 4, cfg.latent_channels);

    RefActivationSet set = encode_reference(ref, model.frozen_backbone());
    CHECK(set.num_blocks() == cfg.num_blocks);
    CHECK(set.ref_len() == 4);
    CHECK(set.ref_grid == Grid{1, 2, 2});
    for (const auto& t : set.per_block) CHECK_FALSE(t.requires_grad());

    // determinism under frozen parameters
    RefActivationSet again = encode_reference(ref, model.frozen_backbone());
    for (size_t b = 0; b < set.per_block.size(); ++b)
        CHECK(set.per_block[b].data() == again.per_block[b].data());
}

TEST_CASE("encode_reference rejects multi-frame references") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 6);
    Rng rng(2);
    LatentVideo clip = random_latent(rng, 2, 4, 4, cfg.latent_channels);
    CHECK_THROWS_AS(encode_reference(clip, model.frozen_backbone()), Error);
}

TEST_CASE("ref injection is transparent at zero gate") {
    ModelConfig cfg = tiny_config();
    Rng rng(3);
    RefAdapter ad(cfg, rng);
    Tensor visual = Tensor::randn(rng, 8, cfg.hidden_dim);
    Tensor ref_tokens = Tensor::randn(rng, 4, cfg.hidden_dim);
    CHECK(ad.inject(0, visual, ref_tokens).data() == visual.data());
}

TEST_CASE("ref cross-attention is invariant to kv permutation") {
    ModelConfig cfg = tiny_config();
    Rng rng(4);
    RefAdapter ad(cfg, rng);
    for (auto& blk : ad.blocks)
        std::fill(blk.gate.data_mut().begin(), blk.gate.data_mut().end(), 0.6);

    Tensor visual = Tensor::randn(rng, 8, cfg.hidden_dim);
    Tensor ref_tokens = Tensor::randn(rng, 5, cfg.hidden_dim);
    std::vector<double> shuffled(ref_tokens.data().size());
    const std::vector<int64_t> perm{4, 2, 0, 3, 1};
    for (size_t i = 0; i < perm.size(); ++i)
        for (int64_t j = 0; j < ref_tokens.cols(); ++j)
            shuffled[i * size_t(ref_tokens.cols()) + size_t(j)] = ref_tokens.at(perm[i], j);
    Tensor ref_perm = Tensor::from_data(std::move(shuffled), 5, cfg.hidden_dim);

    Tensor a = ad.inject(2, visual, ref_tokens);
    Tensor b = ad.inject(2, visual, ref_perm);
    for (size_t i = 0; i < a.data().size(); ++i)
        CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-6);
}

TEST_CASE("block weights are per layer: swapping them changes the output") {
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    RefAdapter ad(cfg, rng);
    for (auto& blk : ad.blocks)
        std::fill(blk.gate.data_mut().begin(), blk.gate.data_mut().end(), 0.4);

    Tensor visual = Tensor::randn(rng, 8, cfg.hidden_dim);
    Tensor ref_tokens = Tensor::randn(rng, 4, cfg.hidden_dim);
    Tensor before = ad.inject(0, visual, ref_tokens);

    RefAdapter swapped = ad;
    std::swap(swapped.blocks[0], swapped.blocks[1]);
    Tensor after = swapped.inject(0, visual, ref_tokens);

    double diff = 0;
    for (size_t i = 0; i < before.data().size(); ++i)
        diff += (before.data()[i] - after.data()[i]) * (before.data()[i] - after.data()[i]);
    CHECK(std::sqrt(diff) > 0.0);
}

TEST_CASE("layer-count contract is enforced at the model boundary") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 7);
    Rng rng(6);
    LatentVideo x = random_latent(rng, 1, 4, 4, cfg.latent_channels);
    TokenSeq tokens = patchify(x, cfg.patch, model.backbone.proj_in);

    RefActivationSet ref = encode_reference(x, model.frozen_backbone());
    ref.per_block.pop_back();  // now mismatched
    CondSlot bad{embed_text("x", cfg.text_dim), 0.5, nullptr, &ref};
    CHECK_THROWS_AS(model.forward_single(tokens, bad), Error);
}

TEST_CASE("frozen copy stays immutable through training steps") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 8);
    Rng rng(7);

    TrainConfig tc;
    tc.image_iters = 4;
    tc.video_iters = 4;
    tc.lr = 1e-3;
    tc.pack_budget = 64;
    tc.samples_per_step = 2;
    tc.seed = 3;
    Trainer trainer(model, tc, tiny_items(cfg, rng));

    const uint64_t before = trainer.frozen().content_hash();
    for (int64_t s = 0; s < 8; ++s) trainer.step(s);
    CHECK(trainer.frozen().current_hash() == before);

    // detachment: frozen parameters accumulated no gradient anywhere
    ParamRegistry frozen = model.backbone_params();
    for (const auto& [name, t] : frozen.items()) {
        CHECK_FALSE(t.requires_grad());
        for (double g : t.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("deep copy detaches storage from the source backbone") {
    ModelConfig cfg = tiny_config();
    Rng rng(9);
    Backbone bb(cfg, rng);
    FrozenCopyHandle frozen = FrozenCopyHandle::deep_copy(bb);
    const uint64_t h0 = frozen.content_hash();
    // mutate the source; the copy must not move
    bb.proj_in.weight.data_mut()[0] += 1.0;
    CHECK(frozen.current_hash() == h0);
    CHECK(bb.params().content_hash() != h0);
}

TEST_CASE("activation cache round-trips and hits by content key") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 10);
    Rng rng(11);
    LatentVideo ref = random_latent(rng, 1, 4, 4, cfg.latent_channels);
    FrozenCopyHandle frozen = model.frozen_backbone();

    const std::string dir = (std::filesystem::temp_directory_path() /
                             "lynx_ref_cache_test").string();
    std::filesystem::remove_all(dir);
    RefActivationCache cache(dir);
    const std::string key = RefActivationCache::key_for(ref, frozen);
    CHECK_FALSE(cache.load(key).has_value());

    RefActivationSet fresh = encode_reference(ref, frozen);
    cache.store(key, fresh);
    auto loaded = cache.load(key);
    REQUIRE(loaded.has_value());
    CHECK(loaded->ref_grid == fresh.ref_grid);
    REQUIRE(loaded->num_blocks() == fresh.num_blocks());
    for (int64_t b = 0; b < fresh.num_blocks(); ++b)
        CHECK(loaded->per_block[size_t(b)].data() == fresh.per_block[size_t(b)].data());
    std::filesystem::remove_all(dir);
}

TEST_CASE("id and ref cross-attention gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    cfg.num_blocks = 1;
    Rng rng(12);

    SECTION("ref injection block") {
        RefAdapter ad(cfg, rng);
        for (auto& blk : ad.blocks)
            for (auto& g : blk.gate.data_mut()) g = rng.normal(0.0, 0.3);
        Tensor visual = Tensor::randn(rng, 6, cfg.hidden_dim);
        Tensor ref_tokens = Tensor::randn(rng, 4, cfg.hidden_dim);
        Tensor target = Tensor::randn(rng, 6, cfg.hidden_dim);
        std::vector<double> mask(6, 1.0);

        ParamRegistry reg = ad.params();
        auto loss = [&]() { return mse_masked(ad.inject(0, visual, ref_tokens), target, mask); };
        auto rep = lynx::testing::grad_check(reg, loss, 1e-5);
        INFO("worst: " << rep.worst_param);
        CHECK(rep.max_rel_err <= 1e-4);
    }

    SECTION("id injection block") {
        IdAdapter ad(cfg, rng);
        for (auto& blk : ad.blocks)
            for (auto& g : blk.gate.data_mut()) g = rng.normal(0.0, 0.3);
        Tensor visual = Tensor::randn(rng, 6, cfg.hidden_dim);
        Tensor idt_tokens = Tensor::randn(rng, 5, cfg.hidden_dim);
        IdentityTokens idt{idt_tokens, 3, 2};
        Tensor target = Tensor::randn(rng, 6, cfg.hidden_dim);
        std::vector<double> mask(6, 1.0);

        // check only the injection weights; the resampler has its own check
        ParamRegistry reg;
        for (size_t b = 0; b < ad.blocks.size(); ++b) {
            ad.blocks[b].attn.collect_params("inject." + std::to_string(b) + ".attn", reg);
            reg.add("inject." + std::to_string(b) + ".gate", ad.blocks[b].gate);
        }
        auto loss = [&]() { return mse_masked(ad.inject(0, visual, idt), target, mask); };
        auto rep = lynx::testing::grad_check(reg, loss, 1e-5);
        INFO("worst: " << rep.worst_param);
        CHECK(rep.max_rel_err <= 1e-4);
    }
}
