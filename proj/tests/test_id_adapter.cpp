#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "lynx/id_adapter.hpp"
#include "lynx/model.hpp"
#include "support/gradcheck.hpp"

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
    cfg.n_register_tokens = 3;
    cfg.resampler_heads = 2;
    return cfg;
}

FaceEmbedding random_face(Rng& rng, int64_t dim) {
    std::vector<double> v(static_cast<size_t>(dim));
    double norm = 0;
    for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return FaceEmbedding::from(std::move(v));
}

Tensor permute_rows(const Tensor& t, const std::vector<int64_t>& perm) {
    std::vector<double> data(t.data().size());
    for (size_t i = 0; i < perm.size(); ++i)
        for (int64_t j = 0; j < t.cols(); ++j)
            data[i * size_t(t.cols()) + size_t(j)] = t.at(perm[i], j);
    return Tensor::from_data(std::move(data), t.rows(), t.cols());
}

LatentVideo random_frame(Rng& rng, int64_t h, int64_t w, int64_t c) {
    LatentVideo x = LatentVideo::zeros(1, h, w, c);
    for (auto& v : x.data) v = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("face embeddings validate norm and finiteness") {
    CHECK_THROWS_AS(FaceEmbedding::from({0.5, 0.5}), Error);
    CHECK_NOTHROW(FaceEmbedding::from({1.0, 0.0}));
    CHECK_THROWS_AS(FaceEmbedding::from({std::nan(""), 0.0}), Error);
}

TEST_CASE("resampler emits a fixed-length sequence for every input") {
    ModelConfig cfg = tiny_config();
    Rng rng(1);
    Resampler rs(cfg, rng);
    for (uint64_t s = 0; s < 16; ++s) {
        Rng fr(s);
        Tensor out = rs.forward(random_face(fr, cfg.face_dim));
        CHECK(out.rows() == cfg.n_id_tokens);
        CHECK(out.cols() == cfg.hidden_dim);
    }
    // desk defaults keep the full-scale sequence length of 16
    CHECK(ModelConfig{}.n_id_tokens == 16);
}

TEST_CASE("resampler is deterministic and validates input dims") {
    ModelConfig cfg = tiny_config();
    Rng rng(2);
    Resampler rs(cfg, rng);
    Rng fr(7);
    FaceEmbedding face = random_face(fr, cfg.face_dim);
    CHECK(rs.forward(face).data() == rs.forward(face).data());

    Rng fr2(8);
    CHECK_THROWS_AS(rs.forward(random_face(fr2, cfg.face_dim + 2)), Error);
}

TEST_CASE("zeroed resampler output projection ignores the face input") {
    ModelConfig cfg = tiny_config();
    Rng rng(3);
    Resampler rs(cfg, rng);
    std::fill(rs.proj_out.weight.data_mut().begin(), rs.proj_out.weight.data_mut().end(), 0.0);
    std::fill(rs.proj_out.bias.data_mut().begin(), rs.proj_out.bias.data_mut().end(), 0.0);

    Rng fa(10), fb(11);
    Tensor a = rs.forward(random_face(fa, cfg.face_dim));
    Tensor b = rs.forward(random_face(fb, cfg.face_dim));
    for (size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] - b.data()[i] == 0.0);
}

TEST_CASE("with_registers concatenates id tokens first") {
    Rng rng(4);
    Tensor id_part = Tensor::randn(rng, 4, 8);
    Tensor regs = Tensor::randn(rng, 3, 8);
    IdentityTokens idt = with_registers(id_part, regs);
    CHECK(idt.len() == 7);
    CHECK(idt.n_id == 4);
    CHECK(idt.n_reg == 3);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 8; ++j) CHECK(idt.tokens.at(i, j) == id_part.at(i, j));
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 8; ++j) CHECK(idt.tokens.at(4 + i, j) == regs.at(i, j));

    // registers are input independent: a second identity shares them
    Tensor id2 = Tensor::randn(rng, 4, 8);
    IdentityTokens idt2 = with_registers(id2, regs);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 8; ++j)
            CHECK(idt2.tokens.at(4 + i, j) == idt.tokens.at(4 + i, j));

    // degenerate: no registers
    IdentityTokens bare = with_registers(id_part, Tensor());
    CHECK(bare.len() == 4);
    CHECK(bare.tokens.data() == id_part.data());

    CHECK_THROWS_AS(with_registers(id_part, Tensor::zeros(2, 6)), Error);
}

TEST_CASE("full-scale concatenation is 16 + 16 = 32") {
    Rng rng(5);
    CHECK(with_registers(Tensor::randn(rng, 16, 8), Tensor::randn(rng, 16, 8)).len() == 32);
}

TEST_CASE("id injection is transparent at zero gate") {
    ModelConfig cfg = tiny_config();
    Rng rng(6);
    IdAdapter ad(cfg, rng);
    Rng fr(9);
    IdentityTokens idt = ad.tokens_for(random_face(fr, cfg.face_dim));
    Tensor visual = Tensor::randn(rng, 10, cfg.hidden_dim);
    Tensor out = ad.inject(0, visual, idt);
    CHECK(out.data() == visual.data());  // exact
}

TEST_CASE("distinct identities give distinct injected outputs once gates open") {
    ModelConfig cfg = tiny_config();
    Rng rng(7);
    IdAdapter ad(cfg, rng);
    for (auto& blk : ad.blocks)
        std::fill(blk.gate.data_mut().begin(), blk.gate.data_mut().end(), 0.5);

    Rng fa(20), fb(21);
    IdentityTokens ia = ad.tokens_for(random_face(fa, cfg.face_dim));
    IdentityTokens ib = ad.tokens_for(random_face(fb, cfg.face_dim));
    Tensor visual = Tensor::randn(rng, 10, cfg.hidden_dim);
    Tensor oa = ad.inject(0, visual, ia);
    Tensor ob = ad.inject(0, visual, ib);
    double diff = 0;
    for (size_t i = 0; i < oa.data().size(); ++i)
        diff += (oa.data()[i] - ob.data()[i]) * (oa.data()[i] - ob.data()[i]);
    CHECK(std::sqrt(diff) > 0.0);
}

TEST_CASE("id cross-attention is invariant to kv permutation") {
    ModelConfig cfg = tiny_config();
    Rng rng(8);
    IdAdapter ad(cfg, rng);
    for (auto& blk : ad.blocks)
        std::fill(blk.gate.data_mut().begin(), blk.gate.data_mut().end(), 0.7);

    Rng fr(30);
    IdentityTokens idt = ad.tokens_for(random_face(fr, cfg.face_dim));
    std::vector<int64_t> perm(static_cast<size_t>(idt.len()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[0], perm[5]);
    std::swap(perm[2], perm[6]);
    IdentityTokens shuffled{permute_rows(idt.tokens, perm), idt.n_id, idt.n_reg};

    Tensor visual = Tensor::randn(rng, 6, cfg.hidden_dim);
    Tensor a = ad.inject(1, visual, idt);
    Tensor b = ad.inject(1, visual, shuffled);
    for (size_t i = 0; i < a.data().size(); ++i)
        CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-6);
}

TEST_CASE("zero-init transparency: adapted model equals bare backbone") {
    ModelConfig cfg = tiny_config();
    LynxModel model(cfg, 99);

    Rng rng(40);
    for (int trial = 0; trial < 4; ++trial) {
        LatentVideo x = random_frame(rng, 4, 4, cfg.latent_channels);
        TokenSeq tokens = patchify(x, cfg.patch, model.backbone.proj_in);

        Rng fr(50 + uint64_t(trial));
        IdentityTokens idt = model.id_adapter.tokens_for(random_face(fr, cfg.face_dim));
        RefActivationSet ref = encode_reference(x, model.frozen_backbone());

        CondSlot with{embed_text("subject", cfg.text_dim), 0.4, &idt, &ref};
        CondSlot without{embed_text("subject", cfg.text_dim), 0.4, nullptr, nullptr};
        TokenSeq adapted = model.forward_single(tokens, with, true);
        TokenSeq bare = model.forward_single(tokens, without, false);
        CHECK(adapted.data.data() == bare.data.data());  // bitwise
    }
}

TEST_CASE("resampler gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    Rng rng(9);
    Resampler rs(cfg, rng);
    Rng fr(60);
    FaceEmbedding face = random_face(fr, cfg.face_dim);
    Tensor target = Tensor::randn(rng, cfg.n_id_tokens, cfg.hidden_dim);
    std::vector<double> mask(static_cast<size_t>(cfg.n_id_tokens), 1.0);

    ParamRegistry reg;
    rs.collect_params("resampler", reg);
    auto loss = [&]() { return mse_masked(rs.forward(face), target, mask); };
    auto rep = lynx::testing::grad_check(reg, loss, 1e-5);
    INFO("worst: " << rep.worst_param);
    CHECK(rep.max_rel_err <= 1e-4);
}
