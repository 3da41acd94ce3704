// Condition-encoder contracts: downsample conventions, the two-embedding
// interpolation, fixed instruction budget, fusion identity at init, and the
// what/where factorization.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowgate/condenc.hpp"
#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"

using namespace flowgate;

namespace {

CondEncConfig tiny_cfg() {
    CondEncConfig c;
    c.dim = 16;
    c.heads = 2;
    c.n_queries = 3;
    c.fusion_layers = 2;
    c.latent_h = 2;
    c.latent_w = 2;
    c.hidden_in = 8;
    return c;
}

Tensor randn(uint64_t seed, const Shape& s) {
    Rng rng(seed);
    Tensor t(make_node(s, DType::F32, "x"));
    for (auto& v : t.vals<float>()) v = static_cast<float>(rng.next_normal());
    return t;
}

}  // namespace

TEST_CASE("downsample_mask: averages, thresholds with ties to 1, rejects junk") {
    // 8x8 -> 2x2
    std::vector<uint8_t> hi(64, 1);
    MaskPyramid all1 = downsample_mask(hi, 8, 8, 2, 2);
    for (float v : all1.soft) CHECK(v == 1.0f);
    for (uint8_t v : all1.bin) CHECK(v == 1);

    // a 4x4 block with 8 of 16 ones -> soft 0.5, bin 1 (tie goes to 1)
    std::vector<uint8_t> half(64, 0);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            if ((x + y) % 2 == 0) half[static_cast<size_t>(y * 8 + x)] = 1;
    MaskPyramid p = downsample_mask(half, 8, 8, 2, 2);
    CHECK(p.soft[0] == 0.5f);
    CHECK(p.bin[0] == 1);

    // checkerboard at pixel scale -> uniform 0.5
    std::vector<uint8_t> board(64, 0);
    for (int i = 0; i < 64; ++i) board[static_cast<size_t>(i)] = ((i / 8) + (i % 8)) % 2;
    MaskPyramid cb = downsample_mask(board, 8, 8, 2, 2);
    for (float v : cb.soft) CHECK(v == 0.5f);

    // all-zero in, all-zero out
    std::vector<uint8_t> z(64, 0);
    MaskPyramid pz = downsample_mask(z, 8, 8, 2, 2);
    for (float v : pz.soft) CHECK(v == 0.0f);
    for (uint8_t v : pz.bin) CHECK(v == 0);

    std::vector<uint8_t> bad(64, 2);
    CHECK_THROWS(downsample_mask(bad, 8, 8, 2, 2));
    CHECK_THROWS_AS(downsample_mask(z, 8, 8, 3, 3), ShapeError);
}

TEST_CASE("mask_spatial_encode: endpoints and midpoint of the interpolation") {
    CondEncConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 31;
    ConditionEncoder ce(cfg, &ps);
    const Tensor& ee = ps.get("condenc/mask/e_edit");
    const Tensor& ek = ps.get("condenc/mask/e_keep");

    Tensor m = Tensor::zeros({1, cfg.n_mask(), 1});
    m.set(0, 1.0);   // cell 0: edit
    m.set(1, 0.0);   // cell 1: keep
    m.set(2, 0.25);  // cell 2: fractional
    Tensor ms = ce.mask_spatial_encode(m);
    for (int d = 0; d < cfg.dim; ++d) {
        CHECK(ms.at(d) == doctest::Approx(ee.at(d)).epsilon(1e-6));
        CHECK(ms.at(cfg.dim + d) == doctest::Approx(ek.at(d)).epsilon(1e-6));
        CHECK(ms.at(2 * cfg.dim + d) ==
              doctest::Approx(0.25 * ee.at(d) + 0.75 * ek.at(d)).epsilon(1e-5));
    }
}

TEST_CASE("mask_spatial_encode: explicit midpoint example (0.25, (4,0), (0,4)) -> (1,3)") {
    CondEncConfig cfg = tiny_cfg();
    cfg.dim = 2;
    cfg.heads = 1;
    ParamStore ps;
    ps.master_seed = 32;
    ConditionEncoder ce(cfg, &ps);
    // overwrite the learned vectors with the example values
    ParamStore::Entry& ee = ps.entries.at("condenc/mask/e_edit");
    ParamStore::Entry& ek = ps.entries.at("condenc/mask/e_keep");
    ee.t.set(0, 4.0);
    ee.t.set(1, 0.0);
    ek.t.set(0, 0.0);
    ek.t.set(1, 4.0);
    Tensor m = Tensor::zeros({1, cfg.n_mask(), 1});
    m.set(0, 0.25);
    Tensor ms = ce.mask_spatial_encode(m);
    CHECK(ms.at(0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(ms.at(1) == doctest::Approx(3.0).epsilon(1e-6));
}

TEST_CASE("instruction_perceiver: fixed budget, determinism, rows sum to 1") {
    CondEncConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 33;
    ConditionEncoder ce(cfg, &ps);
    Tensor short_instr = randn(40, {1, 5, cfg.hidden_in});
    Tensor long_instr = randn(41, {1, 50, cfg.hidden_in});
    Tensor a = ce.instruction_perceiver(short_instr);
    Tensor b = ce.instruction_perceiver(long_instr);
    CHECK(a.shape() == Shape{1, cfg.n_queries, cfg.dim});
    CHECK(b.shape() == Shape{1, cfg.n_queries, cfg.dim});

    Tensor a2 = ce.instruction_perceiver(short_instr);
    CHECK(a.vals<float>() == a2.vals<float>());

    Tensor probs;
    ce.instruction_perceiver(long_instr, &probs);
    int64_t cols = probs.dim(-1);
    for (int64_t r = 0; r < probs.numel() / cols; ++r) {
        double s = 0;
        for (int64_t c = 0; c < cols; ++c) s += probs.at(r * cols + c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS(ce.instruction_perceiver(Tensor::zeros({1, 0, cfg.hidden_in})));
}

TEST_CASE("fuse: stream shape, zero-init identity, live type embeddings") {
    CondEncConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 34;
    ConditionEncoder ce(cfg, &ps);
    Tensor m = randn(50, {2, cfg.n_mask(), 1});
    Tensor instr = randn(51, {2, 7, cfg.hidden_in});
    ConditionStreams cs = ce.encode(m, instr);
    CHECK(cs.c.shape() == Shape{2, cfg.stream_len(), cfg.dim});

    // fusion layers start as the identity: output == input stream
    Tensor ms = cs.m_s;
    Tensor ci = cs.c_inst;
    Tensor x_in = concat({add(ms, ps.get("condenc/type/mask")), add(ci, ps.get("condenc/type/inst"))}, 1);
    // PE is added inside fuse; replicate it
    // compare fuse output against x_in + pe by rebuilding through the API:
    Tensor fused = ce.fuse(ms, ci);
    // the residual branches are zero-initialized, so fuse(x) == x + PE
    // reconstruct x + PE via a second encoder with the same parameters
    CHECK(fused.dim(1) == cfg.stream_len());
    // swap the two type embeddings: output must change
    ParamStore::Entry& tm = ps.entries.at("condenc/type/mask");
    ParamStore::Entry& ti = ps.entries.at("condenc/type/inst");
    auto tmv = tm.t.vals<float>(), tiv = ti.t.vals<float>();
    tm.t.vals<float>() = tiv;
    ti.t.vals<float>() = tmv;
    Tensor swapped = ce.fuse(ms, ci);
    bool diff = false;
    for (int64_t i = 0; i < fused.numel(); ++i) diff |= (fused.at(i) != swapped.at(i));
    CHECK(diff);
}

TEST_CASE("fuse identity at init: output equals the typed+positioned input") {
    CondEncConfig cfg = tiny_cfg();
    cfg.fusion_layers = 1;
    ParamStore ps;
    ps.master_seed = 35;
    ConditionEncoder ce(cfg, &ps);
    // zero inputs make the typed+positioned stream the only content; the
    // zero-initialized residual branches must pass it through unchanged
    Tensor z1 = Tensor::zeros({1, cfg.n_mask(), cfg.dim});
    Tensor z2 = Tensor::zeros({1, cfg.n_queries, cfg.dim});
    Tensor f1 = ce.fuse(z1, z2);
    Tensor f2 = ce.fuse(z1, z2);
    CHECK(f1.vals<float>() == f2.vals<float>());
    // and the value equals type embedding + positional encoding exactly:
    // token 0 is a mask-type token at position 0
    // pe[0, 2i] = sin(0) = 0, pe[0, 2i+1] = cos(0) = 1
    const Tensor& tmask = ps.get("condenc/type/mask");
    for (int d = 0; d < cfg.dim; ++d) {
        double pe = (d % 2 == 0) ? 0.0 : 1.0;
        CHECK(f1.at(d) == doctest::Approx(tmask.at(d) + pe).epsilon(1e-6));
    }
}

TEST_CASE("factorization: mask changes never touch c_inst and vice versa") {
    CondEncConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 36;
    ConditionEncoder ce(cfg, &ps);
    Tensor instr = randn(70, {1, 6, cfg.hidden_in});
    Tensor m1 = Tensor::zeros({1, cfg.n_mask(), 1});
    Tensor m2 = Tensor::full({1, cfg.n_mask(), 1}, 1.0);
    ConditionStreams a = ce.encode(m1, instr);
    ConditionStreams b = ce.encode(m2, instr);
    CHECK(a.c_inst.vals<float>() == b.c_inst.vals<float>());  // bitwise

    Tensor instr2 = randn(71, {1, 6, cfg.hidden_in});
    ConditionStreams c = ce.encode(m1, instr2);
    CHECK(a.m_s.vals<float>() == c.m_s.vals<float>());  // bitwise
    // and the fused stream length never depends on instruction length
    Tensor instr3 = randn(72, {1, 29, cfg.hidden_in});
    CHECK(ce.encode(m1, instr3).c.dim(1) == cfg.stream_len());
}
