// Mask-predictor contracts: FiLM identity at init, output range/shape,
// pooled-instruction gradient stop, threshold+dilate post-processing against
// a brute-force morphology oracle.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "flowgate/backbone.hpp"
#include "flowgate/condenc.hpp"
#include "flowgate/losses.hpp"
#include "flowgate/maskpred.hpp"
#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"

using namespace flowgate;

namespace {

MaskPredConfig tiny_cfg() {
    MaskPredConfig c;
    c.dim = 16;
    c.heads = 2;
    c.query_h = 2;
    c.query_w = 2;
    c.latent_h = 4;
    c.latent_w = 4;
    return c;
}

BackboneConfig tiny_bb() {
    BackboneConfig c;
    c.n_blocks = 1;
    c.dim = 16;
    c.heads = 2;
    c.latent_h = 4;
    c.latent_w = 4;
    c.channels = 2;
    c.text_len = 3;
    c.hidden_in = 8;
    return c;
}

Tensor randn(uint64_t seed, const Shape& s) {
    Rng rng(seed);
    Tensor t(make_node(s, DType::F32, "x"));
    for (auto& v : t.vals<float>()) v = static_cast<float>(rng.next_normal());
    return t;
}

// brute-force dilation oracle: per-pixel structuring-element sweep
std::vector<uint8_t> dilate_brute(const std::vector<uint8_t>& m, int h, int w, int r) {
    std::vector<uint8_t> out(m.size(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool hit = false;
            for (int dy = -r; dy <= r && !hit; ++dy)
                for (int dx = -r; dx <= r && !hit; ++dx) {
                    if (dx * dx + dy * dy > r * r) continue;
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w &&
                        m[static_cast<size_t>(yy * w + xx)])
                        hit = true;
                }
            out[static_cast<size_t>(y * w + x)] = hit ? 1 : 0;
        }
    return out;
}

}  // namespace

TEST_CASE("FiLM: zero-initialized heads leave the queries unchanged") {
    MaskPredConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 81;
    MaskPredictor mp(cfg, &ps);
    Tensor pooled = randn(82, {2, cfg.dim});
    Tensor q = mp.film_queries(pooled);
    const Tensor& q0 = ps.get("maskpred/queries");
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < q0.numel(); ++i)
            CHECK(q.at(b * q0.numel() + i) == q0.at(i));
}

TEST_CASE("FiLM: beta-only perturbation shifts all queries by the same vector") {
    MaskPredConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 83;
    MaskPredictor mp(cfg, &ps);
    auto& bb = ps.entries.at("maskpred/film/beta_b");
    for (int i = 0; i < cfg.dim; ++i) bb.t.set(i, 0.01 * (i + 1));
    Tensor pooled = randn(84, {1, cfg.dim});
    Tensor q = mp.film_queries(pooled);
    const Tensor& q0 = ps.get("maskpred/queries");
    for (int64_t n = 0; n < cfg.n_queries(); ++n)
        for (int64_t d = 0; d < cfg.dim; ++d)
            CHECK(q.at(n * cfg.dim + d) - q0.at(n * cfg.dim + d) ==
                  doctest::Approx(0.01 * (d + 1)).epsilon(1e-5));
}

TEST_CASE("predict: shape, open range, determinism, upsample factor") {
    MaskPredConfig cfg = tiny_cfg();
    BackboneConfig bc = tiny_bb();
    ParamStore ps;
    ps.master_seed = 85;
    Backbone bb(bc, &ps);
    MaskPredictor mp(cfg, &ps);
    Tensor src = randn(86, {2, bc.channels, 4, 4});
    Tensor zt = randn(87, {2, bc.channels, 4, 4});
    Tensor instr = randn(88, {2, bc.text_len, bc.hidden_in});
    TokenSequence seq = bb.assemble(src, zt, instr);
    Tensor q = mp.film_queries(randn(89, {2, cfg.dim}));
    Tensor probs = mp.predict(q, seq);
    CHECK(probs.shape() == Shape{2, 4, 4});
    for (int64_t i = 0; i < probs.numel(); ++i) {
        CHECK(probs.at(i) > 0.0);
        CHECK(probs.at(i) < 1.0);
    }
    Tensor probs2 = mp.predict(q, seq);
    CHECK(probs.vals<float>() == probs2.vals<float>());
    CHECK(cfg.upsample() == 2);
}

TEST_CASE("pooled_instruction: mean, permutation invariance, gradient stop") {
    MaskPredConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 90;
    MaskPredictor mp(cfg, &ps);

    // all tokens equal v -> output v
    Tensor ci = Tensor::zeros({1, 3, cfg.dim});
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t d = 0; d < cfg.dim; ++d) ci.set(t * cfg.dim + d, 0.5 * (d + 1));
    Tensor pooled = mp.pooled_instruction(ci);
    for (int64_t d = 0; d < cfg.dim; ++d)
        CHECK(pooled.at(d) == doctest::Approx(0.5 * (d + 1)).epsilon(1e-6));

    // permuting tokens leaves the mean unchanged
    Tensor ci2 = concat({slice(ci, 1, 2, 1), slice(ci, 1, 0, 2)}, 1);
    Tensor pooled2 = mp.pooled_instruction(ci2);
    for (int64_t d = 0; d < cfg.dim; ++d)
        CHECK(pooled2.at(d) == doctest::Approx(pooled.at(d)).epsilon(1e-6));

    // gradient stop: a loss through pooled_instruction reaches no upstream node
    Tensor up = randn(91, {1, 3, cfg.dim});
    up.set_requires_grad(true);
    Tensor loss = sum_all(mp.pooled_instruction(up));
    CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("mask_loss through the predictor reaches only maskpred parameters") {
    MaskPredConfig cfg = tiny_cfg();
    BackboneConfig bc = tiny_bb();
    CondEncConfig cc;
    cc.dim = 16;
    cc.heads = 2;
    cc.n_queries = 3;
    cc.fusion_layers = 1;
    cc.latent_h = 4;
    cc.latent_w = 4;
    cc.hidden_in = 8;
    ParamStore ps;
    ps.master_seed = 92;
    Backbone bb(bc, &ps);
    ConditionEncoder ce(cc, &ps);
    MaskPredictor mp(cfg, &ps);
    ps.set_frozen("backbone/", true);

    Tensor src = randn(93, {1, bc.channels, 4, 4});
    Tensor instr = randn(94, {1, bc.text_len, bc.hidden_in});
    TokenSequence seq = bb.assemble(src, src, instr);
    Tensor c_inst = ce.instruction_perceiver(instr);
    Tensor probs = mp.forward(c_inst, seq);
    Tensor m = Tensor::zeros({1, 16});
    for (int i = 0; i < 5; ++i) m.set(i, 1.0);
    Tensor ml = mask_loss(reshape(probs, {1, 16}), m, 1.0);
    backward(ml);

    for (const auto& [name, e] : ps.entries) {
        auto g = e.t.grad_as_double();
        double mag = 0;
        for (double v : g) mag += std::fabs(v);
        if (name.rfind("maskpred/", 0) == 0 && name.find("film") == std::string::npos) {
            // conv / phi / queries must receive gradient
            if (name.find("queries") != std::string::npos) CHECK(mag > 0.0);
        } else if (name.rfind("condenc/", 0) == 0 || name.rfind("backbone/", 0) == 0) {
            CHECK(mag == 0.0);
        }
    }
}

TEST_CASE("postprocess: radius conventions against the brute-force oracle") {
    // single cell above threshold, radius 1 -> the 5-cell elliptical plus
    std::vector<float> probs(36, 0.1f);
    probs[14] = 0.9f;  // (2, 2) on a 6x6 grid
    PredictedMask pm = postprocess_mask(probs, 6, 6, 0.5, 1);
    int count = 0;
    for (uint8_t v : pm.binary) count += v;
    CHECK(count == 5);
    CHECK(pm.binary[14] == 1);
    CHECK(pm.binary[8] == 1);
    CHECK(pm.binary[20] == 1);
    CHECK(pm.binary[13] == 1);
    CHECK(pm.binary[15] == 1);

    // radius 0: plain threshold
    PredictedMask p0 = postprocess_mask(probs, 6, 6, 0.5, 0);
    int c0 = 0;
    for (uint8_t v : p0.binary) c0 += v;
    CHECK(c0 == 1);

    // all below threshold: empty stays empty
    std::vector<float> low(36, 0.2f);
    PredictedMask pe = postprocess_mask(low, 6, 6, 0.5, 1);
    for (uint8_t v : pe.binary) CHECK(v == 0);

    // dilation only adds cells, monotone in radius, matches brute force
    Rng rng(95);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> p(64);
        for (auto& v : p) v = static_cast<float>(rng.next_unit());
        int prev = -1;
        for (int r : {0, 1, 2}) {
            PredictedMask pr = postprocess_mask(p, 8, 8, 0.5, r);
            std::vector<uint8_t> thresholded(64);
            for (int i = 0; i < 64; ++i) thresholded[static_cast<size_t>(i)] = p[static_cast<size_t>(i)] >= 0.5f;
            CHECK(pr.binary == dilate_brute(thresholded, 8, 8, r));
            int cnt = 0;
            for (uint8_t v : pr.binary) cnt += v;
            CHECK(cnt >= prev);
            prev = cnt;
            for (int i = 0; i < 64; ++i)
                if (thresholded[static_cast<size_t>(i)]) CHECK(pr.binary[static_cast<size_t>(i)] == 1);
        }
    }
}

TEST_CASE("pgm export: P2 header and value range") {
    std::vector<float> probs = {0.0f, 0.5f, 1.0f, 0.25f};
    std::string path = "/tmp/fg_mask_test.pgm";
    write_pgm(path, probs, 2, 2);
    std::ifstream f(path);
    std::string magic;
    int w, h, maxv;
    f >> magic >> w >> h >> maxv;
    CHECK(magic == "P2");
    CHECK(w == 2);
    CHECK(h == 2);
    CHECK(maxv == 255);
    int v0, v1, v2, v3;
    f >> v0 >> v1 >> v2 >> v3;
    CHECK(v0 == 0);
    CHECK(v1 == 128);
    CHECK(v2 == 255);
    CHECK(v3 == 64);
    std::remove(path.c_str());
}
