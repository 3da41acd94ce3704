// Backbone contracts: exact flow endpoints, sequence layout, identity hook,
// determinism, attention row sums, output shapes.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowgate/backbone.hpp"
#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"

using namespace flowgate;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig c;
    c.n_blocks = 2;
    c.dim = 16;
    c.heads = 2;
    c.latent_h = 2;
    c.latent_w = 2;
    c.channels = 3;
    c.text_len = 2;
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

TEST_CASE("flow_interpolate: endpoint identities hold exactly") {
    Tensor z0 = randn(1, {2, 3, 2, 2});
    Tensor z1 = randn(2, {2, 3, 2, 2});
    FlowState a = flow_interpolate(z0, z1, Tensor::zeros({2}));
    for (int64_t i = 0; i < z0.numel(); ++i) CHECK(a.zt.at(i) == z0.at(i));
    FlowState b = flow_interpolate(z0, z1, Tensor::full({2}, 1.0));
    for (int64_t i = 0; i < z1.numel(); ++i) CHECK(b.zt.at(i) == z1.at(i));
}

TEST_CASE("flow_interpolate: z0=0, z1=2, t=0.25 gives zt=0.5 and v*=2") {
    Tensor z0 = Tensor::zeros({1, 1, 1, 1});
    Tensor z1 = Tensor::full({1, 1, 1, 1}, 2.0);
    FlowState fs = flow_interpolate(z0, z1, Tensor::full({1}, 0.25));
    CHECK(fs.zt.item() == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(fs.v_star.item() == 2.0);
    CHECK_THROWS_AS(flow_interpolate(z0, Tensor::zeros({1, 1, 2, 1}), Tensor::zeros({1})),
                    ShapeError);
    CHECK_THROWS(flow_interpolate(z0, z1, Tensor::full({1}, 1.5)));
}

TEST_CASE("assemble: [target; source; text] layout with branch flags") {
    BackboneConfig cfg = tiny_cfg();  // L = 4, T = 2 -> length 10
    ParamStore ps;
    ps.master_seed = 10;
    Backbone bb(cfg, &ps);
    Tensor src = randn(3, {1, cfg.channels, 2, 2});
    Tensor zt = randn(4, {1, cfg.channels, 2, 2});
    Tensor instr = randn(5, {1, cfg.text_len, cfg.hidden_in});
    TokenSequence seq = bb.assemble(src, zt, instr);
    CHECK(seq.tokens.shape() == Shape{1, 10, cfg.dim});
    std::vector<int> expect = {0, 0, 0, 0, 1, 1, 1, 1, 2, 2};
    CHECK(seq.branch == expect);

    TokenSequence seq2 = bb.assemble(src, zt, instr);
    CHECK(seq.tokens.vals<float>() == seq2.tokens.vals<float>());  // bitwise
}

TEST_CASE("assemble: zero latents leave only position/branch embeddings") {
    BackboneConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 11;
    Backbone bb(cfg, &ps);
    Tensor zeros = Tensor::zeros({1, cfg.channels, 2, 2});
    Tensor instr = Tensor::zeros({1, cfg.text_len, cfg.hidden_in});
    TokenSequence seq = bb.assemble(zeros, zeros, instr);
    // token 0 is a target-branch patch at grid position 0: biases are zero,
    // so the value must equal pe2d[0] + branch[0]
    const Tensor& branch = ps.get("backbone/embed/branch");
    // recompute pe for position (0,0): sin(0)=0, cos(0)=1 pattern
    for (int i = 0; i < cfg.dim; ++i) {
        double pe = (i % 2 == 0) ? 0.0 : 1.0;
        CHECK(seq.tokens.at(i) ==
              doctest::Approx(pe + branch.at(i)).epsilon(1e-6));
    }
}

TEST_CASE("forward: identity hook is bitwise equal to no hook") {
    BackboneConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 12;
    Backbone bb(cfg, &ps);
    Tensor src = randn(6, {2, cfg.channels, 2, 2});
    Tensor zt = randn(7, {2, cfg.channels, 2, 2});
    Tensor instr = randn(8, {2, cfg.text_len, cfg.hidden_in});
    Tensor t = Tensor::full({2}, 0.3);
    TokenSequence seq = bb.assemble(src, zt, instr);
    BackboneOut plain = bb.forward(seq, t, nullptr);
    AdapterHook ident = [](int, const Tensor& h0) { return h0; };
    BackboneOut hooked = bb.forward(seq, t, &ident);
    CHECK(plain.v_pred.vals<float>() == hooked.v_pred.vals<float>());
    BackboneOut again = bb.forward(seq, t, nullptr);
    CHECK(plain.v_pred.vals<float>() == again.v_pred.vals<float>());
    CHECK(plain.block_states.size() == static_cast<size_t>(cfg.n_blocks));
    CHECK(plain.block_states[0].shape() == Shape{2, 8, cfg.dim});
}

TEST_CASE("forward: default toy config produces B x 4 x 16 x 16 velocity") {
    BackboneConfig cfg;  // spec defaults: 4 blocks, D=64, 16x16, C=4
    ParamStore ps;
    ps.master_seed = 13;
    Backbone bb(cfg, &ps);
    Tensor src = randn(14, {1, 4, 16, 16});
    Tensor zt = randn(15, {1, 4, 16, 16});
    Tensor instr = randn(16, {1, 16, 64});
    TokenSequence seq = bb.assemble(src, zt, instr);
    BackboneOut out = bb.forward(seq, Tensor::full({1}, 0.5), nullptr);
    CHECK(out.v_pred.shape() == Shape{1, 4, 16, 16});
}

TEST_CASE("forward: attention rows sum to one for every head and block") {
    BackboneConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 17;
    Backbone bb(cfg, &ps);
    Tensor src = randn(18, {1, cfg.channels, 2, 2});
    Tensor zt = randn(19, {1, cfg.channels, 2, 2});
    Tensor instr = randn(20, {1, cfg.text_len, cfg.hidden_in});
    TokenSequence seq = bb.assemble(src, zt, instr);
    std::vector<Tensor> probs;
    bb.forward(seq, Tensor::full({1}, 0.7), nullptr, &probs);
    REQUIRE(probs.size() == static_cast<size_t>(cfg.n_blocks));
    for (const Tensor& p : probs) {
        int64_t rows = p.numel() / p.dim(-1);
        int64_t cols = p.dim(-1);
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0;
            for (int64_t c = 0; c < cols; ++c) s += p.at(r * cols + c);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("forward: hook returning a wrong shape names the block") {
    BackboneConfig cfg = tiny_cfg();
    ParamStore ps;
    ps.master_seed = 21;
    Backbone bb(cfg, &ps);
    Tensor src = randn(22, {1, cfg.channels, 2, 2});
    TokenSequence seq = bb.assemble(src, src, Tensor::zeros({1, cfg.text_len, cfg.hidden_in}));
    AdapterHook bad = [](int, const Tensor& h0) { return slice(h0, 1, 0, 2); };
    CHECK_THROWS_WITH_AS(bb.forward(seq, Tensor::zeros({1}), &bad),
                         doctest::Contains("block 0"), ShapeError);
}
