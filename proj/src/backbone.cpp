#include "flowgate/backbone.hpp"

#include <cmath>

#include "flowgate/ops.hpp"

namespace flowgate {

namespace {

// 2D sinusoidal encoding: first half encodes x, second half y.
Tensor sinusoid_pe_2d(int h, int w, int d) {
    Tensor pe = Tensor::zeros({h * w, d});
    auto& v = pe.vals<float>();
    int dq = d / 4;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int p = y * w + x;
            for (int i = 0; i < dq; ++i) {
                double freq = std::pow(10000.0, -static_cast<double>(i) / dq);
                v[static_cast<size_t>(p * d + 2 * i)] = static_cast<float>(std::sin(x * freq));
                v[static_cast<size_t>(p * d + 2 * i + 1)] = static_cast<float>(std::cos(x * freq));
                v[static_cast<size_t>(p * d + 2 * dq + 2 * i)] =
                    static_cast<float>(std::sin(y * freq));
                v[static_cast<size_t>(p * d + 2 * dq + 2 * i + 1)] =
                    static_cast<float>(std::cos(y * freq));
            }
        }
    return pe;
}

Tensor sinusoid_pe_1d(int n, int d) {
    Tensor pe = Tensor::zeros({n, d});
    auto& v = pe.vals<float>();
    for (int p = 0; p < n; ++p)
        for (int i = 0; i < d / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / d);
            v[static_cast<size_t>(p * d + 2 * i)] = static_cast<float>(std::sin(p * freq));
            v[static_cast<size_t>(p * d + 2 * i + 1)] = static_cast<float>(std::cos(p * freq));
        }
    return pe;
}

}  // namespace

FlowState flow_interpolate(const Tensor& z0, const Tensor& z1, const Tensor& t) {
    if (z0.shape() != z1.shape())
        throw ShapeError("flow_interpolate: shape mismatch " + shape_str(z0.shape()) + " vs " +
                         shape_str(z1.shape()));
    int64_t b = z0.dim(0);
    if (t.numel() != b)
        throw ShapeError("flow_interpolate: t must have one entry per batch element");
    for (int64_t i = 0; i < b; ++i)
        if (t.at(i) < 0.0 || t.at(i) > 1.0)
            throw std::runtime_error("flow_interpolate: t outside [0,1]");
    FlowState fs;
    fs.z0 = z0;
    fs.z1 = z1;
    fs.t = t;
    Shape bshape(z0.shape().size(), 1);
    bshape[0] = b;
    Tensor tb = reshape(t, bshape);
    Tensor one_minus = add_scalar(mul_scalar(tb, -1.0), 1.0);
    fs.zt = add(mul(z0, one_minus), mul(z1, tb));
    fs.v_star = sub(z1, z0);
    return fs;
}

Backbone::Backbone(const BackboneConfig& cfg, ParamStore* ps) : cfg_(cfg), ps_(ps) {
    int d = cfg.dim, c = cfg.channels;
    auto P = [&](const std::string& n, const Shape& s, const char* scheme) {
        return ps_->ensure(std::string(kPrefix) + n, s, scheme);
    };
    P("embed/target_w", {c, d}, "normal-scaled");
    P("embed/target_b", {d}, "zeros");
    P("embed/source_w", {c, d}, "normal-scaled");
    P("embed/source_b", {d}, "zeros");
    P("embed/text_w", {cfg.hidden_in, d}, "normal-scaled");
    P("embed/text_b", {d}, "zeros");
    P("embed/branch", {3, d}, "normal-scaled");
    P("time/w1", {d, d}, "normal-scaled");
    P("time/b1", {d}, "zeros");
    P("time/w2", {d, d}, "normal-scaled");
    P("time/b2", {d}, "zeros");
    for (int i = 0; i < cfg.n_blocks; ++i) {
        std::string p = "block" + std::to_string(i) + "/";
        P(p + "ln1_g", {d}, "ones");
        P(p + "ln1_b", {d}, "zeros");
        for (const char* w : {"wq", "wk", "wv", "wo"}) P(p + w, {d, d}, "normal-scaled");
        for (const char* b : {"bq", "bk", "bv", "bo"}) P(p + b, {d}, "zeros");
        P(p + "ln2_g", {d}, "ones");
        P(p + "ln2_b", {d}, "zeros");
        P(p + "ffn_w1", {d, cfg.ffn_mult * d}, "normal-scaled");
        P(p + "ffn_b1", {cfg.ffn_mult * d}, "zeros");
        P(p + "ffn_w2", {cfg.ffn_mult * d, d}, "normal-scaled");
        P(p + "ffn_b2", {d}, "zeros");
    }
    P("out/ln_g", {d}, "ones");
    P("out/ln_b", {d}, "zeros");
    P("out/w", {d, c}, "normal-scaled");
    P("out/b", {c}, "zeros");
    pe_img_ = sinusoid_pe_2d(cfg.latent_h, cfg.latent_w, d);
    pe_text_ = sinusoid_pe_1d(cfg.text_len, d);
}

TokenSequence Backbone::assemble(const Tensor& source, const Tensor& zt,
                                 const Tensor& instr_stacked) const {
    if (source.shape() != zt.shape())
        throw ShapeError("assemble: source/zt shape mismatch " + shape_str(source.shape()) +
                         " vs " + shape_str(zt.shape()));
    int64_t B = source.dim(0);
    int L = cfg_.l_img(), T = cfg_.text_len, d = cfg_.dim;
    if (instr_stacked.ndim() != 3 || instr_stacked.dim(1) != T ||
        instr_stacked.dim(2) != cfg_.hidden_in)
        throw ShapeError("assemble: instruction hidden must be [B," + std::to_string(T) + "," +
                         std::to_string(cfg_.hidden_in) + "], got " +
                         shape_str(instr_stacked.shape()));
    auto G = [&](const std::string& n) { return ps_->get(std::string(kPrefix) + n); };

    // [B,C,H,W] -> [B,L,C] -> embed to D
    auto flatten = [&](const Tensor& z) {
        Tensor t = permute(z, {0, 2, 3, 1});
        return reshape(t, {B, L, cfg_.channels});
    };
    Tensor branch = G("embed/branch");
    Tensor tgt = add(add(matmul(flatten(zt), G("embed/target_w")), G("embed/target_b")), pe_img_);
    tgt = add(tgt, slice(branch, 0, 0, 1));
    Tensor src = add(add(matmul(flatten(source), G("embed/source_w")), G("embed/source_b")),
                     pe_img_);
    src = add(src, slice(branch, 0, 1, 1));
    Tensor txt = add(add(matmul(instr_stacked, G("embed/text_w")), G("embed/text_b")), pe_text_);
    txt = add(txt, slice(branch, 0, 2, 1));

    TokenSequence seq;
    seq.tokens = concat({tgt, src, txt}, 1);
    seq.l_img = L;
    seq.text_len = T;
    seq.branch.assign(static_cast<size_t>(2 * L + T), 0);
    for (int i = 0; i < L; ++i) seq.branch[static_cast<size_t>(L + i)] = 1;
    for (int i = 0; i < T; ++i) seq.branch[static_cast<size_t>(2 * L + i)] = 2;
    (void)d;
    return seq;
}

BackboneOut Backbone::forward(const TokenSequence& seq, const Tensor& t, const AdapterHook* hook,
                              std::vector<Tensor>* attn_probs) const {
    auto G = [&](const std::string& n) { return ps_->get(std::string(kPrefix) + n); };
    int64_t B = seq.tokens.dim(0);
    int L = seq.l_img, T = seq.text_len, d = cfg_.dim;
    int64_t S = seq.tokens.dim(1);
    if (S != 2 * L + T)
        throw ShapeError("backbone_forward: sequence length mismatch");

    // timestep conditioning: sinusoidal features of t, one vector per sample,
    // added to every token
    Tensor tf = Tensor::zeros({B, d}, seq.tokens.dtype());
    for (int64_t b = 0; b < B; ++b) {
        double tv = t.at(b) * 1000.0;
        for (int i = 0; i < d / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / d);
            tf.set(b * d + 2 * i, std::sin(tv * freq));
            tf.set(b * d + 2 * i + 1, std::cos(tv * freq));
        }
    }
    Tensor temb = add(matmul(silu(add(matmul(tf, G("time/w1")), G("time/b1"))), G("time/w2")),
                      G("time/b2"));
    Tensor x = add(seq.tokens, reshape(temb, {B, 1, d}));

    BackboneOut out;
    for (int i = 0; i < cfg_.n_blocks; ++i) {
        std::string p = "block" + std::to_string(i) + "/";
        Tensor hn = layer_norm(x, G(p + "ln1_g"), G(p + "ln1_b"));
        Tensor q = add(matmul(hn, G(p + "wq")), G(p + "bq"));
        Tensor k = add(matmul(hn, G(p + "wk")), G(p + "bk"));
        Tensor v = add(matmul(hn, G(p + "wv")), G(p + "bv"));
        Tensor probs;
        Tensor att = attention(q, k, v, cfg_.heads, attn_probs ? &probs : nullptr);
        if (attn_probs) attn_probs->push_back(probs);
        Tensor h0 = add(x, add(matmul(att, G(p + "wo")), G(p + "bo")));
        out.block_states.push_back(slice(h0, 1, 0, 2 * L));
        Tensor h = h0;
        if (hook) {
            h = (*hook)(i, h0);
            if (h.shape() != h0.shape())
                throw ShapeError("backbone_forward: adapter hook returned " +
                                 shape_str(h.shape()) + " at block " + std::to_string(i) +
                                 ", expected " + shape_str(h0.shape()));
        }
        Tensor h2 = layer_norm(h, G(p + "ln2_g"), G(p + "ln2_b"));
        Tensor f = add(matmul(silu(add(matmul(h2, G(p + "ffn_w1")), G(p + "ffn_b1"))),
                              G(p + "ffn_w2")),
                       G(p + "ffn_b2"));
        x = add(h, f);
    }
    Tensor target_tokens = slice(x, 1, 0, L);
    Tensor y = layer_norm(target_tokens, G("out/ln_g"), G("out/ln_b"));
    Tensor vtok = add(matmul(y, G("out/w")), G("out/b"));  // [B, L, C]
    Tensor grid = reshape(vtok, {B, cfg_.latent_h, cfg_.latent_w, cfg_.channels});
    out.v_pred = permute(grid, {0, 3, 1, 2});
    return out;
}

}  // namespace flowgate
