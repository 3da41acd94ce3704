#include "flowgate/condenc.hpp"

#include <cmath>

#include "flowgate/ops.hpp"

namespace flowgate {

MaskPyramid downsample_mask(const std::vector<uint8_t>& mask_hi, int h_hi, int w_hi, int h_lo,
                            int w_lo) {
    if (static_cast<int>(mask_hi.size()) != h_hi * w_hi)
        throw ShapeError("downsample_mask: mask size does not match " + std::to_string(h_hi) +
                         "x" + std::to_string(w_hi));
    if (h_hi % h_lo != 0 || w_hi % w_lo != 0)
        throw ShapeError("downsample_mask: grid is not an integer multiple of the latent grid");
    for (uint8_t v : mask_hi)
        if (v > 1) throw std::runtime_error("downsample_mask: mask is not binary");
    int ky = h_hi / h_lo, kx = w_hi / w_lo;
    MaskPyramid p;
    p.h = h_lo;
    p.w = w_lo;
    p.soft.assign(static_cast<size_t>(h_lo * w_lo), 0.0f);
    p.bin.assign(static_cast<size_t>(h_lo * w_lo), 0);
    float inv = 1.0f / static_cast<float>(ky * kx);
    for (int y = 0; y < h_lo; ++y)
        for (int x = 0; x < w_lo; ++x) {
            int acc = 0;
            for (int dy = 0; dy < ky; ++dy)
                for (int dx = 0; dx < kx; ++dx)
                    acc += mask_hi[static_cast<size_t>((y * ky + dy) * w_hi + x * kx + dx)];
            float soft = static_cast<float>(acc) * inv;
            p.soft[static_cast<size_t>(y * w_lo + x)] = soft;
            p.bin[static_cast<size_t>(y * w_lo + x)] = soft >= 0.5f ? 1 : 0;
        }
    return p;
}

namespace {

Tensor sinusoid_pe(int n, int d) {
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

ConditionEncoder::ConditionEncoder(const CondEncConfig& cfg, ParamStore* ps)
    : cfg_(cfg), ps_(ps) {
    int d = cfg.dim;
    auto P = [&](const std::string& n, const Shape& s, const char* scheme) {
        return ps_->ensure(std::string(kPrefix) + n, s, scheme);
    };
    P("mask/e_edit", {d}, "normal-scaled");
    P("mask/e_keep", {d}, "normal-scaled");
    P("perceiver/proj_w", {cfg.hidden_in, d}, "normal-scaled");
    P("perceiver/proj_b", {d}, "zeros");
    P("perceiver/queries", {cfg.n_queries, d}, "normal-scaled");
    for (const char* w : {"wq", "wk", "wv", "wo"})
        P(std::string("perceiver/") + w, {d, d}, "normal-scaled");
    P("type/mask", {d}, "normal-scaled");
    P("type/inst", {d}, "normal-scaled");
    for (int i = 0; i < cfg.fusion_layers; ++i) {
        std::string p = "fusion/layer" + std::to_string(i) + "/";
        P(p + "ln1_g", {d}, "ones");
        P(p + "ln1_b", {d}, "zeros");
        P(p + "wq", {d, d}, "normal-scaled");
        P(p + "wk", {d, d}, "normal-scaled");
        P(p + "wv", {d, d}, "normal-scaled");
        // residual outputs zero-initialized: fusion starts as the identity
        P(p + "wo", {d, d}, "zeros");
        P(p + "ln2_g", {d}, "ones");
        P(p + "ln2_b", {d}, "zeros");
        P(p + "ffn_w1", {d, 4 * d}, "normal-scaled");
        P(p + "ffn_b1", {4 * d}, "zeros");
        P(p + "ffn_w2", {4 * d, d}, "zeros");
        P(p + "ffn_b2", {d}, "zeros");
    }
    pe_fuse_ = sinusoid_pe(cfg.stream_len(), d);
}

Tensor ConditionEncoder::mask_spatial_encode(const Tensor& m) const {
    auto G = [&](const std::string& n) { return ps_->get(std::string(kPrefix) + n); };
    if (m.ndim() != 3 || m.dim(1) != cfg_.n_mask() || m.dim(2) != 1)
        throw ShapeError("mask_spatial_encode: expected [B," + std::to_string(cfg_.n_mask()) +
                         ",1], got " + shape_str(m.shape()));
    Tensor keep_w = add_scalar(mul_scalar(m, -1.0), 1.0);  // 1 - M
    return add(mul(m, G("mask/e_edit")), mul(keep_w, G("mask/e_keep")));
}

Tensor ConditionEncoder::instruction_perceiver(const Tensor& instr_stacked,
                                               Tensor* probs_out) const {
    auto G = [&](const std::string& n) { return ps_->get(std::string(kPrefix) + n); };
    if (instr_stacked.ndim() != 3 || instr_stacked.dim(2) != cfg_.hidden_in)
        throw ShapeError("instruction_perceiver: expected [B,T," + std::to_string(cfg_.hidden_in) +
                         "], got " + shape_str(instr_stacked.shape()));
    if (instr_stacked.dim(1) < 1)
        throw std::runtime_error("instruction_perceiver: empty instruction");
    int64_t B = instr_stacked.dim(0);
    Tensor proj = add(matmul(instr_stacked, G("perceiver/proj_w")), G("perceiver/proj_b"));
    Tensor q0 = reshape(G("perceiver/queries"), {1, cfg_.n_queries, cfg_.dim});
    // broadcast queries over the batch
    Tensor q = add(q0, Tensor::zeros({B, 1, 1}, instr_stacked.dtype()));
    Tensor att = attention(matmul(q, G("perceiver/wq")), matmul(proj, G("perceiver/wk")),
                           matmul(proj, G("perceiver/wv")), cfg_.heads, probs_out);
    return matmul(att, G("perceiver/wo"));
}

Tensor ConditionEncoder::fuse(const Tensor& m_s, const Tensor& c_inst) const {
    auto G = [&](const std::string& n) { return ps_->get(std::string(kPrefix) + n); };
    Tensor x = concat({add(m_s, G("type/mask")), add(c_inst, G("type/inst"))}, 1);
    if (x.dim(1) != cfg_.stream_len())
        throw ShapeError("fuse: stream length " + std::to_string(x.dim(1)) + ", expected " +
                         std::to_string(cfg_.stream_len()));
    x = add(x, pe_fuse_);
    for (int i = 0; i < cfg_.fusion_layers; ++i) {
        std::string p = "fusion/layer" + std::to_string(i) + "/";
        Tensor h = layer_norm(x, G(p + "ln1_g"), G(p + "ln1_b"));
        Tensor att = attention(matmul(h, G(p + "wq")), matmul(h, G(p + "wk")),
                               matmul(h, G(p + "wv")), cfg_.heads);
        x = add(x, matmul(att, G(p + "wo")));
        Tensor h2 = layer_norm(x, G(p + "ln2_g"), G(p + "ln2_b"));
        Tensor f = add(matmul(silu(add(matmul(h2, G(p + "ffn_w1")), G(p + "ffn_b1"))),
                              G(p + "ffn_w2")),
                       G(p + "ffn_b2"));
        x = add(x, f);
    }
    return x;
}

ConditionStreams ConditionEncoder::encode(const Tensor& m, const Tensor& instr_stacked) const {
    ConditionStreams out;
    out.m_s = mask_spatial_encode(m);
    out.c_inst = instruction_perceiver(instr_stacked);
    out.c = fuse(out.m_s, out.c_inst);
    return out;
}

}  // namespace flowgate
