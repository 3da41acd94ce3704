#include "flowgate/maskpred.hpp"

#include <cmath>
#include <fstream>

#include "flowgate/ops.hpp"

namespace flowgate {

MaskPredictor::MaskPredictor(const MaskPredConfig& cfg, ParamStore* ps) : cfg_(cfg), ps_(ps) {
    if (cfg.latent_h % cfg.query_h != 0 || cfg.latent_w % cfg.query_w != 0)
        throw ShapeError("maskpred: query grid must divide the latent grid");
    int d = cfg.dim;
    auto P = [&](const std::string& n, const Shape& s, const char* scheme) {
        return ps_->ensure(std::string(kPrefix) + n, s, scheme);
    };
    P("queries", {cfg.n_queries(), d}, "normal-scaled");
    P("film/gamma_w", {d, d}, "zeros");
    P("film/gamma_b", {d}, "zeros");
    P("film/beta_w", {d, d}, "zeros");
    P("film/beta_b", {d}, "zeros");
    P("phi_w", {d, d}, "normal-scaled");
    P("phi_b", {d}, "zeros");
    P("conv1_w", {3, 3, d, d}, "normal-scaled");
    P("conv1_b", {d}, "zeros");
    P("conv2_w", {3, 3, d, 1}, "normal-scaled");
    P("conv2_b", {1}, "zeros");
}

Tensor MaskPredictor::pooled_instruction(const Tensor& c_inst) const {
    if (c_inst.ndim() != 3)
        throw ShapeError("pooled_instruction: expected [B,Nq,D], got " + shape_str(c_inst.shape()));
    return mean_axis(stop_gradient(c_inst), 1);
}

Tensor MaskPredictor::film_queries(const Tensor& pooled) const {
    auto G = [&](const char* n) { return ps_->get(std::string(kPrefix) + n); };
    int64_t B = pooled.dim(0);
    int d = cfg_.dim;
    Tensor gamma = add_scalar(add(matmul(pooled, G("film/gamma_w")), G("film/gamma_b")), 1.0);
    Tensor beta = add(matmul(pooled, G("film/beta_w")), G("film/beta_b"));
    Tensor q = reshape(G("queries"), {1, cfg_.n_queries(), d});
    return add(mul(q, reshape(gamma, {B, 1, d})), reshape(beta, {B, 1, d}));
}

Tensor MaskPredictor::predict(const Tensor& q_film, const TokenSequence& seq) const {
    auto G = [&](const char* n) { return ps_->get(std::string(kPrefix) + n); };
    int64_t B = seq.tokens.dim(0);
    Tensor img = slice(seq.tokens, 1, 0, 2 * seq.l_img);
    Tensor phi = add(matmul(img, G("phi_w")), G("phi_b"));
    Tensor o = attention(q_film, phi, phi, cfg_.heads);  // [B, Np, D]
    Tensor grid = reshape(o, {B, cfg_.query_h, cfg_.query_w, cfg_.dim});
    Tensor c1 = silu(conv3x3(grid, G("conv1_w"), G("conv1_b")));
    Tensor logits = conv3x3(c1, G("conv2_w"), G("conv2_b"));  // [B, qh, qw, 1]
    Tensor up = bilinear_upsample2d(logits, cfg_.upsample());
    return sigmoid(reshape(up, {B, cfg_.latent_h, cfg_.latent_w}));
}

Tensor MaskPredictor::forward(const Tensor& c_inst, const TokenSequence& seq) const {
    return predict(film_queries(pooled_instruction(c_inst)), seq);
}

PredictedMask postprocess_mask(const std::vector<float>& probs, int h, int w, double threshold,
                               int dilate_radius) {
    if (static_cast<int>(probs.size()) != h * w)
        throw ShapeError("postprocess_mask: probability grid size mismatch");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::runtime_error("postprocess_mask: threshold must lie in (0,1)");
    if (dilate_radius < 0) throw std::runtime_error("postprocess_mask: negative dilate radius");
    PredictedMask out;
    out.h = h;
    out.w = w;
    out.probs = probs;
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.v.assign(probs.size(), 0);
    for (size_t i = 0; i < probs.size(); ++i)
        m.v[i] = probs[i] >= static_cast<float>(threshold) ? 1 : 0;
    out.binary = dilate(m, dilate_radius).v;
    return out;
}

void write_pgm(const std::string& path, const std::vector<float>& probs, int h, int w) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
    f << "P2\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int v = static_cast<int>(std::lround(probs[static_cast<size_t>(y * w + x)] * 255.0f));
            v = std::min(255, std::max(0, v));
            f << v << (x + 1 == w ? "" : " ");
        }
        f << "\n";
    }
}

}  // namespace flowgate
