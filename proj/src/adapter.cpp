#include "flowgate/adapter.hpp"

#include "flowgate/ops.hpp"

namespace flowgate {

AdapterStack::AdapterStack(const AdapterConfig& cfg, ParamStore* ps) : cfg_(cfg), ps_(ps) {
    int d = cfg.dim;
    for (int i = 0; i < cfg.n_blocks; ++i) {
        std::string p = std::string(kPrefix) + "block" + std::to_string(i) + "/";
        ps_->ensure(p + "wq", {d, d}, "normal-scaled");
        ps_->ensure(p + "wk", {d, d}, "normal-scaled");
        ps_->ensure(p + "wv", {d, d}, "normal-scaled");
        ps_->ensure(p + "ln_g", {d}, "ones");
        ps_->ensure(p + "ln_b", {d}, "zeros");
        ps_->ensure(p + "ffn_w1", {d, cfg.ffn_mult * d}, "normal-scaled");
        ps_->ensure(p + "ffn_b1", {cfg.ffn_mult * d}, "zeros");
        // zero-init output: step 0 equals the frozen backbone
        ps_->ensure(p + "ffn_w2", {cfg.ffn_mult * d, d}, "zeros");
        ps_->ensure(p + "ffn_b2", {d}, "zeros");
    }
}

Tensor AdapterStack::residual(int block, const Tensor& h, const Tensor& c) const {
    std::string p = std::string(kPrefix) + "block" + std::to_string(block) + "/";
    auto G = [&](const std::string& n) { return ps_->get(p + n); };
    Tensor att = attention(matmul(h, G("wq")), matmul(c, G("wk")), matmul(c, G("wv")),
                           cfg_.heads);
    Tensor u = layer_norm(att, G("ln_g"), G("ln_b"));
    Tensor f = add(matmul(silu(add(matmul(u, G("ffn_w1")), G("ffn_b1"))), G("ffn_w2")),
                   G("ffn_b2"));
    return f;
}

Tensor AdapterStack::block_forward(int block, const Tensor& h0, const Tensor& c,
                                   const Tensor& gate) const {
    if (gate.ndim() != 3 || gate.dim(0) != h0.dim(0) || gate.dim(1) != h0.dim(1) ||
        gate.dim(2) != 1)
        throw ShapeError("block_adapter: gate shape " + shape_str(gate.shape()) +
                         " does not match tokens " + shape_str(h0.shape()));
    return add(h0, mul(gate, residual(block, h0, c)));
}

Tensor AdapterStack::block_forward_front(int block, const Tensor& h0, const Tensor& c,
                                         const Tensor& gate_front, int64_t n_front) const {
    int64_t S = h0.dim(1);
    if (gate_front.dim(1) != n_front)
        throw ShapeError("block_adapter: front gate shape " + shape_str(gate_front.shape()) +
                         " does not cover " + std::to_string(n_front) + " tokens");
    Tensor front = slice(h0, 1, 0, n_front);
    Tensor rest = slice(h0, 1, n_front, S - n_front);
    Tensor adapted = add(front, mul(gate_front, residual(block, front, c)));
    return concat({adapted, rest}, 1);
}

SpatialGate::SpatialGate(int dim, ParamStore* ps, bool hard_gate)
    : dim_(dim), ps_(ps), hard_(hard_gate) {
    ps_->ensure(std::string(kPrefix) + "e_edit", {dim}, "normal-scaled");
    ps_->ensure(std::string(kPrefix) + "e_keep", {dim}, "normal-scaled");
    ps_->ensure(std::string(kPrefix) + "mlp_w1", {dim, dim}, "normal-scaled");
    ps_->ensure(std::string(kPrefix) + "mlp_b1", {dim}, "zeros");
    ps_->ensure(std::string(kPrefix) + "mlp_w2", {dim, 1}, "normal-scaled");
    ps_->ensure(std::string(kPrefix) + "mlp_b2", {1}, "zeros");
}

Tensor SpatialGate::gate_from_mask(const Tensor& m_bin) const {
    if (m_bin.ndim() != 3 || m_bin.dim(2) != 1)
        throw ShapeError("spatial_gate: expected [B,L,1], got " + shape_str(m_bin.shape()));
    if (hard_) return m_bin;
    auto G = [&](const char* n) { return ps_->get(std::string(kPrefix) + n); };
    Tensor keep_w = add_scalar(mul_scalar(m_bin, -1.0), 1.0);
    Tensor x = add(mul(m_bin, G("e_edit")), mul(keep_w, G("e_keep")));
    Tensor h = silu(add(matmul(x, G("mlp_w1")), G("mlp_b1")));
    return sigmoid(add(matmul(h, G("mlp_w2")), G("mlp_b2")));
}

Tensor protect_source_tokens(const Tensor& gate_img, const std::vector<int>& branch) {
    int64_t L = gate_img.dim(1);
    int64_t S = static_cast<int64_t>(branch.size());
    if (L > S) throw ShapeError("protect_source_tokens: gate longer than the sequence");
    for (int64_t i = 0; i < L; ++i)
        if (branch[static_cast<size_t>(i)] != 0)
            throw ShapeError("protect_source_tokens: first " + std::to_string(L) +
                             " tokens must be target branch");
    for (int64_t i = L; i < S; ++i)
        if (branch[static_cast<size_t>(i)] == 0)
            throw ShapeError("protect_source_tokens: target token past the gate range");
    Tensor zeros = Tensor::zeros({gate_img.dim(0), S - L, 1}, gate_img.dtype());
    return concat({gate_img, zeros}, 1);
}

Tensor apply_protection(const Tensor& gate_full, const std::vector<int>& branch) {
    if (gate_full.dim(1) != static_cast<int64_t>(branch.size()))
        throw ShapeError("apply_protection: gate length " + std::to_string(gate_full.dim(1)) +
                         " vs " + std::to_string(branch.size()) + " branch flags");
    Shape ms = {1, gate_full.dim(1), 1};
    Tensor keep = Tensor::zeros(ms, gate_full.dtype());
    for (size_t i = 0; i < branch.size(); ++i) keep.set(static_cast<int64_t>(i), branch[i] == 0 ? 1.0 : 0.0);
    return mul(gate_full, keep);
}

}  // namespace flowgate
