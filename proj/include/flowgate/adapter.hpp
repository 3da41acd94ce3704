#pragma once
// Per-block adapter (gated cross-attention residual into the frozen
// backbone) plus the SpatialGate and source-token protection.

#include <vector>

#include "flowgate/params.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

struct AdapterConfig {
    int n_blocks = 4;
    int dim = 64;
    int heads = 4;
    int ffn_mult = 4;
};

class AdapterStack {
  public:
    AdapterStack(const AdapterConfig& cfg, ParamStore* ps);

    // h0: [B, S, D] post-joint-attention state; c: [B, Nc, D] condition
    // stream; gate: [B, S, 1]. Returns h0 + gate * FFN(LN(CA(h0, c))).
    Tensor block_forward(int block, const Tensor& h0, const Tensor& c, const Tensor& gate) const;

    // Same result restricted to the first n_front tokens (where the gate can
    // be nonzero after protection); the remaining tokens pass through
    // untouched. Equivalent to block_forward with a gate that is zero past
    // n_front, at roughly half the cost.
    Tensor block_forward_front(int block, const Tensor& h0, const Tensor& c,
                               const Tensor& gate_front, int64_t n_front) const;

    const AdapterConfig& config() const { return cfg_; }

    static constexpr const char* kPrefix = "adapter/";

  private:
    Tensor residual(int block, const Tensor& h, const Tensor& c) const;
    AdapterConfig cfg_;
    ParamStore* ps_;
};

class SpatialGate {
  public:
    SpatialGate(int dim, ParamStore* ps, bool hard_gate = false);

    // m_bin: [B, L, 1] binarized latent mask. Learned mode:
    // sigmoid(MLP(M*e_edit + (1-M)*e_keep)); hard mode: the mask itself.
    Tensor gate_from_mask(const Tensor& m_bin) const;

    static constexpr const char* kPrefix = "gate/";

  private:
    int dim_;
    ParamStore* ps_;
    bool hard_;
};

// Expands per-target-patch gates [B, L, 1] to the full sequence [B, S, 1]:
// target patches keep their gate, source and text tokens get exactly zero.
// Branch layout must be [target*L, source*L, text*T].
Tensor protect_source_tokens(const Tensor& gate_img, const std::vector<int>& branch);

// Re-applies protection to an already full-length gate (idempotent form).
Tensor apply_protection(const Tensor& gate_full, const std::vector<int>& branch);

}  // namespace flowgate
