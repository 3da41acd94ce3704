#pragma once
// Toy frozen joint-attention DiT with flow matching. Assembles the
// [target; source; text] token sequence, runs pre-LN blocks whose
// post-joint-attention state h0 is the adapter insertion point, and projects
// target-branch tokens back to a velocity latent.

#include <functional>
#include <vector>

#include "flowgate/params.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

struct BackboneConfig {
    int n_blocks = 4;
    int dim = 64;
    int heads = 4;
    int latent_h = 16, latent_w = 16;
    int channels = 4;
    int text_len = 16;
    int hidden_in = 64;  // stacked instruction-encoder layers, L_h * enc_dim
    int ffn_mult = 4;

    int l_img() const { return latent_h * latent_w; }
    int seq_len() const { return 2 * l_img() + text_len; }
};

// branch flags per token: 0 target, 1 source, 2 text; fixed at assembly.
struct TokenSequence {
    Tensor tokens;  // [B, 2L+T, D]
    std::vector<int> branch;
    int l_img = 0;
    int text_len = 0;
};

struct FlowState {
    Tensor z0, z1, zt, v_star;
    Tensor t;  // [B]
};

// z_t = (1-t) z0 + t z1, v* = z1 - z0; endpoints are exact.
FlowState flow_interpolate(const Tensor& z0, const Tensor& z1, const Tensor& t);

// Maps (block index, post-joint-attention h0 [B,2L+T,D]) to the state used
// for the rest of the block.
using AdapterHook = std::function<Tensor(int, const Tensor&)>;

struct BackboneOut {
    Tensor v_pred;                     // [B, C, Hl, Wl]
    std::vector<Tensor> block_states;  // per block: image tokens [B, 2L, D], pre-hook
};

class Backbone {
  public:
    Backbone(const BackboneConfig& cfg, ParamStore* ps);

    // source, zt: [B, C, Hl, Wl]; instr_stacked: [B, T, hidden_in].
    TokenSequence assemble(const Tensor& source, const Tensor& zt,
                           const Tensor& instr_stacked) const;

    BackboneOut forward(const TokenSequence& seq, const Tensor& t,
                        const AdapterHook* hook = nullptr,
                        std::vector<Tensor>* attn_probs = nullptr) const;

    const BackboneConfig& config() const { return cfg_; }

    static constexpr const char* kPrefix = "backbone/";

  private:
    BackboneConfig cfg_;
    ParamStore* ps_;
    Tensor pe_img_;   // [L, D] shared by both image branches
    Tensor pe_text_;  // [T, D]
};

}  // namespace flowgate
