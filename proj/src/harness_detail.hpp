#pragma once
// Shared plumbing between the harness translation units.

#include <vector>

#include "flowgate/harness.hpp"

namespace flowgate {
namespace detail {

struct BatchData {
    Tensor source, target;  // [B, C, Hl, Wl]
    Tensor instr;           // [B, T, L_h * enc_dim], layers stacked channel-wise
    std::vector<MaskPyramid> gt;  // per-sample latent mask pyramid
};

BatchData make_batch(const Corpus& corpus, const std::vector<const EditSample*>& samples);

// Conditioning mask actually fed to the gate / condition encoder (may be the
// GT pyramid, a perturbed mask, or a predicted one).
struct CondMask {
    std::vector<float> soft;  // latent res, [L]
    std::vector<uint8_t> bin;
    bool empty = false;  // all-zero: adapter falls back to g == 0
};

CondMask cond_from_pyramid(const MaskPyramid& p);
CondMask cond_from_binary(const std::vector<uint8_t>& bin_latent);

struct ForwardOptions {
    bool force_zero_gate = false;  // exercise the g == 0 identity arithmetically
    std::vector<Tensor>* block_states = nullptr;
};

// Assembled-sequence + adapter-wired backbone forward. cond may be empty when
// the variant has no adapter path.
Tensor edited_forward(Wiring& w, const RunConfig& cfg, const TokenSequence& seq, const Tensor& t,
                      const Tensor& instr, const std::vector<CondMask>& cond,
                      const ForwardOptions& opt = {});

// Mask-head probabilities for an assembled sequence, [B, Hl, Wl].
Tensor predict_probs(Wiring& w, const Tensor& instr, const TokenSequence& seq);

Tensor mask_loss_target(const RunConfig& cfg, const std::vector<MaskPyramid>& gt, DType dt);

}  // namespace detail
}  // namespace flowgate
