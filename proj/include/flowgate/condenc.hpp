#pragma once
// Condition encoder: mask spatial tokens by interpolating two learned
// embeddings, a fixed-budget instruction projector (cross-attention from
// learned queries), and a small fusion transformer with type embeddings and
// sinusoidal positions. Output is the shared stream c consumed by every
// block adapter.

#include <cstdint>
#include <vector>

#include "flowgate/params.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

struct CondEncConfig {
    int dim = 64;
    int heads = 4;
    int n_queries = 8;      // N_q instruction tokens
    int fusion_layers = 2;
    int latent_h = 16, latent_w = 16;
    int hidden_in = 64;     // stacked instruction-encoder width
    // Eq-3 input: fractional downsampled mask (default) or the binarized one.
    bool soft_mask_tokens = true;

    int n_mask() const { return latent_h * latent_w; }
    int stream_len() const { return n_mask() + n_queries; }
};

// Latent-resolution mask pair: fractional coverage and its 0.5-threshold
// binarization (ties go to 1).
struct MaskPyramid {
    int h = 0, w = 0;
    std::vector<float> soft;   // in [0,1]
    std::vector<uint8_t> bin;  // soft >= 0.5
};

// Area-average downsample of a binary generation-resolution mask. Rejects
// non-binary input and non-integer downsample ratios.
MaskPyramid downsample_mask(const std::vector<uint8_t>& mask_hi, int h_hi, int w_hi, int h_lo,
                            int w_lo);

struct ConditionStreams {
    Tensor c;       // [B, Nm+Nq, D]
    Tensor c_inst;  // [B, Nq, D]
    Tensor m_s;     // [B, Nm, D]
};

class ConditionEncoder {
  public:
    ConditionEncoder(const CondEncConfig& cfg, ParamStore* ps);

    // m: [B, Nm, 1] mask values (fractional or binary).
    Tensor mask_spatial_encode(const Tensor& m) const;
    // instr_stacked: [B, T, hidden_in]; output always [B, Nq, D].
    Tensor instruction_perceiver(const Tensor& instr_stacked, Tensor* probs_out = nullptr) const;
    Tensor fuse(const Tensor& m_s, const Tensor& c_inst) const;

    ConditionStreams encode(const Tensor& m, const Tensor& instr_stacked) const;

    const CondEncConfig& config() const { return cfg_; }

    static constexpr const char* kPrefix = "condenc/";

  private:
    CondEncConfig cfg_;
    ParamStore* ps_;
    Tensor pe_fuse_;  // [Nm+Nq, D]
};

}  // namespace flowgate
