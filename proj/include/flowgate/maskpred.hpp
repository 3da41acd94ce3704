#pragma once
// Mask predictor: learned query grid, FiLM-modulated by the pooled
// instruction embedding (gradient-stopped at that boundary), cross-attention
// over the projected image-branch tokens, conv head, bilinear upsample,
// sigmoid. Inference post-processing thresholds then dilates.

#include <string>
#include <vector>

#include "flowgate/backbone.hpp"
#include "flowgate/morphology.hpp"
#include "flowgate/params.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

struct MaskPredConfig {
    int dim = 64;
    int heads = 4;
    int query_h = 8, query_w = 8;
    int latent_h = 16, latent_w = 16;

    int n_queries() const { return query_h * query_w; }
    int upsample() const { return latent_h / query_h; }
};

class MaskPredictor {
  public:
    MaskPredictor(const MaskPredConfig& cfg, ParamStore* ps);

    // Mean over instruction tokens with the gradient stopped toward the
    // condition encoder. c_inst: [B, Nq, D] -> [B, D].
    Tensor pooled_instruction(const Tensor& c_inst) const;

    // FiLM: gamma = 1 + linear(pooled), beta = linear(pooled); both heads
    // zero-initialized so queries start unmodulated.
    Tensor film_queries(const Tensor& pooled) const;  // [B, Np, D]

    // Probabilities over the latent grid, [B, Hl, Wl].
    Tensor predict(const Tensor& q_film, const TokenSequence& seq) const;

    // pooled + FiLM + predict in one call.
    Tensor forward(const Tensor& c_inst, const TokenSequence& seq) const;

    const MaskPredConfig& config() const { return cfg_; }

    static constexpr const char* kPrefix = "maskpred/";

  private:
    MaskPredConfig cfg_;
    ParamStore* ps_;
};

struct PredictedMask {
    int h = 0, w = 0;
    std::vector<float> probs;
    std::vector<uint8_t> binary;  // thresholded then dilated
};

PredictedMask postprocess_mask(const std::vector<float>& probs, int h, int w,
                               double threshold = 0.5, int dilate_radius = 1);

// Plain-text PGM (P2), probabilities scaled to 0..255.
void write_pgm(const std::string& path, const std::vector<float>& probs, int h, int w);

}  // namespace flowgate
