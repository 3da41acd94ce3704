#pragma once
// Training losses: region-weighted velocity loss, smoothed Dice, BCE+Dice
// mask loss, and the total objective.

#include "flowgate/tensor.hpp"

namespace flowgate {

struct LossWeights {
    double alpha = 2.0;
    double lambda_mask = 0.1;
    double lambda_dice = 1.0;
};

// v_pred, v_star: [B, C, H, W]; m_bin: [B, H, W] with 0/1 entries.
// Per-token weight w_i = 1 + alpha * M_i; per-token error sums over channels;
// the weighted sum is normalized by sum(w) per sample, then averaged over the
// batch. alpha = 0 reproduces the uniform per-token MSE exactly.
Tensor region_weighted_edit_loss(const Tensor& v_pred, const Tensor& v_star, const Tensor& m_bin,
                                 double alpha);

// m_hat: [B, N] probabilities, m: [B, N] binary. Smoothed with eps in both
// numerator and denominator; returns [B].
Tensor dice_score(const Tensor& m_hat, const Tensor& m, double eps = 1.0);

// Mean BCE over cells (probabilities clamped to [1e-7, 1-1e-7]) plus
// lambda_dice * (1 - Dice), averaged over the batch.
Tensor mask_loss(const Tensor& m_hat, const Tensor& m, double lambda_dice);

Tensor total_loss(const Tensor& edit, const Tensor& mask, double lambda_mask);

inline constexpr double kBceClamp = 1e-7;

}  // namespace flowgate
