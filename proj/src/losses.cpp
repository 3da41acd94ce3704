#include "flowgate/losses.hpp"

#include "flowgate/ops.hpp"

namespace flowgate {

Tensor region_weighted_edit_loss(const Tensor& v_pred, const Tensor& v_star, const Tensor& m_bin,
                                 double alpha) {
    if (v_pred.shape() != v_star.shape())
        throw ShapeError("region_weighted_edit_loss: prediction shape " +
                         shape_str(v_pred.shape()) + " vs target " + shape_str(v_star.shape()));
    if (alpha < 0) throw std::runtime_error("region_weighted_edit_loss: alpha must be >= 0");
    int64_t B = v_pred.dim(0), H = v_pred.dim(2), W = v_pred.dim(3);
    if (m_bin.ndim() != 3 || m_bin.dim(0) != B || m_bin.dim(1) != H || m_bin.dim(2) != W)
        throw ShapeError("region_weighted_edit_loss: mask shape " + shape_str(m_bin.shape()) +
                         " does not match latent " + shape_str(v_pred.shape()));

    Tensor d = sub(v_pred, v_star);
    Tensor e = sum_axis(mul(d, d), 1);            // [B, H, W], channel-summed
    Tensor ef = reshape(e, {B, H * W});
    // w_i = 1 + alpha * M_i (constants; min weight is 1 by construction)
    Tensor w = Tensor::zeros({B, H * W}, v_pred.dtype());
    Tensor den = Tensor::zeros({B}, v_pred.dtype());
    for (int64_t b = 0; b < B; ++b) {
        double acc = 0;
        for (int64_t i = 0; i < H * W; ++i) {
            double wi = 1.0 + alpha * m_bin.at(b * H * W + i);
            w.set(b * H * W + i, wi);
            acc += wi;
        }
        den.set(b, acc);
    }
    Tensor num = sum_axis(mul(ef, w), 1);  // [B]
    return mean_all(div(num, den));
}

Tensor dice_score(const Tensor& m_hat, const Tensor& m, double eps) {
    if (m_hat.shape() != m.shape())
        throw ShapeError("dice_score: shape mismatch " + shape_str(m_hat.shape()) + " vs " +
                         shape_str(m.shape()));
    Tensor inter = sum_axis(mul(m_hat, m), -1);                      // [B]
    Tensor sums = add(sum_axis(m_hat, -1), sum_axis(m, -1));         // [B]
    return div(add_scalar(mul_scalar(inter, 2.0), eps), add_scalar(sums, eps));
}

Tensor mask_loss(const Tensor& m_hat, const Tensor& m, double lambda_dice) {
    Tensor p = clamp(m_hat, kBceClamp, 1.0 - kBceClamp);
    Tensor one_minus_p = add_scalar(mul_scalar(p, -1.0), 1.0);
    Tensor one_minus_m = add_scalar(mul_scalar(m, -1.0), 1.0);
    Tensor bce_terms = add(mul(m, ln_op(p)), mul(one_minus_m, ln_op(one_minus_p)));
    Tensor bce = mul_scalar(mean_all(bce_terms), -1.0);
    Tensor dice = dice_score(m_hat, m);
    Tensor dice_term = mean_all(add_scalar(mul_scalar(dice, -1.0), 1.0));  // mean(1 - dice)
    return add(bce, mul_scalar(dice_term, lambda_dice));
}

Tensor total_loss(const Tensor& edit, const Tensor& mask, double lambda_mask) {
    return add(edit, mul_scalar(mask, lambda_mask));
}

}  // namespace flowgate
