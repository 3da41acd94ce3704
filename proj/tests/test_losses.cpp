// Loss-level oracles: frozen closed-form values for Eq-style examples,
// alpha monotonicity, permutation invariance, dice symmetry.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flowgate/losses.hpp"
#include "flowgate/ops.hpp"
#include "flowgate/rng.hpp"

using namespace flowgate;

namespace {

Tensor randn(uint64_t seed, const Shape& s, DType dt = DType::F64) {
    Rng rng(seed);
    Tensor t(make_node(s, dt, "x"));
    if (dt == DType::F32)
        for (auto& v : t.vals<float>()) v = static_cast<float>(rng.next_normal());
    else
        for (auto& v : t.vals<double>()) v = rng.next_normal();
    return t;
}

// independent oracle: plain-double evaluation of the weighted mean
double region_loss_oracle(const std::vector<double>& pred, const std::vector<double>& tgt,
                          const std::vector<double>& mask, int64_t C, int64_t L, double alpha) {
    double num = 0, den = 0;
    for (int64_t i = 0; i < L; ++i) {
        double e = 0;
        for (int64_t c = 0; c < C; ++c) {
            double d = pred[static_cast<size_t>(c * L + i)] - tgt[static_cast<size_t>(c * L + i)];
            e += d * d;
        }
        double w = 1.0 + alpha * mask[static_cast<size_t>(i)];
        num += w * e;
        den += w;
    }
    return num / den;
}

}  // namespace

TEST_CASE("region loss: frozen two-token example (1*1 + 3*1) / 4 = 1") {
    // two tokens, one channel; squared errors (1, 1); mask (0, 1); alpha 2
    Tensor v = Tensor::from_data({1, 1, 1, 2}, {1.0, 3.0}, DType::F64);
    Tensor t = Tensor::from_data({1, 1, 1, 2}, {0.0, 2.0}, DType::F64);
    Tensor m = Tensor::from_data({1, 1, 2}, {0.0, 1.0}, DType::F64);
    Tensor loss = region_weighted_edit_loss(v, t, m, 2.0);
    CHECK(loss.item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("region loss: perfect prediction gives zero for every alpha") {
    Tensor v = randn(1, {2, 3, 4, 4});
    Tensor m = Tensor::zeros({2, 4, 4}, DType::F64);
    m.set(3, 1.0);
    for (double alpha : {0.0, 1.0, 2.0, 4.0, 8.0}) {
        Tensor loss = region_weighted_edit_loss(v, v, m, alpha);
        CHECK(loss.item() == 0.0);
    }
}

TEST_CASE("region loss: alpha = 0 equals uniform MSE within 1e-12 relative") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        int64_t C = 1 + static_cast<int64_t>(rng.next_below(4));
        int64_t H = 2 + static_cast<int64_t>(rng.next_below(4));
        int64_t W = 2 + static_cast<int64_t>(rng.next_below(4));
        Tensor v = randn(1000 + trial, {1, C, H, W});
        Tensor t = randn(2000 + trial, {1, C, H, W});
        Tensor m = Tensor::zeros({1, H, W}, DType::F64);
        for (int64_t i = 0; i < H * W; ++i) m.set(i, rng.next_below(2));
        double got = region_weighted_edit_loss(v, t, m, 0.0).item();
        // independent uniform-MSE oracle: mean over tokens of channel-summed errors
        double acc = 0;
        for (int64_t i = 0; i < H * W; ++i) {
            double e = 0;
            for (int64_t c = 0; c < C; ++c) {
                double d = v.at(c * H * W + i) - t.at(c * H * W + i);
                e += d * d;
            }
            acc += e;
        }
        double oracle = acc / static_cast<double>(H * W);
        CHECK(std::fabs(got - oracle) <= 1e-12 * std::max(1.0, std::fabs(oracle)));
    }
}

TEST_CASE("region loss: matches the independent weighted oracle for alpha > 0") {
    Rng rng(78);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t C = 2, H = 3, W = 5, L = H * W;
        Tensor v = randn(3000 + trial, {1, C, H, W});
        Tensor t = randn(4000 + trial, {1, C, H, W});
        std::vector<double> mv(static_cast<size_t>(L));
        Tensor m = Tensor::zeros({1, H, W}, DType::F64);
        for (int64_t i = 0; i < L; ++i) {
            mv[static_cast<size_t>(i)] = static_cast<double>(rng.next_below(2));
            m.set(i, mv[static_cast<size_t>(i)]);
        }
        std::vector<double> pv(v.vals<double>().begin(), v.vals<double>().end());
        std::vector<double> tv(t.vals<double>().begin(), t.vals<double>().end());
        for (double alpha : {1.0, 2.0, 4.0, 8.0}) {
            double got = region_weighted_edit_loss(v, t, m, alpha).item();
            double want = region_loss_oracle(pv, tv, mv, C, L, alpha);
            CHECK(got == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("region loss: joint permutation invariance") {
    int64_t C = 2, H = 2, W = 3, L = H * W;
    Tensor v = randn(5001, {1, C, H, W});
    Tensor t = randn(5002, {1, C, H, W});
    Tensor m = Tensor::from_data({1, H, W}, {1, 0, 0, 1, 0, 1}, DType::F64);
    double base = region_weighted_edit_loss(v, t, m, 2.0).item();

    // permute tokens jointly
    std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor v2 = Tensor::zeros({1, C, H, W}, DType::F64);
    Tensor t2 = Tensor::zeros({1, C, H, W}, DType::F64);
    Tensor m2 = Tensor::zeros({1, H, W}, DType::F64);
    for (int64_t i = 0; i < L; ++i) {
        m2.set(i, m.at(perm[static_cast<size_t>(i)]));
        for (int64_t c = 0; c < C; ++c) {
            v2.set(c * L + i, v.at(c * L + perm[static_cast<size_t>(i)]));
            t2.set(c * L + i, t.at(c * L + perm[static_cast<size_t>(i)]));
        }
    }
    double permuted = region_weighted_edit_loss(v2, t2, m2, 2.0).item();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("region loss: alpha monotonicity with error concentration") {
    // edit-region error larger than keep-region error: loss increases in alpha
    Tensor v = Tensor::from_data({1, 1, 1, 2}, {2.0, 0.1}, DType::F64);
    Tensor t = Tensor::zeros({1, 1, 1, 2}, DType::F64);
    Tensor m = Tensor::from_data({1, 1, 2}, {1.0, 0.0}, DType::F64);
    double prev = -1;
    for (double a : {0.0, 1.0, 2.0, 4.0, 8.0}) {
        double l = region_weighted_edit_loss(v, t, m, a).item();
        CHECK(l > prev);
        prev = l;
    }
    // opposite concentration: strictly decreasing
    Tensor m2 = Tensor::from_data({1, 1, 2}, {0.0, 1.0}, DType::F64);
    prev = 1e9;
    for (double a : {0.0, 1.0, 2.0, 4.0, 8.0}) {
        double l = region_weighted_edit_loss(v, t, m2, a).item();
        CHECK(l < prev);
        prev = l;
    }
}

TEST_CASE("dice: closed-form cases") {
    // perfect overlap on binary masks -> exactly 1
    Tensor m = Tensor::from_data({1, 6}, {1, 0, 1, 1, 0, 0}, DType::F64);
    CHECK(dice_score(m, m).item() == doctest::Approx(1.0).epsilon(1e-12));

    // predictions all zero, n = 8 ones -> (0 + 1) / (0 + 8 + 1) = 1/9
    Tensor z = Tensor::zeros({1, 16}, DType::F64);
    Tensor m8 = Tensor::zeros({1, 16}, DType::F64);
    for (int i = 0; i < 8; ++i) m8.set(i, 1.0);
    CHECK(dice_score(z, m8).item() == doctest::Approx(1.0 / 9.0).epsilon(1e-12));

    // uniform 0.5 on N cells with n ones -> (n + 1) / (N/2 + n + 1)
    int64_t N = 20, n = 6;
    Tensor half = Tensor::full({1, N}, 0.5, DType::F64);
    Tensor mn = Tensor::zeros({1, N}, DType::F64);
    for (int64_t i = 0; i < n; ++i) mn.set(i, 1.0);
    double want = (static_cast<double>(n) + 1.0) / (static_cast<double>(N) / 2.0 + n + 1.0);
    CHECK(dice_score(half, mn).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("dice: symmetric under swap when the prediction is binary") {
    Rng rng(79);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = Tensor::zeros({1, 12}, DType::F64);
        Tensor b = Tensor::zeros({1, 12}, DType::F64);
        for (int i = 0; i < 12; ++i) {
            a.set(i, rng.next_below(2));
            b.set(i, rng.next_below(2));
        }
        CHECK(dice_score(a, b).item() == doctest::Approx(dice_score(b, a).item()).epsilon(1e-12));
    }
}

TEST_CASE("mask loss: ln 2 at uniform uncertainty, clamp floor at perfection") {
    Tensor m = Tensor::from_data({1, 8}, {1, 0, 0, 1, 1, 0, 0, 0}, DType::F64);
    Tensor half = Tensor::full({1, 8}, 0.5, DType::F64);
    double l = mask_loss(half, m, 0.0).item();  // lambda_dice = 0: pure BCE
    CHECK(l == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // perfect (pre-clamp) prediction: loss below 1e-6 with the 1e-7 clamp
    double lp = mask_loss(m, m, 0.0).item();
    CHECK(lp < 1e-6);
    CHECK(lp >= 0.0);

    // lambda_dice adds (1 - dice)
    double l2 = mask_loss(half, m, 1.0).item();
    double dice = dice_score(half, m).item();
    CHECK(l2 == doctest::Approx(std::log(2.0) + (1.0 - dice)).epsilon(1e-12));
}

TEST_CASE("total loss: weighting arithmetic") {
    Tensor e = Tensor::full({1}, 0.5, DType::F64);
    Tensor m = Tensor::full({1}, 0.2, DType::F64);
    CHECK(total_loss(e, m, 0.1).item() == doctest::Approx(0.52).epsilon(1e-12));
    CHECK(total_loss(e, m, 0.0).item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("keep-region weight never vanishes") {
    // all-ones mask still leaves w_i = 1 on any unmasked token; with an
    // all-zero mask the weights are exactly 1 and the loss equals plain MSE
    Tensor v = randn(6001, {1, 2, 2, 2});
    Tensor t = randn(6002, {1, 2, 2, 2});
    Tensor m0 = Tensor::zeros({1, 2, 2}, DType::F64);
    Tensor m1 = Tensor::full({1, 2, 2}, 1.0, DType::F64);
    double l0 = region_weighted_edit_loss(v, t, m0, 8.0).item();
    double l1 = region_weighted_edit_loss(v, t, m1, 8.0).item();
    // both are plain means (weights constant): w=1 and w=9 normalize away
    CHECK(l0 == doctest::Approx(l1).epsilon(1e-12));
}
