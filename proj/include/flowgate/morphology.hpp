#pragma once
// Binary-mask morphology with an elliptical (circular) structuring element
// {(dx,dy) : dx^2 + dy^2 <= r^2}, plus circular shifts. Shared between the
// predicted-mask post-processing and the robustness perturbations.

#include <cstdint>
#include <utility>
#include <vector>

namespace flowgate {

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;  // row-major, values 0/1

    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y * w + x)]; }
    int64_t count() const {
        int64_t n = 0;
        for (uint8_t b : v) n += b;
        return n;
    }
    bool empty_mask() const { return count() == 0; }
};

std::vector<std::pair<int, int>> elliptical_se(int radius);

// Zero padding outside the grid: dilation never reads past the border,
// erosion treats out-of-bounds as background.
BinaryMask dilate(const BinaryMask& m, int radius);
BinaryMask erode(const BinaryMask& m, int radius);
// Circular roll: out[(y+dy) mod h][(x+dx) mod w] = in[y][x].
BinaryMask circular_shift(const BinaryMask& m, int dx, int dy);

}  // namespace flowgate
