#include "flowgate/morphology.hpp"

namespace flowgate {

std::vector<std::pair<int, int>> elliptical_se(int radius) {
    std::vector<std::pair<int, int>> se;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) se.emplace_back(dx, dy);
    return se;
}

BinaryMask dilate(const BinaryMask& m, int radius) {
    if (radius <= 0) return m;
    auto se = elliptical_se(radius);
    BinaryMask out;
    out.h = m.h;
    out.w = m.w;
    out.v.assign(m.v.size(), 0);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            for (auto [dx, dy] : se) {
                int yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < m.h && xx >= 0 && xx < m.w)
                    out.v[static_cast<size_t>(yy * m.w + xx)] = 1;
            }
        }
    return out;
}

BinaryMask erode(const BinaryMask& m, int radius) {
    if (radius <= 0) return m;
    auto se = elliptical_se(radius);
    BinaryMask out;
    out.h = m.h;
    out.w = m.w;
    out.v.assign(m.v.size(), 0);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            bool all = true;
            for (auto [dx, dy] : se) {
                int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= m.h || xx < 0 || xx >= m.w || !m.at(yy, xx)) {
                    all = false;
                    break;
                }
            }
            if (all) out.v[static_cast<size_t>(y * m.w + x)] = 1;
        }
    return out;
}

BinaryMask circular_shift(const BinaryMask& m, int dx, int dy) {
    BinaryMask out;
    out.h = m.h;
    out.w = m.w;
    out.v.assign(m.v.size(), 0);
    auto wrap = [](int a, int n) {
        int r = a % n;
        return r < 0 ? r + n : r;
    };
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x))
                out.v[static_cast<size_t>(wrap(y + dy, m.h) * m.w + wrap(x + dx, m.w))] = 1;
    return out;
}

}  // namespace flowgate
