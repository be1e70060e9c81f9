#include "specsplat/vec.hpp"

#include <utility>

namespace specsplat {

bool invert(const Mat4& a, Mat4& out) {
    Mat4 m = a;
    Mat4 inv = Mat4::identity();
    for (int col = 0; col < 4; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
        if (std::abs(m(pivot, col)) < 1e-300) return false;
        if (pivot != col) {
            for (int c = 0; c < 4; ++c) {
                std::swap(m(pivot, c), m(col, c));
                std::swap(inv(pivot, c), inv(col, c));
            }
        }
        const double d = m(col, col);
        for (int c = 0; c < 4; ++c) {
            m(col, c) /= d;
            inv(col, c) /= d;
        }
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            const double f = m(r, col);
            if (f == 0.0) continue;
            for (int c = 0; c < 4; ++c) {
                m(r, c) -= f * m(col, c);
                inv(r, c) -= f * inv(col, c);
            }
        }
    }
    out = inv;
    return true;
}

}  // namespace specsplat
