#include "vos/image_ops.hpp"

#include <algorithm>
#include <cmath>

#include "vos/ops.hpp"

namespace vos {

Tensor resize_bilinear(const Tensor& chw, int rows, int cols) {
  NoGradGuard guard;
  return ops::resize_bilinear(Var(chw), rows, cols).value();
}

MaskMap resize_nearest(const MaskMap& mask, int rows, int cols) {
  if (rows == mask.height() && cols == mask.width()) return mask;
  MaskMap out(rows, cols);
  const double sy = static_cast<double>(mask.height()) / rows;
  const double sx = static_cast<double>(mask.width()) / cols;
  for (int y = 0; y < rows; ++y) {
    const int iy = std::min(mask.height() - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
    for (int x = 0; x < cols; ++x) {
      const int ix = std::min(mask.width() - 1, static_cast<int>(std::floor((x + 0.5) * sx)));
      out(y, x) = mask(iy, ix);
    }
  }
  return out;
}

Frame resize_frame(const Frame& frame, int rows, int cols) {
  return Frame(resize_bilinear(frame.pixels(), rows, cols));
}

Tensor flip_horizontal(const Tensor& chw) {
  Tensor out(chw.shape());
  const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(c, y, W - 1 - x) = chw.at(c, y, x);
  return out;
}

Frame flip_horizontal(const Frame& frame) { return Frame(flip_horizontal(frame.pixels())); }

MaskMap flip_horizontal(const MaskMap& mask) {
  MaskMap out(mask.height(), mask.width());
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) out(y, mask.width() - 1 - x) = mask(y, x);
  return out;
}

ProbStack flip_horizontal(const ProbStack& stack) { return {flip_horizontal(stack.probs), stack.has_background}; }

Affine Affine::then(const Affine& n) const {
  const auto& a = m;
  const auto& b = n.m;
  return Affine{{b[0] * a[0] + b[1] * a[3], b[0] * a[1] + b[1] * a[4], b[0] * a[2] + b[1] * a[5] + b[2],
                 b[3] * a[0] + b[4] * a[3], b[3] * a[1] + b[4] * a[4], b[3] * a[2] + b[4] * a[5] + b[5]}};
}

Affine Affine::inverse() const {
  const double det = m[0] * m[4] - m[1] * m[3];
  const double ia = m[4] / det, ib = -m[1] / det, ic = -m[3] / det, id = m[0] / det;
  return Affine{{ia, ib, -(ia * m[2] + ib * m[5]), ic, id, -(ic * m[2] + id * m[5])}};
}

std::array<double, 2> Affine::apply(double x, double y) const {
  return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
}

Frame warp_frame(const Frame& frame, const Affine& forward) {
  const Affine inv = forward.inverse();
  const int H = frame.height(), W = frame.width();
  Frame out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      auto [sx, sy] = inv.apply(x, y);
      sx = std::clamp(sx, 0.0, W - 1.0);
      sy = std::clamp(sy, 0.0, H - 1.0);
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 3; ++c)
        out.at(c, y, x) = (1 - fy) * ((1 - fx) * frame.at(c, y0, x0) + fx * frame.at(c, y0, x1)) +
                          fy * ((1 - fx) * frame.at(c, y1, x0) + fx * frame.at(c, y1, x1));
    }
  return out;
}

MaskMap warp_mask(const MaskMap& mask, const Affine& forward) {
  const Affine inv = forward.inverse();
  const int H = mask.height(), W = mask.width();
  MaskMap out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto [sx, sy] = inv.apply(x, y);
      const int ix = static_cast<int>(std::lround(sx)), iy = static_cast<int>(std::lround(sy));
      if (ix >= 0 && ix < W && iy >= 0 && iy < H) out(y, x) = mask(iy, ix);
    }
  return out;
}

Tensor warp_map(const Tensor& map, const Affine& forward) {
  const Affine inv = forward.inverse();
  const int H = map.dim(0), W = map.dim(1);
  Tensor out({H, W});
  auto px = [&](int yy, int xx) {
    return (xx >= 0 && xx < W && yy >= 0 && yy < H) ? map[static_cast<std::size_t>(yy) * W + xx] : 0.0;
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto [sx, sy] = inv.apply(x, y);
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      out[static_cast<std::size_t>(y) * W + x] = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                                                 fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
    }
  return out;
}

}  // namespace vos
