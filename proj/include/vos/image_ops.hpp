#pragma once

#include <array>

#include "vos/data_io.hpp"

namespace vos {

/// Bilinear resize of a (C,H,W) tensor, half-pixel centres.
Tensor resize_bilinear(const Tensor& chw, int rows, int cols);
MaskMap resize_nearest(const MaskMap& mask, int rows, int cols);
Frame resize_frame(const Frame& frame, int rows, int cols);

Tensor flip_horizontal(const Tensor& chw);
Frame flip_horizontal(const Frame& frame);
MaskMap flip_horizontal(const MaskMap& mask);
ProbStack flip_horizontal(const ProbStack& stack);

/// 2x3 affine map on pixel coordinates (x, y), row-major [a b tx; c d ty].
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static Affine identity() { return {}; }
  Affine then(const Affine& next) const;  // next ∘ this
  Affine inverse() const;
  std::array<double, 2> apply(double x, double y) const;
};

/// Warps with `forward` (source -> destination): bilinear, edge-replicated.
Frame warp_frame(const Frame& frame, const Affine& forward);
/// Nearest-neighbour warp; pixels mapped from outside the source become 0.
MaskMap warp_mask(const MaskMap& mask, const Affine& forward);
/// Bilinear warp of a single-channel map; outside pixels become 0.
Tensor warp_map(const Tensor& hw_map, const Affine& forward);

}  // namespace vos
