#include "vos/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vos::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

CMapMat cmat(const Tensor& t, int rows, int cols) { return CMapMat(t.data(), rows, cols); }
MapMat mmat(Tensor& t, int rows, int cols) { return MapMat(t.data(), rows, cols); }

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Var unary(const Var& a, F f, std::function<void(Node&)> bw) {
  Tensor out(a.shape());
  const double* src = a.value().data();
  double* dst = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) dst[i] = f(src[i]);
  return Var::make(std::move(out), {a}, std::move(bw));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    n.inputs[0]->accumulate_grad(n.grad);
    n.inputs[1]->accumulate_grad(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    n.inputs[0]->accumulate_grad(n.grad);
    if (!n.inputs[1]->requires_grad) return;
    Tensor g = n.grad;
    for (double& v : g.storage()) v = -v;
    n.inputs[1]->accumulate_grad(g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    const Tensor& va = n.inputs[0]->value;
    const Tensor& vb = n.inputs[1]->value;
    if (n.inputs[0]->requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= vb[i];
      n.inputs[0]->accumulate_grad(g);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= va[i];
      n.inputs[1]->accumulate_grad(g);
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](Node& n) {
    Tensor g = n.grad;
    for (double& v : g.storage()) v *= s;
    n.inputs[0]->accumulate_grad(g);
  });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](Node& n) {
    Tensor g = n.grad;
    const Tensor& x = n.inputs[0]->value;
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] <= 0) g[i] = 0;
    n.inputs[0]->accumulate_grad(g);
  });
}

Var sigmoid(const Var& a) {
  return unary(a, stable_sigmoid, [](Node& n) {
    Tensor g = n.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= n.value[i] * (1.0 - n.value[i]);
    n.inputs[0]->accumulate_grad(g);
  });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](Node& n) {
    Tensor g = n.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= 1.0 - n.value[i] * n.value[i];
    n.inputs[0]->accumulate_grad(g);
  });
}

Var one_minus(const Var& a) {
  return unary(a, [](double x) { return 1.0 - x; }, [](Node& n) {
    Tensor g = n.grad;
    for (double& v : g.storage()) v = -v;
    n.inputs[0]->accumulate_grad(g);
  });
}

Var sum(const Var& a) {
  return Var::make(Tensor({1}, a.value().sum()), {a}, [](Node& n) {
    n.inputs[0]->accumulate_grad(Tensor(n.inputs[0]->value.shape(), n.grad[0]));
  });
}

Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, a.numel()));
  return scale(sum(a), inv);
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return Var::make(std::move(out), {a}, [](Node& n) {
    n.inputs[0]->accumulate_grad(n.grad.reshaped(n.inputs[0]->value.shape()));
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis == 0) {
    Shape out_shape = s0;
    out_shape[0] = 0;
    for (const auto& p : parts) {
      Shape rest(p.shape().begin() + 1, p.shape().end());
      Shape rest0(s0.begin() + 1, s0.end());
      if (rest != rest0 || p.shape().size() != s0.size())
        throw std::invalid_argument("concat: incompatible shapes " + shape_str(p.shape()) + " and " +
                                    shape_str(s0));
      out_shape[0] += p.dim(0);
    }
    Tensor out(out_shape);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      std::copy(p.value().data(), p.value().data() + p.numel(), out.data() + offset);
      offset += p.numel();
    }
    return Var::make(std::move(out), parts, [](Node& n) {
      std::size_t offset = 0;
      for (auto& in : n.inputs) {
        const std::size_t len = in->value.numel();
        if (in->requires_grad) {
          Tensor g(in->value.shape());
          std::copy(n.grad.data() + offset, n.grad.data() + offset + len, g.data());
          in->accumulate_grad(g);
        }
        offset += len;
      }
    });
  }
  require(axis == 1 && s0.size() == 2, "concat: axis 1 requires 2-D inputs");
  const int rows = s0[0];
  int cols = 0;
  for (const auto& p : parts) {
    require(p.shape().size() == 2 && p.dim(0) == rows, "concat: row mismatch on axis 1");
    cols += p.dim(1);
  }
  Tensor out({rows, cols});
  int c0 = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    for (int r = 0; r < rows; ++r)
      std::copy(p.value().data() + static_cast<std::size_t>(r) * pc,
                p.value().data() + static_cast<std::size_t>(r + 1) * pc,
                out.data() + static_cast<std::size_t>(r) * cols + c0);
    c0 += pc;
  }
  return Var::make(std::move(out), parts, [rows, cols](Node& n) {
    int c0 = 0;
    for (auto& in : n.inputs) {
      const int pc = in->value.dim(1);
      if (in->requires_grad) {
        Tensor g(in->value.shape());
        for (int r = 0; r < rows; ++r)
          std::copy(n.grad.data() + static_cast<std::size_t>(r) * cols + c0,
                    n.grad.data() + static_cast<std::size_t>(r) * cols + c0 + pc,
                    g.data() + static_cast<std::size_t>(r) * pc);
        in->accumulate_grad(g);
      }
      c0 += pc;
    }
  });
}

Var slice0(const Var& a, int begin, int end) {
  require(begin >= 0 && begin <= end && end <= a.dim(0), "slice0: range out of bounds");
  Shape s = a.shape();
  const std::size_t inner = a.numel() / static_cast<std::size_t>(std::max(1, s[0]));
  s[0] = end - begin;
  Tensor out(s);
  std::copy(a.value().data() + begin * inner, a.value().data() + end * inner, out.data());
  return Var::make(std::move(out), {a}, [begin, inner](Node& n) {
    Tensor g(n.inputs[0]->value.shape());
    std::copy(n.grad.data(), n.grad.data() + n.grad.numel(), g.data() + begin * inner);
    n.inputs[0]->accumulate_grad(g);
  });
}

Var transpose(const Var& a) {
  require(a.shape().size() == 2, "transpose: 2-D input required");
  const int r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  mmat(out, c, r) = cmat(a.value(), r, c).transpose();
  return Var::make(std::move(out), {a}, [r, c](Node& n) {
    Tensor g({r, c});
    mmat(g, r, c) = cmat(n.grad, c, r).transpose();
    n.inputs[0]->accumulate_grad(g);
  });
}

Var pad_bottom_right(const Var& a, int rows, int cols) {
  require(a.shape().size() == 3, "pad: (C,H,W) input required");
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  require(rows >= H && cols >= W, "pad: target smaller than input");
  if (rows == H && cols == W) return a;
  Tensor out({C, rows, cols});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(c, y, x) = a.value().at(c, y, x);
  return Var::make(std::move(out), {a}, [C, H, W](Node& n) {
    Tensor g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) g.at(c, y, x) = n.grad.at(c, y, x);
    n.inputs[0]->accumulate_grad(g);
  });
}

Var crop_top_left(const Var& a, int rows, int cols) {
  require(a.shape().size() == 3, "crop: (C,H,W) input required");
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  require(rows <= H && cols <= W, "crop: target larger than input");
  if (rows == H && cols == W) return a;
  Tensor out({C, rows, cols});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) out.at(c, y, x) = a.value().at(c, y, x);
  return Var::make(std::move(out), {a}, [C, H, W, rows, cols](Node& n) {
    Tensor g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) g.at(c, y, x) = n.grad.at(c, y, x);
    n.inputs[0]->accumulate_grad(g);
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes");
  const int n_ = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out({n_, m});
  mmat(out, n_, m).noalias() = cmat(a.value(), n_, k) * cmat(b.value(), k, m);
  return Var::make(std::move(out), {a, b}, [n_, k, m](Node& n) {
    auto G = cmat(n.grad, n_, m);
    if (n.inputs[0]->requires_grad) {
      Tensor g({n_, k});
      mmat(g, n_, k).noalias() = G * cmat(n.inputs[1]->value, k, m).transpose();
      n.inputs[0]->accumulate_grad(g);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor g({k, m});
      mmat(g, k, m).noalias() = cmat(n.inputs[0]->value, n_, k).transpose() * G;
      n.inputs[1]->accumulate_grad(g);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(x.shape().size() == 2 && w.shape().size() == 2 && x.dim(1) == w.dim(0) &&
              b.numel() == static_cast<std::size_t>(w.dim(1)),
          "linear: incompatible shapes");
  const int n_ = x.dim(0), in = x.dim(1), outd = w.dim(1);
  Tensor out({n_, outd});
  auto O = mmat(out, n_, outd);
  O.noalias() = cmat(x.value(), n_, in) * cmat(w.value(), in, outd);
  O.rowwise() += CMapVec(b.value().data(), outd).transpose();
  return Var::make(std::move(out), {x, w, b}, [n_, in, outd](Node& n) {
    auto G = cmat(n.grad, n_, outd);
    if (n.inputs[0]->requires_grad) {
      Tensor g({n_, in});
      mmat(g, n_, in).noalias() = G * cmat(n.inputs[1]->value, in, outd).transpose();
      n.inputs[0]->accumulate_grad(g);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor g({in, outd});
      mmat(g, in, outd).noalias() = cmat(n.inputs[0]->value, n_, in).transpose() * G;
      n.inputs[1]->accumulate_grad(g);
    }
    if (n.inputs[2]->requires_grad) {
      Tensor g(n.inputs[2]->value.shape());
      Eigen::Map<Eigen::VectorXd>(g.data(), outd) = G.colwise().sum().transpose();
      n.inputs[2]->accumulate_grad(g);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require(x.shape().size() == 2 && gamma.numel() == static_cast<std::size_t>(x.dim(1)) &&
              beta.numel() == gamma.numel(),
          "layer_norm: incompatible shapes");
  const int rows = x.dim(0), d = x.dim(1);
  Tensor xhat({rows, d});
  std::vector<double> inv_std(rows);
  Tensor out({rows, d});
  for (int r = 0; r < rows; ++r) {
    const double* row = x.value().data() + static_cast<std::size_t>(r) * d;
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv_std[r];
      xhat[static_cast<std::size_t>(r) * d + j] = h;
      out[static_cast<std::size_t>(r) * d + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return Var::make(std::move(out), {x, gamma, beta},
                   [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                     const Tensor& gm = n.inputs[1]->value;
                     Tensor gx({rows, d}), gg({d}), gb({d});
                     for (int r = 0; r < rows; ++r) {
                       const std::size_t o = static_cast<std::size_t>(r) * d;
                       double m1 = 0, m2 = 0;
                       for (int j = 0; j < d; ++j) {
                         const double dh = n.grad[o + j] * gm[j];
                         m1 += dh;
                         m2 += dh * xhat[o + j];
                         gg[j] += n.grad[o + j] * xhat[o + j];
                         gb[j] += n.grad[o + j];
                       }
                       m1 /= d;
                       m2 /= d;
                       for (int j = 0; j < d; ++j)
                         gx[o + j] = inv_std[r] * (n.grad[o + j] * gm[j] - m1 - xhat[o + j] * m2);
                     }
                     n.inputs[0]->accumulate_grad(gx);
                     n.inputs[1]->accumulate_grad(gg);
                     n.inputs[2]->accumulate_grad(gb);
                   });
}

namespace {

// Column matrix for convolution: (C*k*k, Ho*Wo).
void im2col(const Tensor& x, int k, int stride, int pad, int Ho, int Wo, Tensor& col) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  double* dst = col.data();
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            *dst++ = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x.at(c, iy, ix) : 0.0;
          }
        }
      }
}

void col2im(const Tensor& col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, Tensor& dx) {
  const double* src = col.data();
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < Wo; ++ox, ++src) {
            const int ix = ox * stride - pad + kx;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) dx.at(c, iy, ix) += *src;
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require(x.shape().size() == 3 && w.shape().size() == 4 && w.dim(1) == x.dim(0) && w.dim(2) == w.dim(3) &&
              b.numel() == static_cast<std::size_t>(w.dim(0)),
          "conv2d: incompatible shapes");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: input smaller than kernel");
  const int ckk = C * k * k, hw = Ho * Wo;
  Tensor col({ckk, hw});
  if (k == 1 && stride == 1 && pad == 0) {
    col = x.value().reshaped({ckk, hw});
  } else {
    im2col(x.value(), k, stride, pad, Ho, Wo, col);
  }
  Tensor out({O, Ho, Wo});
  auto Om = mmat(out, O, hw);
  Om.noalias() = cmat(w.value(), O, ckk) * cmat(col, ckk, hw);
  Om.colwise() += CMapVec(b.value().data(), O);
  return Var::make(std::move(out), {x, w, b},
                   [=, col = std::move(col)](Node& n) {
                     auto G = cmat(n.grad, O, hw);
                     if (n.inputs[1]->requires_grad) {
                       Tensor gw(n.inputs[1]->value.shape());
                       mmat(gw, O, ckk).noalias() = G * cmat(col, ckk, hw).transpose();
                       n.inputs[1]->accumulate_grad(gw);
                     }
                     if (n.inputs[2]->requires_grad) {
                       Tensor gb({O});
                       Eigen::Map<Eigen::VectorXd>(gb.data(), O) = G.rowwise().sum();
                       n.inputs[2]->accumulate_grad(gb);
                     }
                     if (n.inputs[0]->requires_grad) {
                       Tensor gcol({ckk, hw});
                       mmat(gcol, ckk, hw).noalias() = cmat(n.inputs[1]->value, O, ckk).transpose() * G;
                       if (k == 1 && stride == 1 && pad == 0) {
                         n.inputs[0]->accumulate_grad(gcol.reshaped({C, H, W}));
                       } else {
                         Tensor gx({C, H, W});
                         col2im(gcol, C, H, W, k, stride, pad, Ho, Wo, gx);
                         n.inputs[0]->accumulate_grad(gx);
                       }
                     }
                   });
}

Var avg_pool(const Var& x, int factor) {
  require(x.shape().size() == 3 && factor >= 1, "avg_pool: (C,H,W) input required");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  require(H % factor == 0 && W % factor == 0, "avg_pool: size not divisible by factor");
  if (factor == 1) return x;
  const int Ho = H / factor, Wo = W / factor;
  const double inv = 1.0 / (factor * factor);
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) out.at(c, y / factor, xx / factor) += x.value().at(c, y, xx) * inv;
  return Var::make(std::move(out), {x}, [=](Node& n) {
    Tensor g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) g.at(c, y, xx) = n.grad.at(c, y / factor, xx / factor) * inv;
    n.inputs[0]->accumulate_grad(g);
  });
}

namespace {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<double> w_hi;
};

AxisTaps bilinear_taps(int in, int out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    t.lo[i] = lo;
    t.hi[i] = hi;
    t.w_hi[i] = src - lo;
  }
  return t;
}

}  // namespace

Var resize_bilinear(const Var& x, int rows, int cols) {
  require(x.shape().size() == 3 && rows > 0 && cols > 0, "resize_bilinear: (C,H,W) input required");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (rows == H && cols == W) return x;
  const AxisTaps ty = bilinear_taps(H, rows), tx = bilinear_taps(W, cols);
  Tensor out({C, rows, cols});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < rows; ++y) {
      const double wy = ty.w_hi[y];
      for (int xx = 0; xx < cols; ++xx) {
        const double wx = tx.w_hi[xx];
        const auto& v = x.value();
        out.at(c, y, xx) = (1 - wy) * ((1 - wx) * v.at(c, ty.lo[y], tx.lo[xx]) + wx * v.at(c, ty.lo[y], tx.hi[xx])) +
                           wy * ((1 - wx) * v.at(c, ty.hi[y], tx.lo[xx]) + wx * v.at(c, ty.hi[y], tx.hi[xx]));
      }
    }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    Tensor g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < rows; ++y) {
        const double wy = ty.w_hi[y];
        for (int xx = 0; xx < cols; ++xx) {
          const double wx = tx.w_hi[xx];
          const double d = n.grad.at(c, y, xx);
          g.at(c, ty.lo[y], tx.lo[xx]) += d * (1 - wy) * (1 - wx);
          g.at(c, ty.lo[y], tx.hi[xx]) += d * (1 - wy) * wx;
          g.at(c, ty.hi[y], tx.lo[xx]) += d * wy * (1 - wx);
          g.at(c, ty.hi[y], tx.hi[xx]) += d * wy * wx;
        }
      }
    n.inputs[0]->accumulate_grad(g);
  });
}

Var affinity_softmax(const Var& q, const Var& k, Affinity kind) {
  require(q.shape().size() == 2 && k.shape().size() == 2 && q.dim(0) == k.dim(0),
          "affinity_softmax: key dimensions differ");
  const int d = q.dim(0), nq = q.dim(1), m = k.dim(1);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  auto Q = cmat(q.value(), d, nq);
  auto K = cmat(k.value(), d, m);
  RowMat logits = (K.transpose() * Q) * inv_sqrt;
  if (kind == Affinity::kNegL2) {
    const Eigen::VectorXd kk = K.colwise().squaredNorm().transpose();
    const Eigen::RowVectorXd qq = Q.colwise().squaredNorm();
    logits *= 2.0;
    logits.colwise() -= kk * inv_sqrt;
    logits.rowwise() -= qq * inv_sqrt;
  }
  Tensor out({m, nq});
  auto P = mmat(out, m, nq);
  for (int j = 0; j < nq; ++j) {
    const double mx = logits.col(j).maxCoeff();
    double s = 0;
    for (int i = 0; i < m; ++i) {
      P(i, j) = std::exp(logits(i, j) - mx);
      s += P(i, j);
    }
    P.col(j) /= s;
  }
  return Var::make(std::move(out), {q, k}, [=](Node& n) {
    auto Pm = cmat(n.value, m, nq);
    auto G = cmat(n.grad, m, nq);
    RowMat dL = Pm.cwiseProduct(G);
    const Eigen::RowVectorXd colsum = dL.colwise().sum();
    dL -= Pm * colsum.asDiagonal();  // P .* (G - sum(P .* G))
    auto Qv = cmat(n.inputs[0]->value, d, nq);
    auto Kv = cmat(n.inputs[1]->value, d, m);
    const double f = kind == Affinity::kNegL2 ? 2.0 * inv_sqrt : inv_sqrt;
    if (n.inputs[0]->requires_grad) {
      Tensor gq({d, nq});
      auto GQ = mmat(gq, d, nq);
      GQ.noalias() = (Kv * dL) * f;
      if (kind == Affinity::kNegL2) GQ -= Qv * dL.colwise().sum().asDiagonal() * f;
      n.inputs[0]->accumulate_grad(gq);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor gk({d, m});
      auto GK = mmat(gk, d, m);
      GK.noalias() = (Qv * dL.transpose()) * f;
      if (kind == Affinity::kNegL2) GK -= Kv * dL.rowwise().sum().asDiagonal() * f;
      n.inputs[1]->accumulate_grad(gk);
    }
  });
}

namespace {

// Softmax rows of (n,m) logits in place honouring an optional permission matrix.
void masked_softmax_rows(RowMat& s, const std::vector<std::uint8_t>* allowed) {
  const int n = static_cast<int>(s.rows()), m = static_cast<int>(s.cols());
  for (int i = 0; i < n; ++i) {
    bool any = true;
    if (allowed) {
      any = false;
      for (int j = 0; j < m; ++j) any = any || (*allowed)[static_cast<std::size_t>(i) * m + j];
    }
    const bool use_mask = allowed && any;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j)
      if (!use_mask || (*allowed)[static_cast<std::size_t>(i) * m + j]) mx = std::max(mx, s(i, j));
    double total = 0;
    for (int j = 0; j < m; ++j) {
      if (use_mask && !(*allowed)[static_cast<std::size_t>(i) * m + j]) {
        s(i, j) = 0;
      } else {
        s(i, j) = std::exp(s(i, j) - mx);
        total += s(i, j);
      }
    }
    s.row(i) /= total;
  }
}

}  // namespace

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads, int head,
                         const std::vector<std::uint8_t>* allowed) {
  const int n = q.dim(0), d = q.dim(1), m = k.dim(0);
  const int dh = d / heads;
  auto Q = cmat(q, n, d).middleCols(head * dh, dh);
  auto K = cmat(k, m, d).middleCols(head * dh, dh);
  RowMat s = (Q * K.transpose()) / std::sqrt(static_cast<double>(dh));
  masked_softmax_rows(s, allowed);
  Tensor out({n, m});
  mmat(out, n, m) = s;
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, const std::vector<std::uint8_t>* allowed) {
  require(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2, "attention: 2-D inputs");
  const int n = q.dim(0), d = q.dim(1), m = k.dim(0), dv = v.dim(1);
  require(k.dim(1) == d && v.dim(0) == m, "attention: shape mismatch");
  require(heads >= 1 && d % heads == 0 && dv % heads == 0, "attention: dims not divisible by heads");
  require(!allowed || allowed->size() == static_cast<std::size_t>(n) * m, "attention: mask size mismatch");
  const int dh = d / heads, dvh = dv / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<RowMat> probs(heads);
  Tensor out({n, dv});
  auto O = mmat(out, n, dv);
  auto Q = cmat(q.value(), n, d);
  auto K = cmat(k.value(), m, d);
  auto V = cmat(v.value(), m, dv);
  for (int h = 0; h < heads; ++h) {
    RowMat s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * inv_sqrt;
    masked_softmax_rows(s, allowed);
    O.middleCols(h * dvh, dvh).noalias() = s * V.middleCols(h * dvh, dvh);
    probs[h] = std::move(s);
  }
  return Var::make(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node& nd) {
    auto G = cmat(nd.grad, n, dv);
    auto Qv = cmat(nd.inputs[0]->value, n, d);
    auto Kv = cmat(nd.inputs[1]->value, m, d);
    auto Vv = cmat(nd.inputs[2]->value, m, dv);
    Tensor gq({n, d}), gk({m, d}), gv({m, dv});
    auto GQ = mmat(gq, n, d);
    auto GK = mmat(gk, m, d);
    auto GV = mmat(gv, m, dv);
    for (int h = 0; h < heads; ++h) {
      const RowMat& P = probs[h];
      auto Gh = G.middleCols(h * dvh, dvh);
      GV.middleCols(h * dvh, dvh).noalias() = P.transpose() * Gh;
      RowMat dP = Gh * Vv.middleCols(h * dvh, dvh).transpose();
      RowMat dS = P.cwiseProduct(dP);
      const Eigen::VectorXd rs = dS.rowwise().sum();
      dS -= rs.asDiagonal() * P;
      GQ.middleCols(h * dh, dh).noalias() = (dS * Kv.middleCols(h * dh, dh)) * inv_sqrt;
      GK.middleCols(h * dh, dh).noalias() = (dS.transpose() * Qv.middleCols(h * dh, dh)) * inv_sqrt;
    }
    nd.inputs[0]->accumulate_grad(gq);
    nd.inputs[1]->accumulate_grad(gk);
    nd.inputs[2]->accumulate_grad(gv);
  });
}

Var weighted_mean(const Var& v, const Var& w) {
  require(v.shape().size() == 2 && w.numel() == static_cast<std::size_t>(v.dim(1)),
          "weighted_mean: shape mismatch");
  const int C = v.dim(0), N = v.dim(1);
  const double total = w.value().sum();
  require(total > 0, "weighted_mean: weights sum to zero");
  Tensor out({C});
  Eigen::Map<Eigen::VectorXd>(out.data(), C) = cmat(v.value(), C, N) * CMapVec(w.value().data(), N) / total;
  return Var::make(std::move(out), {v, w}, [C, N, total](Node& n) {
    const CMapVec g(n.grad.data(), C);
    if (n.inputs[0]->requires_grad) {
      Tensor gv({C, N});
      mmat(gv, C, N).noalias() = g * CMapVec(n.inputs[1]->value.data(), N).transpose() / total;
      n.inputs[0]->accumulate_grad(gv);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor gw(n.inputs[1]->value.shape());
      const CMapVec o(n.value.data(), C);
      auto V = cmat(n.inputs[0]->value, C, N);
      Eigen::Map<Eigen::VectorXd>(gw.data(), N) = (V.transpose() * g).array() - g.dot(o);
      for (double& x : gw.storage()) x /= total;
      n.inputs[1]->accumulate_grad(gw);
    }
  });
}

Var soft_aggregate_probs(const Var& probs) {
  require(probs.shape().size() == 3, "soft_aggregate: (K,H,W) input required");
  const int K = probs.dim(0), H = probs.dim(1), W = probs.dim(2);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor out({K + 1, H, W});
  const double* p = probs.value().data();
  for (std::size_t i = 0; i < hw; ++i) {
    double b = 1.0, s = 0.0;
    for (int k = 0; k < K; ++k) {
      b *= 1.0 - p[k * hw + i];
      s += p[k * hw + i];
    }
    const double total = b + s;
    out[i] = b / total;
    for (int k = 0; k < K; ++k) out[(k + 1) * hw + i] = p[k * hw + i] / total;
  }
  return Var::make(std::move(out), {probs}, [K, H, W, hw](Node& n) {
    const double* p = n.inputs[0]->value.data();
    const double* o = n.value.data();
    const double* g = n.grad.data();
    Tensor gp({K, H, W});
    std::vector<double> dq(K + 1);
    for (std::size_t i = 0; i < hw; ++i) {
      double b = 1.0, s = 0.0;
      for (int k = 0; k < K; ++k) {
        b *= 1.0 - p[k * hw + i];
        s += p[k * hw + i];
      }
      const double total = b + s;
      double dot = 0;
      for (int j = 0; j <= K; ++j) dot += g[j * hw + i] * o[j * hw + i];
      for (int j = 0; j <= K; ++j) dq[j] = (g[j * hw + i] - dot) / total;
      for (int k = 0; k < K; ++k) {
        double others = 1.0;
        for (int j = 0; j < K; ++j)
          if (j != k) others *= 1.0 - p[j * hw + i];
        gp[k * hw + i] = dq[k + 1] - dq[0] * others;
      }
    }
    n.inputs[0]->accumulate_grad(gp);
  });
}

Var soft_aggregate_logits(const Var& logits) { return soft_aggregate_probs(sigmoid(logits)); }

Var segmentation_loss(const Var& probs, const std::vector<int>& labels) {
  require(probs.shape().size() == 3, "segmentation_loss: (K+1,H,W) input required");
  const int C = probs.dim(0);
  const int K = C - 1;
  const std::size_t hw = static_cast<std::size_t>(probs.dim(1)) * probs.dim(2);
  require(labels.size() == hw, "segmentation_loss: label count does not match pixels");
  constexpr double kFloor = 1e-12;
  constexpr double kSmooth = 1.0;
  const double* P = probs.value().data();
  double ce = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    const int l = labels[i];
    if (l < 0 || l > K) throw std::invalid_argument("segmentation_loss: label out of range");
    ce -= std::log(std::max(P[l * hw + i], kFloor));
  }
  ce /= static_cast<double>(hw);
  std::vector<double> inter(K + 1, 0.0), uni(K + 1, 0.0);
  double dice = 0;
  for (int k = 1; k <= K; ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double g = labels[i] == k ? 1.0 : 0.0;
      inter[k] += P[k * hw + i] * g;
      uni[k] += P[k * hw + i] + g;
    }
    dice += 1.0 - (2.0 * inter[k] + kSmooth) / (uni[k] + kSmooth);
  }
  if (K > 0) dice /= K;
  const double loss = 0.5 * ce + 0.5 * dice;
  return Var::make(Tensor({1}, loss), {probs}, [=](Node& n) {
    const double up = n.grad[0];
    const double* P = n.inputs[0]->value.data();
    Tensor gp(n.inputs[0]->value.shape());
    for (std::size_t i = 0; i < hw; ++i) {
      const int l = labels[i];
      const double pl = P[l * hw + i];
      if (pl > kFloor) gp[l * hw + i] -= up * 0.5 / (static_cast<double>(hw) * pl);
    }
    for (int k = 1; k <= K; ++k) {
      const double num = 2.0 * inter[k] + kSmooth, den = uni[k] + kSmooth;
      for (std::size_t i = 0; i < hw; ++i) {
        const double g = labels[i] == k ? 1.0 : 0.0;
        gp[k * hw + i] -= up * 0.5 / K * (2.0 * g * den - num) / (den * den);
      }
    }
    n.inputs[0]->accumulate_grad(gp);
  });
}

}  // namespace vos::ops
