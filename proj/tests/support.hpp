#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vos/autograd.hpp"
#include "vos/data_io.hpp"

namespace testing {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag = "vos") {
    static int counter = 0;
    std::random_device rd;
    path = fs::temp_directory_path() / (tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  fs::path operator/(const std::string& p) const { return path / p; }
};

inline vos::Tensor random_tensor(vos::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  vos::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

/// Compares reverse-mode gradients of the scalar `f()` with central differences
/// for up to `samples` entries of every leaf. Returns the worst relative error
/// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-5) over leaves; the
/// floor covers directions with an exactly zero gradient (softmax shift invariance).
inline double gradient_error(const std::function<vos::Var()>& f, std::vector<vos::Var> leaves, int samples = 24,
                             double h = 1e-6, std::uint64_t seed = 11) {
  for (auto& l : leaves) l.zero_grad();
  vos::Var out = f();
  out.backward();
  std::vector<vos::Tensor> analytic;
  for (auto& l : leaves)
    analytic.push_back(l.grad().numel() == l.numel() ? l.grad() : vos::Tensor(l.shape()));
  std::mt19937_64 rng(seed);
  double worst = 0;
  vos::NoGradGuard guard;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    vos::Tensor& value = leaves[li].mutable_value();
    std::vector<std::size_t> idx(value.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<int>(idx.size()) > samples) idx.resize(static_cast<std::size_t>(samples));
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i : idx) {
      const double orig = value[i];
      value[i] = orig + h;
      const double fp = f().value()[0];
      value[i] = orig - h;
      const double fm = f().value()[0];
      value[i] = orig;
      const double num = (fp - fm) / (2 * h);
      const double an = analytic[li][i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-5});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

/// Random-weighted sum turns any tensor output into a scalar with a generic gradient.
inline vos::Var probe(const vos::Var& y, std::uint64_t seed = 5);

/// Writes an 8-bit palette PNG with libpng directly (independent of save_mask).
inline void write_indexed_png(const fs::path& path, int h, int w, const std::vector<std::uint8_t>& idx) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_PALETTE,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> pal(256);
  for (int i = 0; i < 256; ++i) pal[i] = {static_cast<png_byte>(i), static_cast<png_byte>(255 - i), 7};
  png_set_PLTE(png, info, pal.data(), 256);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(idx.data() + static_cast<std::size_t>(y) * w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace testing

#include "vos/ops.hpp"

inline vos::Var testing::probe(const vos::Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  vos::Var w(random_tensor(y.shape(), rng));
  return vos::ops::sum(vos::ops::mul(y, w));
}
