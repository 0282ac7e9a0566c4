#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vos/data_io.hpp"

namespace vos {

struct BinaryMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMap() = default;
  BinaryMap(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}
  static BinaryMap of(const MaskMap& mask, int object_id);

  std::uint8_t operator()(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& operator()(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
};

/// |a & b| / |a | b|; 1 when both are empty.
double jaccard(const BinaryMap& pred, const BinaryMap& gt);

/// Foreground pixels with a 4-neighbour that is background or outside the image.
BinaryMap boundary_map(const BinaryMap& mask);

/// ceil(0.008 * image diagonal).
int default_boundary_tolerance(int height, int width);

/// Contour F-measure: boundary pixels match when within Euclidean distance `tolerance`.
/// tolerance < 0 selects default_boundary_tolerance.
double boundary_f(const BinaryMap& pred, const BinaryMap& gt, int tolerance = -1);

struct ObjectScore {
  std::string video;
  int object = 0;
  double mean_j = 0;
  double mean_f = 0;
  int frames = 0;
};

struct MetricReport {
  std::vector<ObjectScore> objects;  // sorted by (video, object)
  double j = 0;
  double f = 0;
  double j_and_f = 0;

  /// Global means over (video, object) pairs.
  static MetricReport aggregate(std::vector<ObjectScore> objects);
  /// Report holding only global values, with J&F = (J+F)/2.
  static MetricReport from_global(double j, double f);
};

/// Rounds to `decimals` places; ties resolve half-to-even on the exact binary value.
double round_half_even(double x, int decimals = 4);
std::string format_score(double x, int decimals = 4);

/// Scores predicted masks `<pred>/<video>/<frame>.png` against ground truth. Both roots may
/// be a dataset root containing Annotations/ or the directory of video folders itself.
MetricReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

/// Scores one video given in-memory masks. gt entries may be absent (unannotated frames).
std::vector<ObjectScore> evaluate_video(const std::string& video, const std::vector<MaskMap>& pred,
                                        const std::vector<std::optional<MaskMap>>& gt);

/// CSV: video,object,mean_J,mean_F then a footer row "global,J=..,F=..,J&F=.." at full precision.
void write_metric_csv(const MetricReport& report, const std::filesystem::path& path);

}  // namespace vos
