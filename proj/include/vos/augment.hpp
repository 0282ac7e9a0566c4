#pragma once

#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vos/data_io.hpp"
#include "vos/image_ops.hpp"

namespace vos {

using Rng = std::mt19937_64;

/// Normalized line point-spread function.
struct BlurKernel {
  int size = 1;
  double angle = 0.0;  // degrees in [0, 180)
  Tensor weights;      // (size, size)

  double at(int row, int col) const { return weights[static_cast<std::size_t>(row) * size + col]; }
};

struct BlurConfig {
  double probability = 0.3;
  std::vector<int> size_choices{3, 5, 7, 9, 11, 13, 15};
  double angle_max = 180.0;  // angles drawn from [0, angle_max)

  void validate() const;
};

struct AffineJitter {
  double max_rotation = 15.0;    // degrees
  double max_shear = 10.0;       // degrees
  double max_scale_delta = 0.1;  // fraction
  double max_translate = 0.1;    // fraction of image size

  void validate() const;
  static AffineJitter none() { return {0, 0, 0, 0}; }
};

struct InstanceRecord {
  std::string image_id;
  std::string class_name;
  MaskMap binary_mask;
};

/// Line of `size` pixels through the kernel centre at `angle` degrees
/// (counter-clockwise from the +x axis), weights summing to one.
BlurKernel make_blur_kernel(int size, double angle);

/// Per-channel 2-D convolution with reflect-101 borders, clamped to [0,1].
Frame apply_motion_blur(const Frame& frame, const BlurKernel& kernel);

std::optional<BlurKernel> sample_blur(Rng& rng, const BlurConfig& config);

/// One random incremental affine step about the image centre.
Affine sample_affine_step(Rng& rng, const AffineJitter& jitter, int height, int width);

/// Short clip from a static pair. Frame t applies the cumulative product of t
/// random steps. `transforms`, when given, receives the per-frame cumulative maps.
VideoSample synth_video(const Frame& image, const MaskMap& mask, int n_frames, const AffineJitter& jitter, Rng& rng,
                        std::vector<Affine>* transforms = nullptr);

/// Random smooth-textured background with `n_objects` coloured ellipses and rectangles
/// labelled 1..n_objects. Used for pretraining pools and self-checks.
std::pair<Frame, MaskMap> synth_scene(int height, int width, int n_objects, Rng& rng);

std::vector<InstanceRecord> filter_and_binarize(const std::vector<InstanceRecord>& records,
                                                const std::set<std::string>& allowed_classes);

/// Record k (1-based, input order) becomes label k; later records win overlaps.
MaskMap merge_masks(const std::vector<InstanceRecord>& records);

const std::set<std::string>& default_allowed_classes();

/// Up-scales inputs whose shorter side is below `crop`, then cuts an aligned
/// crop×crop window.
std::pair<Frame, MaskMap> random_crop_pair(const Frame& frame, const MaskMap& mask, int crop, Rng& rng);

/// Same window for every frame of a clip.
void random_crop_clip(std::vector<Frame>& frames, std::vector<MaskMap>& masks, int crop, Rng& rng);

/// Reads `<dir>/<image_id>/<k>_<class>.png`. A `classes.tsv` sidecar
/// (image_id, k, class name per line) overrides class names parsed from filenames.
std::vector<InstanceRecord> load_instance_records(const fs::path& dir);

}  // namespace vos
