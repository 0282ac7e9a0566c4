#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "vos/tensor.hpp"

namespace vos {

namespace fs = std::filesystem;

/// Raised for malformed or contract-violating inputs (missing files, bad formats).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-frame label map: 0 = background, k = object k.
class MaskMap {
 public:
  MaskMap() = default;
  MaskMap(int height, int width, int fill = 0);
  MaskMap(int height, int width, std::vector<int> labels);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return labels_.size(); }
  int& operator()(int y, int x) { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  int operator()(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  const std::vector<int>& labels() const { return labels_; }
  std::vector<int>& labels() { return labels_; }

  /// Sorted distinct nonzero labels.
  std::vector<int> object_ids() const;
  bool operator==(const MaskMap& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<int> labels_;
};

/// RGB frame stored as a (3,H,W) tensor with intensities in [0,1].
class Frame {
 public:
  Frame() = default;
  explicit Frame(Tensor pixels);
  Frame(int height, int width, double fill = 0.0);

  int height() const { return pixels_.dim(1); }
  int width() const { return pixels_.dim(2); }
  const Tensor& pixels() const { return pixels_; }
  Tensor& pixels() { return pixels_; }
  double& at(int c, int y, int x) { return pixels_.at(c, y, x); }
  double at(int c, int y, int x) const { return pixels_.at(c, y, x); }
  bool operator==(const Frame& other) const { return pixels_.storage() == other.pixels_.storage() &&
                                                     pixels_.shape() == other.pixels_.shape(); }

 private:
  Tensor pixels_;
};

/// Per-object soft maps (C,H,W). With a background channel, channel 0 is
/// background and channel k is the k-th entry of the owning object list.
struct ProbStack {
  Tensor probs;
  bool has_background = false;

  int channels() const { return probs.dim(0); }
  int height() const { return probs.dim(1); }
  int width() const { return probs.dim(2); }
  int object_count() const { return channels() - (has_background ? 1 : 0); }
};

struct VideoSample {
  std::string id;
  std::vector<Frame> frames;
  std::vector<std::optional<MaskMap>> masks;
  std::vector<int> object_ids;  // sorted
  std::vector<std::string> frame_names;  // file stems, used when writing results

  /// Throws DataError when frame/mask shapes or labels are inconsistent.
  void validate() const;
};

struct SequenceEntry {
  std::string video;
  int frame_count = 0;
  int object_count = 0;
  std::vector<int> object_ids;
  bool missing_first_annotation = false;
};

/// Where images and annotations live under a dataset root.
enum class LayoutFlavor {
  kCanonical,   // <root>/JPEGImages/<video>, <root>/Annotations/<video>
  kDavis2017,   // <root>/JPEGImages/480p/<video>
  kSplit,       // <root>/<split>/JPEGImages/<video> (YouTubeVOS, MOSE)
};

struct DatasetLayout {
  fs::path images;
  fs::path annotations;

  static DatasetLayout resolve(const fs::path& root, LayoutFlavor flavor = LayoutFlavor::kCanonical,
                               const std::string& split = "train");
};

LayoutFlavor parse_layout_flavor(const std::string& name);

struct DatasetIndex {
  fs::path root;
  DatasetLayout layout;
  std::vector<SequenceEntry> sequences;

  bool operator==(const DatasetIndex& o) const;
};

DatasetIndex scan_dataset(const fs::path& root, LayoutFlavor flavor = LayoutFlavor::kCanonical,
                          const std::string& split = "train");

/// Loads every frame and any present annotation of one video.
VideoSample load_video(const DatasetIndex& index, const std::string& video);

/// Image files of a video directory in lexicographic order.
std::vector<fs::path> list_frame_files(const fs::path& dir);

MaskMap load_mask(const fs::path& path);
void save_mask(const MaskMap& mask, const fs::path& path);

Frame load_frame(const fs::path& path);
/// 8-bit RGB PNG.
void save_frame(const Frame& frame, const fs::path& path);

/// The fixed 256-entry palette embedded in written masks (RGB triplets).
const std::vector<std::uint8_t>& default_palette();

/// One binary channel per entry of `object_ids`; no background channel.
ProbStack mask_to_binary_stack(const MaskMap& mask, const std::vector<int>& object_ids);

}  // namespace vos
