#include "vos/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace vos {

namespace {

double uniform(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

void BlurConfig::validate() const {
  if (probability < 0 || probability > 1) throw std::invalid_argument("blur probability must lie in [0,1]");
  if (size_choices.empty()) throw std::invalid_argument("blur size choices must not be empty");
  for (int s : size_choices)
    if (s < 3 || s % 2 == 0) throw std::invalid_argument("blur sizes must be odd and >= 3, got " + std::to_string(s));
  if (angle_max <= 0 || angle_max > 180) throw std::invalid_argument("blur angle_max must lie in (0,180]");
}

void AffineJitter::validate() const {
  if (max_rotation < 0 || max_shear < 0 || max_scale_delta < 0 || max_translate < 0)
    throw std::invalid_argument("affine jitter bounds must be non-negative");
}

BlurKernel make_blur_kernel(int size, double angle) {
  if (size < 1 || size % 2 == 0) throw std::invalid_argument("blur kernel size must be odd and positive");
  if (angle < 0 || angle >= 180) throw std::invalid_argument("blur angle must lie in [0,180)");
  BlurKernel k{size, angle, Tensor({size, size})};
  const int r = size / 2;
  const double c = std::cos(radians(angle)), s = std::sin(radians(angle));
  // Direction (c, -s) in image coordinates (rows grow downwards). Step along the
  // dominant axis so the line has exactly `size` pixels.
  for (int i = -r; i <= r; ++i) {
    int dx, dy;
    if (std::abs(c) >= std::abs(s)) {
      dx = i;
      dy = static_cast<int>(std::round(-i * s / c));
    } else {
      dy = i;
      dx = static_cast<int>(std::round(-i * c / s));
    }
    k.weights[static_cast<std::size_t>(r + dy) * size + (r + dx)] = 1.0;
  }
  const double total = k.weights.sum();
  for (double& w : k.weights.storage()) w /= total;
  return k;
}

Frame apply_motion_blur(const Frame& frame, const BlurKernel& kernel) {
  const int H = frame.height(), W = frame.width();
  if (kernel.size > H || kernel.size > W)
    throw std::invalid_argument("blur kernel of size " + std::to_string(kernel.size) + " is larger than the image");
  if (kernel.size == 1) return frame;
  const int r = kernel.size / 2;
  struct Tap {
    int dy, dx;
    double w;
  };
  std::vector<Tap> taps;
  for (int a = 0; a < kernel.size; ++a)
    for (int b = 0; b < kernel.size; ++b)
      if (kernel.at(a, b) != 0.0) taps.push_back({a - r, b - r, kernel.at(a, b)});
  Frame out(H, W);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        // Offsets from the centre pixel keep flat regions exactly unchanged.
        const double ref = frame.at(c, y, x);
        double acc = 0;
        for (const Tap& t : taps) acc += t.w * (frame.at(c, reflect101(y - t.dy, H), reflect101(x - t.dx, W)) - ref);
        acc += ref;
        out.at(c, y, x) = std::clamp(acc, 0.0, 1.0);
      }
  return out;
}

std::optional<BlurKernel> sample_blur(Rng& rng, const BlurConfig& config) {
  config.validate();
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (!(u < config.probability)) return std::nullopt;
  const auto idx = std::uniform_int_distribution<std::size_t>(0, config.size_choices.size() - 1)(rng);
  double angle = uniform(rng, 0.0, config.angle_max);
  if (angle >= 180.0) angle = 0.0;
  return make_blur_kernel(config.size_choices[idx], angle);
}

Affine sample_affine_step(Rng& rng, const AffineJitter& jitter, int height, int width) {
  const double rot = radians(uniform(rng, -jitter.max_rotation, jitter.max_rotation));
  const double shear = radians(uniform(rng, -jitter.max_shear, jitter.max_shear));
  const double scale = uniform(rng, 1.0 - jitter.max_scale_delta, 1.0 + jitter.max_scale_delta);
  const double tx = uniform(rng, -jitter.max_translate, jitter.max_translate) * width;
  const double ty = uniform(rng, -jitter.max_translate, jitter.max_translate) * height;
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  const double cr = std::cos(rot), sr = std::sin(rot), sh = std::tan(shear);
  // Linear part: scale * R * Shear.
  const double a = scale * cr, b = scale * (cr * sh - sr);
  const double c = scale * sr, d = scale * (sr * sh + cr);
  return Affine{{a, b, cx + tx - (a * cx + b * cy), c, d, cy + ty - (c * cx + d * cy)}};
}

VideoSample synth_video(const Frame& image, const MaskMap& mask, int n_frames, const AffineJitter& jitter, Rng& rng,
                        std::vector<Affine>* transforms) {
  if (n_frames < 1) throw std::invalid_argument("synth_video needs at least one frame");
  if (mask.height() != image.height() || mask.width() != image.width())
    throw DataError("mask does not match image dimensions");
  jitter.validate();
  VideoSample v;
  v.id = "synthetic";
  v.object_ids = mask.object_ids();
  v.frames.push_back(image);
  v.masks.emplace_back(mask);
  v.frame_names.push_back("00000");
  Affine total = Affine::identity();
  if (transforms) transforms->assign(1, total);
  for (int t = 1; t < n_frames; ++t) {
    total = total.then(sample_affine_step(rng, jitter, image.height(), image.width()));
    v.frames.push_back(warp_frame(image, total));
    v.masks.emplace_back(warp_mask(mask, total));
    char name[16];
    std::snprintf(name, sizeof(name), "%05d", t);
    v.frame_names.emplace_back(name);
    if (transforms) transforms->push_back(total);
  }
  return v;
}

std::pair<Frame, MaskMap> synth_scene(int height, int width, int n_objects, Rng& rng) {
  if (height < 8 || width < 8 || n_objects < 0) throw std::invalid_argument("synth_scene: bad size or object count");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor px({3, height, width});
  // Low-frequency background: sum of a few random plane waves per channel.
  for (int c = 0; c < 3; ++c) {
    const double base = 0.25 + 0.5 * u(rng);
    double fx[3], fy[3], ph[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = (u(rng) - 0.5) * 0.4;
      fy[k] = (u(rng) - 0.5) * 0.4;
      ph[k] = u(rng) * 2 * std::numbers::pi;
    }
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double v = base;
        for (int k = 0; k < 3; ++k) v += 0.08 * std::sin(fx[k] * x + fy[k] * y + ph[k]);
        px.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
  }
  MaskMap mask(height, width);
  for (int k = 1; k <= n_objects; ++k) {
    const double cy = height * (0.25 + 0.5 * u(rng)), cx = width * (0.25 + 0.5 * u(rng));
    const double ry = height * (0.12 + 0.12 * u(rng)), rx = width * (0.12 + 0.12 * u(rng));
    const bool ellipse = u(rng) < 0.5;
    double color[3];
    for (double& c : color) c = u(rng) < 0.5 ? 0.05 + 0.2 * u(rng) : 0.75 + 0.2 * u(rng);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        mask(y, x) = k;
        for (int c = 0; c < 3; ++c) px.at(c, y, x) = color[c];
      }
  }
  return {Frame(std::move(px)), std::move(mask)};
}

std::vector<InstanceRecord> filter_and_binarize(const std::vector<InstanceRecord>& records,
                                                const std::set<std::string>& allowed_classes) {
  std::vector<InstanceRecord> out;
  for (const auto& r : records) {
    if (!allowed_classes.count(r.class_name)) continue;
    InstanceRecord b = r;
    for (int& l : b.binary_mask.labels()) l = l != 0 ? 1 : 0;
    out.push_back(std::move(b));
  }
  return out;
}

MaskMap merge_masks(const std::vector<InstanceRecord>& records) {
  if (records.empty()) throw DataError("merge_masks needs at least one record");
  const int H = records[0].binary_mask.height(), W = records[0].binary_mask.width();
  MaskMap out(H, W);
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& m = records[k].binary_mask;
    if (m.height() != H || m.width() != W)
      throw DataError("instance masks of image '" + records[k].image_id + "' differ in size");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m.labels()[i] != 0) out.labels()[i] = static_cast<int>(k + 1);
  }
  return out;
}

const std::set<std::string>& default_allowed_classes() {
  static const std::set<std::string> classes{"person",   "dog",   "cat",     "horse", "sheep",   "cow",
                                             "elephant", "bear",  "zebra",   "giraffe", "bird", "bicycle",
                                             "car",      "motorcycle", "bus", "truck", "boat"};
  return classes;
}

namespace {

std::pair<int, int> upscaled_size(int H, int W, int crop) {
  const int shorter = std::min(H, W);
  if (shorter >= crop) return {H, W};
  const double s = static_cast<double>(crop) / shorter;
  return {std::max(crop, static_cast<int>(std::lround(H * s))), std::max(crop, static_cast<int>(std::lround(W * s)))};
}

Frame crop_frame(const Frame& f, int y0, int x0, int crop) {
  Frame out(crop, crop);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x) out.at(c, y, x) = f.at(c, y0 + y, x0 + x);
  return out;
}

MaskMap crop_mask(const MaskMap& m, int y0, int x0, int crop) {
  MaskMap out(crop, crop);
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x) out(y, x) = m(y0 + y, x0 + x);
  return out;
}

}  // namespace

void random_crop_clip(std::vector<Frame>& frames, std::vector<MaskMap>& masks, int crop, Rng& rng) {
  if (frames.empty() || frames.size() != masks.size()) throw std::invalid_argument("crop: clip is empty or unaligned");
  if (crop < 1) throw std::invalid_argument("crop size must be positive");
  const auto [H, W] = upscaled_size(frames[0].height(), frames[0].width(), crop);
  const int y0 = std::uniform_int_distribution<int>(0, H - crop)(rng);
  const int x0 = std::uniform_int_distribution<int>(0, W - crop)(rng);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (H != frames[i].height() || W != frames[i].width()) {
      frames[i] = resize_frame(frames[i], H, W);
      masks[i] = resize_nearest(masks[i], H, W);
    }
    frames[i] = crop_frame(frames[i], y0, x0, crop);
    masks[i] = crop_mask(masks[i], y0, x0, crop);
  }
}

std::pair<Frame, MaskMap> random_crop_pair(const Frame& frame, const MaskMap& mask, int crop, Rng& rng) {
  if (mask.height() != frame.height() || mask.width() != frame.width())
    throw DataError("mask does not match frame dimensions");
  std::vector<Frame> f{frame};
  std::vector<MaskMap> m{mask};
  random_crop_clip(f, m, crop, rng);
  return {std::move(f[0]), std::move(m[0])};
}

std::vector<InstanceRecord> load_instance_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("instance record directory not found: " + dir.string());
  std::map<std::pair<std::string, int>, std::string> sidecar;
  if (std::ifstream in(dir / "classes.tsv"); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string image_id, k, name;
      if (!std::getline(ls, image_id, '\t') || !std::getline(ls, k, '\t') || !std::getline(ls, name))
        throw DataError("malformed classes.tsv line: " + line);
      sidecar[{image_id, std::stoi(k)}] = name;
    }
  }
  std::vector<std::string> images;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) images.push_back(e.path().filename().string());
  std::sort(images.begin(), images.end());
  std::vector<InstanceRecord> records;
  for (const auto& image_id : images) {
    std::vector<std::pair<int, fs::path>> files;
    for (const auto& e : fs::directory_iterator(dir / image_id)) {
      if (!e.is_regular_file() || e.path().extension() != ".png") continue;
      const std::string stem = e.path().stem().string();
      const auto us = stem.find('_');
      if (us == std::string::npos || us == 0) throw DataError("record file name must be <k>_<class>.png: " + stem);
      files.emplace_back(std::stoi(stem.substr(0, us)), e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& [k, path] : files) {
      const std::string stem = path.stem().string();
      std::string name = stem.substr(stem.find('_') + 1);
      if (auto it = sidecar.find({image_id, k}); it != sidecar.end()) name = it->second;
      records.push_back({image_id, name, load_mask(path)});
    }
  }
  return records;
}

}  // namespace vos
