#include "vos/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

namespace vos {

BinaryMap BinaryMap::of(const MaskMap& mask, int object_id) {
  BinaryMap out(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) out.bits[i] = mask.labels()[i] == object_id ? 1 : 0;
  return out;
}

std::size_t BinaryMap::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

void check_same_size(const BinaryMap& a, const BinaryMap& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("metric inputs differ in size: " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width));
}

// Marks every pixel within Euclidean distance `r` of a set pixel.
BinaryMap dilate_disk(const BinaryMap& m, int r) {
  std::vector<std::pair<int, int>> offsets;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) offsets.emplace_back(dy, dx);
  BinaryMap out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m(y, x)) continue;
      for (auto [dy, dx] : offsets) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < m.height && xx >= 0 && xx < m.width) out(yy, xx) = 1;
      }
    }
  return out;
}

std::size_t count_and(const BinaryMap& a, const BinaryMap& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) n += (a.bits[i] && b.bits[i]) ? 1 : 0;
  return n;
}

}  // namespace

double jaccard(const BinaryMap& pred, const BinaryMap& gt) {
  check_same_size(pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += (pred.bits[i] && gt.bits[i]) ? 1 : 0;
    uni += (pred.bits[i] || gt.bits[i]) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMap boundary_map(const BinaryMap& m) {
  BinaryMap out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1 || !m(y - 1, x) ||
                        !m(y + 1, x) || !m(y, x - 1) || !m(y, x + 1);
      out(y, x) = edge ? 1 : 0;
    }
  return out;
}

int default_boundary_tolerance(int height, int width) {
  return static_cast<int>(std::ceil(0.008 * std::hypot(static_cast<double>(height), static_cast<double>(width))));
}

double boundary_f(const BinaryMap& pred, const BinaryMap& gt, int tolerance) {
  check_same_size(pred, gt);
  if (tolerance < 0) tolerance = default_boundary_tolerance(pred.height, pred.width);
  const BinaryMap bp = boundary_map(pred), bg = boundary_map(gt);
  const std::size_t np = bp.count(), ng = bg.count();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const double precision = static_cast<double>(count_and(bp, dilate_disk(bg, tolerance))) / static_cast<double>(np);
  const double recall = static_cast<double>(count_and(bg, dilate_disk(bp, tolerance))) / static_cast<double>(ng);
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

MetricReport MetricReport::aggregate(std::vector<ObjectScore> objects) {
  std::sort(objects.begin(), objects.end(), [](const ObjectScore& a, const ObjectScore& b) {
    return std::tie(a.video, a.object) < std::tie(b.video, b.object);
  });
  MetricReport r;
  r.objects = std::move(objects);
  if (r.objects.empty()) throw DataError("no objects to evaluate");
  double sj = 0, sf = 0;
  for (const auto& o : r.objects) {
    sj += o.mean_j;
    sf += o.mean_f;
  }
  const double n = static_cast<double>(r.objects.size());
  r.j = sj / n;
  r.f = sf / n;
  r.j_and_f = (r.j + r.f) / 2;
  return r;
}

MetricReport MetricReport::from_global(double j, double f) {
  MetricReport r;
  r.j = j;
  r.f = f;
  r.j_and_f = (j + f) / 2;
  return r;
}

double round_half_even(double x, int decimals) { return std::strtod(format_score(x, decimals).c_str(), nullptr); }

std::string format_score(double x, int decimals) {
  // printf rounds the exact binary value to nearest, ties to even.
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, x);
  return buf;
}

std::vector<ObjectScore> evaluate_video(const std::string& video, const std::vector<MaskMap>& pred,
                                        const std::vector<std::optional<MaskMap>>& gt) {
  if (pred.size() != gt.size()) throw DataError("video '" + video + "': prediction and ground truth frame counts differ");
  std::map<int, std::size_t> first_seen;
  for (std::size_t t = 0; t < gt.size(); ++t)
    if (gt[t])
      for (int id : gt[t]->object_ids()) first_seen.emplace(id, t);
  std::vector<ObjectScore> out;
  for (auto [id, t0] : first_seen) {
    ObjectScore s{video, id, 0, 0, 0};
    for (std::size_t t = t0 + 1; t < gt.size(); ++t) {
      if (!gt[t]) continue;
      const BinaryMap g = BinaryMap::of(*gt[t], id), p = BinaryMap::of(pred[t], id);
      s.mean_j += jaccard(p, g);
      s.mean_f += boundary_f(p, g);
      ++s.frames;
    }
    if (s.frames == 0) continue;
    s.mean_j /= s.frames;
    s.mean_f /= s.frames;
    out.push_back(s);
  }
  return out;
}

namespace {

fs::path annotation_root(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("directory not found: " + root.string());
  if (fs::is_directory(root / "Annotations")) return root / "Annotations";
  return root;
}

std::vector<fs::path> mask_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

MetricReport evaluate(const fs::path& pred_dir, const fs::path& gt_dir) {
  const fs::path gt_root = annotation_root(gt_dir), pred_root = annotation_root(pred_dir);
  std::vector<std::string> videos;
  for (const auto& e : fs::directory_iterator(gt_root))
    if (e.is_directory()) videos.push_back(e.path().filename().string());
  std::sort(videos.begin(), videos.end());
  if (videos.empty()) throw DataError("no ground-truth videos under " + gt_root.string());

  std::vector<std::string> gaps;
  std::vector<ObjectScore> scores;
  for (const auto& v : videos) {
    const auto files = mask_files(gt_root / v);
    std::vector<MaskMap> pred;
    std::vector<std::optional<MaskMap>> gt;
    bool complete = true;
    for (const auto& f : files) {
      const fs::path p = pred_root / v / f.filename();
      if (!fs::exists(p)) {
        gaps.push_back(v + "/" + f.filename().string());
        complete = false;
        continue;
      }
      gt.emplace_back(load_mask(f));
      pred.push_back(load_mask(p));
      if (pred.back().height() != gt.back()->height() || pred.back().width() != gt.back()->width())
        throw DataError("prediction " + p.string() + " differs in size from ground truth");
    }
    if (complete) {
      auto s = evaluate_video(v, pred, gt);
      scores.insert(scores.end(), s.begin(), s.end());
    }
  }
  if (!gaps.empty()) {
    std::string msg = "missing predicted frames (" + std::to_string(gaps.size()) + "):";
    for (std::size_t i = 0; i < gaps.size() && i < 20; ++i) msg += " " + gaps[i];
    if (gaps.size() > 20) msg += " ...";
    throw DataError(msg);
  }
  return MetricReport::aggregate(std::move(scores));
}

void write_metric_csv(const MetricReport& report, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  char buf[256];
  os << "video,object,mean_J,mean_F\n";
  for (const auto& o : report.objects) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g\n", o.video.c_str(), o.object, o.mean_j, o.mean_f);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "global,J=%.17g,F=%.17g,J&F=%.17g\n", report.j, report.f, report.j_and_f);
  os << buf;
}

}  // namespace vos
