#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <numbers>

#include "support.hpp"
#include "vos/augment.hpp"

using namespace vos;
using testing::TempDir;

namespace {

const std::vector<int> kSizes{3, 5, 7, 9, 11, 13, 15};
const std::vector<double> kAngles{0, 30, 60, 90, 120, 150};

// Distance of (dx, dy) from the line through the origin along (cos a, -sin a), image coordinates.
double line_distance(int dx, int dy, double angle) {
  const double a = angle * std::numbers::pi / 180.0;
  return std::abs(dx * std::sin(a) + dy * std::cos(a));
}

}  // namespace

TEST_CASE("blur kernels are normalized lines through the centre") {
  for (int size : kSizes)
    for (double angle : kAngles) {
      CAPTURE(size);
      CAPTURE(angle);
      const BlurKernel k = make_blur_kernel(size, angle);
      const int r = size / 2;
      CHECK(std::abs(k.weights.sum() - 1.0) < 1e-12);
      CHECK(k.at(r, r) > 0);
      int support = 0;
      for (int row = 0; row < size; ++row)
        for (int col = 0; col < size; ++col) {
          const double w = k.at(row, col);
          if (w == 0) continue;
          ++support;
          CHECK(w == doctest::Approx(1.0 / size).epsilon(1e-14));
          CHECK(line_distance(col - r, row - r, angle) <= 0.5 + 1e-9);
          CHECK(k.at(2 * r - row, 2 * r - col) == w);  // point symmetric
        }
      CHECK(support == size);
    }
  CHECK(make_blur_kernel(5, 0).at(2, 0) > 0);   // horizontal
  CHECK(make_blur_kernel(5, 90).at(0, 2) > 0);  // vertical
  CHECK(make_blur_kernel(5, 45).at(0, 4) > 0);  // up-right diagonal
  CHECK_THROWS(make_blur_kernel(4, 0));
  CHECK_THROWS(make_blur_kernel(5, 180));
}

TEST_CASE("constant images are unchanged by every kernel") {
  for (double level : {0.0, 0.37, 0.8125, 1.0}) {
    const Frame f(20, 17, level);
    for (int size : kSizes)
      for (double angle : kAngles) CHECK(apply_motion_blur(f, make_blur_kernel(size, angle)) == f);
  }
}

TEST_CASE("impulse response equals the kernel") {
  const int n = 31, c = 15;
  Frame f(n, n, 0.0);
  for (int ch = 0; ch < 3; ++ch) f.at(ch, c, c) = 1.0;
  for (int size : kSizes)
    for (double angle : kAngles) {
      const BlurKernel k = make_blur_kernel(size, angle);
      const Frame g = apply_motion_blur(f, k);
      const int r = size / 2;
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < n; ++y)
          for (int x = 0; x < n; ++x) {
            const int dy = y - c, dx = x - c;
            const double expect = (std::abs(dy) <= r && std::abs(dx) <= r) ? k.at(r + dy, r + dx) : 0.0;
            if (dy == 0 && dx == 0)
              CHECK(std::abs(g.at(ch, y, x) - expect) < 1e-15);
            else
              CHECK(g.at(ch, y, x) == expect);
          }
    }
}

TEST_CASE("blur sampling respects its probability") {
  Rng rng(4);
  BlurConfig never{0.0};
  BlurConfig always{1.0};
  int hits = 0;
  for (int i = 0; i < 200; ++i) {
    CHECK_FALSE(sample_blur(rng, never).has_value());
    auto k = sample_blur(rng, always);
    REQUIRE(k.has_value());
    CHECK(k->size % 2 == 1);
    CHECK(k->angle < 180.0);
    if (sample_blur(rng, BlurConfig{}).has_value()) ++hits;
  }
  CHECK(hits > 30);
  CHECK(hits < 95);
  BlurConfig bad;
  bad.size_choices = {4};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("synthetic clips warp image and mask together") {
  Rng rng(9);
  auto [image, mask] = synth_scene(48, 48, 2, rng);
  CHECK(mask.object_ids() == std::vector<int>{1, 2});
  std::vector<Affine> maps;
  const VideoSample v = synth_video(image, mask, 5, AffineJitter{}, rng, &maps);
  REQUIRE(v.frames.size() == 5);
  REQUIRE(maps.size() == 5);
  CHECK(v.frames[0] == image);
  CHECK(*v.masks[0] == mask);
  CHECK_NOTHROW(v.validate());
  for (int t = 1; t < 5; ++t) {
    CHECK(*v.masks[static_cast<std::size_t>(t)] == warp_mask(mask, maps[static_cast<std::size_t>(t)]));
    CHECK(v.frames[static_cast<std::size_t>(t)] == warp_frame(image, maps[static_cast<std::size_t>(t)]));
  }

  Rng a(1), b(1);
  const VideoSample still = synth_video(image, mask, 3, AffineJitter::none(), a);
  for (int t = 0; t < 3; ++t) CHECK(*still.masks[static_cast<std::size_t>(t)] == mask);
  const VideoSample v1 = synth_video(image, mask, 4, AffineJitter{}, b);
  Rng b2(1);
  const VideoSample v2 = synth_video(image, mask, 4, AffineJitter{}, b2);
  CHECK(v1.frames[3] == v2.frames[3]);
}

TEST_CASE("instance filtering and merging") {
  auto rec = [](std::string cls, int y, int value) {
    MaskMap m(4, 4);
    m(y, 0) = m(y, 1) = value;
    m(1, 1) = value;  // shared pixel
    return InstanceRecord{"img", std::move(cls), m};
  };
  const std::vector<InstanceRecord> records{rec("person", 0, 255), rec("chair", 2, 1), rec("dog", 3, 7)};
  const auto kept = filter_and_binarize(records, default_allowed_classes());
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].class_name == "person");
  CHECK(kept[1].class_name == "dog");
  CHECK(kept[0].binary_mask(0, 0) == 1);
  CHECK(kept[1].binary_mask(3, 1) == 1);

  const MaskMap merged = merge_masks(kept);
  CHECK(merged(0, 0) == 1);
  CHECK(merged(3, 0) == 2);
  CHECK(merged(1, 1) == 2);  // later record wins
  CHECK(merged(2, 0) == 0);
  CHECK(merged.object_ids() == std::vector<int>{1, 2});
  CHECK(filter_and_binarize(records, {"table"}).empty());
  CHECK_THROWS_AS(merge_masks({}), DataError);
}

TEST_CASE("crops stay aligned") {
  Rng rng(2);
  Frame f(10, 12);
  MaskMap m(10, 12);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 12; ++x) {
      f.at(0, y, x) = (y * 12 + x) / 120.0;
      m(y, x) = (y * 12 + x) % 5;
    }
  for (int i = 0; i < 20; ++i) {
    auto [cf, cm] = random_crop_pair(f, m, 6, rng);
    REQUIRE(cf.height() == 6);
    REQUIRE(cm.width() == 6);
    const int idx = static_cast<int>(std::lround(cf.at(0, 0, 0) * 120.0));
    const int y0 = idx / 12, x0 = idx % 12;
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        CHECK(cm(y, x) == m(y0 + y, x0 + x));
        CHECK(cf.at(0, y, x) == f.at(0, y0 + y, x0 + x));
      }
  }
  auto [up, upm] = random_crop_pair(f, m, 16, rng);
  CHECK(up.height() == 16);
  CHECK(upm.height() == 16);
}

TEST_CASE("instance records load from disk with sidecar names") {
  TempDir dir;
  MaskMap a(3, 3), b(3, 3);
  a(0, 0) = 1;
  b(2, 2) = 9;
  save_mask(a, dir / "img1" / "1_person.png");
  save_mask(b, dir / "img1" / "2_lamp.png");
  save_mask(b, dir / "img2" / "1_cat.png");
  {
    std::ofstream os(dir / "classes.tsv");
    os << "img1\t2\tdog\n";
  }
  const auto records = load_instance_records(dir.path);
  REQUIRE(records.size() == 3);
  CHECK(records[0].class_name == "person");
  CHECK(records[1].class_name == "dog");
  CHECK(records[2].image_id == "img2");
  CHECK(records[1].binary_mask(2, 2) == 9);
  CHECK_THROWS_AS(load_instance_records(dir / "missing"), DataError);
}
