#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <jpeglib.h>

#include <fstream>

#include "support.hpp"
#include "vos/data_io.hpp"
#include "vos/image_ops.hpp"

using namespace vos;
using testing::TempDir;

namespace {

void write_jpeg(const fs::path& path, int h, int w, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  jpeg_stdio_dest(&cinfo, fp);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, 100, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int x = 0; x < w; ++x) {
    row[3 * x] = r;
    row[3 * x + 1] = g;
    row[3 * x + 2] = b;
  }
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW p = row.data();
    jpeg_write_scanlines(&cinfo, &p, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(fp);
}

// Two videos: "a" with objects {1,2} (object 2 only from frame 1 on), "b" unannotated.
void make_fixture(const fs::path& root) {
  for (int t = 0; t < 3; ++t) {
    char name[16];
    std::snprintf(name, sizeof name, "%05d", t);
    Frame f(6, 8, 0.1 * t);
    save_frame(f, root / "JPEGImages" / "a" / (std::string(name) + ".png"));
    MaskMap m(6, 8);
    m(1, 1) = 1;
    if (t > 0) m(4, 5) = 2;
    save_mask(m, root / "Annotations" / "a" / (std::string(name) + ".png"));
  }
  save_frame(Frame(4, 4, 0.5), root / "JPEGImages" / "b" / "00000.png");
}

}  // namespace

TEST_CASE("mask round trip keeps labels and palette") {
  TempDir dir;
  MaskMap m(5, 7);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) m(y, x) = (y * 7 + x) % 4;
  m(0, 0) = 255;
  save_mask(m, dir / "m.png");
  CHECK(load_mask(dir / "m.png") == m);
  CHECK(default_palette().size() == 768);
  CHECK(default_palette()[3] == 128);  // index 1 is (128,0,0)
  CHECK(default_palette()[4] == 0);
}

TEST_CASE("label 256 cannot be written") {
  TempDir dir;
  MaskMap m(2, 2);
  m(1, 1) = 256;
  CHECK_THROWS_AS(save_mask(m, dir / "bad.png"), DataError);
}

TEST_CASE("independently written palette PNG is decoded by index") {
  TempDir dir;
  std::vector<std::uint8_t> idx{0, 3, 3, 0, 200, 1};
  testing::write_indexed_png(dir / "x.png", 2, 3, idx);
  const MaskMap m = load_mask(dir / "x.png");
  REQUIRE(m.height() == 2);
  REQUIRE(m.width() == 3);
  for (std::size_t i = 0; i < idx.size(); ++i) CHECK(m.labels()[i] == idx[i]);
  CHECK(m.object_ids() == std::vector<int>{1, 3, 200});
}

TEST_CASE("RGB annotation is rejected") {
  TempDir dir;
  save_frame(Frame(3, 3, 0.2), dir / "rgb.png");
  try {
    load_mask(dir / "rgb.png");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("indexed palette required") != std::string::npos);
  }
}

TEST_CASE("corrupt and missing files") {
  TempDir dir;
  {
    std::ofstream os(dir / "junk.png", std::ios::binary);
    os << "\x89PNG\r\n\x1a\n" << "garbage";
  }
  CHECK_THROWS_AS(load_mask(dir / "junk.png"), DataError);
  {
    std::ofstream os(dir / "text.png");
    os << "hello";
  }
  CHECK_THROWS_AS(load_mask(dir / "text.png"), DataError);
  CHECK_THROWS_AS(load_mask(dir / "none.png"), DataError);
  CHECK_THROWS_AS(scan_dataset(dir / "nowhere"), DataError);
  CHECK_THROWS_AS(scan_dataset(dir.path), DataError);
}

TEST_CASE("frame round trip quantizes to 8 bits") {
  TempDir dir;
  Frame f(4, 5);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) f.at(c, y, x) = ((c * 20 + y * 5 + x) * 3 % 256) / 255.0;
  save_frame(f, dir / "f.png");
  const Frame g = load_frame(dir / "f.png");
  for (std::size_t i = 0; i < f.pixels().numel(); ++i)
    CHECK(std::abs(g.pixels()[i] - f.pixels()[i]) < 1e-12);
}

TEST_CASE("JPEG frames decode") {
  TempDir dir;
  write_jpeg(dir / "f.jpg", 16, 16, 200, 100, 50);
  const Frame f = load_frame(dir / "f.jpg");
  CHECK(f.height() == 16);
  CHECK(f.width() == 16);
  CHECK(std::abs(f.at(0, 8, 8) - 200 / 255.0) < 3 / 255.0);
  CHECK(std::abs(f.at(2, 8, 8) - 50 / 255.0) < 3 / 255.0);
}

TEST_CASE("scan and load a canonical dataset") {
  TempDir dir;
  make_fixture(dir.path);
  const DatasetIndex index = scan_dataset(dir.path);
  REQUIRE(index.sequences.size() == 2);
  CHECK(index.sequences[0].video == "a");
  CHECK(index.sequences[0].frame_count == 3);
  CHECK(index.sequences[0].object_ids == std::vector<int>{1});
  CHECK_FALSE(index.sequences[0].missing_first_annotation);
  CHECK(index.sequences[1].missing_first_annotation);
  CHECK(scan_dataset(dir.path) == index);

  const VideoSample v = load_video(index, "a");
  CHECK(v.frames.size() == 3);
  CHECK(v.object_ids == std::vector<int>{1, 2});
  CHECK(v.frame_names == std::vector<std::string>{"00000", "00001", "00002"});
  REQUIRE(v.masks[2].has_value());
  CHECK((*v.masks[2])(4, 5) == 2);
  CHECK_NOTHROW(v.validate());
  CHECK_THROWS_AS(load_video(index, "zzz"), DataError);
}

TEST_CASE("layout flavors") {
  CHECK(DatasetLayout::resolve("/d", LayoutFlavor::kDavis2017).images == fs::path("/d/JPEGImages/480p"));
  CHECK(DatasetLayout::resolve("/d", LayoutFlavor::kSplit, "valid").annotations == fs::path("/d/valid/Annotations"));
  CHECK(parse_layout_flavor("mose") == LayoutFlavor::kSplit);
  CHECK(parse_layout_flavor("davis2017") == LayoutFlavor::kDavis2017);
  CHECK_THROWS_AS(parse_layout_flavor("coco"), DataError);
}

TEST_CASE("video validation") {
  VideoSample v;
  v.id = "v";
  v.frames = {Frame(4, 4), Frame(4, 5)};
  v.masks = {MaskMap(4, 4), std::nullopt};
  CHECK_THROWS_AS(v.validate(), DataError);
  v.frames[1] = Frame(4, 4);
  MaskMap m(4, 4);
  m(0, 0) = 3;
  v.masks[0] = m;
  v.object_ids = {1};
  CHECK_THROWS_AS(v.validate(), DataError);
  v.object_ids = {3};
  CHECK_NOTHROW(v.validate());
}

TEST_CASE("binary stack is a one-hot partition of the labelled pixels") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> label(0, 3);
  for (int trial = 0; trial < 20; ++trial) {
    MaskMap m(7, 9);
    for (int& l : m.labels()) l = label(rng);
    const std::vector<int> ids{1, 2, 3};
    const ProbStack s = mask_to_binary_stack(m, ids);
    REQUIRE(s.channels() == 3);
    CHECK_FALSE(s.has_background);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) {
        double total = 0;
        for (int k = 0; k < 3; ++k) {
          const double v = s.probs.at(k, y, x);
          CHECK((v == 0.0 || v == 1.0));
          total += v;
          if (v == 1.0) CHECK(m(y, x) == ids[static_cast<std::size_t>(k)]);
        }
        CHECK(total == (m(y, x) != 0 ? 1.0 : 0.0));
      }
  }
  MaskMap bad(2, 2);
  bad(0, 0) = 9;
  CHECK_THROWS_AS(mask_to_binary_stack(bad, {1}), DataError);
}

TEST_CASE("flip and nearest resize of masks") {
  MaskMap m(2, 3, std::vector<int>{1, 2, 3, 4, 5, 6});
  CHECK(flip_horizontal(m).labels() == std::vector<int>{3, 2, 1, 6, 5, 4});
  CHECK(flip_horizontal(flip_horizontal(m)) == m);
  const MaskMap up = resize_nearest(m, 4, 6);
  CHECK(up(3, 5) == 6);
  CHECK(up(0, 0) == 1);
  CHECK(resize_nearest(up, 2, 3) == m);
}
