#include "vos/data_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

namespace vos {

MaskMap::MaskMap(int height, int width, int fill)
    : height_(height), width_(width), labels_(static_cast<std::size_t>(height) * width, fill) {
  if (height <= 0 || width <= 0) throw DataError("mask dimensions must be positive");
}

MaskMap::MaskMap(int height, int width, std::vector<int> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  if (height <= 0 || width <= 0) throw DataError("mask dimensions must be positive");
  if (labels_.size() != static_cast<std::size_t>(height) * width) throw DataError("mask label count mismatch");
}

std::vector<int> MaskMap::object_ids() const {
  std::set<int> ids;
  for (int l : labels_)
    if (l != 0) ids.insert(l);
  return {ids.begin(), ids.end()};
}

Frame::Frame(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.ndim() != 3 || pixels_.dim(0) != 3 || pixels_.dim(1) <= 0 || pixels_.dim(2) <= 0)
    throw DataError("frame must be a non-empty (3,H,W) tensor, got " + shape_str(pixels_.shape()));
}

Frame::Frame(int height, int width, double fill) : Frame(Tensor({3, height, width}, fill)) {}

void VideoSample::validate() const {
  if (frames.empty()) throw DataError("video '" + id + "' has no frames");
  if (masks.size() != frames.size()) throw DataError("video '" + id + "': mask list length differs from frames");
  const int H = frames[0].height(), W = frames[0].width();
  std::set<int> ids(object_ids.begin(), object_ids.end());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (frames[t].height() != H || frames[t].width() != W)
      throw DataError("video '" + id + "': frame " + std::to_string(t) + " has different dimensions");
    if (!masks[t]) continue;
    if (masks[t]->height() != H || masks[t]->width() != W)
      throw DataError("video '" + id + "': mask " + std::to_string(t) + " does not match frame dimensions");
    for (int l : masks[t]->object_ids())
      if (!ids.count(l)) throw DataError("video '" + id + "': unknown label " + std::to_string(l));
  }
}

DatasetLayout DatasetLayout::resolve(const fs::path& root, LayoutFlavor flavor, const std::string& split) {
  switch (flavor) {
    case LayoutFlavor::kDavis2017:
      return {root / "JPEGImages" / "480p", root / "Annotations" / "480p"};
    case LayoutFlavor::kSplit:
      return {root / split / "JPEGImages", root / split / "Annotations"};
    case LayoutFlavor::kCanonical:
    default:
      return {root / "JPEGImages", root / "Annotations"};
  }
}

LayoutFlavor parse_layout_flavor(const std::string& name) {
  if (name.empty() || name == "canonical" || name == "davis") return LayoutFlavor::kCanonical;
  if (name == "davis2017") return LayoutFlavor::kDavis2017;
  if (name == "youtubevos" || name == "mose" || name == "split") return LayoutFlavor::kSplit;
  throw DataError("unknown layout '" + name + "' (expected davis, davis2017, youtubevos or mose)");
}

bool DatasetIndex::operator==(const DatasetIndex& o) const {
  if (root != o.root || sequences.size() != o.sequences.size()) return false;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& a = sequences[i];
    const auto& b = o.sequences[i];
    if (a.video != b.video || a.frame_count != b.frame_count || a.object_ids != b.object_ids ||
        a.missing_first_annotation != b.missing_first_annotation)
      return false;
  }
  return true;
}

std::vector<fs::path> list_frame_files(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg" || ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

DatasetIndex scan_dataset(const fs::path& root, LayoutFlavor flavor, const std::string& split) {
  if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root.string());
  DatasetIndex index;
  index.root = root;
  index.layout = DatasetLayout::resolve(root, flavor, split);
  if (!fs::is_directory(index.layout.images)) throw DataError("no sequences found under " + root.string());
  std::vector<std::string> videos;
  for (const auto& e : fs::directory_iterator(index.layout.images))
    if (e.is_directory()) videos.push_back(e.path().filename().string());
  std::sort(videos.begin(), videos.end());
  for (const auto& v : videos) {
    const auto frames = list_frame_files(index.layout.images / v);
    if (frames.empty()) continue;
    SequenceEntry entry;
    entry.video = v;
    entry.frame_count = static_cast<int>(frames.size());
    const fs::path first = index.layout.annotations / v / (frames.front().stem().string() + ".png");
    if (fs::exists(first)) {
      entry.object_ids = load_mask(first).object_ids();
      entry.object_count = static_cast<int>(entry.object_ids.size());
    }
    entry.missing_first_annotation = entry.object_count == 0;
    index.sequences.push_back(std::move(entry));
  }
  if (index.sequences.empty()) throw DataError("no sequences found under " + root.string());
  return index;
}

VideoSample load_video(const DatasetIndex& index, const std::string& video) {
  VideoSample s;
  s.id = video;
  const auto files = list_frame_files(index.layout.images / video);
  if (files.empty()) throw DataError("no frames for video '" + video + "'");
  std::set<int> ids;
  for (const auto& f : files) {
    s.frames.push_back(load_frame(f));
    s.frame_names.push_back(f.stem().string());
    const fs::path ann = index.layout.annotations / video / (f.stem().string() + ".png");
    if (fs::exists(ann)) {
      MaskMap m = load_mask(ann);
      for (int l : m.object_ids()) ids.insert(l);
      s.masks.emplace_back(std::move(m));
    } else {
      s.masks.emplace_back(std::nullopt);
    }
  }
  s.object_ids.assign(ids.begin(), ids.end());
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// PNG / JPEG codecs. libpng and libjpeg report errors through longjmp; the
// jump targets below only hold trivially destructible locals.

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError(std::string("cannot open ") + path.string() + (mode[0] == 'w' ? " for writing" : ""));
  return f;
}

struct PngRaw {
  int width = 0, height = 0, channels = 0;
  bool palette = false;
  std::vector<std::uint8_t> pixels;
};

void png_error_handler(png_structp png, png_const_charp) { longjmp(png_jmpbuf(png), 1); }
void png_warning_handler(png_structp, png_const_charp) {}

// Returns false on a libpng error. When `keep_palette` is set, indexed images
// keep raw indices; other images are converted to 8-bit gray or RGB.
bool read_png_raw(std::FILE* fp, bool keep_palette, PngRaw* out, std::vector<png_bytep>* rows) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  out->width = static_cast<int>(png_get_image_width(png, info));
  out->height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  out->palette = color == PNG_COLOR_TYPE_PALETTE;
  if (out->palette && keep_palette) {
    if (depth < 8) png_set_packing(png);
  } else {
    if (out->palette) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  out->channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  // Buffers are owned by the caller; nothing here needs unwinding on longjmp.
  out->pixels.resize(stride * static_cast<std::size_t>(out->height));
  rows->resize(static_cast<std::size_t>(out->height));
  for (int y = 0; y < out->height; ++y) (*rows)[y] = out->pixels.data() + stride * y;
  png_read_image(png, rows->data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

PngRaw read_png(const fs::path& path, bool keep_palette) {
  auto fp = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DataError("not a PNG file: " + path.string());
  std::rewind(fp.get());
  PngRaw raw;
  std::vector<png_bytep> rows;
  if (!read_png_raw(fp.get(), keep_palette, &raw, &rows)) throw DataError("corrupt PNG file: " + path.string());
  return raw;
}

bool write_png_raw(std::FILE* fp, int width, int height, int color_type, const std::uint8_t* pixels, int channels,
                   const std::vector<std::uint8_t>* palette) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_color colors[256];
  if (palette) {
    for (int i = 0; i < 256; ++i) {
      colors[i].red = (*palette)[3 * i];
      colors[i].green = (*palette)[3 * i + 1];
      colors[i].blue = (*palette)[3 * i + 2];
    }
    png_set_PLTE(png, info, colors, 256);
  }
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(pixels + stride * static_cast<std::size_t>(y)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) { std::longjmp(reinterpret_cast<JpegErr*>(cinfo->err)->jump, 1); }

bool read_jpeg_raw(std::FILE* fp, int* w, int* h, std::vector<std::uint8_t>* pixels) {
  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *w = static_cast<int>(cinfo.output_width);
  *h = static_cast<int>(cinfo.output_height);
  const std::size_t stride = static_cast<std::size_t>(*w) * 3;
  pixels->resize(stride * *h);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels->data() + stride * cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace

const std::vector<std::uint8_t>& default_palette() {
  // Bit-interleaved colour map shared by the DAVIS and PASCAL VOC toolkits.
  static const std::vector<std::uint8_t> palette = [] {
    std::vector<std::uint8_t> p(256 * 3);
    for (int i = 0; i < 256; ++i) {
      int r = 0, g = 0, b = 0, c = i;
      for (int j = 0; j < 8; ++j) {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
      }
      p[3 * i] = static_cast<std::uint8_t>(r);
      p[3 * i + 1] = static_cast<std::uint8_t>(g);
      p[3 * i + 2] = static_cast<std::uint8_t>(b);
    }
    return p;
  }();
  return palette;
}

MaskMap load_mask(const fs::path& path) {
  PngRaw raw = read_png(path, /*keep_palette=*/true);
  if (!raw.palette) throw DataError("indexed palette required: " + path.string());
  std::vector<int> labels(raw.pixels.begin(), raw.pixels.end());
  return MaskMap(raw.height, raw.width, std::move(labels));
}

void save_mask(const MaskMap& mask, const fs::path& path) {
  std::vector<std::uint8_t> idx(mask.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int l = mask.labels()[i];
    if (l < 0 || l > 255) throw DataError("label exceeds 8-bit index range: " + std::to_string(l));
    idx[i] = static_cast<std::uint8_t>(l);
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  auto fp = open_file(path, "wb");
  if (!write_png_raw(fp.get(), mask.width(), mask.height(), PNG_COLOR_TYPE_PALETTE, idx.data(), 1,
                     &default_palette()))
    throw DataError("failed to write PNG: " + path.string());
}

Frame load_frame(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  int w = 0, h = 0;
  std::vector<std::uint8_t> rgb;
  if (ext == ".png") {
    PngRaw raw = read_png(path, /*keep_palette=*/false);
    if (raw.channels != 3) throw DataError("unsupported PNG channel layout: " + path.string());
    w = raw.width;
    h = raw.height;
    rgb = std::move(raw.pixels);
  } else {
    auto fp = open_file(path, "rb");
    if (!read_jpeg_raw(fp.get(), &w, &h, &rgb)) throw DataError("corrupt JPEG file: " + path.string());
  }
  Frame f(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        f.at(c, y, x) = rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return f;
}

void save_frame(const Frame& frame, const fs::path& path) {
  const int h = frame.height(), w = frame.width();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(frame.at(c, y, x), 0.0, 1.0);
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  auto fp = open_file(path, "wb");
  if (!write_png_raw(fp.get(), w, h, PNG_COLOR_TYPE_RGB, rgb.data(), 3, nullptr))
    throw DataError("failed to write PNG: " + path.string());
}

ProbStack mask_to_binary_stack(const MaskMap& mask, const std::vector<int>& object_ids) {
  const int K = static_cast<int>(object_ids.size());
  ProbStack out{Tensor({K, mask.height(), mask.width()}), false};
  const std::size_t hw = mask.size();
  for (std::size_t i = 0; i < hw; ++i) {
    const int l = mask.labels()[i];
    if (l == 0) continue;
    auto it = std::find(object_ids.begin(), object_ids.end(), l);
    if (it == object_ids.end()) throw DataError("unknown label " + std::to_string(l) + " in mask");
    out.probs[static_cast<std::size_t>(it - object_ids.begin()) * hw + i] = 1.0;
  }
  return out;
}

}  // namespace vos
