#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "vos/augment.hpp"
#include "vos/image_ops.hpp"
#include "vos/infer.hpp"

using namespace vos;
using testing::random_tensor;
using testing::TempDir;

namespace {

NetConfig tiny() {
  NetConfig c;
  c.n_blocks = 1;
  c.n_queries = 4;
  c.key_dim = 4;
  c.value_dim = 6;
  c.hidden_dim = 3;
  c.readout_dim = 8;
  c.encoder_channels = {3, 4, 4, 5};
  c.mask_channels = {2, 3, 3, 4};
  c.decoder_channels = {4, 3, 3};
  return c;
}

ProbStack random_aggregated(int K, int H, int W, std::mt19937_64& rng) {
  return soft_aggregate({random_tensor({K, H, W}, rng, 0, 1), false});
}

VideoSample toy_video(int frames, int H, int W, std::uint64_t seed) {
  Rng rng(seed);
  auto [image, mask] = synth_scene(H, W, 2, rng);
  return synth_video(image, mask, frames, AffineJitter{}, rng);
}

void check_channel_sums(const ProbStack& p, double tol) {
  const std::size_t hw = static_cast<std::size_t>(p.height()) * p.width();
  for (std::size_t i = 0; i < hw; ++i) {
    double s = 0;
    for (int c = 0; c < p.channels(); ++c) s += p.probs[c * hw + i];
    CHECK(std::abs(s - 1.0) < tol);
  }
}

// Per-pixel rule of the frame colour: commutes with mirroring.
std::vector<ProbStack> symmetric_runner(const VideoSample& v) {
  std::vector<ProbStack> out;
  for (const auto& f : v.frames) {
    Tensor p({static_cast<int>(v.object_ids.size()), f.height(), f.width()});
    for (int k = 0; k < p.dim(0); ++k)
      for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) p.at(k, y, x) = std::clamp(f.at(k % 3, y, x), 0.0, 1.0);
    out.push_back(soft_aggregate({p, false}));
  }
  return out;
}

// Depends on the column index: mirroring changes its answer.
std::vector<ProbStack> ramp_runner(const VideoSample& v) {
  std::vector<ProbStack> out;
  for (const auto& f : v.frames) {
    Tensor p({2, f.height(), f.width()});
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x) {
        p.at(0, y, x) = 1.0 - x / double(f.width() - 1);
        p.at(1, y, x) = x / double(f.width() - 1);
      }
    out.push_back({p, true});
  }
  return out;
}

}  // namespace

TEST_CASE("soft aggregation example and channel sums") {
  const ProbStack p = soft_aggregate({Tensor({2, 1, 1}, 0.5), false});
  CHECK(p.has_background);
  CHECK(p.probs[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(p.probs[1] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(p.probs[2] == doctest::Approx(0.4).epsilon(1e-15));
  std::mt19937_64 rng(1);
  for (int K = 1; K <= 4; ++K) check_channel_sums(random_aggregated(K, 5, 6, rng), 1e-12);
  CHECK_THROWS(soft_aggregate({Tensor({1, 1, 1}, 1.5), false}));
  CHECK_THROWS(soft_aggregate(p));
}

TEST_CASE("argmax ties go to background then the lowest channel") {
  Tensor t({3, 1, 4}, std::vector<double>{0.4, 0.2, 0.3, 0.1,  //
                                          0.4, 0.4, 0.3, 0.6,  //
                                          0.2, 0.4, 0.4, 0.3});
  const MaskMap m = argmax_mask({t, true}, {3, 8});
  CHECK(m.labels() == std::vector<int>{0, 3, 8, 3});
  CHECK_THROWS(argmax_mask({t, true}, {3}));
}

TEST_CASE("mirroring is an involution") {
  std::mt19937_64 rng(2);
  const ProbStack p = random_aggregated(3, 5, 7, rng);
  const ProbStack back = flip_horizontal(flip_horizontal(p));
  CHECK(back.probs.storage() == p.probs.storage());
  const ProbStack f = flip_horizontal(p);
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x) CHECK(f.probs.at(c, y, x) == p.probs.at(c, y, 6 - x));
  Frame fr(random_tensor({3, 4, 5}, rng, 0, 1));
  CHECK(flip_horizontal(flip_horizontal(fr)) == fr);
}

TEST_CASE("flip branch unflips the runner output") {
  const VideoSample v = toy_video(3, 16, 16, 3);
  const auto direct = ramp_runner(v);
  const auto flipped = run_flip_branch(v, ramp_runner);
  REQUIRE(flipped.size() == 3);
  for (std::size_t t = 0; t < 3; ++t)
    CHECK(flipped[t].probs.storage() == flip_horizontal(direct[t]).probs.storage());

  // an equivariant runner gives the same answer with or without the flip
  const auto sym = symmetric_runner(v);
  const auto sym_flip = run_flip_branch(v, symmetric_runner);
  for (std::size_t t = 0; t < 3; ++t) CHECK(sym_flip[t].probs.storage() == sym[t].probs.storage());
  InferConfig cfg;
  cfg.scales = {};
  const TtaResult with_flip = run_tta(v, symmetric_runner, cfg);
  CHECK(with_flip.branches == 2);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < sym[t].probs.numel(); ++i)
      CHECK(std::abs(with_flip.probs[t].probs[i] - sym[t].probs[i]) < 1e-12);
}

TEST_CASE("fusion contracts") {
  std::mt19937_64 rng(4);
  std::vector<ProbStack> a, b;
  for (int t = 0; t < 3; ++t) {
    a.push_back(random_aggregated(2, 6, 8, rng));
    b.push_back(random_aggregated(2, 6, 8, rng));
  }
  SUBCASE("duplicated branches are idempotent") {
    const auto once = fuse_tta({a}, 6, 8);
    const auto twice = fuse_tta({a, a}, 6, 8);
    const auto thrice = fuse_tta({a, a, a}, 6, 8);
    for (int t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < a[0].probs.numel(); ++i) {
        CHECK(std::abs(once[t].probs[i] - a[t].probs[i]) < 1e-12);
        CHECK(std::abs(twice[t].probs[i] - a[t].probs[i]) < 1e-12);
        CHECK(std::abs(thrice[t].probs[i] - a[t].probs[i]) < 1e-12);
      }
  }
  SUBCASE("order of branches does not matter and sums stay one") {
    const auto ab = fuse_tta({a, b}, 6, 8);
    const auto ba = fuse_tta({b, a}, 6, 8);
    for (int t = 0; t < 3; ++t) {
      for (std::size_t i = 0; i < ab[t].probs.numel(); ++i) CHECK(std::abs(ab[t].probs[i] - ba[t].probs[i]) < 1e-15);
      check_channel_sums(ab[t], 1e-5);
    }
  }
  SUBCASE("mean of two branches") {
    const auto ab = fuse_tta({a, b}, 6, 8);
    for (std::size_t i = 0; i < a[0].probs.numel(); ++i)
      CHECK(std::abs(ab[0].probs[i] - 0.5 * (a[0].probs[i] + b[0].probs[i])) < 1e-12);
    // two one-pixel branches 0.2 and 0.4 fuse to 0.3
    ProbStack x{Tensor({2, 1, 1}, std::vector<double>{0.8, 0.2}), true};
    ProbStack y{Tensor({2, 1, 1}, std::vector<double>{0.6, 0.4}), true};
    const auto xy = fuse_tta({{x}, {y}}, 1, 1);
    CHECK(xy[0].probs[1] == doctest::Approx(0.3).epsilon(1e-15));
  }
  SUBCASE("resized branches land on the output grid with unit sums") {
    std::vector<ProbStack> small;
    for (int t = 0; t < 3; ++t) small.push_back(random_aggregated(2, 3, 4, rng));
    const auto fused = fuse_tta({a, small}, 6, 8);
    CHECK(fused[0].height() == 6);
    CHECK(fused[0].width() == 8);
    for (const auto& f : fused) check_channel_sums(f, 1e-5);
  }
  CHECK_THROWS(fuse_tta({}, 2, 2));
  CHECK_THROWS(fuse_tta({a, {a[0]}}, 6, 8));
}

TEST_CASE("rescaling keeps the aspect ratio with an even long side") {
  CHECK(rescaled_size(720, 1280, 600) == std::pair<int, int>{600, 1066});
  CHECK(rescaled_size(720, 1280, 720) == std::pair<int, int>{720, 1280});
  CHECK(rescaled_size(720, 1280, 800) == std::pair<int, int>{720, 1280});
  CHECK(rescaled_size(1280, 720, 600) == std::pair<int, int>{1066, 600});
  CHECK(rescaled_size(480, 854, 400) == std::pair<int, int>{400, 712});
  CHECK(rescaled_size(64, 64, 54) == std::pair<int, int>{54, 54});
  CHECK_THROWS(rescaled_size(10, 10, 0));
  const VideoSample v = toy_video(2, 32, 48, 5);
  const VideoSample r = rescale_video(v, 16);
  CHECK(r.frames[1].height() == 16);
  CHECK(r.frames[1].width() == 24);
  CHECK(r.masks[0]->height() == 16);
}

TEST_CASE("propagation reads only past frames") {
  const VosNetwork net(tiny());
  const VideoSample v = toy_video(6, 32, 32, 6);
  const PropagationResult r = propagate(v, net, net.config().memory(3, 1));
  REQUIRE(r.masks.size() == 6);
  CHECK(r.masks[0] == *v.masks[0]);
  CHECK(r.memory_frames == std::vector<int>{0, 4, 5});
  CHECK(r.read_audit.size() == 5 * v.object_ids.size());
  for (const auto& [frame, read] : r.read_audit) {
    REQUIRE_FALSE(read.empty());
    CHECK(read.front() == 0);
    for (int f : read) CHECK(f < frame);
  }
  for (const auto& p : r.probs) {
    CHECK(p.channels() == 3);
    check_channel_sums(p, 1e-9);
  }
  // later frames never change earlier outputs
  VideoSample shorter = v;
  shorter.frames.resize(4);
  shorter.masks.resize(4);
  shorter.frame_names.resize(4);
  const PropagationResult s = propagate(shorter, net, net.config().memory(3, 1));
  for (std::size_t t = 0; t < 4; ++t) CHECK(s.probs[t].probs.storage() == r.probs[t].probs.storage());
}

TEST_CASE("objects appearing later are added at their first annotation") {
  const VosNetwork net(tiny());
  VideoSample v = toy_video(4, 32, 32, 7);
  MaskMap first = *v.masks[0];
  for (int& l : first.labels())
    if (l == 2) l = 0;
  v.masks[0] = first;
  v.masks[1].reset();
  v.masks[3].reset();
  const PropagationResult r = propagate(v, net, net.config().memory(18, 1));
  CHECK(r.memory_frames == std::vector<int>{0, 1, 2, 3});
  CHECK(r.read_audit.size() == 1 + 1 + 2);  // slots read at frames 1, 2, 3
  for (std::size_t i = 0; i < r.masks[2].size(); ++i)
    if (v.masks[2]->labels()[i] == 2) CHECK(r.masks[2].labels()[i] == 2);
  for (const auto& p : r.probs) CHECK(p.channels() == 3);
}

TEST_CASE("network TTA fuses every branch") {
  const VosNetwork net(tiny());
  const VideoSample v = toy_video(3, 32, 32, 8);
  InferConfig cfg;
  cfg.scales = {24, 32};
  cfg.t_max = 5;
  cfg.interval = 1;
  const TtaResult serial = run_tta(v, net, cfg);
  CHECK(serial.branches == 4);
  for (const auto& p : serial.probs) {
    CHECK(p.height() == 32);
    check_channel_sums(p, 1e-5);
  }
  CHECK(serial.masks[0] == *v.masks[0]);
  cfg.jobs = 3;
  const TtaResult parallel = run_tta(v, net, cfg);
  for (std::size_t t = 0; t < 3; ++t) CHECK(parallel.probs[t].probs.storage() == serial.probs[t].probs.storage());
  cfg.jobs = 0;
  CHECK_THROWS(run_tta(v, net, cfg));
}

TEST_CASE("probability dumps round trip at float precision") {
  TempDir dir;
  std::mt19937_64 rng(9);
  const ProbStack p = random_aggregated(2, 4, 5, rng);
  write_prob_stack(p, {3, 7}, dir / "p.bin");
  std::vector<int> ids;
  const ProbStack back = read_prob_stack(dir / "p.bin", &ids);
  CHECK(ids == std::vector<int>{3, 7});
  CHECK(back.has_background);
  REQUIRE(back.probs.shape() == p.probs.shape());
  for (std::size_t i = 0; i < p.probs.numel(); ++i)
    CHECK(back.probs[i] == static_cast<double>(static_cast<float>(p.probs[i])));
  std::ofstream(dir / "short.bin", std::ios::binary) << "VOSPROB1";
  CHECK_THROWS_AS(read_prob_stack(dir / "short.bin"), DataError);
}
