#include "vos/infer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <map>

#include "vos/image_ops.hpp"
#include "vos/params.hpp"

namespace vos {

PropagationSession::PropagationSession(const VosNetwork& net, MemoryConfig memory)
    : net_(net), memory_(memory), object_memory_(net.config().object_tokens, net.config().value_dim) {
  if (memory.key_dim != net.config().key_dim || memory.value_dim != net.config().value_dim)
    throw std::invalid_argument("memory feature sizes do not match the network");
  sensory_.hidden_dim = net.config().hidden_dim;
}

void PropagationSession::add_reference(int frame_index, const Var& frame, const Var& object_probs) {
  commit(frame_index, net_.encode_query(frame), object_probs, /*force_admit=*/true);
}

PropagationSession::Prediction PropagationSession::predict(int frame_index, const Var& frame) {
  if (objects_ == 0) throw std::logic_error("predict called before any reference mask");
  Prediction out;
  out.features = net_.encode_query(frame);
  const auto& q = out.features;
  std::vector<Var> logits;
  for (int k = 0; k < objects_; ++k) {
    Var value = memory_.read(q.key, k);
    audit_.emplace_back(frame_index, memory_.last_read_frames());
    Var R = net_.pixel_readout(value, sensory_.hidden[k], q);
    Var X = net_.initial_queries();
    for (int l = 0; l < net_.config().n_blocks; ++l) {
      auto block = net_.transformer_block(l, R, X, object_memory_.tokens(k), prev_fg16_[k]);
      R = block.readout;
      X = block.queries;
    }
    logits.push_back(net_.decode(R, q));
  }
  out.logits = logits.size() == 1 ? logits[0] : ops::concat(logits, 0);
  out.probs = ops::soft_aggregate_logits(out.logits);
  return out;
}

void PropagationSession::commit(int frame_index, const QueryFeatures& q, const Var& object_probs, bool force_admit) {
  const int K = object_probs.dim(0);
  if (K < objects_) throw std::invalid_argument("commit: fewer object channels than tracked objects");
  objects_ = K;
  const int h = q.grid_h(), w = q.grid_w();
  sensory_.ensure_objects(K, h, w);
  object_memory_.ensure_objects(K);
  std::vector<Var> values = net_.encode_mask(q, object_probs);
  memory_.admit(frame_index, q.key, values, force_admit);
  Var prob16 = ops::avg_pool(ops::pad_bottom_right(object_probs, 16 * h, 16 * w), 16);
  prev_fg16_.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    Var pk = ops::slice0(prob16, k, k + 1);
    object_memory_.update(k, values[k], pk);
    sensory_.hidden[k] = net_.update_sensory(sensory_.hidden[k], q, pk);
    prev_fg16_[k] = pk;
  }
}

void InferConfig::validate() const {
  for (int s : scales)
    if (s <= 0) throw std::invalid_argument("inference scales must be positive");
  if (t_max < 1 || interval < 1) throw std::invalid_argument("memory t_max and interval must be >= 1");
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
}

namespace {

// Reorders slot-ordered aggregated channels into sorted object-id order.
ProbStack to_id_order(const Tensor& slot_probs, const std::vector<int>& slot_ids, const std::vector<int>& object_ids,
                      int H, int W) {
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  ProbStack out{Tensor({static_cast<int>(object_ids.size()) + 1, H, W}), true};
  std::copy(slot_probs.data(), slot_probs.data() + hw, out.probs.data());
  for (std::size_t s = 0; s < slot_ids.size(); ++s) {
    const auto pos = std::find(object_ids.begin(), object_ids.end(), slot_ids[s]) - object_ids.begin();
    std::copy(slot_probs.data() + (s + 1) * hw, slot_probs.data() + (s + 2) * hw,
              out.probs.data() + static_cast<std::size_t>(pos + 1) * hw);
  }
  return out;
}

}  // namespace

PropagationResult propagate(const VideoSample& video, const VosNetwork& net, const MemoryConfig& memory) {
  video.validate();
  if (!video.masks[0]) throw DataError("video '" + video.id + "': first-frame mask missing");
  NoGradGuard no_grad;
  PropagationSession session(net, memory);
  const int H = video.frames[0].height(), W = video.frames[0].width();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  std::vector<int> slot_ids;
  PropagationResult result;

  for (std::size_t t = 0; t < video.frames.size(); ++t) {
    const int ti = static_cast<int>(t);
    Var frame(video.frames[t].pixels());
    std::vector<int> new_ids;
    if (video.masks[t])
      for (int id : video.masks[t]->object_ids())
        if (std::find(slot_ids.begin(), slot_ids.end(), id) == slot_ids.end()) new_ids.push_back(id);

    Tensor object_probs;  // (K,H,W) in slot order
    std::optional<PropagationSession::Prediction> pred;
    const int K_old = static_cast<int>(slot_ids.size());
    if (K_old > 0) {
      pred = session.predict(ti, frame);
      object_probs = ops::slice0(pred->probs, 1, K_old + 1).value();
    }
    if (!new_ids.empty()) {
      const MaskMap& gt = *video.masks[t];
      std::vector<int> all_ids = slot_ids;
      all_ids.insert(all_ids.end(), new_ids.begin(), new_ids.end());
      Tensor combined({static_cast<int>(all_ids.size()), H, W});
      for (std::size_t i = 0; i < hw; ++i) {
        const int l = gt.labels()[i];
        const bool is_new = std::find(new_ids.begin(), new_ids.end(), l) != new_ids.end();
        for (int k = 0; k < K_old; ++k) combined[k * hw + i] = is_new ? 0.0 : object_probs[k * hw + i];
        for (std::size_t n = 0; n < new_ids.size(); ++n)
          combined[(K_old + n) * hw + i] = l == new_ids[n] ? 1.0 : 0.0;
      }
      slot_ids = all_ids;
      object_probs = std::move(combined);
      if (pred) session.commit(ti, pred->features, Var(object_probs), /*force_admit=*/true);
      else session.add_reference(ti, frame, Var(object_probs));
    } else if (pred) {
      session.commit(ti, pred->features, Var(object_probs));
    }

    Tensor aggregated;
    if (slot_ids.empty()) {
      aggregated = Tensor({1, H, W}, 1.0);
    } else {
      aggregated = ops::soft_aggregate_probs(Var(object_probs)).value();
    }
    ProbStack ps = to_id_order(aggregated, slot_ids, video.object_ids, H, W);
    if (t == 0) result.masks.push_back(*video.masks[0]);
    else result.masks.push_back(argmax_mask(ps, video.object_ids));
    result.probs.push_back(std::move(ps));
  }
  result.memory_size = session.memory().size();
  result.memory_frames = session.memory().frame_indices();
  result.read_audit = session.read_audit();
  return result;
}

ProbStack soft_aggregate(const ProbStack& per_object) {
  if (per_object.has_background) throw std::invalid_argument("soft_aggregate expects object channels only");
  for (double v : per_object.probs.storage())
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("soft_aggregate inputs must lie in [0,1]");
  NoGradGuard guard;
  return {ops::soft_aggregate_probs(Var(per_object.probs)).value(), true};
}

MaskMap argmax_mask(const ProbStack& aggregated, const std::vector<int>& object_ids) {
  if (!aggregated.has_background) throw std::invalid_argument("argmax_mask expects a background channel");
  if (aggregated.object_count() != static_cast<int>(object_ids.size()))
    throw std::invalid_argument("argmax_mask: channel count does not match object ids");
  const int H = aggregated.height(), W = aggregated.width();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  MaskMap out(H, W);
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    double best_v = aggregated.probs[i];
    for (int c = 1; c < aggregated.channels(); ++c) {
      const double v = aggregated.probs[c * hw + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.labels()[i] = best == 0 ? 0 : object_ids[best - 1];
  }
  return out;
}

BranchRunner network_runner(const VosNetwork& net, const MemoryConfig& memory) {
  return [&net, memory](const VideoSample& v) { return propagate(v, net, memory).probs; };
}

std::vector<ProbStack> run_flip_branch(const VideoSample& video, const BranchRunner& runner) {
  VideoSample flipped = video;
  for (auto& f : flipped.frames) f = flip_horizontal(f);
  for (auto& m : flipped.masks)
    if (m) m = flip_horizontal(*m);
  auto probs = runner(flipped);
  for (auto& p : probs) p = flip_horizontal(p);
  return probs;
}

std::vector<ProbStack> fuse_tta(const std::vector<std::vector<ProbStack>>& branches, int rows, int cols) {
  if (branches.empty()) throw std::invalid_argument("fuse_tta needs at least one branch");
  const std::size_t T = branches[0].size();
  for (const auto& b : branches) {
    if (b.size() != T) throw std::invalid_argument("fuse_tta: branches disagree on frame count");
    for (const auto& p : b)
      if (p.channels() != branches[0][0].channels() || p.has_background != branches[0][0].has_background)
        throw std::invalid_argument("fuse_tta: branches disagree on channels");
  }
  std::vector<ProbStack> fused;
  const std::size_t hw = static_cast<std::size_t>(rows) * cols;
  for (std::size_t t = 0; t < T; ++t) {
    const int C = branches[0][t].channels();
    Tensor acc({C, rows, cols});
    for (const auto& b : branches) {
      const Tensor r = resize_bilinear(b[t].probs, rows, cols);
      for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += r[i];
    }
    const double inv = 1.0 / static_cast<double>(branches.size());
    for (double& v : acc.storage()) v *= inv;
    if (branches[0][t].has_background) {
      for (std::size_t i = 0; i < hw; ++i) {
        double s = 0;
        for (int c = 0; c < C; ++c) s += acc[c * hw + i];
        if (s > 0)
          for (int c = 0; c < C; ++c) acc[c * hw + i] /= s;
      }
    }
    fused.push_back({std::move(acc), branches[0][t].has_background});
  }
  return fused;
}

std::pair<int, int> rescaled_size(int height, int width, int max_shorter_side) {
  if (max_shorter_side <= 0) throw std::invalid_argument("target shorter side must be positive");
  const int shorter = std::min(height, width);
  if (max_shorter_side >= shorter) return {height, width};
  auto even = [](double x) { return std::max(2, 2 * static_cast<int>(std::lround(x / 2.0))); };
  if (height <= width)
    return {max_shorter_side, even(static_cast<double>(width) * max_shorter_side / height)};
  return {even(static_cast<double>(height) * max_shorter_side / width), max_shorter_side};
}

VideoSample rescale_video(const VideoSample& video, int max_shorter_side) {
  const auto [rows, cols] = rescaled_size(video.frames.at(0).height(), video.frames.at(0).width(), max_shorter_side);
  if (rows == video.frames[0].height() && cols == video.frames[0].width()) return video;
  VideoSample out = video;
  for (auto& f : out.frames) f = resize_frame(f, rows, cols);
  for (auto& m : out.masks)
    if (m) m = resize_nearest(*m, rows, cols);
  return out;
}

TtaResult run_tta(const VideoSample& video, const BranchRunner& runner, const InferConfig& config) {
  config.validate();
  struct Branch {
    int scale;
    bool flip;
  };
  std::vector<Branch> plan;
  const std::vector<int> scales = config.scales.empty() ? std::vector<int>{0} : config.scales;
  for (int s : scales) {
    plan.push_back({s, false});
    if (config.flip) plan.push_back({s, true});
  }
  auto run_branch = [&](const Branch& b) {
    VideoSample scaled = b.scale > 0 ? rescale_video(video, b.scale) : video;
    return b.flip ? run_flip_branch(scaled, runner) : runner(scaled);
  };
  std::vector<std::vector<ProbStack>> outputs(plan.size());
  for (std::size_t start = 0; start < plan.size(); start += static_cast<std::size_t>(config.jobs)) {
    std::vector<std::future<std::vector<ProbStack>>> pending;
    const std::size_t end = std::min(plan.size(), start + static_cast<std::size_t>(config.jobs));
    if (config.jobs == 1) {
      outputs[start] = run_branch(plan[start]);
      continue;
    }
    for (std::size_t i = start; i < end; ++i)
      pending.push_back(std::async(std::launch::async, run_branch, plan[i]));
    for (std::size_t i = start; i < end; ++i) outputs[i] = pending[i - start].get();
  }
  TtaResult r;
  r.branches = static_cast<int>(plan.size());
  r.probs = fuse_tta(outputs, video.frames[0].height(), video.frames[0].width());
  for (std::size_t t = 0; t < r.probs.size(); ++t) {
    if (t == 0 && video.masks[0]) r.masks.push_back(*video.masks[0]);
    else r.masks.push_back(argmax_mask(r.probs[t], video.object_ids));
  }
  return r;
}

TtaResult run_tta(const VideoSample& video, const VosNetwork& net, const InferConfig& config) {
  return run_tta(video, network_runner(net, net.config().memory(config.t_max, config.interval)), config);
}

void write_prob_stack(const ProbStack& stack, const std::vector<int>& object_ids, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write("VOSPROB1", 8);
  binio::write_u32(os, static_cast<std::uint32_t>(stack.channels()));
  binio::write_u32(os, static_cast<std::uint32_t>(stack.height()));
  binio::write_u32(os, static_cast<std::uint32_t>(stack.width()));
  const char bg = stack.has_background ? 1 : 0;
  os.write(&bg, 1);
  binio::write_u32(os, static_cast<std::uint32_t>(object_ids.size()));
  for (int id : object_ids) binio::write_i32(os, id);
  std::vector<float> data(stack.probs.storage().begin(), stack.probs.storage().end());
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

ProbStack read_prob_stack(const std::filesystem::path& path, std::vector<int>* object_ids) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    binio::expect_magic(is, "VOSPROB1", "probability dump");
    const int C = static_cast<int>(binio::read_u32(is));
    const int H = static_cast<int>(binio::read_u32(is));
    const int W = static_cast<int>(binio::read_u32(is));
    char bg = 0;
    is.read(&bg, 1);
    const auto n = binio::read_u32(is);
    std::vector<int> ids(n);
    for (auto& id : ids) id = binio::read_i32(is);
    std::vector<float> data(static_cast<std::size_t>(C) * H * W);
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
      throw DataError("truncated probability dump " + path.string());
    if (object_ids) *object_ids = ids;
    return {Tensor({C, H, W}, std::vector<double>(data.begin(), data.end())), bg != 0};
  } catch (const DataError&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw DataError("bad probability dump " + path.string() + ": " + e.what());
  }
}

}  // namespace vos
