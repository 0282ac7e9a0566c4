#include "vos/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "vos/infer.hpp"

namespace vos {

std::string stage_name(Stage s) { return s == Stage::kPretrain ? "pretrain" : "main"; }

Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "main") return Stage::kMain;
  throw std::invalid_argument("unknown training stage '" + s + "' (expected pretrain or main)");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (batch < 1 || iters < 1 || seq_len < 2 || crop < 16)
    throw std::invalid_argument("batch, iters >= 1, seq_len >= 2 and crop >= 16 required");
  if (weight_decay < 0 || !(decay_factor > 0)) throw std::invalid_argument("invalid weight decay or decay factor");
  for (std::size_t i = 0; i < decay_points.size(); ++i) {
    if (decay_points[i] >= iters) throw std::invalid_argument("decay points must be below iters");
    if (i > 0 && decay_points[i] <= decay_points[i - 1])
      throw std::invalid_argument("decay points must be strictly increasing");
  }
  if (!(min_scale > 0 && min_scale <= 1)) throw std::invalid_argument("min_scale must lie in (0, 1]");
  if (max_skip < 1 || max_objects < 1) throw std::invalid_argument("max_skip and max_objects must be >= 1");
  blur_config.validate();
  jitter.validate();
}

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw std::invalid_argument("not a boolean: '" + s + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "stage") stage = parse_stage(value);
  else if (key == "lr") lr = std::stod(value);
  else if (key == "batch") batch = std::stoi(value);
  else if (key == "weight_decay") weight_decay = std::stod(value);
  else if (key == "iters") iters = std::stoi(value);
  else if (key == "crop") crop = std::stoi(value);
  else if (key == "decay_points") decay_points = parse_int_list(value);
  else if (key == "decay_factor") decay_factor = std::stod(value);
  else if (key == "seq_len") seq_len = std::stoi(value);
  else if (key == "beta1") beta1 = std::stod(value);
  else if (key == "beta2") beta2 = std::stod(value);
  else if (key == "eps") eps = std::stod(value);
  else if (key == "grad_clip") grad_clip = std::stod(value);
  else if (key == "blur") blur = parse_bool(value);
  else if (key == "blur_probability") blur_config.probability = std::stod(value);
  else if (key == "blur_sizes") blur_config.size_choices = parse_int_list(value);
  else if (key == "blur_angle_max") blur_config.angle_max = std::stod(value);
  else if (key == "max_rotation") jitter.max_rotation = std::stod(value);
  else if (key == "max_shear") jitter.max_shear = std::stod(value);
  else if (key == "max_scale_delta") jitter.max_scale_delta = std::stod(value);
  else if (key == "max_translate") jitter.max_translate = std::stod(value);
  else if (key == "hflip") hflip = parse_bool(value);
  else if (key == "min_scale") min_scale = std::stod(value);
  else if (key == "max_skip") max_skip = std::stoi(value);
  else if (key == "max_objects") max_objects = std::stoi(value);
  else if (key == "seed") seed = std::stoull(value);
  else if (key == "checkpoint_every") checkpoint_every = std::stoi(value);
  else if (key == "out_dir") out_dir = value;
  else throw std::invalid_argument("unknown training option '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::entries() const {
  return {{"stage", stage_name(stage)},
          {"lr", fmt(lr)},
          {"batch", std::to_string(batch)},
          {"weight_decay", fmt(weight_decay)},
          {"iters", std::to_string(iters)},
          {"crop", std::to_string(crop)},
          {"decay_points", join_ints(decay_points)},
          {"decay_factor", fmt(decay_factor)},
          {"seq_len", std::to_string(seq_len)},
          {"beta1", fmt(beta1)},
          {"beta2", fmt(beta2)},
          {"eps", fmt(eps)},
          {"grad_clip", fmt(grad_clip)},
          {"blur", blur ? "true" : "false"},
          {"blur_probability", fmt(blur_config.probability)},
          {"blur_sizes", join_ints(blur_config.size_choices)},
          {"blur_angle_max", fmt(blur_config.angle_max)},
          {"max_rotation", fmt(jitter.max_rotation)},
          {"max_shear", fmt(jitter.max_shear)},
          {"max_scale_delta", fmt(jitter.max_scale_delta)},
          {"max_translate", fmt(jitter.max_translate)},
          {"hflip", hflip ? "true" : "false"},
          {"min_scale", fmt(min_scale)},
          {"max_skip", std::to_string(max_skip)},
          {"max_objects", std::to_string(max_objects)},
          {"seed", std::to_string(seed)},
          {"checkpoint_every", std::to_string(checkpoint_every)},
          {"out_dir", out_dir.string()}};
}

TrainConfig TrainConfig::paper(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == Stage::kPretrain) {
    c.iters = 80000;
    c.crop = 384;
    c.seq_len = 3;
  } else {
    c.iters = 175000;
    c.crop = 480;
    c.seq_len = 8;
    c.decay_points = {140000, 160000};
  }
  return c;
}

TrainConfig TrainConfig::toy(Stage stage) {
  TrainConfig c = paper(stage);
  c.batch = 4;
  c.crop = 64;
  c.lr = 1e-3;
  c.grad_clip = 1.0;
  c.min_scale = 0.8;
  if (stage == Stage::kPretrain) {
    c.iters = 300;
  } else {
    c.iters = 500;
    c.decay_points = {400};
  }
  return c;
}

double lr_at(const TrainConfig& config, int iteration) {
  int passed = 0;
  for (int p : config.decay_points)
    if (p <= iteration) ++passed;
  // Dividing by 10^n keeps 1e-4 -> 1e-5 -> 1e-6 exact; multiplying by 0.1^n does not.
  return config.lr / std::pow(1.0 / config.decay_factor, passed);
}

std::string describe_schedule(const TrainConfig& pretrain, const TrainConfig& main) {
  return "pretrain(" + std::to_string(pretrain.iters) + ", " + std::to_string(pretrain.crop) + ") -> main(" +
         std::to_string(main.iters) + ", " + std::to_string(main.crop) + ")";
}

void TrainSources::add_static_dataset(const fs::path& root) {
  const DatasetIndex index = scan_dataset(root);
  for (const auto& s : index.sequences) {
    VideoSample v = load_video(index, s.video);
    for (std::size_t t = 0; t < v.frames.size(); ++t)
      if (v.masks[t]) statics.emplace_back(v.frames[t], *v.masks[t]);
  }
}

void TrainSources::add_video_dataset(const fs::path& root, LayoutFlavor flavor, const std::string& split) {
  const DatasetIndex index = scan_dataset(root, flavor, split);
  for (const auto& s : index.sequences) videos.push_back(load_video(index, s.video));
}

namespace {

// Keeps at most `max_objects` ids present in the reference mask; zeroes the rest everywhere.
void restrict_objects(Clip& clip, int max_objects, Rng& rng) {
  std::vector<int> ids = clip.masks[0].object_ids();
  if (static_cast<int>(ids.size()) > max_objects) {
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(static_cast<std::size_t>(max_objects));
    std::sort(ids.begin(), ids.end());
  }
  for (auto& m : clip.masks)
    for (int& l : m.labels())
      if (l != 0 && !std::binary_search(ids.begin(), ids.end(), l)) l = 0;
  clip.object_ids = std::move(ids);
}

// Sorted frame indices with gaps in [1, max_skip].
std::vector<int> sample_indices(const std::vector<int>& annotated, int seq_len, int max_skip, Rng& rng) {
  const int n = static_cast<int>(annotated.size());
  std::vector<int> gaps(static_cast<std::size_t>(seq_len - 1), 1);
  int budget = n - seq_len;  // extra positions that may be skipped
  for (auto& g : gaps) {
    const int extra = std::min(max_skip - 1, budget);
    const int add = extra > 0 ? std::uniform_int_distribution<int>(0, extra)(rng) : 0;
    g += add;
    budget -= add;
  }
  const int start = budget > 0 ? std::uniform_int_distribution<int>(0, budget)(rng) : 0;
  std::vector<int> out{annotated[static_cast<std::size_t>(start)]};
  int pos = start;
  for (int g : gaps) {
    pos += g;
    out.push_back(annotated[static_cast<std::size_t>(pos)]);
  }
  return out;
}

Clip pretrain_clip(const TrainConfig& config, const TrainSources& sources, Rng& rng) {
  const auto& [image, mask] =
      sources.statics[std::uniform_int_distribution<std::size_t>(0, sources.statics.size() - 1)(rng)];
  auto [f, m] = random_crop_pair(image, mask, config.crop, rng);
  VideoSample v = synth_video(f, m, config.seq_len, config.jitter, rng);
  Clip clip;
  clip.frames = std::move(v.frames);
  for (auto& mm : v.masks) clip.masks.push_back(*mm);
  if (config.blur)
    if (auto k = sample_blur(rng, config.blur_config))  // one kernel for the whole synthetic clip
      for (auto& fr : clip.frames) fr = apply_motion_blur(fr, *k);
  return clip;
}

Clip main_clip(const TrainConfig& config, const TrainSources& sources, Rng& rng) {
  const auto& v = sources.videos[std::uniform_int_distribution<std::size_t>(0, sources.videos.size() - 1)(rng)];
  std::vector<int> annotated;
  for (std::size_t t = 0; t < v.masks.size(); ++t)
    if (v.masks[t]) annotated.push_back(static_cast<int>(t));
  if (static_cast<int>(annotated.size()) < config.seq_len)
    throw DataError("video '" + v.id + "' has " + std::to_string(annotated.size()) +
                    " annotated frames, fewer than seq_len " + std::to_string(config.seq_len));
  Clip clip;
  for (int t : sample_indices(annotated, config.seq_len, config.max_skip, rng)) {
    clip.frames.push_back(v.frames[static_cast<std::size_t>(t)]);
    clip.masks.push_back(*v.masks[static_cast<std::size_t>(t)]);
  }
  random_crop_clip(clip.frames, clip.masks, config.crop, rng);
  if (config.blur)
    for (auto& fr : clip.frames)
      if (auto k = sample_blur(rng, config.blur_config)) fr = apply_motion_blur(fr, *k);
  return clip;
}

void geometric_jitter(Clip& clip, const TrainConfig& config, Rng& rng) {
  if (config.hflip && std::bernoulli_distribution(0.5)(rng)) {
    for (auto& f : clip.frames) f = flip_horizontal(f);
    for (auto& m : clip.masks) m = flip_horizontal(m);
  }
  if (config.min_scale < 1.0) {
    const double s = std::uniform_real_distribution<double>(config.min_scale, 1.0)(rng);
    const int rows = std::max(16, static_cast<int>(std::lround(clip.frames[0].height() * s)));
    const int cols = std::max(16, static_cast<int>(std::lround(clip.frames[0].width() * s)));
    for (auto& f : clip.frames) f = resize_frame(f, rows, cols);
    for (auto& m : clip.masks) m = resize_nearest(m, rows, cols);
  }
}

}  // namespace

std::vector<Clip> make_batch(const TrainConfig& config, const TrainSources& sources, Rng& rng) {
  config.validate();
  const bool pre = config.stage == Stage::kPretrain;
  if (pre ? sources.statics.empty() : sources.videos.empty())
    throw DataError(std::string("empty ") + (pre ? "static image" : "video") + " source pool");
  std::vector<Clip> batch;
  for (int b = 0; b < config.batch; ++b) {
    Clip clip;
    // A crop can miss every object; retry a few times before accepting an empty reference.
    for (int attempt = 0; attempt < 8; ++attempt) {
      clip = pre ? pretrain_clip(config, sources, rng) : main_clip(config, sources, rng);
      if (!clip.masks[0].object_ids().empty()) break;
    }
    geometric_jitter(clip, config, rng);
    restrict_objects(clip, config.max_objects, rng);
    batch.push_back(std::move(clip));
  }
  return batch;
}

Var sequence_loss(const std::vector<Var>& probs, const std::vector<MaskMap>& gt, const std::vector<int>& object_ids) {
  if (probs.empty() || probs.size() != gt.size()) throw std::invalid_argument("sequence_loss: frame count mismatch");
  Var total;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    std::vector<int> labels(gt[i].labels().size());
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const int l = gt[i].labels()[p];
      if (l == 0) continue;
      auto it = std::find(object_ids.begin(), object_ids.end(), l);
      if (it == object_ids.end()) throw std::invalid_argument("sequence_loss: unknown label " + std::to_string(l));
      labels[p] = static_cast<int>(it - object_ids.begin()) + 1;
    }
    Var l = ops::segmentation_loss(probs[i], labels);
    total = total.defined() ? ops::add(total, l) : l;
  }
  return ops::scale(total, 1.0 / static_cast<double>(probs.size()));
}

Var clip_loss(const VosNetwork& net, const Clip& clip) {
  const int T = static_cast<int>(clip.frames.size());
  if (clip.object_ids.empty()) {
    // Nothing to track; a zero constant keeps batches uniform.
    return Var(Tensor({1}, 0.0));
  }
  PropagationSession session(net, net.config().memory(T, 1));
  const ProbStack ref = mask_to_binary_stack(clip.masks[0], clip.object_ids);
  session.add_reference(0, Var(clip.frames[0].pixels()), Var(ref.probs));
  const int K = static_cast<int>(clip.object_ids.size());
  std::vector<Var> probs;
  for (int t = 1; t < T; ++t) {
    auto pred = session.predict(t, Var(clip.frames[static_cast<std::size_t>(t)].pixels()));
    probs.push_back(pred.probs);
    if (t + 1 < T) session.commit(t, pred.features, ops::slice0(pred.probs, 1, K + 1));
  }
  return sequence_loss(probs, {clip.masks.begin() + 1, clip.masks.end()}, clip.object_ids);
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

void AdamW::step(ParamStore& params, double lr) {
  auto& items = params.items();
  if (m_.empty())
    for (const auto& [name, p] : items) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  if (m_.size() != items.size()) throw std::logic_error("optimizer state does not match parameters");
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, step_), c2 = 1.0 - std::pow(beta2_, step_);
  for (std::size_t i = 0; i < items.size(); ++i) {
    Var& p = items[i].second;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    const bool has_grad = g.numel() == w.numel();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < w.numel(); ++j) {
      w[j] -= lr * wd_ * w[j];
      const double gj = has_grad ? g[j] : 0.0;
      m[j] = beta1_ * m[j] + (1 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1 - beta2_) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void AdamW::serialize(std::ostream& os) const {
  binio::write_i32(os, step_);
  binio::write_u32(os, static_cast<std::uint32_t>(m_.size()));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    binio::write_tensor(os, m_[i]);
    binio::write_tensor(os, v_[i]);
  }
}

void AdamW::deserialize(std::istream& is) {
  step_ = binio::read_i32(is);
  const auto n = binio::read_u32(is);
  m_.clear();
  v_.clear();
  for (std::uint32_t i = 0; i < n; ++i) {
    m_.push_back(binio::read_tensor(is));
    v_.push_back(binio::read_tensor(is));
  }
}

void save_checkpoint(const fs::path& path, const TrainConfig& config, int iteration, const Rng& rng,
                     const VosNetwork& net, const AdamW& opt, const std::vector<LossRecord>& history) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw TrainError("cannot write checkpoint " + path.string());
    os.write("VOSCKPT1", 8);
    const auto e = config.entries();
    binio::write_u32(os, static_cast<std::uint32_t>(e.size()));
    for (const auto& [k, v] : e) {
      binio::write_str(os, k);
      binio::write_str(os, v);
    }
    binio::write_i32(os, iteration);
    std::ostringstream rs;
    rs << rng;
    binio::write_str(os, rs.str());
    net.params().serialize(os);
    opt.serialize(os);
    binio::write_u32(os, static_cast<std::uint32_t>(history.size()));
    for (const auto& r : history) {
      binio::write_i32(os, r.iteration);
      binio::write_f64(os, r.lr);
      binio::write_f64(os, r.loss);
    }
    if (!os) throw TrainError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

namespace {

struct CheckpointState {
  int iteration = 0;
  std::vector<LossRecord> history;
};

CheckpointState load_checkpoint(const fs::path& path, Rng& rng, VosNetwork& net, AdamW& opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TrainError("cannot open checkpoint " + path.string());
  binio::expect_magic(is, "VOSCKPT1", "checkpoint");
  const auto n = binio::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    binio::read_str(is);
    binio::read_str(is);
  }
  CheckpointState s;
  s.iteration = binio::read_i32(is);
  std::istringstream rs(binio::read_str(is));
  rs >> rng;
  net.params().deserialize(is);
  opt.deserialize(is);
  const auto h = binio::read_u32(is);
  for (std::uint32_t i = 0; i < h; ++i) {
    LossRecord r;
    r.iteration = binio::read_i32(is);
    r.lr = binio::read_f64(is);
    r.loss = binio::read_f64(is);
    s.history.push_back(r);
  }
  if (!is) throw TrainError("truncated checkpoint " + path.string());
  return s;
}

void dump_nonfinite(const TrainConfig& config, const VosNetwork& net, int iteration, double lr, double loss) {
  std::string report = "non-finite loss at iteration " + std::to_string(iteration) + " (lr " + fmt(lr) +
                       ", loss " + fmt(loss) + ")";
  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    const fs::path p = config.out_dir / "nonfinite_dump.txt";
    std::ofstream os(p);
    os << report << "\nparameter,max_abs_value,max_abs_grad,finite\n";
    for (const auto& [name, v] : net.params().items())
      os << name << ',' << fmt(v.value().max_abs()) << ',' << fmt(v.grad().numel() ? v.grad().max_abs() : 0.0) << ','
         << (v.value().all_finite() && (v.grad().numel() == 0 || v.grad().all_finite()) ? 1 : 0) << '\n';
    report += "; parameter dump written to " + p.string();
  }
  throw TrainError(report);
}

void clip_gradients(ParamStore& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, v] : params.items())
    for (double g : v.grad().storage()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return;
  const double s = max_norm / norm;
  for (auto& [name, v] : params.items())
    for (double& g : v.grad_buffer().storage()) g *= s;
}

}  // namespace

NetConfig checkpoint_net_config(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TrainError("cannot open checkpoint " + path.string());
  binio::expect_magic(is, "VOSCKPT1", "checkpoint");
  const auto n = binio::read_u32(is);
  for (std::uint32_t i = 0; i < 2 * n; ++i) binio::read_str(is);
  binio::read_i32(is);
  binio::read_str(is);
  binio::expect_magic(is, "VOSW0001", "checkpoint weights");
  std::map<std::string, std::string> meta;
  std::istringstream lines(binio::read_str(is));
  std::string line;
  while (std::getline(lines, line))
    if (auto eq = line.find('='); eq != std::string::npos) meta[line.substr(0, eq)] = line.substr(eq + 1);
  return NetConfig::from_meta(meta);
}

void write_loss_csv(const std::vector<LossRecord>& history, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw TrainError("cannot write " + path.string());
  os << "iteration,lr,loss\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.iteration, r.lr, r.loss);
    os << buf;
  }
}

TrainResult train_stage(const TrainConfig& config, VosNetwork& net, const TrainSources& sources, const fs::path& resume,
                        int stop_after, const std::function<void(const LossRecord&)>& on_step) {
  config.validate();
  Rng rng(config.seed);
  AdamW opt(config.beta1, config.beta2, config.eps, config.weight_decay);
  TrainResult result;
  int start = 0;
  if (!resume.empty()) {
    auto s = load_checkpoint(resume, rng, net, opt);
    start = s.iteration;
    result.history = std::move(s.history);
  }
  auto checkpoint = [&](int next_iter) {
    if (config.out_dir.empty()) return;
    char name[64];
    std::snprintf(name, sizeof name, "%s_%07d.ckpt", stage_name(config.stage).c_str(), next_iter);
    result.checkpoint = config.out_dir / name;
    save_checkpoint(result.checkpoint, config, next_iter, rng, net, opt, result.history);
    write_loss_csv(result.history, config.out_dir / (stage_name(config.stage) + "_loss.csv"));
  };

  int done = 0;
  for (int it = start; it < config.iters; ++it) {
    if (stop_after >= 0 && done >= stop_after) break;
    const double lr = lr_at(config, it);
    const auto batch = make_batch(config, sources, rng);
    net.params().zero_grad();
    double loss_sum = 0;
    for (const auto& clip : batch) {
      Var l = clip_loss(net, clip);
      loss_sum += l.value()[0];
      if (!std::isfinite(l.value()[0])) dump_nonfinite(config, net, it, lr, l.value()[0]);
      if (l.requires_grad()) ops::scale(l, 1.0 / static_cast<double>(batch.size())).backward();
    }
    const double loss = loss_sum / static_cast<double>(batch.size());
    if (config.grad_clip > 0) clip_gradients(net.params(), config.grad_clip);
    opt.step(net.params(), lr);
    result.history.push_back({it, lr, loss});
    if (on_step) on_step(result.history.back());
    ++done;
    if (config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 && it + 1 < config.iters)
      checkpoint(it + 1);
  }
  const int reached = result.history.empty() ? start : result.history.back().iteration + 1;
  checkpoint(reached);
  if (!config.out_dir.empty() && reached >= config.iters)
    net.save(config.out_dir / (stage_name(config.stage) + "_weights.vosw"));
  return result;
}

}  // namespace vos
