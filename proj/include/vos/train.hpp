#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vos/augment.hpp"
#include "vos/network.hpp"

namespace vos {

enum class Stage { kPretrain, kMain };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  double lr = 1e-4;
  int batch = 16;
  double weight_decay = 1e-3;
  int iters = 80000;
  int crop = 384;
  std::vector<int> decay_points;
  double decay_factor = 0.1;
  int seq_len = 3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0;  // global L2 norm; 0 disables
  bool blur = true;
  BlurConfig blur_config;
  AffineJitter jitter;
  bool hflip = true;       // mirror whole clips with probability 0.5
  double min_scale = 1.0;  // clips are shrunk by a factor drawn from [min_scale, 1]
  int max_skip = 3;     // main stage: largest frame gap inside a clip
  int max_objects = 3;  // objects kept per clip
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0: only at the end
  std::filesystem::path out_dir;

  void validate() const;
  /// Sets one field from its textual form; unknown keys throw.
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;

  static TrainConfig paper(Stage stage);
  /// Desk-scale schedule that runs the two stages on one CPU core in a few minutes.
  static TrainConfig toy(Stage stage);
};

/// lr * decay_factor^(number of decay points <= iteration).
double lr_at(const TrainConfig& config, int iteration);

/// "pretrain(80000, 384) -> main(175000, 480)"
std::string describe_schedule(const TrainConfig& pretrain, const TrainConfig& main);

struct TrainSources {
  std::vector<std::pair<Frame, MaskMap>> statics;  // pretraining image/mask pool
  std::vector<VideoSample> videos;                 // main-stage videos

  /// Every annotated frame of every sequence becomes a static pair.
  void add_static_dataset(const fs::path& root);
  void add_video_dataset(const fs::path& root, LayoutFlavor flavor = LayoutFlavor::kCanonical,
                         const std::string& split = "train");
};

struct Clip {
  std::vector<Frame> frames;
  std::vector<MaskMap> masks;  // labels outside object_ids are already zeroed
  std::vector<int> object_ids;
};

std::vector<Clip> make_batch(const TrainConfig& config, const TrainSources& sources, Rng& rng);

/// Mean over frames of 0.5*CE + 0.5*soft-dice. probs[i]: aggregated (K+1,H,W) for a
/// non-reference frame, gt[i] its mask; object_ids order the channels.
Var sequence_loss(const std::vector<Var>& probs, const std::vector<MaskMap>& gt, const std::vector<int>& object_ids);

/// Runs the network over a clip with gradient recording; frame 0 is the reference.
Var clip_loss(const VosNetwork& net, const Clip& clip);

class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-3);

  /// p <- p - lr*wd*p, then the bias-corrected Adam update.
  void step(ParamStore& params, double lr);
  int steps() const { return step_; }

  void serialize(std::ostream& os) const;
  void deserialize(std::istream& is);

 private:
  double beta1_, beta2_, eps_, wd_;
  int step_ = 0;
  std::vector<Tensor> m_, v_;
};

struct LossRecord {
  int iteration = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  std::vector<LossRecord> history;
  std::filesystem::path checkpoint;  // last checkpoint written, empty when out_dir is unset
};

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Trains `net` in place. With `resume`, restores weights, optimizer, RNG and
/// history from a checkpoint and continues at its iteration.
/// `stop_after`, when >= 0, halts after that many iterations (used to simulate interruption).
TrainResult train_stage(const TrainConfig& config, VosNetwork& net, const TrainSources& sources,
                        const std::filesystem::path& resume = {}, int stop_after = -1,
                        const std::function<void(const LossRecord&)>& on_step = {});

/// Checkpoint layout: "VOSCKPT1" | config entries | i32 iteration | rng state string |
/// network weights (ParamStore format) | optimizer state | loss history.
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, int iteration, const Rng& rng,
                     const VosNetwork& net, const AdamW& opt, const std::vector<LossRecord>& history);

/// Network configuration stored inside a checkpoint.
NetConfig checkpoint_net_config(const std::filesystem::path& path);

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);

}  // namespace vos
