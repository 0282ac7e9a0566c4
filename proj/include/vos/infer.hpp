#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "vos/data_io.hpp"
#include "vos/network.hpp"

namespace vos {

/// Frame-by-frame propagation state: pixel memory, object memory, sensory state
/// and the previous frame's probabilities. Runs with or without gradient recording.
class PropagationSession {
 public:
  PropagationSession(const VosNetwork& net, MemoryConfig memory);

  /// Registers objects from a reference mask and commits the frame.
  /// object_probs: (K,H,W) for all objects known so far, new objects appended last.
  void add_reference(int frame_index, const Var& frame, const Var& object_probs);

  struct Prediction {
    QueryFeatures features;
    Var logits;  // (K,H,W)
    Var probs;   // (K+1,H,W), background first
  };
  Prediction predict(int frame_index, const Var& frame);

  /// Stores the frame's evidence: pixel memory (per memory policy or forced),
  /// object memory and sensory state.
  void commit(int frame_index, const QueryFeatures& features, const Var& object_probs, bool force_admit = false);

  int object_count() const { return objects_; }
  const PixelMemory& memory() const { return memory_; }
  const ObjectMemory& object_memory() const { return object_memory_; }
  const SensoryState& sensory() const { return sensory_; }
  /// (query frame, frames read) pairs for every memory read.
  const std::vector<std::pair<int, std::vector<int>>>& read_audit() const { return audit_; }

 private:
  const VosNetwork& net_;
  PixelMemory memory_;
  ObjectMemory object_memory_;
  SensoryState sensory_;
  std::vector<Var> prev_fg16_;  // per object (1,h,w)
  int objects_ = 0;
  std::vector<std::pair<int, std::vector<int>>> audit_;
};

struct InferConfig {
  std::vector<int> scales{600, 720, 800};  // maximum shorter side; empty = native resolution only
  bool flip = true;
  int t_max = 18;
  int interval = 1;
  std::filesystem::path output_root;
  bool dump_probs = false;
  int jobs = 1;

  void validate() const;
};

struct PropagationResult {
  std::vector<MaskMap> masks;
  std::vector<ProbStack> probs;  // (K+1,H,W) per frame, channels follow video.object_ids
  std::size_t memory_size = 0;
  std::vector<int> memory_frames;
  std::vector<std::pair<int, std::vector<int>>> read_audit;
};

/// Segments every frame from the first-frame annotation. Masks of objects
/// that first appear later are ingested at their first annotated frame.
PropagationResult propagate(const VideoSample& video, const VosNetwork& net, const MemoryConfig& memory);

/// Background b = prod(1 - p_k); channels [b, p_1..p_K] / (b + sum p_k).
ProbStack soft_aggregate(const ProbStack& per_object);

/// Per-pixel argmax; ties go to background, then to the lowest channel.
MaskMap argmax_mask(const ProbStack& aggregated, const std::vector<int>& object_ids);

/// Any per-video branch runner returning aggregated ProbStacks per frame.
using BranchRunner = std::function<std::vector<ProbStack>(const VideoSample&)>;

BranchRunner network_runner(const VosNetwork& net, const MemoryConfig& memory);

/// Mirrors the video, runs the branch, mirrors the probabilities back.
std::vector<ProbStack> run_flip_branch(const VideoSample& video, const BranchRunner& runner);

/// Resizes each branch to `rows x cols`, averages, renormalizes over channels.
std::vector<ProbStack> fuse_tta(const std::vector<std::vector<ProbStack>>& branches, int rows, int cols);

/// Caps the shorter side at `max_shorter_side`; the longer side is rounded to the nearest even size.
VideoSample rescale_video(const VideoSample& video, int max_shorter_side);
std::pair<int, int> rescaled_size(int height, int width, int max_shorter_side);

struct TtaResult {
  std::vector<MaskMap> masks;
  std::vector<ProbStack> probs;
  int branches = 0;
};

/// Runs every (scale x flip) branch with an independent memory and fuses them.
TtaResult run_tta(const VideoSample& video, const VosNetwork& net, const InferConfig& config);
TtaResult run_tta(const VideoSample& video, const BranchRunner& runner, const InferConfig& config);

/// ProbStack dump layout (little-endian):
///   "VOSPROB1" | u32 channels | u32 height | u32 width | u8 has_background |
///   u32 n_ids | i32 object_ids[n_ids] | f32 data[channels*height*width]
void write_prob_stack(const ProbStack& stack, const std::vector<int>& object_ids, const std::filesystem::path& path);
ProbStack read_prob_stack(const std::filesystem::path& path, std::vector<int>* object_ids = nullptr);

}  // namespace vos
