#pragma once

// Pixel memory (frame-indexed key/value store read by attention), object
// memory (pooled per-object tokens) and the per-object sensory state.

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "vos/ops.hpp"

namespace vos {

struct MemoryConfig {
  int t_max = 18;    // maximum stored memory frames, the permanent first frame included
  int interval = 1;  // admit every interval-th frame
  int key_dim = 64;
  int value_dim = 128;
  ops::Affinity affinity = ops::Affinity::kNegL2;
  bool first_permanent = true;

  void validate() const;
};

struct MemoryEntry {
  int frame_index = 0;
  Var key;                  // (key_dim, h, w)
  std::vector<Var> values;  // per object slot, (value_dim, h, w); later objects may be absent
};

/// Binary checkpoint layout (little-endian):
///   "VOSMEM01" | i32 t_max | i32 interval | i32 key_dim | i32 value_dim |
///   i32 affinity (0 dot, 1 neg-L2) | i32 first_permanent | i32 last_frame |
///   u32 entries | entries x { i32 frame_index | tensor key | u32 n_values | tensor values... }
/// where tensor = u32 ndim | i32 dims[ndim] | f64 data.
class PixelMemory {
 public:
  explicit PixelMemory(MemoryConfig config = {});

  /// Returns whether the frame was stored. Frame indices must strictly increase.
  /// At capacity the oldest non-permanent entry is evicted; when only the
  /// permanent entry could be evicted the new frame is dropped.
  bool admit(int frame_index, const Var& key, std::vector<Var> values, bool force = false);
  bool admits(int frame_index) const;

  /// Readout of one object slot, (value_dim, h, w).
  Var read(const Var& query_key, int slot);
  /// Softmax weights (m, n) over the stored locations of entries holding `slot`.
  Var affinity(const Var& query_key, int slot) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  std::vector<int> frame_indices() const;
  const MemoryConfig& config() const { return config_; }
  /// Frame indices that contributed to the most recent read.
  const std::vector<int>& last_read_frames() const { return last_read_; }

  void serialize(std::ostream& os) const;
  static PixelMemory deserialize(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static PixelMemory load(const std::filesystem::path& path);

 private:
  std::vector<std::size_t> entries_with(int slot) const;

  MemoryConfig config_;
  std::vector<MemoryEntry> entries_;
  int last_frame_ = -1;
  std::vector<int> last_read_;
};

/// Per-object tokens: row 0 pools foreground-weighted features, row 1
/// background-weighted. Each token is an exact running mean over the updates
/// that carried non-zero pooling weight.
class ObjectMemory {
 public:
  ObjectMemory(int n_tokens, int token_dim);

  void ensure_objects(int n);
  int object_count() const { return static_cast<int>(tokens_.size()); }
  int n_tokens() const { return n_tokens_; }

  /// features: (C, h, w); probs: (1, h, w) foreground probability at the same grid.
  void update(int slot, const Var& features, const Var& probs);
  /// (n_tokens, token_dim)
  Var tokens(int slot) const;
  int count(int slot, int token) const { return counts_.at(slot).at(token); }

 private:
  int n_tokens_;
  int token_dim_;
  std::vector<std::vector<Var>> tokens_;  // slot -> token -> (token_dim)
  std::vector<std::vector<int>> counts_;
};

/// Learned gates of the sensory update (1x1 convolutions over [x, h]).
struct SensoryGates {
  Var gate_w;  // (2*hidden, input+hidden, 1, 1): update gate z, reset gate r
  Var gate_b;  // (2*hidden)
  Var cand_w;  // (hidden, input+hidden, 1, 1)
  Var cand_b;  // (hidden)
};

/// h' = (1 - z) * h + z * tanh(W [x, r * h] + b).
Var update_sensory(const SensoryGates& gates, const Var& hidden, const Var& features);

/// Per-object recurrent hidden maps at stride 16.
struct SensoryState {
  int hidden_dim = 0;
  std::vector<Var> hidden;

  void ensure_objects(int n, int h, int w);
};

}  // namespace vos
