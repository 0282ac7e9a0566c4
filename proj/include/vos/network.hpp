#pragma once

// Toy-scale memory network: query encoder, mask encoder, pixel readout fusion,
// object transformer blocks and the skip-connection decoder.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vos/memory.hpp"
#include "vos/params.hpp"

namespace vos {

struct NetConfig {
  int n_blocks = 3;
  int n_queries = 8;  // first half foreground-assigned, second half background-assigned
  int key_dim = 64;
  int value_dim = 128;
  int hidden_dim = 16;   // sensory state channels
  int readout_dim = 64;  // pixel readout / object query width
  int heads = 2;
  int ffn_mult = 2;
  int object_tokens = 2;
  std::array<int, 4> encoder_channels{16, 16, 32, 64};  // strides 2, 4, 8, 16
  std::array<int, 4> mask_channels{8, 16, 32, 64};
  std::array<int, 3> decoder_channels{32, 16, 16};  // strides 8, 4, 2
  ops::Affinity affinity = ops::Affinity::kNegL2;
  std::uint64_t seed = 1;

  void validate() const;
  std::map<std::string, std::string> to_meta() const;
  static NetConfig from_meta(const std::map<std::string, std::string>& meta);
  /// Memory settings matching the network's key/value sizes.
  MemoryConfig memory(int t_max, int interval) const;
};

/// Query-frame encoding. Spatial sizes refer to the padded frame.
struct QueryFeatures {
  Var key;    // (key_dim, h, w), stride 16
  Var f16;    // (encoder_channels[3], h, w)
  Var skip8;  // (encoder_channels[2], 2h, 2w)
  Var skip4;  // (encoder_channels[1], 4h, 4w)
  Var skip2;  // (encoder_channels[0], 8h, 8w)
  Var input;  // normalized padded frame (3, 16h, 16w)
  int height = 0;  // original frame size
  int width = 0;

  int grid_h() const { return key.dim(1); }
  int grid_w() const { return key.dim(2); }
};

class VosNetwork {
 public:
  explicit VosNetwork(NetConfig config);

  const NetConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// frame: (3,H,W) in [0,1]. Pads to a multiple of 16 at the bottom/right.
  QueryFeatures encode_query(const Var& frame) const;

  /// object_probs: (K,H,W) at frame resolution. Returns K value maps (value_dim, h, w).
  std::vector<Var> encode_mask(const QueryFeatures& q, const Var& object_probs) const;

  /// Fuses a memory readout (value_dim,h,w) with the sensory state and query features into R_0.
  Var pixel_readout(const Var& memory_value, const Var& sensory, const QueryFeatures& q) const;

  /// Learned initial object queries X_0, (n_queries, readout_dim).
  const Var& initial_queries() const;

  struct BlockOutput {
    Var readout;  // (readout_dim, h, w)
    Var queries;  // (n_queries, readout_dim)
  };
  /// fg_probs: (1,h,w) foreground probability at stride 16; object_tokens: (n_tokens, value_dim).
  BlockOutput transformer_block(int block, const Var& readout, const Var& queries, const Var& object_tokens,
                                const Var& fg_probs) const;

  /// Foreground/background permission matrix (n_queries x h*w) used by the bottom-up attention.
  std::vector<std::uint8_t> query_permissions(const Tensor& fg_probs) const;

  /// Returns (1, H, W) logits at the original frame resolution.
  Var decode(const Var& readout, const QueryFeatures& q) const;

  /// Sensory update from stride-16 features and this frame's object probability.
  Var update_sensory(const Var& hidden, const QueryFeatures& q, const Var& prob16) const;
  const SensoryGates& sensory_gates() const { return gates_; }

  void save(const std::filesystem::path& path) const;
  static VosNetwork load(const std::filesystem::path& path);

 private:
  const Var& p(const std::string& name) const { return params_.get(name); }
  Var conv(const std::string& name, const Var& x, int stride, int pad) const;
  Var lin(const std::string& name, const Var& x) const;
  Var norm(const std::string& name, const Var& x) const;
  Var mha(const std::string& name, const Var& q_in, const Var& kv_in,
          const std::vector<std::uint8_t>* allowed) const;
  Var ffn(const std::string& name, const Var& x) const;

  NetConfig config_;
  ParamStore params_;
  SensoryGates gates_;
};

}  // namespace vos
