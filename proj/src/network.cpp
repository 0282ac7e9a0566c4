#include "vos/network.hpp"

#include <sstream>
#include <stdexcept>

namespace vos {

namespace {

std::string join(const std::array<int, 4>& a) {
  std::ostringstream os;
  for (std::size_t i = 0; i < a.size(); ++i) os << (i ? "," : "") << a[i];
  return os.str();
}

template <std::size_t N>
std::array<int, N> parse_ints(const std::string& s) {
  std::array<int, N> out{};
  std::istringstream in(s);
  std::string tok;
  for (std::size_t i = 0; i < N; ++i) {
    if (!std::getline(in, tok, ',')) throw std::invalid_argument("expected " + std::to_string(N) + " integers: " + s);
    out[i] = std::stoi(tok);
  }
  return out;
}

}  // namespace

void NetConfig::validate() const {
  if (n_blocks < 0) throw std::invalid_argument("n_blocks must be >= 0");
  if (n_queries < 2 || n_queries % 2) throw std::invalid_argument("n_queries must be even and >= 2");
  if (key_dim < 1 || value_dim < 1 || hidden_dim < 1 || readout_dim < 1 || ffn_mult < 1)
    throw std::invalid_argument("network sizes must be positive");
  if (heads < 1 || readout_dim % heads) throw std::invalid_argument("readout_dim must be divisible by heads");
  if (object_tokens < 1 || object_tokens > 2) throw std::invalid_argument("object tokens must be 1 or 2");
  for (int c : encoder_channels)
    if (c < 1) throw std::invalid_argument("encoder channels must be positive");
  for (int c : mask_channels)
    if (c < 1) throw std::invalid_argument("mask encoder channels must be positive");
  for (int c : decoder_channels)
    if (c < 1) throw std::invalid_argument("decoder channels must be positive");
}

std::map<std::string, std::string> NetConfig::to_meta() const {
  return {{"net.blocks", std::to_string(n_blocks)},
          {"net.queries", std::to_string(n_queries)},
          {"net.key_dim", std::to_string(key_dim)},
          {"net.value_dim", std::to_string(value_dim)},
          {"net.hidden_dim", std::to_string(hidden_dim)},
          {"net.readout_dim", std::to_string(readout_dim)},
          {"net.heads", std::to_string(heads)},
          {"net.ffn_mult", std::to_string(ffn_mult)},
          {"object_mem.tokens", std::to_string(object_tokens)},
          {"net.encoder_channels", join(encoder_channels)},
          {"net.mask_channels", join(mask_channels)},
          {"net.decoder_channels", std::to_string(decoder_channels[0]) + "," + std::to_string(decoder_channels[1]) + "," +
                                       std::to_string(decoder_channels[2])},
          {"net.affinity", affinity == ops::Affinity::kDot ? "dot" : "neg_l2"},
          {"net.seed", std::to_string(seed)}};
}

NetConfig NetConfig::from_meta(const std::map<std::string, std::string>& meta) {
  NetConfig c;
  auto get = [&](const char* key, auto& field) {
    auto it = meta.find(key);
    if (it == meta.end()) return;
    if constexpr (std::is_same_v<std::decay_t<decltype(field)>, int>) field = std::stoi(it->second);
    else field = std::stoull(it->second);
  };
  get("net.blocks", c.n_blocks);
  get("net.queries", c.n_queries);
  get("net.key_dim", c.key_dim);
  get("net.value_dim", c.value_dim);
  get("net.hidden_dim", c.hidden_dim);
  get("net.readout_dim", c.readout_dim);
  get("net.heads", c.heads);
  get("net.ffn_mult", c.ffn_mult);
  get("object_mem.tokens", c.object_tokens);
  get("net.seed", c.seed);
  if (auto it = meta.find("net.encoder_channels"); it != meta.end()) c.encoder_channels = parse_ints<4>(it->second);
  if (auto it = meta.find("net.mask_channels"); it != meta.end()) c.mask_channels = parse_ints<4>(it->second);
  if (auto it = meta.find("net.decoder_channels"); it != meta.end()) c.decoder_channels = parse_ints<3>(it->second);
  if (auto it = meta.find("net.affinity"); it != meta.end()) {
    if (it->second == "dot") c.affinity = ops::Affinity::kDot;
    else if (it->second == "neg_l2") c.affinity = ops::Affinity::kNegL2;
    else throw std::invalid_argument("unknown affinity '" + it->second + "'");
  }
  c.validate();
  return c;
}

MemoryConfig NetConfig::memory(int t_max, int interval) const {
  MemoryConfig m;
  m.t_max = t_max;
  m.interval = interval;
  m.key_dim = key_dim;
  m.value_dim = value_dim;
  m.affinity = affinity;
  m.validate();
  return m;
}

VosNetwork::VosNetwork(NetConfig config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  using I = ParamStore::Init;
  auto conv_param = [&](const std::string& name, int out, int in, int k, I init = I::kHe) {
    params_.add(name + ".w", {out, in, k, k}, init, rng);
    params_.add(name + ".b", {out}, I::kZeros, rng);
  };
  auto lin_param = [&](const std::string& name, int in, int out, I init = I::kXavier) {
    params_.add(name + ".w", {in, out}, init, rng, in);
    params_.add(name + ".b", {out}, I::kZeros, rng);
  };
  auto ln_param = [&](const std::string& name, int d) {
    params_.add(name + ".g", {d}, I::kOnes, rng);
    params_.add(name + ".b", {d}, I::kZeros, rng);
  };
  const auto& ec = config_.encoder_channels;
  const auto& mc = config_.mask_channels;
  const auto& dc = config_.decoder_channels;
  const int C = config_.readout_dim, vd = config_.value_dim, hd = config_.hidden_dim;
  const int F = C * config_.ffn_mult;

  int in = 3;
  for (int i = 0; i < 4; ++i) {
    conv_param("qenc.conv" + std::to_string(i), ec[i], in, 3);
    in = ec[i];
  }
  conv_param("qenc.key", config_.key_dim, ec[3], 1, I::kXavier);

  in = 5;
  for (int i = 0; i < 4; ++i) {
    conv_param("menc.conv" + std::to_string(i), mc[i], in, 3);
    in = mc[i];
  }
  conv_param("menc.fuse", vd, mc[3] + ec[3], 1, I::kXavier);

  conv_param("readout.fuse", C, vd + hd + ec[3], 1, I::kXavier);
  conv_param("sensory.gate", 2 * hd, ec[3] + 1 + hd, 1, I::kXavier);
  conv_param("sensory.cand", hd, ec[3] + 1 + hd, 1, I::kXavier);
  params_.add("queries.init", {config_.n_queries, C}, I::kNormal, rng);

  for (int l = 0; l < config_.n_blocks; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    for (const char* n : {"ln_q1", "ln_p1", "ln_q2", "ln_q3", "ln_p2", "ln_q4", "ln_p3"}) ln_param(b + n, C);
    ln_param(b + "ln_s", vd);
    for (const char* a : {"attn_pix", "attn_top"}) {
      lin_param(b + a + ".q", C, C);
      lin_param(b + a + ".k", C, C);
      lin_param(b + a + ".v", C, C);
      lin_param(b + a + ".o", C, C, I::kSmall);
    }
    lin_param(b + "attn_obj.q", C, C);
    lin_param(b + "attn_obj.k", vd, C);
    lin_param(b + "attn_obj.v", vd, C);
    lin_param(b + "attn_obj.o", C, C, I::kSmall);
    lin_param(b + "ffn_q.1", C, F, I::kHe);
    lin_param(b + "ffn_q.2", F, C, I::kSmall);
    lin_param(b + "ffn_p.1", C, F, I::kHe);
    lin_param(b + "ffn_p.2", F, C, I::kSmall);
  }

  conv_param("dec.conv16", dc[0], C, 3);
  conv_param("dec.skip8", dc[0], ec[2], 1);
  conv_param("dec.conv8", dc[1], dc[0], 3);
  conv_param("dec.skip4", dc[1], ec[1], 1);
  conv_param("dec.conv4", dc[2], dc[1], 3);
  conv_param("dec.skip2", dc[2], ec[0], 1);
  conv_param("dec.out", 1, dc[2], 3, I::kXavier);

  gates_ = {p("sensory.gate.w"), p("sensory.gate.b"), p("sensory.cand.w"), p("sensory.cand.b")};
  params_.meta() = config_.to_meta();
}

Var VosNetwork::conv(const std::string& name, const Var& x, int stride, int pad) const {
  return ops::conv2d(x, p(name + ".w"), p(name + ".b"), stride, pad);
}

Var VosNetwork::lin(const std::string& name, const Var& x) const {
  return ops::linear(x, p(name + ".w"), p(name + ".b"));
}

Var VosNetwork::norm(const std::string& name, const Var& x) const {
  return ops::layer_norm(x, p(name + ".g"), p(name + ".b"));
}

Var VosNetwork::mha(const std::string& name, const Var& q_in, const Var& kv_in,
                    const std::vector<std::uint8_t>* allowed) const {
  Var q = lin(name + ".q", q_in);
  Var k = lin(name + ".k", kv_in);
  Var v = lin(name + ".v", kv_in);
  return lin(name + ".o", ops::attention(q, k, v, config_.heads, allowed));
}

Var VosNetwork::ffn(const std::string& name, const Var& x) const {
  return lin(name + ".2", ops::relu(lin(name + ".1", x)));
}

QueryFeatures VosNetwork::encode_query(const Var& frame) const {
  if (frame.shape().size() != 3 || frame.dim(0) != 3)
    throw std::invalid_argument("encode_query expects a (3,H,W) frame, got " + shape_str(frame.shape()));
  QueryFeatures q;
  q.height = frame.dim(1);
  q.width = frame.dim(2);
  const int Hp = (q.height + 15) / 16 * 16, Wp = (q.width + 15) / 16 * 16;
  Var x = ops::pad_bottom_right(ops::add(frame, Var(Tensor(frame.shape(), -0.5))), Hp, Wp);
  q.input = x;
  q.skip2 = ops::relu(conv("qenc.conv0", x, 2, 1));
  q.skip4 = ops::relu(conv("qenc.conv1", q.skip2, 2, 1));
  q.skip8 = ops::relu(conv("qenc.conv2", q.skip4, 2, 1));
  q.f16 = ops::relu(conv("qenc.conv3", q.skip8, 2, 1));
  q.key = conv("qenc.key", q.f16, 1, 0);
  return q;
}

std::vector<Var> VosNetwork::encode_mask(const QueryFeatures& q, const Var& object_probs) const {
  if (object_probs.shape().size() != 3 || object_probs.dim(1) != q.height || object_probs.dim(2) != q.width)
    throw std::invalid_argument("encode_mask: probabilities " + shape_str(object_probs.shape()) +
                                " do not match the frame " + std::to_string(q.height) + "x" + std::to_string(q.width));
  const int K = object_probs.dim(0);
  const int Hp = q.input.dim(1), Wp = q.input.dim(2);
  Var probs = ops::pad_bottom_right(object_probs, Hp, Wp);
  std::vector<Var> singles;
  for (int k = 0; k < K; ++k) singles.push_back(ops::slice0(probs, k, k + 1));
  Var total = singles.empty() ? Var() : singles[0];
  for (int k = 1; k < K; ++k) total = ops::add(total, singles[k]);
  std::vector<Var> out;
  for (int k = 0; k < K; ++k) {
    Var others = ops::sub(total, singles[k]);
    Var x = ops::concat({q.input, singles[k], others}, 0);
    for (int i = 0; i < 4; ++i) x = ops::relu(conv("menc.conv" + std::to_string(i), x, 2, 1));
    out.push_back(conv("menc.fuse", ops::concat({x, q.f16}, 0), 1, 0));
  }
  return out;
}

Var VosNetwork::pixel_readout(const Var& memory_value, const Var& sensory, const QueryFeatures& q) const {
  return conv("readout.fuse", ops::concat({memory_value, sensory, q.f16}, 0), 1, 0);
}

const Var& VosNetwork::initial_queries() const { return p("queries.init"); }

std::vector<std::uint8_t> VosNetwork::query_permissions(const Tensor& fg) const {
  const int n = static_cast<int>(fg.numel());
  const int nq = config_.n_queries;
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(nq) * n);
  for (int i = 0; i < nq; ++i) {
    const bool fg_query = i < nq / 2;
    for (int j = 0; j < n; ++j)
      allowed[static_cast<std::size_t>(i) * n + j] = (fg[j] >= 0.5) == fg_query ? 1 : 0;
  }
  return allowed;
}

VosNetwork::BlockOutput VosNetwork::transformer_block(int block, const Var& readout, const Var& queries,
                                                      const Var& object_tokens, const Var& fg_probs) const {
  if (block < 0 || block >= config_.n_blocks) throw std::out_of_range("transformer block index out of range");
  const int C = readout.dim(0), h = readout.dim(1), w = readout.dim(2);
  if (fg_probs.numel() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("transformer block: foreground map does not match the readout grid");
  const std::string b = "block" + std::to_string(block) + ".";
  const auto allowed = query_permissions(fg_probs.value());
  Var rows = ops::transpose(ops::reshape(readout, {C, h * w}));
  Var X = queries;
  X = ops::add(X, mha(b + "attn_pix", norm(b + "ln_q1", X), norm(b + "ln_p1", rows), &allowed));
  X = ops::add(X, mha(b + "attn_obj", norm(b + "ln_q2", X), norm(b + "ln_s", object_tokens), nullptr));
  X = ops::add(X, ffn(b + "ffn_q", norm(b + "ln_q3", X)));
  rows = ops::add(rows, mha(b + "attn_top", norm(b + "ln_p2", rows), norm(b + "ln_q4", X), nullptr));
  rows = ops::add(rows, ffn(b + "ffn_p", norm(b + "ln_p3", rows)));
  return {ops::reshape(ops::transpose(rows), {C, h, w}), X};
}

Var VosNetwork::decode(const Var& readout, const QueryFeatures& q) const {
  const int h = readout.dim(1), w = readout.dim(2);
  Var x = ops::relu(conv("dec.conv16", readout, 1, 1));
  x = ops::relu(ops::add(ops::resize_bilinear(x, 2 * h, 2 * w), conv("dec.skip8", q.skip8, 1, 0)));
  x = ops::relu(conv("dec.conv8", x, 1, 1));
  x = ops::relu(ops::add(ops::resize_bilinear(x, 4 * h, 4 * w), conv("dec.skip4", q.skip4, 1, 0)));
  x = ops::relu(conv("dec.conv4", x, 1, 1));
  x = ops::relu(ops::add(ops::resize_bilinear(x, 8 * h, 8 * w), conv("dec.skip2", q.skip2, 1, 0)));
  Var logits = conv("dec.out", x, 1, 1);
  logits = ops::resize_bilinear(logits, 16 * h, 16 * w);
  return ops::crop_top_left(logits, q.height, q.width);
}

Var VosNetwork::update_sensory(const Var& hidden, const QueryFeatures& q, const Var& prob16) const {
  return vos::update_sensory(gates_, hidden, ops::concat({q.f16, prob16}, 0));
}

void VosNetwork::save(const std::filesystem::path& path) const { params_.save(path); }

VosNetwork VosNetwork::load(const std::filesystem::path& path) {
  VosNetwork net(NetConfig::from_meta(ParamStore::read_meta(path)));
  net.params_.load_values(path);
  return net;
}

}  // namespace vos
