#include "vos/memory.hpp"

#include <fstream>
#include <stdexcept>

#include "vos/params.hpp"

namespace vos {

void MemoryConfig::validate() const {
  if (t_max < 1) throw std::invalid_argument("memory t_max must be >= 1");
  if (interval < 1) throw std::invalid_argument("memory interval must be >= 1");
  if (key_dim < 1 || value_dim < 1) throw std::invalid_argument("memory feature sizes must be positive");
}

PixelMemory::PixelMemory(MemoryConfig config) : config_(config) { config_.validate(); }

bool PixelMemory::admits(int frame_index) const {
  return frame_index == 0 || frame_index % config_.interval == 0;
}

bool PixelMemory::admit(int frame_index, const Var& key, std::vector<Var> values, bool force) {
  if (frame_index <= last_frame_)
    throw std::invalid_argument("memory frame indices must strictly increase (got " + std::to_string(frame_index) +
                                " after " + std::to_string(last_frame_) + ")");
  if (key.shape().size() != 3 || key.dim(0) != config_.key_dim)
    throw std::invalid_argument("memory key shape " + shape_str(key.shape()) + " does not match key_dim " +
                                std::to_string(config_.key_dim));
  for (const auto& v : values)
    if (v.shape().size() != 3 || v.dim(0) != config_.value_dim || v.dim(1) != key.dim(1) || v.dim(2) != key.dim(2))
      throw std::invalid_argument("memory value shape " + shape_str(v.shape()) + " does not match key grid " +
                                  shape_str(key.shape()));
  if (!entries_.empty() && (entries_[0].key.dim(1) != key.dim(1) || entries_[0].key.dim(2) != key.dim(2)))
    throw std::invalid_argument("memory key grid differs from stored entries");
  last_frame_ = frame_index;
  if (!force && !admits(frame_index)) return false;
  if (static_cast<int>(entries_.size()) >= config_.t_max) {
    const std::size_t first_evictable = config_.first_permanent ? 1 : 0;
    if (entries_.size() <= first_evictable) return false;
    entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(first_evictable));
  }
  entries_.push_back({frame_index, key, std::move(values)});
  return true;
}

std::vector<int> PixelMemory::frame_indices() const {
  std::vector<int> out;
  for (const auto& e : entries_) out.push_back(e.frame_index);
  return out;
}

std::vector<std::size_t> PixelMemory::entries_with(int slot) const {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (static_cast<int>(entries_[i].values.size()) > slot) ids.push_back(i);
  return ids;
}

Var PixelMemory::affinity(const Var& query_key, int slot) const {
  if (entries_.empty()) throw std::logic_error("read before first admit");
  const auto ids = entries_with(slot);
  if (ids.empty()) throw std::logic_error("no memory entry holds object slot " + std::to_string(slot));
  const int d = query_key.dim(0);
  const int n = query_key.dim(1) * query_key.dim(2);
  std::vector<Var> keys;
  for (auto i : ids) {
    const auto& k = entries_[i].key;
    keys.push_back(ops::reshape(k, {d, k.dim(1) * k.dim(2)}));
  }
  Var mem_keys = keys.size() == 1 ? keys[0] : ops::concat(keys, 1);
  return ops::affinity_softmax(ops::reshape(query_key, {d, n}), mem_keys, config_.affinity);
}

Var PixelMemory::read(const Var& query_key, int slot) {
  if (entries_.empty()) throw std::logic_error("read before first admit");
  if (query_key.shape().size() != 3 || query_key.dim(0) != config_.key_dim)
    throw std::invalid_argument("query key shape " + shape_str(query_key.shape()) + " does not match key_dim");
  Var weights = affinity(query_key, slot);
  const auto ids = entries_with(slot);
  last_read_.clear();
  std::vector<Var> values;
  for (auto i : ids) {
    last_read_.push_back(entries_[i].frame_index);
    const auto& v = entries_[i].values[static_cast<std::size_t>(slot)];
    values.push_back(ops::reshape(v, {v.dim(0), v.dim(1) * v.dim(2)}));
  }
  Var mem_values = values.size() == 1 ? values[0] : ops::concat(values, 1);
  Var out = ops::matmul(mem_values, weights);
  return ops::reshape(out, {config_.value_dim, query_key.dim(1), query_key.dim(2)});
}

void PixelMemory::serialize(std::ostream& os) const {
  os.write("VOSMEM01", 8);
  binio::write_i32(os, config_.t_max);
  binio::write_i32(os, config_.interval);
  binio::write_i32(os, config_.key_dim);
  binio::write_i32(os, config_.value_dim);
  binio::write_i32(os, config_.affinity == ops::Affinity::kDot ? 0 : 1);
  binio::write_i32(os, config_.first_permanent ? 1 : 0);
  binio::write_i32(os, last_frame_);
  binio::write_u32(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    binio::write_i32(os, e.frame_index);
    binio::write_tensor(os, e.key.value());
    binio::write_u32(os, static_cast<std::uint32_t>(e.values.size()));
    for (const auto& v : e.values) binio::write_tensor(os, v.value());
  }
}

PixelMemory PixelMemory::deserialize(std::istream& is) {
  binio::expect_magic(is, "VOSMEM01", "memory checkpoint");
  MemoryConfig c;
  c.t_max = binio::read_i32(is);
  c.interval = binio::read_i32(is);
  c.key_dim = binio::read_i32(is);
  c.value_dim = binio::read_i32(is);
  c.affinity = binio::read_i32(is) == 0 ? ops::Affinity::kDot : ops::Affinity::kNegL2;
  c.first_permanent = binio::read_i32(is) != 0;
  PixelMemory m(c);
  m.last_frame_ = binio::read_i32(is);
  const auto n = binio::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    MemoryEntry e;
    e.frame_index = binio::read_i32(is);
    e.key = Var(binio::read_tensor(is));
    const auto nv = binio::read_u32(is);
    for (std::uint32_t j = 0; j < nv; ++j) e.values.emplace_back(binio::read_tensor(is));
    m.entries_.push_back(std::move(e));
  }
  return m;
}

void PixelMemory::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  serialize(os);
}

PixelMemory PixelMemory::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return deserialize(is);
}

ObjectMemory::ObjectMemory(int n_tokens, int token_dim) : n_tokens_(n_tokens), token_dim_(token_dim) {
  if (n_tokens < 1 || n_tokens > 2) throw std::invalid_argument("object memory supports 1 or 2 tokens per object");
  if (token_dim < 1) throw std::invalid_argument("object memory token size must be positive");
}

void ObjectMemory::ensure_objects(int n) {
  while (static_cast<int>(tokens_.size()) < n) {
    tokens_.emplace_back();
    for (int t = 0; t < n_tokens_; ++t) tokens_.back().emplace_back(Tensor({token_dim_}));
    counts_.emplace_back(n_tokens_, 0);
  }
}

void ObjectMemory::update(int slot, const Var& features, const Var& probs) {
  if (features.shape().size() != 3 || features.dim(0) != token_dim_)
    throw std::invalid_argument("object memory features have shape " + shape_str(features.shape()));
  const int n = features.dim(1) * features.dim(2);
  if (probs.numel() != static_cast<std::size_t>(n))
    throw std::invalid_argument("object memory weights do not match the feature grid");
  ensure_objects(slot + 1);
  Var flat = ops::reshape(features, {token_dim_, n});
  Var fg = ops::reshape(probs, {n});
  for (int t = 0; t < n_tokens_; ++t) {
    Var w = t == 0 ? fg : ops::one_minus(fg);
    if (!(w.value().sum() > 0)) continue;  // nothing to pool; keep the previous token
    Var pooled = ops::weighted_mean(flat, w);
    int& count = counts_[slot][t];
    Var& token = tokens_[slot][t];
    token = count == 0 ? pooled : ops::scale(ops::add(ops::scale(token, count), pooled), 1.0 / (count + 1));
    ++count;
  }
}

Var ObjectMemory::tokens(int slot) const {
  const auto& ts = tokens_.at(static_cast<std::size_t>(slot));
  std::vector<Var> rows;
  for (const auto& t : ts) rows.push_back(ops::reshape(t, {1, token_dim_}));
  return rows.size() == 1 ? rows[0] : ops::concat(rows, 0);
}

Var update_sensory(const SensoryGates& gates, const Var& hidden, const Var& features) {
  const int hd = hidden.dim(0);
  if (features.shape().size() != 3 || hidden.shape().size() != 3 || features.dim(1) != hidden.dim(1) ||
      features.dim(2) != hidden.dim(2))
    throw std::invalid_argument("sensory update: feature grid " + shape_str(features.shape()) +
                                " does not match hidden " + shape_str(hidden.shape()));
  if (gates.gate_w.dim(1) != features.dim(0) + hd || gates.gate_w.dim(0) != 2 * hd)
    throw std::invalid_argument("sensory update: gate weights do not match input/hidden sizes");
  Var xh = ops::concat({features, hidden}, 0);
  Var g = ops::sigmoid(ops::conv2d(xh, gates.gate_w, gates.gate_b, 1, 0));
  Var z = ops::slice0(g, 0, hd);
  Var r = ops::slice0(g, hd, 2 * hd);
  Var cand = ops::tanh(ops::conv2d(ops::concat({features, ops::mul(r, hidden)}, 0), gates.cand_w, gates.cand_b, 1, 0));
  return ops::add(ops::mul(ops::one_minus(z), hidden), ops::mul(z, cand));
}

void SensoryState::ensure_objects(int n, int h, int w) {
  while (static_cast<int>(hidden.size()) < n) hidden.emplace_back(Tensor({hidden_dim, h, w}));
}

}  // namespace vos
