#include "vos/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vos {

namespace binio {

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_i32(std::ostream& os, std::int32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) write_i32(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("unexpected end of binary stream");
  return v;
}

std::uint32_t read_u32(std::istream& is) { return read_pod<std::uint32_t>(is); }
std::int32_t read_i32(std::istream& is) { return read_pod<std::int32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_pod<std::uint64_t>(is); }
double read_f64(std::istream& is) { return read_pod<double>(is); }

std::string read_str(std::istream& is) {
  const auto n = read_u32(is);
  if (n > (1u << 28)) throw std::runtime_error("corrupt string length in binary stream");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("unexpected end of binary stream");
  return s;
}

Tensor read_tensor(std::istream& is) {
  const auto nd = read_u32(is);
  if (nd > 8) throw std::runtime_error("corrupt tensor rank in binary stream");
  Shape shape(nd);
  for (auto& d : shape) d = read_i32(is);
  Tensor t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double))))
    throw std::runtime_error("unexpected end of binary stream");
  return t;
}

void expect_magic(std::istream& is, const char (&magic)[9], const std::string& what) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) throw std::runtime_error("not a " + what + " file");
}

}  // namespace binio

Var& ParamStore::add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng, int fan_in) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  Tensor t(shape);
  if (fan_in <= 0) fan_in = shape.size() > 1 ? static_cast<int>(t.numel() / shape[0]) : 1;
  std::normal_distribution<double> normal(0.0, 1.0);
  double stddev = 0;
  switch (init) {
    case Init::kZeros: break;
    case Init::kOnes: t.fill(1.0); break;
    case Init::kHe: stddev = std::sqrt(2.0 / fan_in); break;
    case Init::kXavier: stddev = std::sqrt(1.0 / fan_in); break;
    case Init::kSmall: stddev = 0.1 * std::sqrt(1.0 / fan_in); break;
    case Init::kNormal: stddev = 1.0; break;
  }
  if (stddev > 0)
    for (double& v : t.storage()) v = stddev * normal(rng);
  index_[name] = items_.size();
  items_.emplace_back(name, Var(std::move(t), true));
  return items_.back().second;
}

Var& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return items_[it->second].second;
}

const Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return items_[it->second].second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += v.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : items_) v.zero_grad();
}

void ParamStore::serialize(std::ostream& os) const {
  os.write("VOSW0001", 8);
  std::ostringstream meta;
  for (const auto& [k, v] : meta_) meta << k << '=' << v << '\n';
  binio::write_str(os, meta.str());
  binio::write_u32(os, static_cast<std::uint32_t>(items_.size()));
  for (const auto& [name, v] : items_) {
    binio::write_str(os, name);
    binio::write_tensor(os, v.value());
  }
}

namespace {

std::map<std::string, std::string> parse_meta(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

}  // namespace

void ParamStore::deserialize(std::istream& is) {
  binio::expect_magic(is, "VOSW0001", "weights");
  meta_ = parse_meta(binio::read_str(is));
  const auto count = binio::read_u32(is);
  if (count != items_.size())
    throw std::runtime_error("weights file holds " + std::to_string(count) + " tensors, model expects " +
                             std::to_string(items_.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = binio::read_str(is);
    Tensor t = binio::read_tensor(is);
    Var& p = get(name);
    if (t.shape() != p.shape())
      throw std::runtime_error("shape mismatch for " + name + ": file " + shape_str(t.shape()) + ", model " +
                               shape_str(p.shape()));
    p.mutable_value() = std::move(t);
  }
}

void ParamStore::save(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    serialize(os);
    if (!os) throw std::runtime_error("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void ParamStore::load_values(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open weights file " + path.string());
  deserialize(is);
}

std::map<std::string, std::string> ParamStore::read_meta(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open weights file " + path.string());
  binio::expect_magic(is, "VOSW0001", "weights");
  return parse_meta(binio::read_str(is));
}

}  // namespace vos
