#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vos/autograd.hpp"

namespace vos {

/// Ordered collection of named trainable tensors plus free-form metadata.
///
/// On-disk layout (little-endian):
///   "VOSW0001" | u32 meta_len | meta bytes (key=value lines) | u32 count |
///   count x { u32 name_len | name | u32 ndim | i32 dims[ndim] | f64 data[numel] }
class ParamStore {
 public:
  enum class Init { kZeros, kOnes, kHe, kXavier, kSmall, kNormal };

  Var& add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng, int fan_in = 0);
  Var& get(const std::string& name);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Var>>& items() { return items_; }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::size_t parameter_count() const;
  void zero_grad();

  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  void save(const std::filesystem::path& path) const;
  /// Loads tensors into already-registered parameters (names and shapes must match).
  void load_values(const std::filesystem::path& path);
  static std::map<std::string, std::string> read_meta(const std::filesystem::path& path);

  void serialize(std::ostream& os) const;
  void deserialize(std::istream& is);

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::string> meta_;
};

// Little-endian POD stream helpers shared by the binary formats.
namespace binio {
void write_u32(std::ostream& os, std::uint32_t v);
void write_i32(std::ostream& os, std::int32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_str(std::ostream& os, const std::string& s);
void write_tensor(std::ostream& os, const Tensor& t);
std::uint32_t read_u32(std::istream& is);
std::int32_t read_i32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_str(std::istream& is);
Tensor read_tensor(std::istream& is);
void expect_magic(std::istream& is, const char (&magic)[9], const std::string& what);
}  // namespace binio

}  // namespace vos
