#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace vos {

/// `[section]` headers followed by `key = value` lines; `#` and `;` start comments.
/// Keys before any header land in section "".
using IniSections = std::map<std::string, std::map<std::string, std::string>>;

IniSections parse_ini(const std::string& text);
IniSections load_ini(const std::filesystem::path& path);

/// SHA-1 of "blob <size>\0<content>", as `git hash-object` prints it.
std::string git_blob_sha1(const std::string& content);
std::string git_blob_sha1_file(const std::filesystem::path& path);

/// Directory for derived data: $MOSE_PIPELINE_CACHE, else ~/.cache/mose-vos.
std::filesystem::path pipeline_cache_dir();

struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::vector<std::pair<std::string, std::string>> config;
  std::uint64_t seed = 0;
  std::string weights_sha1;
  std::string started;   // ISO-8601 UTC
  std::string finished;

  std::string to_json() const;
  void write(const std::filesystem::path& path) const;
};

std::string utc_timestamp();

}  // namespace vos
