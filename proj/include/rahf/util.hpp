#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace rahf {

using json = nlohmann::json;

std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

template <class T>
std::string sha256_of(std::span<const T> values) {
  return sha256_hex(std::as_bytes(values));
}

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

void write_json_file(const std::filesystem::path& path, const json& value);
json read_json_file(const std::filesystem::path& path);

/// Appends one JSON object per line.
class JsonlWriter {
 public:
  explicit JsonlWriter(std::filesystem::path path, bool truncate = true);
  void write(const json& record);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Mixes a run seed with a stream tag so independent consumers get
/// decorrelated generators from one recorded seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

/// Uniform index in [0, n) from raw engine output (portable across standard
/// libraries, unlike std::uniform_int_distribution).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

/// "git describe" of the build, embedded at configure time.
std::string_view build_git_describe();

}  // namespace rahf
