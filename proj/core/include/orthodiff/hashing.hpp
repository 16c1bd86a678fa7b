#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace orthodiff {

// 64-bit FNV-1a. Used for seed derivation and content addressing of artifacts;
// not a cryptographic digest.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::byte> bytes);
  Fnv1a& update(std::string_view text);
  template <typename T>
  Fnv1a& update_pod(const T& value) {
    return update(std::as_bytes(std::span<const T, 1>(&value, 1)));
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view text);
std::string to_hex(std::uint64_t value);

// Mixes two 64-bit values into a well-spread seed (splitmix64 finaliser).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

std::string hash_file(const std::filesystem::path& path);
// Hash over relative paths and contents of every regular file, in sorted order.
std::string hash_directory(const std::filesystem::path& root);

}  // namespace orthodiff
