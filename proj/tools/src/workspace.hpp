#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "orthodiff/errors.hpp"
#include "run_config.hpp"

namespace orthodiff::cli {

namespace fs = std::filesystem;

// Upstream stage output is absent or incomplete.
class MissingArtifactError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Another process holds the stage directory.
class LockError : public Error {
 public:
  using Error::Error;
};

// Exclusive lock on one output directory; released on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

// Reads the manifest of a finished stage, failing with a message that names it.
Json require_manifest(const fs::path& stage_dir, const std::string& stage);

// Digest identifying a finished stage for downstream cache keys.
std::string manifest_digest(const Json& manifest);

struct RunRecord {
  std::string command;
  Json config;
  std::map<std::string, std::string> inputs;  // upstream stage -> digest
  Json seeds = Json::object();
  // Summary values reported by the command; not part of the cache key.
  Json results = Json::object();
  std::uint64_t test_split_reads = 0;
};

std::string cache_key(const RunRecord& run);

// True when `dir` holds a manifest with the same cache key whose outputs still hash
// to the recorded values.
bool cache_hit(const fs::path& dir, const std::string& key);

// Hashes every file under `dir` (except manifest.json and the lock), writes
// dir/manifest.json and appends a copy to <workspace>/runs/.
Json write_manifest(const fs::path& workspace, const fs::path& dir, const RunRecord& run,
                    std::chrono::steady_clock::time_point started);

}  // namespace orthodiff::cli
