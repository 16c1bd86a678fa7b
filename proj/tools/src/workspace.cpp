#include "workspace.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "orthodiff/hashing.hpp"

namespace orthodiff::cli {

namespace {

constexpr const char* kLockName = ".lock";
constexpr const char* kManifestName = "manifest.json";

bool process_alive(long pid) {
  return pid > 0 && fs::exists(fs::path("/proc") / std::to_string(pid));
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

Json output_hashes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dir);
    if (rel == kManifestName || rel == kLockName) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  Json out = Json::object();
  for (const auto& rel : files) out[rel.generic_string()] = hash_file(dir / rel);
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

}  // namespace

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / kLockName) {
  fs::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const auto pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw Error("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    long holder = 0;
    std::ifstream(path_) >> holder;
    if (process_alive(holder)) {
      throw LockError("output directory " + dir.string() + " is locked by running process " + std::to_string(holder));
    }
    // Left behind by a process that no longer exists.
    fs::remove(path_);
  }
  throw LockError("could not acquire lock " + path_.string());
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

Json require_manifest(const fs::path& stage_dir, const std::string& stage) {
  const auto path = stage_dir / kManifestName;
  if (!fs::exists(path)) {
    throw MissingArtifactError("missing upstream artifact: " + path.string() + " (run '" + stage + "' first)");
  }
  return read_json(path);
}

std::string manifest_digest(const Json& manifest) {
  return to_hex(fnv1a(manifest.at("outputs").dump()));
}

std::string cache_key(const RunRecord& run) {
  Json key{{"command", run.command}, {"config", run.config}, {"inputs", run.inputs}, {"seeds", run.seeds}};
  return to_hex(fnv1a(key.dump()));
}

bool cache_hit(const fs::path& dir, const std::string& key) {
  const auto path = dir / kManifestName;
  if (!fs::exists(path)) return false;
  const auto manifest = read_json(path);
  if (manifest.value("cache_key", "") != key) return false;
  return manifest.at("outputs") == output_hashes(dir);
}

Json write_manifest(const fs::path& workspace, const fs::path& dir, const RunRecord& run,
                    std::chrono::steady_clock::time_point started) {
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  Json m;
  m["format"] = "orthodiff-run";
  m["command"] = run.command;
  m["version"] = ORTHODIFF_VERSION;
  m["finished_at"] = utc_timestamp();
  m["wall_time_s"] = wall;
  m["cache_key"] = cache_key(run);
  m["inputs"] = run.inputs;
  m["seeds"] = run.seeds;
  m["test_split_reads"] = run.test_split_reads;
  m["config"] = run.config;
  m["results"] = run.results;
  m["outputs"] = output_hashes(dir);

  const auto text = m.dump(2) + "\n";
  {
    std::ofstream out(dir / kManifestName, std::ios::trunc);
    out << text;
    if (!out) throw Error("failed to write " + (dir / kManifestName).string());
  }
  const auto runs = workspace / "runs";
  fs::create_directories(runs);
  std::size_t seq = 0;
  for (const auto& e : fs::directory_iterator(runs)) seq += e.is_regular_file() ? 1 : 0;
  std::ostringstream name;
  name << std::setw(4) << std::setfill('0') << seq << '_' << run.command << ".json";
  std::ofstream(runs / name.str()) << text;
  return m;
}

}  // namespace orthodiff::cli
