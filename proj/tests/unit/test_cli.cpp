#include <fstream>
#include <sstream>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "testing.hpp"
#include "orthodiff/cli.hpp"
#include "orthodiff/dataset_io.hpp"

namespace fs = std::filesystem;
using orthodiff::cli::run;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "orthodiff");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_workspace(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("orthodiff_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_SUITE("cli_persistence") {

TEST_CASE("usage errors exit with 2") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"synth"}).code == 2);
  CHECK(invoke({"frobnicate", "-w", "/tmp/x"}).code == 2);
  const auto ws = fresh_workspace("usage");
  CHECK(invoke({"synth", "-w", ws.string(), "--multi-scan-fraction", "0.6"}).code == 2);
  CHECK(invoke({"synth", "-w", ws.string(), "--set", "data.nonsense=3"}).code == 2);
  CHECK(invoke({"synth", "-w", ws.string(), "--set", "probe.epochs=\"many\""}).code == 2);
  CHECK(invoke({"synth", "-w", ws.string(), "-c", (ws / "absent.json").string()}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
  CHECK(invoke({"--version"}).code == 0);
  fs::remove_all(ws);
}

TEST_CASE("stage order is enforced") {
  const auto ws = fresh_workspace("order");
  const auto r = invoke({"probe", "-w", ws.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("missing upstream artifact") != std::string::npos);
  CHECK(r.err.find("manifest.json") != std::string::npos);
  fs::remove_all(ws);
}

TEST_CASE("synth is deterministic and cacheable") {
  const auto a = fresh_workspace("synth_a");
  const auto b = fresh_workspace("synth_b");
  const std::vector<std::string> common = {"--patients", "12", "--seed", "7"};
  auto args = [&](const fs::path& ws) {
    std::vector<std::string> v = {"synth", "-w", ws.string()};
    v.insert(v.end(), common.begin(), common.end());
    return v;
  };
  REQUIRE(invoke(args(a)).code == 0);
  REQUIRE(invoke(args(b)).code == 0);
  const auto ma = read_json(a / "data" / "manifest.json");
  const auto mb = read_json(b / "data" / "manifest.json");
  CHECK(ma["outputs"] == mb["outputs"]);
  CHECK(orthodiff::read_dataset(a / "data").all_records().size() == 12);
  CHECK(fs::exists(a / "runs"));

  auto cached = args(a);
  cached.push_back("--cache");
  const auto again = invoke(cached);
  CHECK(again.code == 0);
  CHECK(again.out.find("up to date") != std::string::npos);
  CHECK(read_json(a / "data" / "manifest.json") == ma);

  // A different seed invalidates the cache.
  cached[4] = "14";
  cached[6] = "8";
  const auto changed = invoke(cached);
  CHECK(changed.code == 0);
  CHECK(changed.out.find("up to date") == std::string::npos);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("flags override the config file") {
  const auto ws = fresh_workspace("override");
  const auto cfg = ws / "run.json";
  std::ofstream(cfg) << R"({"data": {"patients": 10}, "seed": 3})";
  REQUIRE(invoke({"synth", "-w", ws.string(), "-c", cfg.string()}).code == 0);
  CHECK(orthodiff::read_dataset(ws / "data").all_records().size() == 10);
  REQUIRE(invoke({"synth", "-w", ws.string(), "-c", cfg.string(), "--set", "data.patients=11"}).code == 0);
  CHECK(orthodiff::read_dataset(ws / "data").all_records().size() == 11);
  REQUIRE(invoke({"synth", "-w", ws.string(), "-c", cfg.string(), "--set", "data.patients=11", "--patients", "13"}).code == 0);
  CHECK(orthodiff::read_dataset(ws / "data").all_records().size() == 13);

  std::ofstream(cfg) << R"({"data": {"patiens": 10}})";
  CHECK(invoke({"synth", "-w", ws.string(), "-c", cfg.string()}).code == 2);
  fs::remove_all(ws);
}

TEST_CASE("a held lock rejects a concurrent run") {
  const auto ws = fresh_workspace("lock");
  fs::create_directories(ws / "data");
  std::ofstream(ws / "data" / ".lock") << ::getpid();
  const auto r = invoke({"synth", "-w", ws.string(), "--patients", "8"});
  CHECK(r.code == 1);
  fs::remove(ws / "data" / ".lock");
  CHECK(invoke({"synth", "-w", ws.string(), "--patients", "8"}).code == 0);
  CHECK_FALSE(fs::exists(ws / "data" / ".lock"));
  fs::remove_all(ws);
}

}  // TEST_SUITE
