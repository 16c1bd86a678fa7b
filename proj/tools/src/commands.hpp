#pragma once

#include <filesystem>
#include <ostream>
#include <string>

#include "run_config.hpp"

namespace orthodiff::cli {

struct Context {
  std::filesystem::path workspace;
  Json config_json;
  RunConfig config;
  bool cache = false;
  std::ostream* log = nullptr;
};

void cmd_synth(const Context& ctx);
void cmd_pretrain(const Context& ctx);
void cmd_probe(const Context& ctx);
void cmd_finetune(const Context& ctx);
void cmd_fuse(const Context& ctx);
void cmd_segment(const Context& ctx);
void cmd_select(const Context& ctx);
void cmd_evaluate(const Context& ctx);
void cmd_labeleff(const Context& ctx);

// Output directory of each command inside a workspace.
std::filesystem::path stage_dir(const Context& ctx, const std::string& command);

}  // namespace orthodiff::cli
