#include "orthodiff/cli.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "CLI11.hpp"
#include "commands.hpp"
#include "workspace.hpp"

namespace orthodiff::cli {

namespace {

struct Override {
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct Invocation {
  std::string workspace;
  std::string config_file;
  std::vector<std::string> sets;
  bool cache = false;
  std::vector<std::unique_ptr<Override>> overrides;
};

void add_override(CLI::App* sub, Invocation& inv, const std::string& flag, const std::string& key,
                  const std::string& help) {
  auto o = std::make_unique<Override>();
  o->key = key;
  o->option = sub->add_option(flag, o->value, help + " (" + key + ")");
  inv.overrides.push_back(std::move(o));
}

void add_switch(CLI::App* sub, Invocation& inv, const std::string& flag, const std::string& key,
                const std::string& help) {
  auto o = std::make_unique<Override>();
  o->key = key;
  o->value = "true";
  const std::string description = help + " (" + key + ")";
  o->option = sub->add_flag(flag, description);
  inv.overrides.push_back(std::move(o));
}

void add_common(CLI::App* sub, Invocation& inv) {
  sub->add_option("-w,--workspace", inv.workspace, "Workspace directory holding every stage output")->required();
  sub->add_option("-c,--config", inv.config_file, "JSON configuration file")->check(CLI::ExistingFile);
  sub->add_option("--set", inv.sets, "Override any config key, e.g. --set probe.epochs=5");
  sub->add_flag("--cache", inv.cache, "Skip the command when inputs and outputs are unchanged");
  add_override(sub, inv, "--seed", "seed", "Global seed");
  add_override(sub, inv, "--dataset", "dataset", "Dataset directory");
  add_override(sub, inv, "--profile", "profile", "desk or paper");
}

void add_training(CLI::App* sub, Invocation& inv) {
  add_override(sub, inv, "--setting", "setting", "lp or ft");
  add_override(sub, inv, "--fusion", "fusion", "simple_concat, linear_add, linear_concat, cross_attention or mpae");
}

// "0.1,0.5,1" -> "[0.1,0.5,1]"; JSON arrays pass through.
std::string as_json_list(const std::string& v) {
  if (!v.empty() && v.front() == '[') return v;
  return "[" + v + "]";
}

Context build_context(const Invocation& inv, std::ostream& out) {
  Context ctx;
  ctx.workspace = inv.workspace;
  ctx.cache = inv.cache;
  ctx.log = &out;
  auto doc = default_config_json();
  if (!inv.config_file.empty()) {
    std::ifstream in(inv.config_file);
    Json file = Json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config file " + inv.config_file + " is not valid JSON");
    merge_into(doc, file);
  }
  for (const auto& s : inv.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_override(doc, s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& o : inv.overrides) {
    if (o->option->count() == 0) continue;
    apply_override(doc, o->key, o->key == "label_fractions" ? as_json_list(o->value) : o->value);
  }
  ctx.config = parse_config(doc);
  ctx.config_json = doc;
  return ctx;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-plane diffusion feature pipeline on synthetic phantoms", "orthodiff"};
  app.set_version_flag("--version", ORTHODIFF_VERSION);
  app.require_subcommand(1);
  Invocation inv;

  using Command = void (*)(const Context&);
  std::map<std::string, Command> commands = {
      {"synth", cmd_synth},   {"pretrain", cmd_pretrain}, {"probe", cmd_probe},
      {"finetune", cmd_finetune}, {"fuse", cmd_fuse},     {"segment", cmd_segment},
      {"select", cmd_select}, {"evaluate", cmd_evaluate}, {"labeleff", cmd_labeleff}};

  auto* synth = app.add_subcommand("synth", "Generate a phantom dataset");
  add_common(synth, inv);
  add_override(synth, inv, "--patients", "data.patients", "Number of patients");
  add_override(synth, inv, "--labels", "data.labels", "Diagnostic labels per patient");
  add_override(synth, inv, "--structures", "data.structures", "Segmentation structures");
  add_override(synth, inv, "--strength", "data.label_effect_strength", "Lesion amplitude");
  add_override(synth, inv, "--noise-floor", "data.noise_floor", "Acquisition noise");
  add_override(synth, inv, "--multi-scan-fraction", "data.multi_scan_fraction", "Share of multi-scan patients");

  auto* pre = app.add_subcommand("pretrain", "Train the three orientation denoisers");
  add_common(pre, inv);
  add_override(pre, inv, "--steps", "pretrain.steps", "Optimiser steps per orientation");
  add_override(pre, inv, "--timesteps", "diffusion.timesteps", "Diffusion chain length");

  auto* probe = app.add_subcommand("probe", "Linear probing on frozen bottleneck features");
  add_common(probe, inv);
  add_override(probe, inv, "--epochs", "probe.epochs", "Training epochs");

  auto* ft = app.add_subcommand("finetune", "Fine-tune encoder, bottleneck and pooling");
  add_common(ft, inv);
  add_override(ft, inv, "--epochs", "finetune.epochs", "Training epochs");

  auto* fuse = app.add_subcommand("fuse", "Train multi-plane fusion on stage-1 outputs");
  add_common(fuse, inv);
  add_training(fuse, inv);
  add_override(fuse, inv, "--epochs", "fuse.epochs", "Training epochs");
  add_switch(fuse, inv, "--ehr", "ehr", "Also train EHR late fusion");

  auto* seg = app.add_subcommand("segment", "Fine-tune a segmentation head");
  add_common(seg, inv);
  add_override(seg, inv, "--orientation", "segment_orientation", "Orientation to segment");
  add_override(seg, inv, "--tap", "segment_tap", "Bottleneck tap, e.g. t50:mid_2");
  add_override(seg, inv, "--epochs", "segment.epochs", "Training epochs");

  auto* sel = app.add_subcommand("select", "Pick per-orientation taps on the validation split");
  add_common(sel, inv);
  add_training(sel, inv);
  add_override(sel, inv, "--top-k", "top_k", "Candidates kept per orientation");

  auto* ev = app.add_subcommand("evaluate", "Score trained models on the test split");
  add_common(ev, inv);
  add_training(ev, inv);
  add_override(ev, inv, "--task", "task", "diagnosis or segmentation");

  auto* le = app.add_subcommand("labeleff", "Pretrained vs scratch over nested label fractions");
  add_common(le, inv);
  add_training(le, inv);
  add_override(le, inv, "--task", "task", "diagnosis or segmentation");
  add_override(le, inv, "--fractions", "label_fractions", "Ascending fractions, e.g. 0.1,1.0");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const auto* chosen = app.get_subcommands().front();
    auto ctx = build_context(inv, out);
    commands.at(chosen->get_name())(ctx);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace orthodiff::cli
