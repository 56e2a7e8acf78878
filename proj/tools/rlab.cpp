// Command-line entry point for the retrieval laboratory pipeline.
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "rlab/error.hpp"
#include "rlab/pipeline.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::string out = "run";
  std::string stages;
  long long seed = -1;
  int workers = 1;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_stages) {
  cmd->add_option("--config", o.config, "key=value run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "overrides the config seed")->check(CLI::NonNegativeNumber);
  cmd->add_option("--workers", o.workers, "bound on module-level parallelism")->check(CLI::PositiveNumber);
  if (with_stages) cmd->add_option("--stages", o.stages, "comma-separated subset of stages");
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// One JSON object on stderr; the last line of a failed run.
void error_line(const std::string& kind, const std::string& stage, const std::string& message) {
  nlohmann::json j = {{"error", {{"kind", kind}, {"stage", stage}, {"message", message}}}};
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder retrieval laboratory: probing, attribution and editing at desk scale"};
  app.require_subcommand(1);
  CommonOptions opt;
  // Subcommand -> stages it runs.
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"gen-corpus", {"corpus"}},     {"pretrain", {"pretrain"}}, {"dpr-train", {"dpr"}},
      {"probe", {"probe"}},           {"attribute", {"attribute"}}, {"retrieve", {"retrieve"}},
      {"edit", {"edit", "table3"}},   {"report", {"report"}},     {"run", {}}};
  for (const auto& [name, stages] : commands) {
    auto* cmd = app.add_subcommand(name, name == "run" ? "run the whole pipeline (or --stages)" : "run stage(s)");
    add_common(cmd, opt, name == "run");
  }
  CLI11_PARSE(app, argc, argv);

  const CLI::App* chosen = app.get_subcommands().front();
  std::vector<std::string> stages;
  for (const auto& [name, s] : commands)
    if (name == chosen->get_name()) stages = s;
  if (chosen->get_name() == "run") stages = split(opt.stages);

  std::string stage_ctx;
  try {
    rlab::RunConfig cfg = opt.config.empty() ? rlab::RunConfig{} : rlab::load_run_config(opt.config);
    if (opt.seed >= 0) cfg.seed = static_cast<uint64_t>(opt.seed);
    cfg.validate();
    rlab::Pipeline pipeline(cfg, opt.out, opt.workers);
    try {
      pipeline.run(stages);
    } catch (...) {
      stage_ctx = pipeline.failed_stage();
      throw;
    }
    for (const auto& s : pipeline.manifest().stages)
      std::printf("%-10s %8.1fs  %zu outputs\n", s.name.c_str(), s.wall_time_s, s.outputs.size());
  } catch (const rlab::ConfigError& e) {
    error_line(e.kind(), stage_ctx, e.what());
    return 2;
  } catch (const rlab::Error& e) {
    error_line(e.kind(), stage_ctx, e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("internal", stage_ctx, e.what());
    return 1;
  }
  return 0;
}
