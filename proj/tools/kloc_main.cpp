// kloc - knowledge localization lab
//
// Pipeline: gen-world -> train -> trace / sever-trace -> edit -> eval -> report
// Every stage writes self-describing artifacts (config hash, checkpoint hash,
// seed) and exits nonzero when its gate fails.

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "kloc/lab.hpp"

namespace {

std::string resolve_out(const std::string& out_flag) {
  std::filesystem::path p(out_flag);
  if (p.is_absolute()) return p.string();
  const char* root = std::getenv("KLOC_OUT_ROOT");
  if (root && *root) return (std::filesystem::path(root) / p).string();
  return p.string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kloc: a desk-scale lab for tracing and editing relational vs entity knowledge in a toy transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag = "out";
  int64_t seed_flag = -1;
  std::string perspective = "both";
  std::string site = "all";
  std::string sever = "both";

  app.add_option("--config", config_path, "experiment config JSON (defaults apply when omitted)");
  app.add_option("--seed", seed_flag, "override the config seed");
  app.add_option("--out", out_flag, "output directory (relative paths join KLOC_OUT_ROOT when set)");

  auto* gen = app.add_subcommand("gen-world", "generate the synthetic fact world");
  auto* train = app.add_subcommand("train", "train the base model on the world");
  auto* trace = app.add_subcommand("trace", "causal tracing grids (AIE) per corruption perspective and site");
  trace->add_option("--perspective", perspective, "relation | entity | both")
      ->check(CLI::IsMember({"relation", "entity", "both"}));
  trace->add_option("--site", site, "hidden | mlp | attn | all")
      ->check(CLI::IsMember({"hidden", "mlp", "attn", "all"}));
  auto* sever_cmd = app.add_subcommand("sever-trace", "tracing with the MLP or attention path severed");
  sever_cmd->add_option("--sever", sever, "mlp | attn | both")->check(CLI::IsMember({"mlp", "attn", "both"}));
  auto* edit = app.add_subcommand("edit", "single-fact edits keyed from each perspective, with probes");
  edit->add_option("--perspective", perspective, "relation | entity | both")
      ->check(CLI::IsMember({"relation", "entity", "both"}));
  auto* eval = app.add_subcommand("eval", "assemble the cross-perspective metrics report");
  auto* report = app.add_subcommand("report", "render AIE heatmap SVGs from the trace artifacts");

  CLI11_PARSE(app, argc, argv);

  try {
    kloc::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = kloc::ExperimentConfig::load(config_path);
    if (seed_flag >= 0) cfg.seed = static_cast<uint64_t>(seed_flag);
    std::string out = resolve_out(out_flag);

    kloc::StageResult res;
    if (gen->parsed()) res = kloc::stage_gen_world(cfg, out);
    if (train->parsed()) res = kloc::stage_train(cfg, out);
    if (trace->parsed()) res = kloc::stage_trace(cfg, out, perspective, site);
    if (sever_cmd->parsed()) res = kloc::stage_sever_trace(cfg, out, sever);
    if (edit->parsed()) res = kloc::stage_edit(cfg, out, perspective);
    if (eval->parsed()) res = kloc::stage_eval(cfg, out);
    if (report->parsed()) res = kloc::stage_report(cfg, out);

    std::cout << res.message << "\n";
    if (!res.gate_ok) {
      std::cerr << "gate failed\n";
      return 1;
    }
    return 0;
  } catch (const kloc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
