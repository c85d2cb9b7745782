#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "kloc/editor.hpp"
#include "kloc/metrics.hpp"
#include "kloc/model.hpp"
#include "kloc/tracer.hpp"
#include "kloc/trainer.hpp"
#include "kloc/world.hpp"

namespace kloc {

struct WorldConfig {
  int entities = 50;
  int relations = 10;
  int facts = 300;
};

struct TraceStageConfig {
  int samples = 5;
  int window_hidden = 1;
  int window_module = 5;
  int facts = 200;  // traced fact count
};

struct EditStageConfig {
  int count = 50;  // single edits per perspective
  int delta_steps = 100;
  float delta_lr = 0.5f;
  double delta_cap_factor = 4.0;
  int preservation = 50;
  int prefixes = 8;
  double lambda_factor = 1e-2;
  double target_prob = 0.95;
  int target_layer = 0;  // 0 = argmax of the mlp-site AIE grid
};

/// Whole-experiment configuration; a single JSON file with per-stage
/// sections. The output directory is not part of the config (and not part
/// of its hash) so runs in different directories compare bit-identically.
struct ExperimentConfig {
  uint64_t seed = 1234;
  WorldConfig world;
  ModelConfig model;  // V is derived from the generated world
  TrainConfig train;
  TraceStageConfig trace;
  EditStageConfig edit;
  int threads = 0;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);  // missing keys keep defaults

  std::string config_hash() const;
};

// artifact file names, relative to the output directory
namespace artifact {
inline constexpr const char* kWorld = "world.json";
inline constexpr const char* kCheckpoint = "checkpoint.kloc";
inline constexpr const char* kRecallReport = "recall_report.json";
inline constexpr const char* kTraceCsv = "trace.csv";
inline constexpr const char* kAieRelation = "aie.json";
inline constexpr const char* kAieEntity = "aie_entity.json";
inline constexpr const char* kSeverCsvMlp = "sever_trace_mlp.csv";
inline constexpr const char* kSeverCsvAttn = "sever_trace_attn.csv";
inline constexpr const char* kAieSeverMlp = "aie_sever_mlp.json";
inline constexpr const char* kAieSeverAttn = "aie_sever_attn.json";
inline constexpr const char* kEditTrace = "edit_trace.json";
inline constexpr const char* kMetricsReport = "metrics_report.json";
}  // namespace artifact

struct StageResult {
  bool gate_ok = true;
  std::string message;
};

/// Pipeline stages. Each verifies its upstream artifacts (existence plus
/// config/checkpoint hash freshness), writes its outputs under `out`, and
/// reports whether its gate passed.
StageResult stage_gen_world(const ExperimentConfig& cfg, const std::string& out);
StageResult stage_train(const ExperimentConfig& cfg, const std::string& out);
StageResult stage_trace(const ExperimentConfig& cfg, const std::string& out, const std::string& perspective = "both",
                        const std::string& site = "all");
StageResult stage_sever_trace(const ExperimentConfig& cfg, const std::string& out,
                              const std::string& sever = "both");
StageResult stage_edit(const ExperimentConfig& cfg, const std::string& out,
                       const std::string& perspective = "both");
StageResult stage_eval(const ExperimentConfig& cfg, const std::string& out);
StageResult stage_report(const ExperimentConfig& cfg, const std::string& out);

// ---------------------------------------------------------------------------
// helpers shared with tests
// ---------------------------------------------------------------------------

/// TraceGrid <-> the aie.json schema ({site -> bucket -> [per-layer AIE]}
/// plus a metadata object).
nlohmann::json grids_to_json(const std::vector<TraceGrid>& grids, const nlohmann::json& metadata);
TraceGrid grid_from_json(const nlohmann::json& j, const std::string& site_key);

/// Layer of the maximum mlp-site AIE cell of an aie.json document.
int aie_mlp_argmax_layer(const nlohmann::json& aie);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);
nlohmann::json read_json_file(const std::string& path);

}  // namespace kloc
