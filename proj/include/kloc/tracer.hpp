#pragma once

#include <map>
#include <memory>
#include <optional>

#include "kloc/model.hpp"
#include "kloc/world.hpp"

namespace kloc {

enum class SpanSel { Subject, Relation, AllPrompt };
enum class SeverMode { None, Mlp, Attn };

const char* span_sel_name(SpanSel s);
const char* sever_name(SeverMode s);

/// Corruption recipe: Gaussian noise of scale nu on the selected span's
/// input embeddings, averaged over `samples` independent draws.
struct NoiseSpec {
  SpanSel span = SpanSel::Relation;
  double nu = -1.0;  // must be computed per checkpoint before use
  int samples = 5;
  uint64_t seed = 0;

  void validate() const;
};

struct TraceSpec {
  NoiseSpec noise;
  Site restore_site = Site::Hidden;
  int window = 1;  // odd; layers restored around the probed layer
  SeverMode severed = SeverMode::None;

  void validate(int L) const;
};

/// 3 x empirical standard deviation of the token-embedding entries.
double compute_noise_scale(const Parameters& p);

// ---------------------------------------------------------------------------
// the three runs
// ---------------------------------------------------------------------------

struct CleanRun {
  double p = 0.0;
  std::shared_ptr<ActivationTape> tape;
};

struct CorruptedRun {
  double p_mean = 0.0;
  std::vector<double> p_samples;
  std::vector<std::shared_ptr<ActivationTape>> tapes;  // one per noise sample
  std::vector<Tensor> noise_draws;                     // span rows x d
  std::vector<int> span_positions;
};

CleanRun clean_run(const Parameters& p, const PromptInstance& prompt);

CorruptedRun corrupted_run(const Parameters& p, const PromptInstance& prompt, const NoiseSpec& noise);

/// Mean restored probability: re-runs the corrupted pass per sample with the
/// clean value of `site` patched in at `position` for the window of layers
/// centred on `layer`; optionally freezes the severed module at that position
/// (all layers) to its corrupted-run values.
double restored_run(const Parameters& p, const PromptInstance& prompt, const CleanRun& clean,
                    const CorruptedRun& corrupted, Site site, int position, int layer, int window,
                    SeverMode severed = SeverMode::None);

/// Per-fact probabilities of the protocol; restored entries keyed (pos, layer).
struct RunTriple {
  double p_clean = 0.0;
  double p_corrupt = 0.0;
  std::map<std::pair<int, int>, double> p_restored;
};

double indirect_effect(const RunTriple& triple, int position, int layer);

// ---------------------------------------------------------------------------
// grids
// ---------------------------------------------------------------------------

enum class Bucket {
  FirstCorrupted,
  MiddleCorrupted,
  LastCorrupted,
  FirstSubsequent,
  Further,
  LastToken,
};

const char* bucket_name(Bucket b);
const std::vector<Bucket>& all_buckets();

/// Bucket of a position given the corrupted span; positions before the span
/// (other than the last token) carry no bucket and are not traced.
std::optional<Bucket> bucket_of(int position, int span_begin, int span_end, int T);

struct TraceRow {
  int fact_id = 0;
  Bucket bucket = Bucket::LastToken;
  int layer = 0;
  double ie = 0.0;
  double p_clean = 0.0;
  double p_corrupt = 0.0;
};

struct TraceGrid {
  Site site = Site::Hidden;
  SpanSel corrupt_span = SpanSel::Relation;
  SeverMode severed = SeverMode::None;
  int L = 0;
  int fact_count = 0;
  std::map<Bucket, std::vector<double>> aie;  // present buckets only; [L] per bucket
  std::map<Bucket, std::vector<int>> counts;
  std::vector<TraceRow> rows;  // per-fact cells, sorted (fact, bucket, layer)

  double cell(Bucket b, int layer) const;  // layer in [1, L]
  double max_cell() const;
  double median_cell() const;
};

/// AIE over a fact set. Per-fact noise streams derive from
/// (spec.noise.seed, fact_id), so results are independent of evaluation
/// order and thread count.
TraceGrid trace_fact_set(const Parameters& p, const std::vector<PromptInstance>& prompts,
                         const TraceSpec& spec, int threads = 0);

/// trace_fact_set with spec.severed in {Mlp, Attn}.
TraceGrid severed_trace(const Parameters& p, const std::vector<PromptInstance>& prompts, const TraceSpec& spec,
                        int threads = 0);

}  // namespace kloc
