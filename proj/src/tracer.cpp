#include "kloc/tracer.hpp"

#include <algorithm>
#include <cmath>

#include "kloc/parallel.hpp"
#include "kloc/rng.hpp"

namespace kloc {

const char* span_sel_name(SpanSel s) {
  switch (s) {
    case SpanSel::Subject: return "subject";
    case SpanSel::Relation: return "relation";
    case SpanSel::AllPrompt: return "all-prompt";
  }
  return "?";
}

const char* sever_name(SeverMode s) {
  switch (s) {
    case SeverMode::None: return "none";
    case SeverMode::Mlp: return "mlp";
    case SeverMode::Attn: return "attn";
  }
  return "?";
}

void NoiseSpec::validate() const {
  require(nu >= 0.0, Error::Kind::Spec, "noise: nu has not been computed for this checkpoint");
  require(samples >= 1, Error::Kind::Spec, "noise: sample count must be >= 1");
}

void TraceSpec::validate(int L) const {
  noise.validate();
  require(window >= 1 && window % 2 == 1, Error::Kind::Spec, "trace: window must be odd and positive");
  require(window <= L, Error::Kind::Spec, "trace: window exceeds layer count");
  if (severed == SeverMode::Mlp)
    require(restore_site != Site::MlpOut, Error::Kind::Spec, "trace: cannot sever the restored module");
  if (severed == SeverMode::Attn)
    require(restore_site != Site::AttnOut, Error::Kind::Spec, "trace: cannot sever the restored module");
  require(restore_site != Site::Embedding, Error::Kind::Spec, "trace: embedding is not a restore site");
}

double compute_noise_scale(const Parameters& p) {
  const Tensor& e = p.tok_emb->value;
  double mean = 0.0;
  for (float x : e.data) mean += x;
  mean /= static_cast<double>(e.data.size());
  double var = 0.0;
  for (float x : e.data) {
    double d = x - mean;
    var += d * d;
  }
  var /= static_cast<double>(e.data.size());
  return 3.0 * std::sqrt(var);
}

namespace {

std::pair<int, int> span_of(const PromptInstance& prompt, SpanSel sel) {
  switch (sel) {
    case SpanSel::Subject: return {prompt.subj_begin, prompt.subj_end};
    case SpanSel::Relation: return {prompt.rel_begin, prompt.rel_end};
    case SpanSel::AllPrompt: return {0, static_cast<int>(prompt.tokens.size())};
  }
  fail(Error::Kind::Spec, "bad span selector");
}

Tensor draw_noise(int rows, int d, double nu, uint64_t seed) {
  Pcg32 rng(seed);
  Tensor t = Tensor::zeros({rows, d});
  for (float& x : t.data) x = static_cast<float>(rng.next_gauss() * nu);
  return t;
}

std::vector<int> window_layers(int layer, int window, int L) {
  int half = window / 2;
  int lo = std::max(1, layer - half);
  int hi = std::min(L, layer + half);
  std::vector<int> out;
  for (int l = lo; l <= hi; ++l) out.push_back(l);
  return out;
}

}  // namespace

CleanRun clean_run(const Parameters& p, const PromptInstance& prompt) {
  CleanRun out;
  ForwardOut f = forward(p, prompt.tokens);
  out.tape = f.tape;
  out.p = answer_probability(logits_row(f.logits->value, static_cast<int>(prompt.tokens.size()) - 1),
                             prompt.answer);
  return out;
}

CorruptedRun corrupted_run(const Parameters& p, const PromptInstance& prompt, const NoiseSpec& noise) {
  noise.validate();
  auto [b, e] = span_of(prompt, noise.span);
  require(e > b, Error::Kind::Spec, "corrupted_run: empty corruption span");

  CorruptedRun out;
  for (int pos = b; pos < e; ++pos) out.span_positions.push_back(pos);

  int T = static_cast<int>(prompt.tokens.size());
  double acc = 0.0;
  for (int s = 0; s < noise.samples; ++s) {
    Tensor draw = draw_noise(e - b, p.cfg.d, noise.nu, mix64(noise.seed, fnv1a64("noise"), static_cast<uint64_t>(s)));
    Intervention iv;
    iv.site = Site::Embedding;
    iv.positions = out.span_positions;
    iv.layers = {0};
    iv.action = Intervention::Action::AddNoise;
    iv.noise = draw;
    ForwardOut f = forward_intervened(p, prompt.tokens, {iv});
    double ps = answer_probability(logits_row(f.logits->value, T - 1), prompt.answer);
    out.p_samples.push_back(ps);
    out.tapes.push_back(f.tape);
    out.noise_draws.push_back(std::move(draw));
    acc += ps;
  }
  out.p_mean = acc / noise.samples;
  return out;
}

double restored_run(const Parameters& p, const PromptInstance& prompt, const CleanRun& clean,
                    const CorruptedRun& corrupted, Site site, int position, int layer, int window,
                    SeverMode severed) {
  require(window >= 1 && window % 2 == 1, Error::Kind::Spec, "restored_run: window must be odd");
  require(clean.tape != nullptr, Error::Kind::Spec, "restored_run: clean tape unavailable");
  int T = static_cast<int>(prompt.tokens.size());
  int L = p.cfg.L;

  double acc = 0.0;
  for (size_t s = 0; s < corrupted.tapes.size(); ++s) {
    std::vector<Intervention> ivs;

    Intervention noise_iv;
    noise_iv.site = Site::Embedding;
    noise_iv.positions = corrupted.span_positions;
    noise_iv.layers = {0};
    noise_iv.action = Intervention::Action::AddNoise;
    noise_iv.noise = corrupted.noise_draws[s];
    ivs.push_back(std::move(noise_iv));

    if (severed != SeverMode::None) {
      Intervention freeze;
      freeze.site = severed == SeverMode::Mlp ? Site::MlpOut : Site::AttnOut;
      freeze.positions = {position};
      for (int l = 1; l <= L; ++l) freeze.layers.push_back(l);
      freeze.action = Intervention::Action::FreezeTo;
      freeze.reference = corrupted.tapes[s];
      ivs.push_back(std::move(freeze));
    }

    Intervention restore;
    restore.site = site;
    restore.positions = {position};
    restore.layers = window_layers(layer, window, L);
    restore.action = Intervention::Action::RestoreFrom;
    restore.reference = clean.tape;
    ivs.push_back(std::move(restore));

    ForwardOut f = forward_intervened(p, prompt.tokens, ivs);
    acc += answer_probability(logits_row(f.logits->value, T - 1), prompt.answer);
  }
  return acc / static_cast<double>(corrupted.tapes.size());
}

double indirect_effect(const RunTriple& triple, int position, int layer) {
  auto it = triple.p_restored.find({position, layer});
  require(it != triple.p_restored.end(), Error::Kind::Spec,
          "indirect_effect: no restored probability at the requested cell");
  return it->second - triple.p_corrupt;
}

// ---------------------------------------------------------------------------
// buckets
// ---------------------------------------------------------------------------

const char* bucket_name(Bucket b) {
  switch (b) {
    case Bucket::FirstCorrupted: return "first-corrupted";
    case Bucket::MiddleCorrupted: return "middle-corrupted";
    case Bucket::LastCorrupted: return "last-corrupted";
    case Bucket::FirstSubsequent: return "first-subsequent";
    case Bucket::Further: return "further";
    case Bucket::LastToken: return "last-token";
  }
  return "?";
}

const std::vector<Bucket>& all_buckets() {
  static const std::vector<Bucket> order = {Bucket::FirstCorrupted, Bucket::MiddleCorrupted,
                                            Bucket::LastCorrupted,  Bucket::FirstSubsequent,
                                            Bucket::Further,        Bucket::LastToken};
  return order;
}

std::optional<Bucket> bucket_of(int position, int span_begin, int span_end, int T) {
  require(position >= 0 && position < T, Error::Kind::Index, "bucket_of: position out of range");
  if (position == T - 1) return Bucket::LastToken;
  if (position >= span_begin && position < span_end) {
    if (position == span_end - 1) return Bucket::LastCorrupted;
    if (position == span_begin) return Bucket::FirstCorrupted;
    return Bucket::MiddleCorrupted;
  }
  if (position == span_end) return Bucket::FirstSubsequent;
  if (position > span_end) return Bucket::Further;
  return std::nullopt;  // before the corrupted span
}

// ---------------------------------------------------------------------------
// grids
// ---------------------------------------------------------------------------

double TraceGrid::cell(Bucket b, int layer) const {
  auto it = aie.find(b);
  require(it != aie.end(), Error::Kind::Spec, "grid: bucket absent");
  require(layer >= 1 && layer <= L, Error::Kind::Index, "grid: layer out of range");
  return it->second[layer - 1];
}

double TraceGrid::max_cell() const {
  double best = -1e300;
  for (const auto& [b, vals] : aie)
    for (double v : vals) best = std::max(best, v);
  require(best > -1e300, Error::Kind::Spec, "grid: empty");
  return best;
}

double TraceGrid::median_cell() const {
  std::vector<double> all;
  for (const auto& [b, vals] : aie) all.insert(all.end(), vals.begin(), vals.end());
  require(!all.empty(), Error::Kind::Spec, "grid: empty");
  std::sort(all.begin(), all.end());
  size_t n = all.size();
  return n % 2 ? all[n / 2] : 0.5 * (all[n / 2 - 1] + all[n / 2]);
}

namespace {

struct FactTrace {
  int fact_id = 0;
  std::vector<TraceRow> rows;
};

FactTrace trace_one_fact(const Parameters& p, const PromptInstance& prompt, const TraceSpec& spec) {
  FactTrace out;
  out.fact_id = prompt.fact_id;

  NoiseSpec noise = spec.noise;
  noise.seed = mix64(spec.noise.seed, static_cast<uint64_t>(prompt.fact_id));

  CleanRun clean = clean_run(p, prompt);
  CorruptedRun corrupted = corrupted_run(p, prompt, noise);

  int T = static_cast<int>(prompt.tokens.size());
  auto [sb, se] = span_of(prompt, noise.span);
  for (int pos = 0; pos < T; ++pos) {
    auto bucket = bucket_of(pos, sb, se, T);
    if (!bucket) continue;
    for (int layer = 1; layer <= p.cfg.L; ++layer) {
      double restored =
          restored_run(p, prompt, clean, corrupted, spec.restore_site, pos, layer, spec.window, spec.severed);
      TraceRow row;
      row.fact_id = prompt.fact_id;
      row.bucket = *bucket;
      row.layer = layer;
      row.ie = restored - corrupted.p_mean;
      row.p_clean = clean.p;
      row.p_corrupt = corrupted.p_mean;
      out.rows.push_back(row);
    }
  }
  return out;
}

}  // namespace

TraceGrid trace_fact_set(const Parameters& p, const std::vector<PromptInstance>& prompts, const TraceSpec& spec,
                         int threads) {
  spec.validate(p.cfg.L);
  require(!prompts.empty(), Error::Kind::Spec, "trace_fact_set: empty fact set");

  std::vector<FactTrace> results(prompts.size());
  parallel_for(
      static_cast<int>(prompts.size()), [&](int i) { results[i] = trace_one_fact(p, prompts[i], spec); },
      threads);

  // reduce in fact-id order so the grid is invariant to input order
  std::sort(results.begin(), results.end(),
            [](const FactTrace& a, const FactTrace& b) { return a.fact_id < b.fact_id; });

  TraceGrid grid;
  grid.site = spec.restore_site;
  grid.corrupt_span = spec.noise.span;
  grid.severed = spec.severed;
  grid.L = p.cfg.L;
  grid.fact_count = static_cast<int>(prompts.size());

  std::map<Bucket, std::vector<double>> sums;
  for (const FactTrace& ft : results) {
    for (const TraceRow& row : ft.rows) {
      auto& s = sums[row.bucket];
      auto& c = grid.counts[row.bucket];
      if (s.empty()) {
        s.assign(grid.L, 0.0);
        c.assign(grid.L, 0);
      }
      s[row.layer - 1] += row.ie;
      c[row.layer - 1] += 1;
      grid.rows.push_back(row);
    }
  }
  for (auto& [bucket, s] : sums) {
    std::vector<double> mean(grid.L, 0.0);
    for (int l = 0; l < grid.L; ++l) {
      int n = grid.counts[bucket][l];
      require(n > 0, Error::Kind::Spec, "trace_fact_set: bucket present but layer cell empty");
      mean[l] = s[l] / n;
    }
    grid.aie[bucket] = std::move(mean);
  }
  return grid;
}

TraceGrid severed_trace(const Parameters& p, const std::vector<PromptInstance>& prompts, const TraceSpec& spec,
                        int threads) {
  require(spec.severed != SeverMode::None, Error::Kind::Spec, "severed_trace: severed module must be mlp or attn");
  return trace_fact_set(p, prompts, spec, threads);
}

}  // namespace kloc
