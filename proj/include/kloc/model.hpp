#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kloc/autodiff.hpp"

namespace kloc {

struct ModelConfig {
  int L = 8;       // layers
  int d = 128;     // model width
  int H = 4;       // attention heads
  int d_ff = 512;  // MLP width
  int V = 0;       // vocabulary size (derived from the world)
  int T_max = 32;  // context length

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// All trainable weights. Pre-layernorm GPT-2 style blocks, no biases on
/// the projections, learned absolute positional embeddings, untied
/// unembedding.
struct LayerParams {
  Var ln1_g, ln1_b;
  Var wq, wk, wv, wo;
  Var ln2_g, ln2_b;
  Var wfc, wproj;
};

struct Parameters {
  ModelConfig cfg;
  Var tok_emb;  // [V, d]
  Var pos_emb;  // [T_max, d]
  std::vector<LayerParams> layers;
  Var lnf_g, lnf_b;
  Var unembed;  // [d, V]

  static Parameters init(const ModelConfig& cfg, uint64_t seed);

  /// Stable (name, tensor) listing; checkpoint order.
  std::vector<std::pair<std::string, Var>> named() const;

  /// Deep copy of the values (fresh leaf nodes, requires_grad false).
  Parameters clone() const;

  void set_requires_grad(bool on);
};

// ---------------------------------------------------------------------------
// activation capture and interventions
// ---------------------------------------------------------------------------

enum class Site { Embedding, Hidden, AttnOut, MlpOut };

const char* site_name(Site s);

/// Per-layer, per-position activations of one forward pass. `h[0]` is the
/// input embedding; for l in [1, L], h[l] = h[l-1] + a[l] + m[l] holds
/// entrywise on any uninterfered run.
struct ActivationTape {
  int T = 0;
  int L = 0;
  std::vector<Tensor> h;  // L+1 entries, each [T, d]
  std::vector<Tensor> a;  // L entries
  std::vector<Tensor> m;  // L entries

  const Tensor& at(Site site, int layer) const;
  /// Max residual of h[l] - (h[l-1] + a[l] + m[l]) over all layers.
  double max_residual() const;
};

/// A patch/freeze/noise directive on the computation graph. Actions apply
/// after the site's value is computed and before any consumer reads it,
/// in declaration order.
struct Intervention {
  enum class Action { AddNoise, RestoreFrom, FreezeTo };

  Site site = Site::Hidden;
  std::vector<int> positions;
  std::vector<int> layers;  // Embedding site uses layer 0
  Action action = Action::RestoreFrom;
  Tensor noise;  // AddNoise: [positions.size(), d]
  std::shared_ptr<const ActivationTape> reference;  // RestoreFrom / FreezeTo
};

/// Low-level patch point: fn sees the site value (T x d Var) and returns the
/// value downstream consumers will read. The editor's residual injection and
/// the tracer's interventions both ride on this.
struct Hook {
  Site site;
  int layer;
  std::function<Var(Tape*, const Var&)> fn;
};

struct ForwardOut {
  Var logits;  // [T, V]
  std::shared_ptr<ActivationTape> tape;
};

/// Single-sequence forward with activation capture and hooks.
ForwardOut forward(const Parameters& p, std::span<const int> tokens, Tape* tape = nullptr,
                   std::span<const Hook> hooks = {});

/// Equal-length batched forward used by training and bulk evaluation;
/// no hooks, no activation capture. Returns (B*T) x V logits.
Var forward_batch(const Parameters& p, const std::vector<int>& tokens, int B, int T, Tape* tape);

/// forward() with declarative interventions; an empty list is extensionally
/// equal to forward().
ForwardOut forward_intervened(const Parameters& p, std::span<const int> tokens,
                              const std::vector<Intervention>& interventions, Tape* tape = nullptr);

/// softmax(final logits)[answer]; stable, double accumulation.
double answer_probability(const Tensor& final_logits, int answer_token);

/// Row `row` of a logits matrix as a [V] tensor.
Tensor logits_row(const Tensor& logits, int row);

/// Batched argmax of the final-position logits for each sequence
/// (sequences grouped by length internally).
std::vector<int> predict_final(const Parameters& p, const std::vector<std::vector<int>>& seqs);

/// Probability of `answers[i]` at the final position of seqs[i].
std::vector<double> answer_probabilities(const Parameters& p, const std::vector<std::vector<int>>& seqs,
                                         const std::vector<int>& answers);

}  // namespace kloc
