#pragma once

#include "kloc/model.hpp"
#include "kloc/tracer.hpp"
#include "kloc/world.hpp"

namespace kloc {

/// One desired rewrite: the model should map the fact's prompt to o* instead
/// of o. The perspective decides which span anchors the edit key.
struct EditRequest {
  int fact_id = 0;
  int o_star = 0;  // entity index of the new object
  Perspective perspective = Perspective::Entity;
  PromptInstance prompt;  // a train template of that perspective
  int target_token = 0;   // token id of o*
};

struct EditConfig {
  int target_layer = -1;          // l*; defaults to the mlp-site AIE argmax, supplied by the caller
  int delta_steps = 100;          // residual optimization step cap
  float delta_lr = 0.5f;          // residual optimization step size
  double delta_cap_factor = 4.0;  // cap = factor x mean hidden-state norm at l*
  int preservation_count = 50;    // n
  int prefix_count = 8;           // N
  double lambda = -1.0;           // ridge; < 0 means 1e-2 x mean diag(K K^T)
  double target_prob = 0.95;      // residual optimization stops here
  uint64_t seed = 0;

  void validate(int L) const;
};

/// Key k (post-nonlinearity input of the edited projection, width d_ff),
/// value v = h + delta (width d) at the key position of layer l*.
struct KeyValuePair {
  Tensor key;
  Tensor value;
  Tensor delta;
  double delta_cap = 0.0;
  int steps_used = 0;
  double p_target_intervened = 0.0;  // P[y*] on the edit prompt under the delta hook
  std::vector<double> loss_curve;
};

/// Last token of the span the perspective keys on; prefix length shifts it.
int key_position(const PromptInstance& prompt, Perspective perspective);

/// Random 0-3 token prefixes over the world vocabulary; draw 0 is always the
/// empty prefix so N=1 degenerates to the plain prompt.
std::vector<std::vector<int>> make_prefixes(const Tokenizer& tok, int count, uint64_t seed);

/// Mean over the prefix augmentations of the edited projection's input
/// activation at the key position of layer l_star.
Tensor compute_key(const Parameters& p, const PromptInstance& prompt, Perspective perspective, int l_star,
                   const std::vector<std::vector<int>>& prefixes);

/// Optimizes the residual delta by gradient descent with backtracking on the
/// mean negative log-likelihood of the target over the augmented prompts;
/// the hidden-state addition is realized as a forward hook at the key
/// position of l_star.
KeyValuePair optimize_value(const Parameters& p, const EditRequest& request, const EditConfig& cfg,
                            const std::vector<std::vector<int>>& prefixes);

struct SolveDiagnostics {
  double lambda = 0.0;
  double update_residual_max = 0.0;    // max |W_new^T k - v| over update pairs
  double preserved_drift_max = 0.0;    // max |W_new^T k - W^T k| over preserved pairs
};

/// Closed-form ridge solve of the retention-plus-update least squares:
/// (sum_i k_i k_i^T + lambda I) W_new = sum_i k_i v_i^T + lambda W.
/// W is the current projection stored input-major ([d_ff, d]); keys enter
/// in pairs (k_i, v_i), preserved pairs first with v_i = W^T k_i implied.
Tensor solve_weight_update(const Tensor& W, const std::vector<Tensor>& preserved_keys,
                           const std::vector<std::pair<Tensor, Tensor>>& update_pairs, double lambda,
                           SolveDiagnostics* diag = nullptr);

struct EditOutcome {
  int fact_id = 0;
  Perspective perspective = Perspective::Entity;
  int l_star = 0;
  double key_norm = 0.0;
  double delta_norm = 0.0;
  double delta_cap = 0.0;
  int delta_steps_used = 0;
  double p_old_pre = 0.0;   // P[o] on the edit prompt before editing
  double p_new_pre = 0.0;   // P[o*] before editing
  double p_new_post = 0.0;  // P[o*] after editing
  double update_residual_max = 0.0;
  double preserved_drift_max = 0.0;
  double lambda = 0.0;
};

struct EditTrace {
  std::vector<EditOutcome> outcomes;
};

/// Deterministic sample of n facts outside the excluded set.
std::vector<int> sample_preservation_facts(const World& w, const std::vector<int>& excluded_facts, int n,
                                           uint64_t seed);

/// Retention keys for the given facts; perspectives alternate by index so
/// both key families stay pinned.
std::vector<Tensor> build_preservation_keys(const Parameters& p, const World& w, const Tokenizer& tok,
                                            const std::vector<int>& fact_ids, int l_star,
                                            const std::vector<std::vector<int>>& prefixes);

/// Locate-then-edit: computes keys and optimized values for all requests and
/// replaces the MLP projection of l* with the closed-form solution. Only that
/// one matrix differs between the input and output parameters.
std::pair<Parameters, EditTrace> apply_edit(const Parameters& p, const std::vector<EditRequest>& requests,
                                            const EditConfig& cfg, const World& w, const Tokenizer& tok,
                                            const std::vector<Tensor>* preservation_keys = nullptr);

/// Fine-tuning baseline: gradient steps on the target likelihood restricted
/// to the MLP weights of the given layers.
Parameters finetune_baseline(const Parameters& p, const std::vector<EditRequest>& requests, int steps, float lr,
                             const std::vector<int>& layer_set);

}  // namespace kloc
