#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "kloc/tensor.hpp"

namespace kloc {

/// One value in the computation graph. Gradient buffers are allocated
/// lazily on first accumulation; a node that never participates in a
/// backward pass reports an all-zero gradient.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_live = false;                 // grad buffer holds accumulated data
  std::function<void()> backprop;         // set only on recorded op outputs
  std::vector<std::shared_ptr<Node>> parents;

  Tensor& ensure_grad();
  const Tensor& grad_or_zero();
};

using Var = std::shared_ptr<Node>;

Var make_constant(Tensor value);
Var make_leaf(Tensor value, bool requires_grad = true);

/// Reverse-mode tape. Ops append their output nodes in creation order,
/// which is a topological order of the DAG; backward() replays it in
/// exact reverse. Rebuilt per forward pass.
class Tape {
 public:
  void record(const Var& v) { order_.push_back(v); }

  /// Seeds d(loss)=1 and accumulates gradients into every recorded node
  /// and every requires_grad leaf reachable from the loss.
  void backward(const Var& loss);

  size_t size() const { return order_.size(); }
  void clear() { order_.clear(); }

 private:
  std::vector<Var> order_;
};

// ---------------------------------------------------------------------------
// primitive ops; `tape == nullptr` runs forward-only (no graph bookkeeping)
// ---------------------------------------------------------------------------

Var matmul(Tape* tape, const Var& a, const Var& b);
Var transpose(Tape* tape, const Var& a);
Var add(Tape* tape, const Var& a, const Var& b);
Var sub(Tape* tape, const Var& a, const Var& b);
Var mul(Tape* tape, const Var& a, const Var& b);
Var scale(Tape* tape, const Var& a, float c);
Var neg(Tape* tape, const Var& a);
Var log_op(Tape* tape, const Var& a);
Var gelu(Tape* tape, const Var& a);
Var softmax_rows(Tape* tape, const Var& a);
Var layernorm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var sum(Tape* tape, const Var& a);

/// Mean over rows of -log softmax(logits)[target]; accumulations in double.
Var cross_entropy(Tape* tape, const Var& logits, const std::vector<int>& targets);

/// Gather rows: out[i,:] = x[idx[i],:]. Backward scatter-adds.
Var select_rows(Tape* tape, const Var& x, const std::vector<int>& idx);

Var slice_cols(Tape* tape, const Var& x, int c0, int c1);

/// out = x with out[positions[i],:] = replacement[i,:]; gradient is blocked
/// on replaced rows (hook machinery for interventions).
Var replace_rows(Tape* tape, const Var& x, const std::vector<int>& positions, const Tensor& replacement);

/// out = x with out[positions[i],:] += addend[i,:]; gradient passes through.
Var add_rows_const(Tape* tape, const Var& x, const std::vector<int>& positions, const Tensor& addend);

/// out = x with out[position,:] += v (v is a [d] vector Var, differentiable).
Var add_to_row(Tape* tape, const Var& x, int position, const Var& v);

/// Multi-head causal self-attention core: q,k,v are (B*T)xd with H heads;
/// returns the (B*T)xd mixed values (pre output-projection). Rows belong to
/// B independent length-T blocks; attention never crosses block boundaries.
Var causal_self_attention(Tape* tape, const Var& q, const Var& k, const Var& v, int B, int T, int H);

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

/// p -= lr * grad. Refuses the whole step if any gradient is non-finite.
void sgd_step(std::span<const Var> params, float lr);

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  int t = 0;
  std::unordered_map<Node*, std::pair<Tensor, Tensor>> moments;  // keyed by tensor identity
};

void adam_step(std::span<const Var> params, AdamState& state, const AdamConfig& cfg);

void zero_grads(std::span<const Var> params);

}  // namespace kloc
