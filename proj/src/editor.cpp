#include "kloc/editor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

#include "kloc/rng.hpp"

namespace kloc {

void EditConfig::validate(int L) const {
  require(target_layer >= 1 && target_layer <= L, Error::Kind::Spec,
          "edit config: target layer must be set (trace first or pass one explicitly)");
  require(delta_steps >= 1, Error::Kind::Spec, "edit config: delta step cap must be positive");
  require(delta_lr > 0.0f, Error::Kind::Spec, "edit config: delta learning rate must be positive");
  require(preservation_count >= 0, Error::Kind::Spec, "edit config: preservation count must be >= 0");
  require(prefix_count >= 1, Error::Kind::Spec, "edit config: prefix count must be >= 1");
  require(target_prob > 0.0 && target_prob < 1.0, Error::Kind::Spec, "edit config: target probability in (0,1)");
}

int key_position(const PromptInstance& prompt, Perspective perspective) {
  int pos = perspective == Perspective::Entity ? prompt.subj_end - 1 : prompt.rel_end - 1;
  require(pos >= 0 && pos < static_cast<int>(prompt.tokens.size()), Error::Kind::Span,
          "key position outside prompt");
  return pos;
}

std::vector<std::vector<int>> make_prefixes(const Tokenizer& tok, int count, uint64_t seed) {
  require(count >= 1, Error::Kind::Spec, "make_prefixes: count must be >= 1");
  std::vector<int> pool;
  for (int id = 2; id < tok.vocab_size(); ++id) pool.push_back(id);  // skip <pad>/<unk>
  require(!pool.empty(), Error::Kind::Vocab, "make_prefixes: empty vocabulary");

  Pcg32 rng(mix64(seed, fnv1a64("prefixes")));
  std::vector<std::vector<int>> out;
  out.emplace_back();  // draw 0: empty prefix
  for (int j = 1; j < count; ++j) {
    int len = 1 + static_cast<int>(rng.next_below(3));
    std::vector<int> pre;
    for (int i = 0; i < len; ++i) pre.push_back(pool[rng.next_below(static_cast<uint32_t>(pool.size()))]);
    out.push_back(std::move(pre));
  }
  return out;
}

namespace {

std::vector<int> with_prefix(const std::vector<int>& prefix, const std::vector<int>& tokens) {
  std::vector<int> out = prefix;
  out.insert(out.end(), tokens.begin(), tokens.end());
  return out;
}

/// Input of the edited projection at one position: gelu(W_fc layernorm(h + a)).
Tensor mlp_key_activation(const Parameters& p, const ActivationTape& tape, int layer, int pos) {
  const LayerParams& lp = p.layers[layer - 1];
  const Tensor& h = tape.h[layer - 1];
  const Tensor& a = tape.a[layer - 1];
  int d = p.cfg.d;

  Tensor row = Tensor::zeros({1, d});
  for (int c = 0; c < d; ++c) row.data[c] = h.at(pos, c) + a.at(pos, c);

  Var x = make_constant(std::move(row));
  Var key = gelu(nullptr, matmul(nullptr, layernorm(nullptr, x, lp.ln2_g, lp.ln2_b), lp.wfc));
  Tensor out = Tensor::zeros({p.cfg.d_ff});
  std::copy(key->value.data.begin(), key->value.data.end(), out.data.begin());
  return out;
}

}  // namespace

Tensor compute_key(const Parameters& p, const PromptInstance& prompt, Perspective perspective, int l_star,
                   const std::vector<std::vector<int>>& prefixes) {
  require(l_star >= 1 && l_star <= p.cfg.L, Error::Kind::Spec, "compute_key: layer out of range");
  require(!prefixes.empty(), Error::Kind::Spec, "compute_key: need at least one prefix");
  int base_pos = key_position(prompt, perspective);

  std::vector<double> acc(static_cast<size_t>(p.cfg.d_ff), 0.0);
  for (const auto& prefix : prefixes) {
    std::vector<int> toks = with_prefix(prefix, prompt.tokens);
    ForwardOut f = forward(p, toks);
    Tensor k = mlp_key_activation(p, *f.tape, l_star, base_pos + static_cast<int>(prefix.size()));
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += k.data[i];
  }
  Tensor key = Tensor::zeros({p.cfg.d_ff});
  for (size_t i = 0; i < acc.size(); ++i) key.data[i] = static_cast<float>(acc[i] / prefixes.size());
  return key;
}

KeyValuePair optimize_value(const Parameters& p, const EditRequest& request, const EditConfig& cfg,
                            const std::vector<std::vector<int>>& prefixes) {
  cfg.validate(p.cfg.L);
  int l_star = cfg.target_layer;
  int base_pos = key_position(request.prompt, request.perspective);
  int N = static_cast<int>(prefixes.size());

  // base value and the norm cap, both from the plain prompt's clean run
  ForwardOut base = forward(p, request.prompt.tokens);
  Tensor h_base = Tensor::zeros({p.cfg.d});
  for (int c = 0; c < p.cfg.d; ++c) h_base.data[c] = base.tape->m[l_star - 1].at(base_pos, c);
  double hidden_norm = 0.0;
  {
    const Tensor& h = base.tape->h[l_star];
    for (int i = 0; i < h.rows(); ++i) {
      double s = 0.0;
      for (int c = 0; c < h.cols(); ++c) s += static_cast<double>(h.at(i, c)) * h.at(i, c);
      hidden_norm += std::sqrt(s);
    }
    hidden_norm /= h.rows();
  }
  double cap = cfg.delta_cap_factor * hidden_norm;

  auto project = [&](Tensor& delta) {
    double n = delta.norm();
    if (n > cap && n > 0.0) {
      float sc = static_cast<float>(cap / n);
      for (float& x : delta.data) x *= sc;
    }
  };

  // mean over augmented prompts of -log P[y*], with delta injected at the
  // (shifted) key position of l*; returns P[y*] on the plain prompt too
  auto evaluate = [&](const Tensor& delta, Tensor* grad_out, double* p_plain) {
    Var dvar = make_leaf(delta, grad_out != nullptr);
    double total = 0.0;
    for (int j = 0; j < N; ++j) {
      std::vector<int> toks = with_prefix(prefixes[j], request.prompt.tokens);
      int pos = base_pos + static_cast<int>(prefixes[j].size());
      Hook hook;
      hook.site = Site::MlpOut;
      hook.layer = l_star;
      hook.fn = [&dvar, pos](Tape* t, const Var& v) { return add_to_row(t, v, pos, dvar); };

      Tape tape;
      Tape* tp = grad_out ? &tape : nullptr;
      ForwardOut f = forward(p, toks, tp, std::span<const Hook>(&hook, 1));
      int last = static_cast<int>(toks.size()) - 1;
      double prob = answer_probability(logits_row(f.logits->value, last), request.target_token);
      if (j == 0 && p_plain) *p_plain = prob;
      total += -std::log(std::max(prob, 1e-30));
      if (grad_out) {
        Var loss = scale(&tape, cross_entropy(&tape, select_rows(&tape, f.logits, {last}),
                                              {request.target_token}),
                         1.0f / static_cast<float>(N));
        tape.backward(loss);
      }
    }
    if (grad_out) *grad_out = dvar->grad_or_zero();
    return total / N;
  };

  KeyValuePair kv;
  kv.delta = Tensor::zeros({p.cfg.d});
  kv.delta_cap = cap;

  double p_plain = 0.0;
  double loss = evaluate(kv.delta, nullptr, &p_plain);
  kv.loss_curve.push_back(loss);
  int stalled = 0;
  for (int step = 0; step < cfg.delta_steps && p_plain < cfg.target_prob; ++step) {
    Tensor grad;
    loss = evaluate(kv.delta, &grad, &p_plain);
    if (p_plain >= cfg.target_prob) break;

    // backtracking: halve the step until the loss stops increasing
    float lr = cfg.delta_lr;
    bool accepted = false;
    for (int half = 0; half < 10; ++half) {
      Tensor trial = kv.delta;
      for (size_t i = 0; i < trial.data.size(); ++i) trial.data[i] -= lr * grad.data[i];
      project(trial);
      double trial_p = 0.0;
      double trial_loss = evaluate(trial, nullptr, &trial_p);
      if (trial_loss <= loss) {
        kv.delta = std::move(trial);
        double improvement = loss - trial_loss;
        loss = trial_loss;
        p_plain = trial_p;
        kv.loss_curve.push_back(loss);
        kv.steps_used = step + 1;
        stalled = improvement > 1e-9 ? 0 : stalled + 1;
        accepted = true;
        break;
      }
      lr *= 0.5f;
    }
    if (!accepted) stalled += 1;
    if (stalled >= 50 && p_plain < cfg.target_prob)
      fail(Error::Kind::OptimizationStall, "optimize_value: no descent progress over 50 steps");
  }
  kv.p_target_intervened = p_plain;

  kv.value = Tensor::zeros({p.cfg.d});
  for (int c = 0; c < p.cfg.d; ++c) kv.value.data[c] = h_base.data[c] + kv.delta.data[c];
  kv.key = compute_key(p, request.prompt, request.perspective, l_star, prefixes);
  return kv;
}

// ---------------------------------------------------------------------------
// closed-form solve
// ---------------------------------------------------------------------------

Tensor solve_weight_update(const Tensor& W, const std::vector<Tensor>& preserved_keys,
                           const std::vector<std::pair<Tensor, Tensor>>& update_pairs, double lambda,
                           SolveDiagnostics* diag) {
  require(W.shape.size() == 2, Error::Kind::Shape, "solve: W must be a matrix");
  int d_ff = W.rows(), d = W.cols();
  require(!update_pairs.empty(), Error::Kind::Spec, "solve: at least one update pair required");

  using DMat = Eigen::MatrixXd;
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Wf(W.data.data(), d_ff, d);
  DMat W0 = Wf.cast<double>();

  auto key_ok = [&](const Tensor& k) {
    require(static_cast<int>(k.size()) == d_ff, Error::Kind::Shape, "solve: key width mismatch");
  };

  int m = static_cast<int>(preserved_keys.size() + update_pairs.size());
  DMat K(d_ff, m), V(d, m);
  int col = 0;
  for (const Tensor& k : preserved_keys) {
    key_ok(k);
    for (int i = 0; i < d_ff; ++i) K(i, col) = k.data[i];
    V.col(col) = W0.transpose() * K.col(col);  // retention: keep the current output
    col += 1;
  }
  for (const auto& [k, v] : update_pairs) {
    key_ok(k);
    require(static_cast<int>(v.size()) == d, Error::Kind::Shape, "solve: value width mismatch");
    for (int i = 0; i < d_ff; ++i) K(i, col) = k.data[i];
    for (int i = 0; i < d; ++i) V(i, col) = v.data[i];
    col += 1;
  }

  DMat G = K * K.transpose();
  if (lambda < 0.0) lambda = 1e-2 * G.diagonal().mean();
  require(lambda > 0.0 && std::isfinite(lambda), Error::Kind::Conditioning,
          "solve: ridge collapsed to zero (degenerate keys)");
  DMat A = G + lambda * DMat::Identity(d_ff, d_ff);

  Eigen::LLT<DMat> llt(A);
  require(llt.info() == Eigen::Success, Error::Kind::Conditioning, "solve: K K^T + lambda I is not positive definite");
  DMat B = K * V.transpose() + lambda * W0;  // [d_ff, d]
  DMat Wn = llt.solve(B);
  require(Wn.allFinite(), Error::Kind::Conditioning, "solve: non-finite solution");

  if (diag) {
    diag->lambda = lambda;
    diag->update_residual_max = 0.0;
    diag->preserved_drift_max = 0.0;
    for (size_t i = 0; i < update_pairs.size(); ++i) {
      int c = static_cast<int>(preserved_keys.size() + i);
      diag->update_residual_max = std::max(diag->update_residual_max, (Wn.transpose() * K.col(c) - V.col(c)).norm());
    }
    for (size_t i = 0; i < preserved_keys.size(); ++i) {
      int c = static_cast<int>(i);
      diag->preserved_drift_max =
          std::max(diag->preserved_drift_max, ((Wn - W0).transpose() * K.col(c)).norm());
    }
  }

  Tensor out = Tensor::zeros({d_ff, d});
  for (int r = 0; r < d_ff; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = static_cast<float>(Wn(r, c));
  return out;
}

// ---------------------------------------------------------------------------
// apply
// ---------------------------------------------------------------------------

std::vector<int> sample_preservation_facts(const World& w, const std::vector<int>& excluded_facts, int n,
                                           uint64_t seed) {
  std::set<int> excluded(excluded_facts.begin(), excluded_facts.end());
  std::vector<int> candidates;
  for (int f = 0; f < static_cast<int>(w.facts.size()); ++f)
    if (!excluded.count(f)) candidates.push_back(f);
  require(static_cast<int>(candidates.size()) >= n, Error::Kind::Spec,
          "preservation: not enough non-edited facts");

  Pcg32 rng(mix64(seed, fnv1a64("preserve")));
  rng.shuffle(candidates);
  candidates.resize(n);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

std::vector<Tensor> build_preservation_keys(const Parameters& p, const World& w, const Tokenizer& tok,
                                            const std::vector<int>& fact_ids, int l_star,
                                            const std::vector<std::vector<int>>& prefixes) {
  std::vector<Tensor> keys;
  for (size_t i = 0; i < fact_ids.size(); ++i) {
    // alternate perspectives so retention covers both key families
    Perspective persp = i % 2 == 0 ? Perspective::Entity : Perspective::Relation;
    PromptInstance prompt = verbalize(w, tok, fact_ids[i], persp, 0);
    keys.push_back(compute_key(p, prompt, persp, l_star, prefixes));
  }
  return keys;
}

std::pair<Parameters, EditTrace> apply_edit(const Parameters& p, const std::vector<EditRequest>& requests,
                                            const EditConfig& cfg, const World& w, const Tokenizer& tok,
                                            const std::vector<Tensor>* preservation_keys) {
  EditTrace trace;
  if (requests.empty()) return {p.clone(), trace};
  cfg.validate(p.cfg.L);

  std::set<std::pair<int, int>> keys_seen;
  for (const EditRequest& r : requests) {
    const Fact& f = w.facts.at(r.fact_id);
    require(keys_seen.insert({f.s, f.r}).second, Error::Kind::Spec,
            "apply_edit: conflicting requests share an (s, r) key");
    require(r.o_star != f.o, Error::Kind::Spec, "apply_edit: new object equals the stored object");
  }

  int l_star = cfg.target_layer;
  auto prefixes = make_prefixes(tok, cfg.prefix_count, cfg.seed);

  std::vector<Tensor> preserved;
  if (cfg.preservation_count > 0) {
    if (preservation_keys) {
      preserved = *preservation_keys;
    } else {
      std::vector<int> excluded;
      for (const EditRequest& r : requests) excluded.push_back(r.fact_id);
      auto facts = sample_preservation_facts(w, excluded, cfg.preservation_count, cfg.seed);
      preserved = build_preservation_keys(p, w, tok, facts, l_star, prefixes);
    }
  }

  std::vector<std::pair<Tensor, Tensor>> updates;
  for (const EditRequest& r : requests) {
    int last = static_cast<int>(r.prompt.tokens.size()) - 1;
    ForwardOut pre = forward(p, r.prompt.tokens);
    Tensor pre_row = logits_row(pre.logits->value, last);

    KeyValuePair kv = optimize_value(p, r, cfg, prefixes);
    updates.emplace_back(kv.key, kv.value);

    EditOutcome oc;
    oc.fact_id = r.fact_id;
    oc.perspective = r.perspective;
    oc.l_star = l_star;
    oc.key_norm = kv.key.norm();
    oc.delta_norm = kv.delta.norm();
    oc.delta_cap = kv.delta_cap;
    oc.delta_steps_used = kv.steps_used;
    oc.p_old_pre = answer_probability(pre_row, tok.encode_word(w.entities[w.facts[r.fact_id].o]));
    oc.p_new_pre = answer_probability(pre_row, r.target_token);
    trace.outcomes.push_back(oc);
  }

  SolveDiagnostics diag;
  const Tensor& W = p.layers[l_star - 1].wproj->value;
  Tensor Wn = solve_weight_update(W, preserved, updates, cfg.lambda, &diag);

  Parameters edited = p.clone();
  edited.layers[l_star - 1].wproj->value = std::move(Wn);

  for (size_t i = 0; i < requests.size(); ++i) {
    const EditRequest& r = requests[i];
    int last = static_cast<int>(r.prompt.tokens.size()) - 1;
    ForwardOut post = forward(edited, r.prompt.tokens);
    EditOutcome& oc = trace.outcomes[i];
    oc.p_new_post = answer_probability(logits_row(post.logits->value, last), r.target_token);
    oc.update_residual_max = diag.update_residual_max;
    oc.preserved_drift_max = diag.preserved_drift_max;
    oc.lambda = diag.lambda;
  }
  return {std::move(edited), std::move(trace)};
}

Parameters finetune_baseline(const Parameters& p, const std::vector<EditRequest>& requests, int steps, float lr,
                             const std::vector<int>& layer_set) {
  require(steps >= 0, Error::Kind::Spec, "finetune: negative step cap");
  require(lr > 0.0f, Error::Kind::Spec, "finetune: learning rate must be positive");
  Parameters ft = p.clone();
  if (steps == 0 || requests.empty()) return ft;

  std::vector<Var> tuned;
  for (int l : layer_set) {
    require(l >= 1 && l <= ft.cfg.L, Error::Kind::Spec, "finetune: layer out of range");
    ft.layers[l - 1].wfc->requires_grad = true;
    ft.layers[l - 1].wproj->requires_grad = true;
    tuned.push_back(ft.layers[l - 1].wfc);
    tuned.push_back(ft.layers[l - 1].wproj);
  }

  AdamState adam;
  AdamConfig acfg;
  acfg.lr = lr;
  try {
    for (int step = 0; step < steps; ++step) {
      bool all_confident = true;
      zero_grads(tuned);
      for (const EditRequest& r : requests) {
        Tape tape;
        ForwardOut f = forward(ft, r.prompt.tokens, &tape);
        int last = static_cast<int>(r.prompt.tokens.size()) - 1;
        if (answer_probability(logits_row(f.logits->value, last), r.target_token) < 0.95) all_confident = false;
        Var loss = scale(&tape, cross_entropy(&tape, select_rows(&tape, f.logits, {last}), {r.target_token}),
                         1.0f / static_cast<float>(requests.size()));
        tape.backward(loss);
      }
      if (all_confident) break;
      adam_step(tuned, adam, acfg);
    }
  } catch (const Error& e) {
    if (e.kind() == Error::Kind::Numeric)
      fail(Error::Kind::Training, std::string("finetune: diverged: ") + e.what());
    throw;
  }
  for (Var& v : tuned) v->requires_grad = false;
  return ft;
}

}  // namespace kloc
