#include "kloc/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "kloc/rng.hpp"

namespace kloc {

void ModelConfig::validate() const {
  require(L >= 1, Error::Kind::Shape, "config: L must be >= 1");
  require(H >= 1, Error::Kind::Shape, "config: H must be >= 1");
  require(d >= 1 && d % H == 0, Error::Kind::Shape, "config: H must divide d");
  require(d_ff >= 1, Error::Kind::Shape, "config: d_ff must be >= 1");
  require(V >= 2, Error::Kind::Shape, "config: V must be >= 2");
  require(T_max >= 1, Error::Kind::Shape, "config: T_max must be >= 1");
}

namespace {

Tensor gauss_tensor(Pcg32& rng, std::vector<int> shape, float std_dev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& x : t.data) x = static_cast<float>(rng.next_gauss() * std_dev);
  return t;
}

}  // namespace

Parameters Parameters::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Pcg32 rng(mix64(seed, fnv1a64("params")));
  const float base_std = 0.02f;
  // residual-path projections scaled down with depth, GPT-2 style
  const float resid_std = base_std / std::sqrt(2.0f * static_cast<float>(cfg.L));

  Parameters p;
  p.cfg = cfg;
  p.tok_emb = make_leaf(gauss_tensor(rng, {cfg.V, cfg.d}, base_std), false);
  p.pos_emb = make_leaf(gauss_tensor(rng, {cfg.T_max, cfg.d}, base_std), false);
  for (int l = 0; l < cfg.L; ++l) {
    LayerParams lp;
    lp.ln1_g = make_leaf(Tensor::full({cfg.d}, 1.0f), false);
    lp.ln1_b = make_leaf(Tensor::zeros({cfg.d}), false);
    lp.wq = make_leaf(gauss_tensor(rng, {cfg.d, cfg.d}, base_std), false);
    lp.wk = make_leaf(gauss_tensor(rng, {cfg.d, cfg.d}, base_std), false);
    lp.wv = make_leaf(gauss_tensor(rng, {cfg.d, cfg.d}, base_std), false);
    lp.wo = make_leaf(gauss_tensor(rng, {cfg.d, cfg.d}, resid_std), false);
    lp.ln2_g = make_leaf(Tensor::full({cfg.d}, 1.0f), false);
    lp.ln2_b = make_leaf(Tensor::zeros({cfg.d}), false);
    lp.wfc = make_leaf(gauss_tensor(rng, {cfg.d, cfg.d_ff}, base_std), false);
    lp.wproj = make_leaf(gauss_tensor(rng, {cfg.d_ff, cfg.d}, resid_std), false);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_g = make_leaf(Tensor::full({cfg.d}, 1.0f), false);
  p.lnf_b = make_leaf(Tensor::zeros({cfg.d}), false);
  p.unembed = make_leaf(gauss_tensor(rng, {cfg.d, cfg.V}, base_std), false);
  return p;
}

std::vector<std::pair<std::string, Var>> Parameters::named() const {
  std::vector<std::pair<std::string, Var>> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    const LayerParams& lp = layers[l];
    out.emplace_back(pre + "ln1.g", lp.ln1_g);
    out.emplace_back(pre + "ln1.b", lp.ln1_b);
    out.emplace_back(pre + "wq", lp.wq);
    out.emplace_back(pre + "wk", lp.wk);
    out.emplace_back(pre + "wv", lp.wv);
    out.emplace_back(pre + "wo", lp.wo);
    out.emplace_back(pre + "ln2.g", lp.ln2_g);
    out.emplace_back(pre + "ln2.b", lp.ln2_b);
    out.emplace_back(pre + "wfc", lp.wfc);
    out.emplace_back(pre + "wproj", lp.wproj);
  }
  out.emplace_back("lnf.g", lnf_g);
  out.emplace_back("lnf.b", lnf_b);
  out.emplace_back("unembed", unembed);
  return out;
}

Parameters Parameters::clone() const {
  Parameters c;
  c.cfg = cfg;
  auto copy = [](const Var& v) { return make_leaf(v->value, false); };
  c.tok_emb = copy(tok_emb);
  c.pos_emb = copy(pos_emb);
  for (const LayerParams& lp : layers) {
    LayerParams nl;
    nl.ln1_g = copy(lp.ln1_g);
    nl.ln1_b = copy(lp.ln1_b);
    nl.wq = copy(lp.wq);
    nl.wk = copy(lp.wk);
    nl.wv = copy(lp.wv);
    nl.wo = copy(lp.wo);
    nl.ln2_g = copy(lp.ln2_g);
    nl.ln2_b = copy(lp.ln2_b);
    nl.wfc = copy(lp.wfc);
    nl.wproj = copy(lp.wproj);
    c.layers.push_back(std::move(nl));
  }
  c.lnf_g = copy(lnf_g);
  c.lnf_b = copy(lnf_b);
  c.unembed = copy(unembed);
  return c;
}

void Parameters::set_requires_grad(bool on) {
  for (auto& [name, v] : named()) v->requires_grad = on;
}

// ---------------------------------------------------------------------------
// activation tape
// ---------------------------------------------------------------------------

const char* site_name(Site s) {
  switch (s) {
    case Site::Embedding: return "embedding";
    case Site::Hidden: return "hidden";
    case Site::AttnOut: return "attn";
    case Site::MlpOut: return "mlp";
  }
  return "?";
}

const Tensor& ActivationTape::at(Site site, int layer) const {
  switch (site) {
    case Site::Embedding:
      require(layer == 0, Error::Kind::Intervention, "embedding site lives at layer 0");
      return h[0];
    case Site::Hidden:
      require(layer >= 1 && layer <= L, Error::Kind::Intervention, "hidden layer out of range");
      return h[layer];
    case Site::AttnOut:
      require(layer >= 1 && layer <= L, Error::Kind::Intervention, "attn layer out of range");
      return a[layer - 1];
    case Site::MlpOut:
      require(layer >= 1 && layer <= L, Error::Kind::Intervention, "mlp layer out of range");
      return m[layer - 1];
  }
  fail(Error::Kind::Intervention, "bad site");
}

double ActivationTape::max_residual() const {
  double worst = 0.0;
  for (int l = 1; l <= L; ++l) {
    for (size_t i = 0; i < h[l].data.size(); ++i) {
      double r = static_cast<double>(h[l].data[i]) -
                 (static_cast<double>(h[l - 1].data[i]) + a[l - 1].data[i] + m[l - 1].data[i]);
      worst = std::max(worst, std::abs(r));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

Var apply_hooks(Tape* tape, std::span<const Hook> hooks, Site site, int layer, Var v) {
  for (const Hook& h : hooks) {
    if (h.site == site && h.layer == layer) v = h.fn(tape, v);
  }
  return v;
}

Var core_forward(const Parameters& p, const std::vector<int>& tokens, int B, int T, Tape* tape,
                 std::span<const Hook> hooks, ActivationTape* act) {
  const ModelConfig& cfg = p.cfg;
  cfg.validate();
  require(T >= 1 && T <= cfg.T_max, Error::Kind::Shape,
          "forward: sequence length " + std::to_string(T) + " out of range");
  require(static_cast<int>(tokens.size()) == B * T, Error::Kind::Shape, "forward: token count != B*T");
  for (int t : tokens)
    require(t >= 0 && t < cfg.V, Error::Kind::Vocab, "forward: token id " + std::to_string(t) + " outside vocabulary");
  require(hooks.empty() || B == 1, Error::Kind::Intervention, "hooks require a single sequence");

  std::vector<int> pos_ids(tokens.size());
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < T; ++i) pos_ids[static_cast<size_t>(b) * T + i] = i;

  Var h = add(tape, select_rows(tape, p.tok_emb, tokens), select_rows(tape, p.pos_emb, pos_ids));
  h = apply_hooks(tape, hooks, Site::Embedding, 0, h);
  if (act) {
    act->T = T;
    act->L = cfg.L;
    act->h.assign(cfg.L + 1, Tensor());
    act->a.assign(cfg.L, Tensor());
    act->m.assign(cfg.L, Tensor());
    act->h[0] = h->value;
  }

  for (int l = 1; l <= cfg.L; ++l) {
    const LayerParams& lp = p.layers[l - 1];
    Var xn = layernorm(tape, h, lp.ln1_g, lp.ln1_b);
    Var q = matmul(tape, xn, lp.wq);
    Var k = matmul(tape, xn, lp.wk);
    Var v = matmul(tape, xn, lp.wv);
    Var mix = causal_self_attention(tape, q, k, v, B, T, cfg.H);
    Var a = matmul(tape, mix, lp.wo);
    a = apply_hooks(tape, hooks, Site::AttnOut, l, a);
    if (act) act->a[l - 1] = a->value;

    Var mlp_in = layernorm(tape, add(tape, h, a), lp.ln2_g, lp.ln2_b);
    Var m = matmul(tape, gelu(tape, matmul(tape, mlp_in, lp.wfc)), lp.wproj);
    m = apply_hooks(tape, hooks, Site::MlpOut, l, m);
    if (act) act->m[l - 1] = m->value;

    h = add(tape, add(tape, h, a), m);
    h = apply_hooks(tape, hooks, Site::Hidden, l, h);
    if (act) act->h[l] = h->value;
  }

  Var hn = layernorm(tape, h, p.lnf_g, p.lnf_b);
  return matmul(tape, hn, p.unembed);
}

}  // namespace

ForwardOut forward(const Parameters& p, std::span<const int> tokens, Tape* tape, std::span<const Hook> hooks) {
  ForwardOut out;
  out.tape = std::make_shared<ActivationTape>();
  std::vector<int> toks(tokens.begin(), tokens.end());
  out.logits = core_forward(p, toks, 1, static_cast<int>(toks.size()), tape, hooks, out.tape.get());
  return out;
}

Var forward_batch(const Parameters& p, const std::vector<int>& tokens, int B, int T, Tape* tape) {
  return core_forward(p, tokens, B, T, tape, {}, nullptr);
}

// ---------------------------------------------------------------------------
// interventions
// ---------------------------------------------------------------------------

namespace {

void validate_intervention(const Parameters& p, const Intervention& iv, int T) {
  require(!iv.positions.empty(), Error::Kind::Intervention, "intervention: empty position set");
  for (int pos : iv.positions)
    require(pos >= 0 && pos < T, Error::Kind::Intervention, "intervention: position out of range");
  require(!iv.layers.empty(), Error::Kind::Intervention, "intervention: empty layer set");
  for (int l : iv.layers) {
    if (iv.site == Site::Embedding)
      require(l == 0, Error::Kind::Intervention, "intervention: embedding site uses layer 0");
    else
      require(l >= 1 && l <= p.cfg.L, Error::Kind::Intervention, "intervention: layer out of range");
  }
  if (iv.action == Intervention::Action::AddNoise) {
    require(iv.noise.rows() == static_cast<int>(iv.positions.size()) && iv.noise.cols() == p.cfg.d,
            Error::Kind::Intervention, "intervention: noise shape mismatch");
  } else {
    require(iv.reference != nullptr, Error::Kind::Intervention, "intervention: missing reference tape");
    require(iv.reference->T == T && iv.reference->L == p.cfg.L, Error::Kind::Intervention,
            "intervention: reference tape was produced on a different length or config");
    require(!iv.reference->h.empty() && iv.reference->h[0].cols() == p.cfg.d, Error::Kind::Intervention,
            "intervention: reference tape width mismatch");
  }
}

}  // namespace

ForwardOut forward_intervened(const Parameters& p, std::span<const int> tokens,
                              const std::vector<Intervention>& interventions, Tape* tape) {
  int T = static_cast<int>(tokens.size());
  for (const Intervention& iv : interventions) validate_intervention(p, iv, T);

  // compile to hooks, preserving declaration order per (site, layer)
  std::vector<Hook> hooks;
  for (const Intervention& iv : interventions) {
    for (int layer : iv.layers) {
      Hook h;
      h.site = iv.site;
      h.layer = layer;
      if (iv.action == Intervention::Action::AddNoise) {
        Tensor noise = iv.noise;
        auto positions = iv.positions;
        h.fn = [noise, positions](Tape* t, const Var& v) { return add_rows_const(t, v, positions, noise); };
      } else {
        // RestoreFrom and FreezeTo both pin the value to the reference tape;
        // they differ in which run the reference came from.
        auto ref = iv.reference;
        auto positions = iv.positions;
        Site site = iv.site;
        h.fn = [ref, positions, site, layer](Tape* t, const Var& v) {
          const Tensor& src = ref->at(site, layer);
          Tensor rows = Tensor::zeros({static_cast<int>(positions.size()), src.cols()});
          for (size_t r = 0; r < positions.size(); ++r)
            std::copy_n(&src.data[static_cast<size_t>(positions[r]) * src.cols()], src.cols(),
                        &rows.data[r * src.cols()]);
          return replace_rows(t, v, positions, rows);
        };
      }
      hooks.push_back(std::move(h));
    }
  }
  return forward(p, tokens, tape, hooks);
}

// ---------------------------------------------------------------------------
// readout helpers
// ---------------------------------------------------------------------------

double answer_probability(const Tensor& final_logits, int answer_token) {
  int V = static_cast<int>(final_logits.size());
  require(answer_token >= 0 && answer_token < V, Error::Kind::Vocab, "answer token outside vocabulary");
  double m = -1e300;
  for (float x : final_logits.data) m = std::max(m, static_cast<double>(x));
  double z = 0.0;
  for (float x : final_logits.data) z += std::exp(static_cast<double>(x) - m);
  return std::exp(static_cast<double>(final_logits.data[answer_token]) - m) / z;
}

Tensor logits_row(const Tensor& logits, int row) {
  int C = logits.cols();
  require(row >= 0 && row < logits.rows(), Error::Kind::Index, "logits_row: row out of range");
  Tensor out = Tensor::zeros({C});
  std::copy_n(&logits.data[static_cast<size_t>(row) * C], C, out.data.begin());
  return out;
}

namespace {

// Group sequences by length and run equal-length batches.
template <class PerRow>
void batched_final_rows(const Parameters& p, const std::vector<std::vector<int>>& seqs, PerRow&& visit) {
  std::map<int, std::vector<int>> by_len;
  for (size_t i = 0; i < seqs.size(); ++i) by_len[static_cast<int>(seqs[i].size())].push_back(static_cast<int>(i));
  const int max_rows = 4096;
  for (auto& [T, idx] : by_len) {
    int batch = std::max(1, max_rows / std::max(T, 1));
    for (size_t start = 0; start < idx.size(); start += batch) {
      size_t end = std::min(idx.size(), start + batch);
      int B = static_cast<int>(end - start);
      std::vector<int> toks;
      toks.reserve(static_cast<size_t>(B) * T);
      for (size_t j = start; j < end; ++j)
        toks.insert(toks.end(), seqs[idx[j]].begin(), seqs[idx[j]].end());
      Var logits = forward_batch(p, toks, B, T, nullptr);
      for (int b = 0; b < B; ++b) visit(idx[start + b], logits->value, b * T + T - 1);
    }
  }
}

}  // namespace

std::vector<int> predict_final(const Parameters& p, const std::vector<std::vector<int>>& seqs) {
  std::vector<int> out(seqs.size(), -1);
  batched_final_rows(p, seqs, [&](int i, const Tensor& logits, int row) {
    int V = logits.cols();
    int best = 0;
    float bv = logits.at(row, 0);
    for (int c = 1; c < V; ++c) {
      if (logits.at(row, c) > bv) {
        bv = logits.at(row, c);
        best = c;
      }
    }
    out[i] = best;
  });
  return out;
}

std::vector<double> answer_probabilities(const Parameters& p, const std::vector<std::vector<int>>& seqs,
                                         const std::vector<int>& answers) {
  require(seqs.size() == answers.size(), Error::Kind::Shape, "answer_probabilities: size mismatch");
  std::vector<double> out(seqs.size(), 0.0);
  batched_final_rows(p, seqs, [&](int i, const Tensor& logits, int row) {
    out[i] = answer_probability(logits_row(logits, row), answers[i]);
  });
  return out;
}

}  // namespace kloc
