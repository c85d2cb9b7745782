#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "kloc/checkpoint.hpp"
#include "kloc/model.hpp"
#include "test_util.hpp"

using namespace kloc;
using namespace kloc::testutil;

namespace {

ModelConfig small_cfg() {
  ModelConfig c;
  c.L = 2;
  c.d = 8;
  c.H = 2;
  c.d_ff = 16;
  c.V = 11;
  c.T_max = 6;
  return c;
}

}  // namespace

TEST_CASE("forward: determinism and tape completeness") {
  Parameters p = Parameters::init(small_cfg(), 3);
  std::vector<int> toks = {1, 4, 7, 2};
  ForwardOut a = forward(p, toks);
  ForwardOut b = forward(p, toks);
  CHECK(a.logits->value.data == b.logits->value.data);
  for (int l = 0; l <= p.cfg.L; ++l) CHECK(a.tape->h[l].data == b.tape->h[l].data);
  CHECK(a.tape->T == 4);
  CHECK(a.tape->L == 2);
  CHECK(static_cast<int>(a.tape->a.size()) == p.cfg.L);
  CHECK(static_cast<int>(a.tape->m.size()) == p.cfg.L);
}

TEST_CASE("forward: residual recurrence holds on every tape") {
  Parameters p = Parameters::init(small_cfg(), 5);
  ForwardOut f = forward(p, std::vector<int>{0, 9, 3, 3, 8});
  CHECK(f.tape->max_residual() < 1e-5);
}

TEST_CASE("forward: token outside the vocabulary is refused") {
  Parameters p = Parameters::init(small_cfg(), 5);
  CHECK_THROWS_AS(forward(p, std::vector<int>{1, 11}), Error);
  try {
    forward(p, std::vector<int>{1, 11});
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Vocab);
  }
}

// Independent scalar re-implementation of the 1-layer, 1-head forward pass,
// entirely in double precision with plain loops.
TEST_CASE("forward: 1-layer d=4 model matches a hand-unrolled computation") {
  ModelConfig cfg;
  cfg.L = 1;
  cfg.d = 4;
  cfg.H = 1;
  cfg.d_ff = 8;
  cfg.V = 5;
  cfg.T_max = 4;
  Parameters p = Parameters::init(cfg, 17);
  std::vector<int> toks = {1, 3};
  const int T = 2, d = 4, dff = 8, V = 5;

  auto value = [&](const Var& v) { return v->value; };
  auto ln_row = [&](std::vector<double>& row, const Tensor& g, const Tensor& b) {
    double mean = 0.0;
    for (double x : row) mean += x;
    mean /= row.size();
    double var = 0.0;
    for (double x : row) var += (x - mean) * (x - mean);
    var /= row.size();
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (size_t i = 0; i < row.size(); ++i) row[i] = (row[i] - mean) * inv * g.data[i] + b.data[i];
  };
  auto vecmat = [&](const std::vector<double>& x, const Tensor& w, int in, int out) {
    std::vector<double> y(out, 0.0);
    for (int j = 0; j < out; ++j)
      for (int i = 0; i < in; ++i) y[j] += x[i] * w.at(i, j);
    return y;
  };

  // embeddings
  std::vector<std::vector<double>> h(T, std::vector<double>(d));
  for (int i = 0; i < T; ++i)
    for (int c = 0; c < d; ++c)
      h[i][c] = static_cast<double>(value(p.tok_emb).at(toks[i], c)) + value(p.pos_emb).at(i, c);

  const LayerParams& lp = p.layers[0];
  std::vector<std::vector<double>> xn = h;
  for (auto& row : xn) ln_row(row, value(lp.ln1_g), value(lp.ln1_b));

  std::vector<std::vector<double>> q(T), k(T), v(T);
  for (int i = 0; i < T; ++i) {
    q[i] = vecmat(xn[i], value(lp.wq), d, d);
    k[i] = vecmat(xn[i], value(lp.wk), d, d);
    v[i] = vecmat(xn[i], value(lp.wv), d, d);
  }

  // causal single-head attention
  std::vector<std::vector<double>> mix(T, std::vector<double>(d, 0.0));
  for (int i = 0; i < T; ++i) {
    std::vector<double> s(i + 1);
    double mx = -1e300;
    for (int j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (int j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
    for (int j = 0; j <= i; ++j) {
      double pj = std::exp(s[j] - mx) / z;
      for (int c = 0; c < d; ++c) mix[i][c] += pj * v[j][c];
    }
  }

  std::vector<std::vector<double>> a(T), hm(T, std::vector<double>(d)), m(T), h1(T, std::vector<double>(d));
  for (int i = 0; i < T; ++i) {
    a[i] = vecmat(mix[i], value(lp.wo), d, d);
    for (int c = 0; c < d; ++c) hm[i][c] = h[i][c] + a[i][c];
    ln_row(hm[i], value(lp.ln2_g), value(lp.ln2_b));
    std::vector<double> fc = vecmat(hm[i], value(lp.wfc), d, dff);
    for (double& x : fc) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    m[i] = vecmat(fc, value(lp.wproj), dff, d);
    for (int c = 0; c < d; ++c) h1[i][c] = h[i][c] + a[i][c] + m[i][c];
  }

  std::vector<std::vector<double>> want(T);
  for (int i = 0; i < T; ++i) {
    std::vector<double> hn = h1[i];
    ln_row(hn, value(p.lnf_g), value(p.lnf_b));
    want[i] = vecmat(hn, value(p.unembed), d, V);
  }

  ForwardOut f = forward(p, toks);
  for (int i = 0; i < T; ++i)
    for (int c = 0; c < V; ++c) CHECK(std::abs(f.logits->value.at(i, c) - want[i][c]) < 1e-5);
}

TEST_CASE("forward: causality, later tokens cannot move earlier logits") {
  Parameters p = Parameters::init(small_cfg(), 23);
  ForwardOut a = forward(p, std::vector<int>{1, 2, 3, 4});
  ForwardOut b = forward(p, std::vector<int>{1, 2, 3, 9});
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < p.cfg.V; ++c) CHECK(a.logits->value.at(i, c) == b.logits->value.at(i, c));
}

TEST_CASE("forward_batch agrees with per-sequence forward") {
  Parameters p = Parameters::init(small_cfg(), 29);
  std::vector<int> seq1 = {1, 2, 3};
  std::vector<int> seq2 = {4, 0, 9};
  std::vector<int> flat = {1, 2, 3, 4, 0, 9};
  Var batched = forward_batch(p, flat, 2, 3, nullptr);
  ForwardOut f1 = forward(p, seq1);
  ForwardOut f2 = forward(p, seq2);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < p.cfg.V; ++c) {
      CHECK(batched->value.at(i, c) == doctest::Approx(f1.logits->value.at(i, c)).epsilon(1e-6));
      CHECK(batched->value.at(3 + i, c) == doctest::Approx(f2.logits->value.at(i, c)).epsilon(1e-6));
    }
}

// ---------------------------------------------------------------------------
// interventions
// ---------------------------------------------------------------------------

TEST_CASE("forward_intervened: empty list equals forward") {
  Parameters p = Parameters::init(small_cfg(), 31);
  std::vector<int> toks = {5, 6, 7};
  ForwardOut plain = forward(p, toks);
  ForwardOut iv = forward_intervened(p, toks, {});
  CHECK(plain.logits->value.data == iv.logits->value.data);
}

TEST_CASE("forward_intervened: full hidden restoration recovers the clean run") {
  Parameters p = Parameters::init(small_cfg(), 37);
  std::vector<int> toks = {5, 6, 7, 1};
  ForwardOut clean = forward(p, toks);

  Intervention noise;
  noise.site = Site::Embedding;
  noise.positions = {0, 1, 2, 3};
  noise.layers = {0};
  noise.action = Intervention::Action::AddNoise;
  noise.noise = random_tensor({4, p.cfg.d}, 101, 0.5f);

  Intervention restore;
  restore.site = Site::Hidden;
  restore.positions = {0, 1, 2, 3};
  restore.layers = {1, 2};
  restore.action = Intervention::Action::RestoreFrom;
  restore.reference = clean.tape;

  ForwardOut corrupted = forward_intervened(p, toks, {noise});
  ForwardOut restored = forward_intervened(p, toks, {noise, restore});
  CHECK(max_abs_diff(corrupted.logits->value, clean.logits->value) > 1e-4);  // noise took effect
  CHECK(max_abs_diff(restored.logits->value, clean.logits->value) < 1e-4);
}

TEST_CASE("forward_intervened: freezing a module changes downstream computation") {
  Parameters p = Parameters::init(small_cfg(), 41);
  std::vector<int> toks = {5, 6, 7, 1};
  ForwardOut clean = forward(p, toks);

  // reference tape from a different input; freezing mlp to it must move logits
  ForwardOut other = forward(p, std::vector<int>{2, 2, 2, 2});
  Intervention freeze;
  freeze.site = Site::MlpOut;
  freeze.positions = {3};
  freeze.layers = {1, 2};
  freeze.action = Intervention::Action::FreezeTo;
  freeze.reference = other.tape;
  ForwardOut frozen = forward_intervened(p, toks, {freeze});
  CHECK(max_abs_diff(frozen.logits->value, clean.logits->value) > 1e-6);

  // the recorded tape holds the frozen values at the intervened site
  CHECK(frozen.tape->m[0].at(3, 0) == other.tape->m[0].at(3, 0));
}

TEST_CASE("forward_intervened: validation errors") {
  Parameters p = Parameters::init(small_cfg(), 43);
  std::vector<int> toks = {5, 6, 7};
  ForwardOut clean = forward(p, toks);

  Intervention bad;
  bad.site = Site::Hidden;
  bad.positions = {5};  // out of range
  bad.layers = {1};
  bad.action = Intervention::Action::RestoreFrom;
  bad.reference = clean.tape;
  CHECK_THROWS_AS(forward_intervened(p, toks, {bad}), Error);

  Intervention wrong_len;
  wrong_len.site = Site::Hidden;
  wrong_len.positions = {0};
  wrong_len.layers = {1};
  wrong_len.action = Intervention::Action::RestoreFrom;
  ForwardOut longer = forward(p, std::vector<int>{5, 6, 7, 1});
  wrong_len.reference = longer.tape;
  CHECK_THROWS_AS(forward_intervened(p, toks, {wrong_len}), Error);
  try {
    forward_intervened(p, toks, {wrong_len});
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Intervention);
  }
}

// ---------------------------------------------------------------------------
// readout
// ---------------------------------------------------------------------------

TEST_CASE("answer_probability: symmetry, saturation and log-sum-exp oracle") {
  Tensor uniform = Tensor::zeros({10});
  CHECK(answer_probability(uniform, 3) == doctest::Approx(0.1).epsilon(1e-9));

  Tensor sat = Tensor::zeros({10});
  sat.data[7] = 1e4f;
  CHECK(answer_probability(sat, 7) == doctest::Approx(1.0).epsilon(1e-9));

  Tensor r = random_tensor({12}, 211, 2.5f);
  double lse = 0.0;
  for (float x : r.data) lse += std::exp(static_cast<double>(x));
  for (int t = 0; t < 12; ++t) {
    double want = std::exp(static_cast<double>(r.data[t])) / lse;
    CHECK(std::abs(answer_probability(r, t) - want) < 1e-6);
  }
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint: round trip is bit exact and the header is stable") {
  Parameters p = Parameters::init(small_cfg(), 47);
  std::string path = (std::filesystem::temp_directory_path() / "kloc_test_ckpt.kloc").string();
  save_checkpoint(p, path);

  std::string bytes = read_bytes_or_empty(path);
  REQUIRE(bytes.size() > 12);
  CHECK(bytes.substr(0, 4) == "KLOC");
  uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == kCheckpointVersion);
  uint32_t json_len;
  std::memcpy(&json_len, bytes.data() + 8, 4);
  std::string cfg_json = bytes.substr(12, json_len);
  CHECK(cfg_json.find("\"d\":8") != std::string::npos);

  Parameters q = load_checkpoint(path);
  CHECK(q.cfg == p.cfg);
  auto pn = p.named();
  auto qn = q.named();
  for (size_t i = 0; i < pn.size(); ++i) {
    CHECK(pn[i].first == qn[i].first);
    CHECK(pn[i].second->value.data == qn[i].second->value.data);
  }

  // identical save -> identical file hash
  std::string path2 = (std::filesystem::temp_directory_path() / "kloc_test_ckpt2.kloc").string();
  save_checkpoint(p, path2);
  CHECK(file_hash(path) == file_hash(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint: truncated or corrupted files are rejected") {
  Parameters p = Parameters::init(small_cfg(), 53);
  auto dir = std::filesystem::temp_directory_path();
  std::string path = (dir / "kloc_test_bad.kloc").string();
  save_checkpoint(p, path);
  std::string bytes = read_bytes_or_empty(path);
  {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::filesystem::remove(path);
}
