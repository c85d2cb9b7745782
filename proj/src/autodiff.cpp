#include "kloc/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace kloc {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap as_mat(const Tensor& t) { return ECMap(t.data.data(), t.rows(), t.cols()); }
EMap as_mat(Tensor& t) { return EMap(t.data.data(), t.rows(), t.cols()); }

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) fail(Error::Kind::Numeric, std::string(op) + ": non-finite values");
}

Var make_out(Tape* tape, Tensor value, std::vector<Var> parents, const char* op) {
  check_finite(value, op);
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  if (tape) {
    bool any = false;
    for (const auto& p : parents)
      if (p->requires_grad) any = true;
    out->requires_grad = any;
    if (any) {
      out->parents = std::move(parents);
      tape->record(out);
    }
  }
  return out;
}

void accum(const Var& target, const Tensor& delta) {
  Tensor& g = target->ensure_grad();
  for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += delta.data[i];
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (!grad_live) {
    grad = Tensor::zeros(value.shape);
    grad_live = true;
  }
  return grad;
}

const Tensor& Node::grad_or_zero() {
  return ensure_grad();
}

Var make_constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = false;
  return n;
}

Var make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

void Tape::backward(const Var& loss) {
  require(loss != nullptr, Error::Kind::Graph, "backward: null loss");
  require(loss->value.size() == 1, Error::Kind::Graph, "backward: loss must be scalar");
  bool found = false;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if (it->get() == loss.get()) {
      found = true;
      break;
    }
  }
  require(found, Error::Kind::Graph, "backward: loss was not produced on this tape");

  loss->ensure_grad().data[0] = 1.0f;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = it->get();
    if (n->grad_live && n->backprop) n->backprop();
  }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Var matmul(Tape* tape, const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  require(A.shape.size() == 2 && B.shape.size() == 2, Error::Kind::Shape, "matmul: rank-2 operands required");
  if (A.cols() != B.rows()) [[unlikely]]
    fail(Error::Kind::Shape, "matmul: inner dimensions disagree " + A.shape_str() + " * " + B.shape_str());
  Tensor C = Tensor::zeros({A.rows(), B.cols()});
  as_mat(C).noalias() = as_mat(A) * as_mat(B);
  Var out = make_out(tape, std::move(C), {a, b}, "matmul");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a, bv = b;
    out->backprop = [o, av, bv]() {
      const Tensor& gc = o->grad;
      if (av->requires_grad) {
        Tensor& ga = av->ensure_grad();
        as_mat(ga).noalias() += as_mat(gc) * as_mat(bv->value).transpose();
      }
      if (bv->requires_grad) {
        Tensor& gb = bv->ensure_grad();
        as_mat(gb).noalias() += as_mat(av->value).transpose() * as_mat(gc);
      }
    };
  }
  return out;
}

Var transpose(Tape* tape, const Var& a) {
  const Tensor& A = a->value;
  require(A.shape.size() == 2, Error::Kind::Shape, "transpose: rank-2 required");
  Tensor C = Tensor::zeros({A.cols(), A.rows()});
  as_mat(C) = as_mat(A).transpose();
  Var out = make_out(tape, std::move(C), {a}, "transpose");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a;
    out->backprop = [o, av]() {
      Tensor& ga = av->ensure_grad();
      as_mat(ga) += as_mat(o->grad).transpose();
    };
  }
  return out;
}

namespace {

Var binary_same_shape(Tape* tape, const Var& a, const Var& b, const char* name,
                      float (*fwd)(float, float), void (*bwd)(Node*, const Var&, const Var&)) {
  if (!a->value.same_shape(b->value)) [[unlikely]]
    fail(Error::Kind::Shape,
         std::string(name) + ": shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
  Tensor C = Tensor::zeros(a->value.shape);
  for (size_t i = 0; i < C.data.size(); ++i) C.data[i] = fwd(a->value.data[i], b->value.data[i]);
  Var out = make_out(tape, std::move(C), {a, b}, name);
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a, bv = b;
    out->backprop = [o, av, bv, bwd]() { bwd(o, av, bv); };
  }
  return out;
}

}  // namespace

Var add(Tape* tape, const Var& a, const Var& b) {
  return binary_same_shape(
      tape, a, b, "add", [](float x, float y) { return x + y; },
      [](Node* o, const Var& av, const Var& bv) {
        if (av->requires_grad) accum(av, o->grad);
        if (bv->requires_grad) accum(bv, o->grad);
      });
}

Var sub(Tape* tape, const Var& a, const Var& b) {
  return binary_same_shape(
      tape, a, b, "sub", [](float x, float y) { return x - y; },
      [](Node* o, const Var& av, const Var& bv) {
        if (av->requires_grad) accum(av, o->grad);
        if (bv->requires_grad) {
          Tensor& g = bv->ensure_grad();
          for (size_t i = 0; i < g.data.size(); ++i) g.data[i] -= o->grad.data[i];
        }
      });
}

Var mul(Tape* tape, const Var& a, const Var& b) {
  return binary_same_shape(
      tape, a, b, "mul", [](float x, float y) { return x * y; },
      [](Node* o, const Var& av, const Var& bv) {
        if (av->requires_grad) {
          Tensor& g = av->ensure_grad();
          for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i] * bv->value.data[i];
        }
        if (bv->requires_grad) {
          Tensor& g = bv->ensure_grad();
          for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i] * av->value.data[i];
        }
      });
}

Var scale(Tape* tape, const Var& a, float c) {
  Tensor C = a->value;
  for (float& x : C.data) x *= c;
  Var out = make_out(tape, std::move(C), {a}, "scale");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a;
    out->backprop = [o, av, c]() {
      Tensor& g = av->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i] * c;
    };
  }
  return out;
}

Var neg(Tape* tape, const Var& a) { return scale(tape, a, -1.0f); }

Var log_op(Tape* tape, const Var& a) {
  Tensor C = a->value;
  for (float& x : C.data) x = std::log(x);
  Var out = make_out(tape, std::move(C), {a}, "log");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a;
    out->backprop = [o, av]() {
      Tensor& g = av->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += o->grad.data[i] / av->value.data[i];
    };
  }
  return out;
}

namespace {

// Exact gelu: x * Phi(x), Phi the standard normal CDF.
inline double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }
inline double gelu_grad(double x) {
  double phi = std::exp(-0.5 * x * x) * 0.3989422804014327;  // pdf
  double Phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
  return Phi + x * phi;
}

}  // namespace

Var gelu(Tape* tape, const Var& a) {
  check_finite(a->value, "gelu(input)");
  Tensor C = a->value;
  for (float& x : C.data) x = static_cast<float>(gelu_fwd(x));
  Var out = make_out(tape, std::move(C), {a}, "gelu");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a;
    out->backprop = [o, av]() {
      Tensor& g = av->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i)
        g.data[i] += o->grad.data[i] * static_cast<float>(gelu_grad(av->value.data[i]));
    };
  }
  return out;
}

Var softmax_rows(Tape* tape, const Var& a) {
  check_finite(a->value, "softmax_rows(input)");
  const Tensor& A = a->value;
  int R = A.rows(), C = A.cols();
  Tensor Y = Tensor::zeros(A.shape);
  for (int r = 0; r < R; ++r) {
    double m = -1e300;
    for (int c = 0; c < C; ++c) m = std::max(m, static_cast<double>(A.at(r, c)));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(A.at(r, c)) - m);
    for (int c = 0; c < C; ++c)
      Y.at(r, c) = static_cast<float>(std::exp(static_cast<double>(A.at(r, c)) - m) / z);
  }
  Var out = make_out(tape, std::move(Y), {a}, "softmax_rows");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a;
    out->backprop = [o, av]() {
      const Tensor& Yv = o->value;
      const Tensor& gY = o->grad;
      Tensor& g = av->ensure_grad();
      int R2 = Yv.rows(), C2 = Yv.cols();
      for (int r = 0; r < R2; ++r) {
        double dot = 0.0;
        for (int c = 0; c < C2; ++c) dot += static_cast<double>(gY.at(r, c)) * Yv.at(r, c);
        for (int c = 0; c < C2; ++c)
          g.at(r, c) += static_cast<float>(Yv.at(r, c) * (static_cast<double>(gY.at(r, c)) - dot));
      }
    };
  }
  return out;
}

Var layernorm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, float eps) {
  check_finite(x->value, "layernorm(input)");
  const Tensor& X = x->value;
  int R = X.rows(), C = X.cols();
  require(gamma->value.size() == static_cast<size_t>(C) && beta->value.size() == static_cast<size_t>(C),
          Error::Kind::Shape, "layernorm: affine size mismatch");
  Tensor Y = Tensor::zeros(X.shape);
  std::vector<float> inv_std(R), xhat(static_cast<size_t>(R) * C);
  for (int r = 0; r < R; ++r) {
    double mean = 0.0;
    for (int c = 0; c < C; ++c) mean += X.at(r, c);
    mean /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      double d = X.at(r, c) - mean;
      var += d * d;
    }
    var /= C;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(is);
    for (int c = 0; c < C; ++c) {
      float xh = static_cast<float>((X.at(r, c) - mean) * is);
      xhat[static_cast<size_t>(r) * C + c] = xh;
      Y.at(r, c) = xh * gamma->value.data[c] + beta->value.data[c];
    }
  }
  Var out = make_out(tape, std::move(Y), {x, gamma, beta}, "layernorm");
  if (out->requires_grad) {
    Node* o = out.get();
    Var xv = x, gv = gamma, bv = beta;
    auto is = std::move(inv_std);
    auto xh = std::move(xhat);
    out->backprop = [o, xv, gv, bv, is, xh]() {
      const Tensor& gY = o->grad;
      int R2 = gY.rows(), C2 = gY.cols();
      if (gv->requires_grad) {
        Tensor& gg = gv->ensure_grad();
        for (int r = 0; r < R2; ++r)
          for (int c = 0; c < C2; ++c) gg.data[c] += gY.at(r, c) * xh[static_cast<size_t>(r) * C2 + c];
      }
      if (bv->requires_grad) {
        Tensor& gb = bv->ensure_grad();
        for (int r = 0; r < R2; ++r)
          for (int c = 0; c < C2; ++c) gb.data[c] += gY.at(r, c);
      }
      if (xv->requires_grad) {
        Tensor& gx = xv->ensure_grad();
        for (int r = 0; r < R2; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int c = 0; c < C2; ++c) {
            double dxh = static_cast<double>(gY.at(r, c)) * gv->value.data[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[static_cast<size_t>(r) * C2 + c];
          }
          mean_dxhat /= C2;
          mean_dxhat_xhat /= C2;
          for (int c = 0; c < C2; ++c) {
            double dxh = static_cast<double>(gY.at(r, c)) * gv->value.data[c];
            double v = (dxh - mean_dxhat - xh[static_cast<size_t>(r) * C2 + c] * mean_dxhat_xhat) * is[r];
            gx.at(r, c) += static_cast<float>(v);
          }
        }
      }
    };
  }
  return out;
}

Var sum(Tape* tape, const Var& a) {
  double s = 0.0;
  for (float v : a->value.data) s += v;
  Var out = make_out(tape, Tensor::scalar(static_cast<float>(s)), {a}, "sum");
  if (out->requires_grad) {
    Node* o = out.get();
    Var av = a;
    out->backprop = [o, av]() {
      Tensor& g = av->ensure_grad();
      float gs = o->grad.data[0];
      for (float& x : g.data) x += gs;
    };
  }
  return out;
}

Var cross_entropy(Tape* tape, const Var& logits, const std::vector<int>& targets) {
  const Tensor& L = logits->value;
  int R = L.rows(), V = L.cols();
  require(static_cast<int>(targets.size()) == R, Error::Kind::Shape, "cross_entropy: one target per row required");
  for (int t : targets)
    require(t >= 0 && t < V, Error::Kind::Index, "cross_entropy: target id out of range");
  check_finite(L, "cross_entropy(input)");

  // loss_r = logsumexp(row) - row[target]; mean over rows, double accumulation
  std::vector<float> probs;  // softmax rows saved for backward
  bool want_grad = tape && logits->requires_grad;
  if (want_grad) probs.resize(static_cast<size_t>(R) * V);
  double total = 0.0;
  for (int r = 0; r < R; ++r) {
    double m = -1e300;
    for (int c = 0; c < V; ++c) m = std::max(m, static_cast<double>(L.at(r, c)));
    double z = 0.0;
    for (int c = 0; c < V; ++c) z += std::exp(static_cast<double>(L.at(r, c)) - m);
    double lse = m + std::log(z);
    total += lse - L.at(r, targets[r]);
    if (want_grad)
      for (int c = 0; c < V; ++c)
        probs[static_cast<size_t>(r) * V + c] =
            static_cast<float>(std::exp(static_cast<double>(L.at(r, c)) - m) / z);
  }
  double loss = total / R;
  require(loss >= -1e-6, Error::Kind::Numeric, "cross_entropy: negative loss");
  Var out = make_out(tape, Tensor::scalar(static_cast<float>(std::max(loss, 0.0))), {logits}, "cross_entropy");
  if (out->requires_grad) {
    Node* o = out.get();
    Var lv = logits;
    auto tg = targets;
    auto pr = std::move(probs);
    out->backprop = [o, lv, tg, pr]() {
      Tensor& g = lv->ensure_grad();
      int R2 = lv->value.rows(), V2 = lv->value.cols();
      float gs = o->grad.data[0] / static_cast<float>(R2);
      for (int r = 0; r < R2; ++r) {
        for (int c = 0; c < V2; ++c) g.at(r, c) += gs * pr[static_cast<size_t>(r) * V2 + c];
        g.at(r, tg[r]) -= gs;
      }
    };
  }
  return out;
}

Var select_rows(Tape* tape, const Var& x, const std::vector<int>& idx) {
  const Tensor& X = x->value;
  int C = X.cols();
  for (int i : idx)
    require(i >= 0 && i < X.rows(), Error::Kind::Index, "select_rows: index out of range");
  Tensor Y = Tensor::zeros({static_cast<int>(idx.size()), C});
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(&X.data[static_cast<size_t>(idx[r]) * C], C, &Y.data[r * C]);
  Var out = make_out(tape, std::move(Y), {x}, "select_rows");
  if (out->requires_grad) {
    Node* o = out.get();
    Var xv = x;
    auto ids = idx;
    out->backprop = [o, xv, ids]() {
      Tensor& g = xv->ensure_grad();
      int C2 = xv->value.cols();
      for (size_t r = 0; r < ids.size(); ++r)
        for (int c = 0; c < C2; ++c) g.at(ids[r], c) += o->grad.data[r * C2 + c];
    };
  }
  return out;
}

Var slice_cols(Tape* tape, const Var& x, int c0, int c1) {
  const Tensor& X = x->value;
  require(0 <= c0 && c0 < c1 && c1 <= X.cols(), Error::Kind::Shape, "slice_cols: bad range");
  int R = X.rows(), W = c1 - c0;
  Tensor Y = Tensor::zeros({R, W});
  for (int r = 0; r < R; ++r)
    std::copy_n(&X.data[static_cast<size_t>(r) * X.cols() + c0], W, &Y.data[static_cast<size_t>(r) * W]);
  Var out = make_out(tape, std::move(Y), {x}, "slice_cols");
  if (out->requires_grad) {
    Node* o = out.get();
    Var xv = x;
    out->backprop = [o, xv, c0, W]() {
      Tensor& g = xv->ensure_grad();
      int R2 = xv->value.rows(), C2 = xv->value.cols();
      for (int r = 0; r < R2; ++r)
        for (int c = 0; c < W; ++c) g.data[static_cast<size_t>(r) * C2 + c0 + c] += o->grad.data[static_cast<size_t>(r) * W + c];
    };
  }
  return out;
}

Var replace_rows(Tape* tape, const Var& x, const std::vector<int>& positions, const Tensor& replacement) {
  const Tensor& X = x->value;
  int C = X.cols();
  require(replacement.rows() == static_cast<int>(positions.size()) && replacement.cols() == C,
          Error::Kind::Shape, "replace_rows: replacement shape mismatch");
  for (int p : positions)
    require(p >= 0 && p < X.rows(), Error::Kind::Index, "replace_rows: position out of range");
  Tensor Y = X;
  for (size_t r = 0; r < positions.size(); ++r)
    std::copy_n(&replacement.data[r * C], C, &Y.data[static_cast<size_t>(positions[r]) * C]);
  Var out = make_out(tape, std::move(Y), {x}, "replace_rows");
  if (out->requires_grad) {
    Node* o = out.get();
    Var xv = x;
    auto pos = positions;
    out->backprop = [o, xv, pos]() {
      Tensor masked = o->grad;
      int C2 = masked.cols();
      for (int p : pos) std::fill_n(&masked.data[static_cast<size_t>(p) * C2], C2, 0.0f);
      accum(xv, masked);
    };
  }
  return out;
}

Var add_rows_const(Tape* tape, const Var& x, const std::vector<int>& positions, const Tensor& addend) {
  const Tensor& X = x->value;
  int C = X.cols();
  require(addend.rows() == static_cast<int>(positions.size()) && addend.cols() == C, Error::Kind::Shape,
          "add_rows_const: addend shape mismatch");
  for (int p : positions)
    require(p >= 0 && p < X.rows(), Error::Kind::Index, "add_rows_const: position out of range");
  Tensor Y = X;
  for (size_t r = 0; r < positions.size(); ++r)
    for (int c = 0; c < C; ++c) Y.data[static_cast<size_t>(positions[r]) * C + c] += addend.data[r * C + c];
  Var out = make_out(tape, std::move(Y), {x}, "add_rows_const");
  if (out->requires_grad) {
    Node* o = out.get();
    Var xv = x;
    out->backprop = [o, xv]() { accum(xv, o->grad); };
  }
  return out;
}

Var add_to_row(Tape* tape, const Var& x, int position, const Var& v) {
  const Tensor& X = x->value;
  int C = X.cols();
  require(position >= 0 && position < X.rows(), Error::Kind::Index, "add_to_row: position out of range");
  require(v->value.size() == static_cast<size_t>(C), Error::Kind::Shape, "add_to_row: vector width mismatch");
  Tensor Y = X;
  for (int c = 0; c < C; ++c) Y.data[static_cast<size_t>(position) * C + c] += v->value.data[c];
  Var out = make_out(tape, std::move(Y), {x, v}, "add_to_row");
  if (out->requires_grad) {
    Node* o = out.get();
    Var xv = x, vv = v;
    out->backprop = [o, xv, vv, position]() {
      if (xv->requires_grad) accum(xv, o->grad);
      if (vv->requires_grad) {
        Tensor& g = vv->ensure_grad();
        int C2 = o->grad.cols();
        for (int c = 0; c < C2; ++c) g.data[c] += o->grad.data[static_cast<size_t>(position) * C2 + c];
      }
    };
  }
  return out;
}

Var causal_self_attention(Tape* tape, const Var& q, const Var& k, const Var& v, int B, int T, int H) {
  const Tensor& Q = q->value;
  require(Q.same_shape(k->value) && Q.same_shape(v->value), Error::Kind::Shape, "attention: q/k/v shape mismatch");
  int rows = Q.rows(), d = Q.cols();
  require(rows == B * T, Error::Kind::Shape, "attention: rows != B*T");
  require(H >= 1 && d % H == 0, Error::Kind::Shape, "attention: head count must divide width");
  int dh = d / H;
  float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

  // probs stored per (b, h): T x T lower-triangular row-softmaxes
  std::vector<float> probs(static_cast<size_t>(B) * H * T * T, 0.0f);
  Tensor O = Tensor::zeros(Q.shape);
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < H; ++h) {
      float* P = &probs[(static_cast<size_t>(b) * H + h) * T * T];
      for (int i = 0; i < T; ++i) {
        const float* qi = &Q.data[(static_cast<size_t>(b) * T + i) * d + h * dh];
        double m = -1e300;
        std::vector<double> s(static_cast<size_t>(i) + 1);
        for (int j = 0; j <= i; ++j) {
          const float* kj = &k->value.data[(static_cast<size_t>(b) * T + j) * d + h * dh];
          double dot = 0.0;
          for (int c = 0; c < dh; ++c) dot += static_cast<double>(qi[c]) * kj[c];
          s[j] = dot * inv_sqrt;
          m = std::max(m, s[j]);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) z += std::exp(s[j] - m);
        float* oi = &O.data[(static_cast<size_t>(b) * T + i) * d + h * dh];
        for (int j = 0; j <= i; ++j) {
          float p = static_cast<float>(std::exp(s[j] - m) / z);
          P[static_cast<size_t>(i) * T + j] = p;
          const float* vj = &v->value.data[(static_cast<size_t>(b) * T + j) * d + h * dh];
          for (int c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  Var out = make_out(tape, std::move(O), {q, k, v}, "causal_self_attention");
  if (out->requires_grad) {
    Node* o = out.get();
    Var qv = q, kv = k, vv = v;
    auto pr = std::move(probs);
    out->backprop = [o, qv, kv, vv, pr, B, T, H, dh, inv_sqrt]() {
      int d2 = qv->value.cols();
      Tensor& gq = qv->ensure_grad();
      Tensor& gk = kv->ensure_grad();
      Tensor& gv = vv->ensure_grad();
      const Tensor& gO = o->grad;
      std::vector<double> dS(static_cast<size_t>(T));
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          const float* P = &pr[(static_cast<size_t>(b) * H + h) * T * T];
          for (int i = 0; i < T; ++i) {
            const float* go = &gO.data[(static_cast<size_t>(b) * T + i) * d2 + h * dh];
            // dP[i,j] = go . v_j ; dS = P * (dP - sum_j dP*P)
            double dot_sum = 0.0;
            for (int j = 0; j <= i; ++j) {
              const float* vj = &vv->value.data[(static_cast<size_t>(b) * T + j) * d2 + h * dh];
              double dp = 0.0;
              for (int c = 0; c < dh; ++c) dp += static_cast<double>(go[c]) * vj[c];
              dS[j] = dp;
              dot_sum += dp * P[static_cast<size_t>(i) * T + j];
            }
            for (int j = 0; j <= i; ++j) {
              double p = P[static_cast<size_t>(i) * T + j];
              double ds = p * (dS[j] - dot_sum);
              // dV_j += p * go ; dQ_i += ds * k_j / sqrt ; dK_j += ds * q_i / sqrt
              float* gvj = &gv.data[(static_cast<size_t>(b) * T + j) * d2 + h * dh];
              const float* kj = &kv->value.data[(static_cast<size_t>(b) * T + j) * d2 + h * dh];
              const float* qi = &qv->value.data[(static_cast<size_t>(b) * T + i) * d2 + h * dh];
              float* gqi = &gq.data[(static_cast<size_t>(b) * T + i) * d2 + h * dh];
              float* gkj = &gk.data[(static_cast<size_t>(b) * T + j) * d2 + h * dh];
              float dsf = static_cast<float>(ds) * inv_sqrt;
              for (int c = 0; c < dh; ++c) {
                gvj[c] += static_cast<float>(p) * go[c];
                gqi[c] += dsf * kj[c];
                gkj[c] += dsf * qi[c];
              }
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

namespace {

void check_grads_finite(std::span<const Var> params, const char* who) {
  for (const auto& p : params) {
    if (p->grad_live && !p->grad.all_finite())
      fail(Error::Kind::Numeric, std::string(who) + ": non-finite gradient, step refused");
  }
}

}  // namespace

void sgd_step(std::span<const Var> params, float lr) {
  check_grads_finite(params, "sgd_step");
  for (const auto& p : params) {
    if (!p->grad_live) continue;  // zero gradient, nothing to do
    for (size_t i = 0; i < p->value.data.size(); ++i) p->value.data[i] -= lr * p->grad.data[i];
  }
}

void adam_step(std::span<const Var> params, AdamState& state, const AdamConfig& cfg) {
  check_grads_finite(params, "adam_step");
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, state.t);
  double bc2 = 1.0 - std::pow(cfg.beta2, state.t);
  for (const auto& p : params) {
    auto& mv = state.moments[p.get()];
    if (mv.first.empty()) {
      mv.first = Tensor::zeros(p->value.shape);
      mv.second = Tensor::zeros(p->value.shape);
    }
    const float* g = p->grad_live ? p->grad.data.data() : nullptr;
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      float gi = g ? g[i] : 0.0f;
      float& m = mv.first.data[i];
      float& v = mv.second.data[i];
      m = cfg.beta1 * m + (1.0f - cfg.beta1) * gi;
      v = cfg.beta2 * v + (1.0f - cfg.beta2) * gi * gi;
      double mhat = m / bc1;
      double vhat = v / bc2;
      p->value.data[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

void zero_grads(std::span<const Var> params) {
  for (const auto& p : params) {
    if (p->grad_live) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0f);
  }
}

}  // namespace kloc
