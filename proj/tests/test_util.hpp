#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "kloc/autodiff.hpp"
#include "kloc/rng.hpp"
#include "kloc/world.hpp"

namespace kloc::testutil {

inline std::string read_bytes_or_empty(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return "";
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

inline Tensor random_tensor(std::vector<int> shape, uint64_t seed, float scale = 1.0f) {
  Pcg32 rng(seed);
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& x : t.data) x = static_cast<float>(rng.next_gauss() * scale);
  return t;
}

/// Central finite differences of a scalar-valued forward against one leaf.
/// `loss` must recompute the forward pass from the current leaf values.
inline Tensor numeric_grad(const Var& leaf, const std::function<double()>& loss, double h = 1e-3) {
  Tensor g = Tensor::zeros(leaf->value.shape);
  for (size_t i = 0; i < leaf->value.data.size(); ++i) {
    float saved = leaf->value.data[i];
    leaf->value.data[i] = static_cast<float>(saved + h);
    double up = loss();
    leaf->value.data[i] = static_cast<float>(saved - h);
    double down = loss();
    leaf->value.data[i] = saved;
    g.data[i] = static_cast<float>((up - down) / (2.0 * h));
  }
  return g;
}

inline double rel_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-4) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, rel_error(a.data[i], b.data[i], floor));
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
  return worst;
}

/// Small world used by the model/tracer/editor tests; big enough to train a
/// tiny transformer to memorize in seconds.
inline World tiny_world(uint64_t seed = 7, int entities = 12, int relations = 3, int facts = 24) {
  return generate_world(seed, entities, relations, facts);
}

/// Minimal XML well-formedness scan: tag balance, quoted attributes,
/// one root element. Enough to reject malformed SVG output.
inline bool xml_well_formed(const std::string& doc, std::string* why = nullptr) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  std::vector<std::string> stack;
  size_t i = 0;
  int roots = 0;
  while (i < doc.size()) {
    if (doc[i] != '<') {
      i += 1;
      continue;
    }
    size_t end = doc.find('>', i);
    if (end == std::string::npos) return fail("unterminated tag");
    std::string tag = doc.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.empty()) return fail("empty tag");
    if (tag[0] == '?' || (tag.size() >= 3 && tag.substr(0, 3) == "!--")) {
      if (tag[0] == '!' && tag.substr(tag.size() - 2) != "--") {
        size_t close = doc.find("-->", end);
        if (close == std::string::npos) return fail("unterminated comment");
        i = close + 3;
      }
      continue;
    }
    // quotes must balance inside the tag
    int quotes = 0;
    for (char c : tag)
      if (c == '"') quotes += 1;
    if (quotes % 2 != 0) return fail("unbalanced attribute quotes in <" + tag + ">");
    if (tag[0] == '/') {
      std::string name = tag.substr(1);
      if (stack.empty() || stack.back() != name) return fail("mismatched closing tag " + name);
      stack.pop_back();
      if (stack.empty()) roots += 1;
    } else if (tag.back() == '/') {
      if (stack.empty()) roots += 1;
    } else {
      std::string name = tag.substr(0, tag.find_first_of(" \t\n"));
      stack.push_back(name);
    }
  }
  if (!stack.empty()) return fail("unclosed tag " + stack.back());
  if (roots != 1) return fail("expected exactly one root element");
  return true;
}

}  // namespace kloc::testutil
