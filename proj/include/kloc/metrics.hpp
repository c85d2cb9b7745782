#pragma once

#include "kloc/editor.hpp"
#include "kloc/model.hpp"
#include "kloc/world.hpp"

namespace kloc {

/// Probes for one edited fact. Reliability reads the edit prompt (and the
/// other family's first train template for the cross cells); generality
/// reads held-out templates and requires the edit prompt to succeed too.
struct EvalPair {
  int fact_id = 0;
  Perspective edit_perspective = Perspective::Entity;
  int y_star = 0;  // target token
  std::vector<int> edit_prompt;
  std::vector<std::vector<int>> rephrases;          // N(x): held-out, same perspective
  std::vector<std::vector<int>> cross_reliability;  // other family, train template 0
  std::vector<std::vector<int>> cross_generality;   // other family, held-out
};

struct EvalSuite {
  std::vector<EvalPair> pairs;
};

EvalSuite build_suite(const World& w, const Tokenizer& tok, const ProbeSplit& split,
                      const std::vector<EditRequest>& requests);

/// Mean of 1[argmax f(x) = y*] over the suite's edit prompts, as a percentage.
double reliability(const Parameters& edited, const EvalSuite& suite);

/// Mean over pairs and rephrasings of 1[argmax f(x~) = argmax-success of x = y*],
/// as a percentage (the rephrase counts only when the edit prompt is also
/// correct).
double generality(const Parameters& edited, const EvalSuite& suite);

struct PerspectiveScores {
  double reliability = 0.0;
  double generality = 0.0;
};

struct FactOutcome {
  int fact_id = 0;
  int y_star = 0;
  bool edit_prompt_hit = false;
  double same_generality = 0.0;   // fraction over rephrases
  bool cross_reliability_hit = false;
  double cross_generality = 0.0;
};

/// The 2x2 (edit perspective x probe perspective) reliability/generality
/// table for one edited checkpoint, plus the same probes on the base model.
struct MetricsReport {
  Perspective edit_perspective = Perspective::Entity;
  PerspectiveScores post_entity;  // probing entity knowledge on the edited model
  PerspectiveScores post_relation;
  PerspectiveScores base_entity;  // identical probes on the unedited model
  PerspectiveScores base_relation;
  std::vector<FactOutcome> outcomes;
  std::string note;
};

MetricsReport cross_perspective_report(const Parameters& base, const Parameters& edited, const EvalSuite& suite);

/// Percentage rounding used in reports (two decimals, like the tables the
/// report mirrors).
double round2(double pct);

}  // namespace kloc
