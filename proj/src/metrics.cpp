#include "kloc/metrics.hpp"

#include <cmath>

namespace kloc {

EvalSuite build_suite(const World& w, const Tokenizer& tok, const ProbeSplit& split,
                      const std::vector<EditRequest>& requests) {
  require(!requests.empty(), Error::Kind::Evaluation, "build_suite: empty edit set");
  EvalSuite suite;
  for (const EditRequest& r : requests) {
    const Fact& f = w.facts.at(r.fact_id);
    Perspective other =
        r.perspective == Perspective::Entity ? Perspective::Relation : Perspective::Entity;

    EvalPair pair;
    pair.fact_id = r.fact_id;
    pair.edit_perspective = r.perspective;
    pair.y_star = r.target_token;
    pair.edit_prompt = r.prompt.tokens;
    for (int t : split.of(f.r, r.perspective).heldout)
      pair.rephrases.push_back(verbalize(w, tok, r.fact_id, r.perspective, t).tokens);
    pair.cross_reliability.push_back(verbalize(w, tok, r.fact_id, other, 0).tokens);
    for (int t : split.of(f.r, other).heldout)
      pair.cross_generality.push_back(verbalize(w, tok, r.fact_id, other, t).tokens);
    require(!pair.rephrases.empty(), Error::Kind::Evaluation, "build_suite: empty rephrase set");
    suite.pairs.push_back(std::move(pair));
  }
  return suite;
}

namespace {

struct SuiteHits {
  std::vector<bool> edit_hit;                 // per pair
  std::vector<double> same_gen;               // per pair, fraction over rephrases
  std::vector<bool> cross_rel_hit;            // per pair
  std::vector<double> cross_gen;              // per pair
};

SuiteHits evaluate_suite(const Parameters& params, const EvalSuite& suite) {
  require(!suite.pairs.empty(), Error::Kind::Evaluation, "evaluate: empty suite");

  std::vector<std::vector<int>> seqs;
  struct Ref {
    int pair;
    int slot;  // 0 edit, 1 rephrase, 2 cross-rel, 3 cross-gen
    int idx;
  };
  std::vector<Ref> refs;
  for (size_t i = 0; i < suite.pairs.size(); ++i) {
    const EvalPair& p = suite.pairs[i];
    require(!p.rephrases.empty(), Error::Kind::Evaluation, "evaluate: empty rephrase set");
    seqs.push_back(p.edit_prompt);
    refs.push_back({static_cast<int>(i), 0, 0});
    for (size_t j = 0; j < p.rephrases.size(); ++j) {
      seqs.push_back(p.rephrases[j]);
      refs.push_back({static_cast<int>(i), 1, static_cast<int>(j)});
    }
    for (size_t j = 0; j < p.cross_reliability.size(); ++j) {
      seqs.push_back(p.cross_reliability[j]);
      refs.push_back({static_cast<int>(i), 2, static_cast<int>(j)});
    }
    for (size_t j = 0; j < p.cross_generality.size(); ++j) {
      seqs.push_back(p.cross_generality[j]);
      refs.push_back({static_cast<int>(i), 3, static_cast<int>(j)});
    }
  }
  std::vector<int> preds = predict_final(params, seqs);

  size_t n = suite.pairs.size();
  SuiteHits hits;
  hits.edit_hit.assign(n, false);
  hits.same_gen.assign(n, 0.0);
  hits.cross_rel_hit.assign(n, false);
  hits.cross_gen.assign(n, 0.0);
  std::vector<int> same_cnt(n, 0), cross_cnt(n, 0);
  std::vector<int> same_hits(n, 0), cross_hits(n, 0), cross_rel_cnt(n, 0), cross_rel_hits(n, 0);

  for (size_t k = 0; k < refs.size(); ++k) {
    const Ref& r = refs[k];
    bool hit = preds[k] == suite.pairs[r.pair].y_star;
    switch (r.slot) {
      case 0: hits.edit_hit[r.pair] = hit; break;
      case 1:
        same_cnt[r.pair] += 1;
        same_hits[r.pair] += hit;
        break;
      case 2:
        cross_rel_cnt[r.pair] += 1;
        cross_rel_hits[r.pair] += hit;
        break;
      case 3:
        cross_cnt[r.pair] += 1;
        cross_hits[r.pair] += hit;
        break;
    }
  }
  for (size_t i = 0; i < n; ++i) {
    // the rephrase indicator of the generality metric also requires the
    // edit prompt itself to land on y*
    double gate = hits.edit_hit[i] ? 1.0 : 0.0;
    hits.same_gen[i] = same_cnt[i] ? gate * same_hits[i] / same_cnt[i] : 0.0;
    hits.cross_gen[i] = cross_cnt[i] ? gate * cross_hits[i] / cross_cnt[i] : 0.0;
    hits.cross_rel_hit[i] = cross_rel_cnt[i] > 0 && cross_rel_hits[i] == cross_rel_cnt[i];
  }
  return hits;
}

double mean_pct(const std::vector<bool>& v) {
  double s = 0.0;
  for (bool b : v) s += b ? 1.0 : 0.0;
  return 100.0 * s / static_cast<double>(v.size());
}

double mean_pct(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return 100.0 * s / static_cast<double>(v.size());
}

}  // namespace

double reliability(const Parameters& edited, const EvalSuite& suite) {
  SuiteHits hits = evaluate_suite(edited, suite);
  return mean_pct(hits.edit_hit);
}

double generality(const Parameters& edited, const EvalSuite& suite) {
  SuiteHits hits = evaluate_suite(edited, suite);
  return mean_pct(hits.same_gen);
}

double round2(double pct) { return std::round(pct * 100.0) / 100.0; }

MetricsReport cross_perspective_report(const Parameters& base, const Parameters& edited, const EvalSuite& suite) {
  require(!suite.pairs.empty(), Error::Kind::Evaluation, "report: empty suite");
  Perspective persp = suite.pairs.front().edit_perspective;
  for (const EvalPair& p : suite.pairs)
    require(p.edit_perspective == persp, Error::Kind::Report, "report: mixed-perspective edit set");

  MetricsReport rep;
  rep.edit_perspective = persp;
  rep.note =
      "all four probe cells are filled; the reference tables this mirrors "
      "leave some generality sub-columns blank";

  SuiteHits post = evaluate_suite(edited, suite);
  SuiteHits pre = evaluate_suite(base, suite);

  PerspectiveScores same_post{round2(mean_pct(post.edit_hit)), round2(mean_pct(post.same_gen))};
  PerspectiveScores cross_post{round2(mean_pct(post.cross_rel_hit)), round2(mean_pct(post.cross_gen))};
  PerspectiveScores same_pre{round2(mean_pct(pre.edit_hit)), round2(mean_pct(pre.same_gen))};
  PerspectiveScores cross_pre{round2(mean_pct(pre.cross_rel_hit)), round2(mean_pct(pre.cross_gen))};

  if (persp == Perspective::Entity) {
    rep.post_entity = same_post;
    rep.post_relation = cross_post;
    rep.base_entity = same_pre;
    rep.base_relation = cross_pre;
  } else {
    rep.post_relation = same_post;
    rep.post_entity = cross_post;
    rep.base_relation = same_pre;
    rep.base_entity = cross_pre;
  }

  for (size_t i = 0; i < suite.pairs.size(); ++i) {
    FactOutcome oc;
    oc.fact_id = suite.pairs[i].fact_id;
    oc.y_star = suite.pairs[i].y_star;
    oc.edit_prompt_hit = post.edit_hit[i];
    oc.same_generality = post.same_gen[i];
    oc.cross_reliability_hit = post.cross_rel_hit[i];
    oc.cross_generality = post.cross_gen[i];
    rep.outcomes.push_back(oc);
  }
  return rep;
}

}  // namespace kloc
