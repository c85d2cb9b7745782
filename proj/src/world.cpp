#include "kloc/world.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "kloc/rng.hpp"

namespace kloc {

using nlohmann::json;

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

constexpr const char* kSubjectSlot = "{s}";

const std::vector<std::string>& relation_stems() {
  static const std::vector<std::string> stems = {"capital", "language", "leader", "currency", "anthem",
                                                 "founder", "climate", "export",  "emblem",   "patron"};
  return stems;
}

std::string stem_for(int k) {
  const auto& s = relation_stems();
  if (k < static_cast<int>(s.size())) return s[k];
  return "trait" + std::to_string(k);
}

std::string make_entity_name(Pcg32& rng) {
  static const std::vector<std::string> onsets = {"b",  "d",  "f",  "g",  "k",  "l",  "m",  "n",  "p",  "r",
                                                  "s",  "t",  "v",  "z",  "br", "dr", "gr", "kl", "st", "tr"};
  static const std::vector<std::string> nuclei = {"a", "e", "i", "o", "u", "ai", "or"};
  static const std::vector<std::string> codas = {"", "", "n", "r", "s", "l"};
  int syllables = 2 + static_cast<int>(rng.next_below(2));
  std::string name;
  for (int i = 0; i < syllables; ++i) {
    name += onsets[rng.next_below(static_cast<uint32_t>(onsets.size()))];
    name += nuclei[rng.next_below(static_cast<uint32_t>(nuclei.size()))];
    if (i == syllables - 1) name += codas[rng.next_below(static_cast<uint32_t>(codas.size()))];
  }
  return name;
}

}  // namespace

void World::validate() const {
  std::set<std::pair<int, int>> keys;
  for (const Fact& f : facts) {
    require(f.s >= 0 && f.s < static_cast<int>(entities.size()), Error::Kind::Generation,
            "world: fact subject out of range");
    require(f.o >= 0 && f.o < static_cast<int>(entities.size()), Error::Kind::Generation,
            "world: fact object out of range");
    require(f.r >= 0 && f.r < static_cast<int>(relations.size()), Error::Kind::Generation,
            "world: fact relation out of range");
    auto [it, fresh] = keys.insert({f.s, f.r});
    require(fresh, Error::Kind::Generation, "world: functionality violated, duplicate (s, r) key");
  }
  for (const RelationSpec& r : relations) {
    for (const auto* fam : {&r.templates_entity, &r.templates_relation}) {
      std::set<std::string> seen;
      for (const std::string& t : *fam) {
        require(seen.insert(t).second, Error::Kind::Template, "world: duplicate template in relation " + r.id);
        auto words = split_words(t);
        int slots = static_cast<int>(std::count(words.begin(), words.end(), kSubjectSlot));
        require(slots == 1, Error::Kind::Template, "world: template must contain exactly one {s}: " + t);
      }
    }
  }
}

std::vector<int> World::object_pool(int r) const {
  std::set<int> pool;
  for (const Fact& f : facts)
    if (f.r == r) pool.insert(f.o);
  return {pool.begin(), pool.end()};
}

json World::to_json() const {
  json rels = json::array();
  for (const RelationSpec& r : relations)
    rels.push_back(json{{"id", r.id}, {"templates_entity", r.templates_entity},
                        {"templates_relation", r.templates_relation}});
  json fs = json::array();
  for (const Fact& f : facts) fs.push_back(json::array({f.s, f.r, f.o}));
  return json{{"seed", seed}, {"entities", entities}, {"relations", rels}, {"facts", fs}};
}

World World::from_json(const json& j) {
  World w;
  w.seed = j.at("seed").get<uint64_t>();
  w.entities = j.at("entities").get<std::vector<std::string>>();
  for (const json& r : j.at("relations")) {
    RelationSpec rs;
    rs.id = r.at("id").get<std::string>();
    rs.templates_entity = r.at("templates_entity").get<std::vector<std::string>>();
    rs.templates_relation = r.at("templates_relation").get<std::vector<std::string>>();
    w.relations.push_back(std::move(rs));
  }
  for (const json& f : j.at("facts")) w.facts.push_back(Fact{f.at(0).get<int>(), f.at(1).get<int>(), f.at(2).get<int>()});
  w.validate();
  return w;
}

World generate_world(uint64_t seed, int n_entities, int n_relations, int n_facts) {
  require(n_entities >= 3 && n_relations >= 1, Error::Kind::Generation, "generate_world: need >=3 entities");
  require(n_facts <= n_entities * n_relations, Error::Kind::Generation,
          "generate_world: n_facts exceeds the (s, r) grid");
  require(n_facts >= 2 * n_relations, Error::Kind::Generation,
          "generate_world: need at least two facts per relation for a non-degenerate object split");

  Pcg32 rng(mix64(seed, fnv1a64("world")));
  World w;
  w.seed = seed;

  // relation word forms; surface-distinct per relation and per family so the
  // two template families never share a relation-identifying token
  std::set<std::string> reserved = {"the", "a", "one", "so", "very", "now", "has", kSubjectSlot};
  for (int k = 0; k < n_relations; ++k) {
    std::string stem = stem_for(k);
    RelationSpec r;
    r.id = stem;
    std::string p1 = stem + "ic", p2 = stem + "ward";
    r.templates_entity = {"the " + p1 + " " + p2 + " {s}", "a " + p1 + " " + p2 + " {s}",
                          "one " + p1 + " " + p2 + " {s}"};
    r.templates_relation = {"so one " + p2 + " {s} has " + stem, "very the " + p2 + " {s} has " + stem,
                            "so a " + p2 + " {s} has " + stem};
    reserved.insert(stem);
    reserved.insert(p1);
    reserved.insert(p2);
    w.relations.push_back(std::move(r));
  }

  std::set<std::string> used;
  while (static_cast<int>(w.entities.size()) < n_entities) {
    std::string name = make_entity_name(rng);
    if (reserved.count(name) || used.count(name)) continue;
    used.insert(name);
    w.entities.push_back(name);
  }

  // balanced fact allocation: every relation receives floor/ceil(n/R) facts,
  // subjects sampled without replacement per relation, objects cycled through
  // a shuffled per-relation pool (so no object exceeds half of the facts)
  std::vector<int> per_rel(n_relations, n_facts / n_relations);
  for (int k = 0; k < n_facts % n_relations; ++k) per_rel[k] += 1;

  for (int r = 0; r < n_relations; ++r) {
    std::vector<int> subjects(n_entities);
    for (int i = 0; i < n_entities; ++i) subjects[i] = i;
    rng.shuffle(subjects);
    subjects.resize(per_rel[r]);

    int pool_size = std::min(8, n_entities);
    std::vector<int> pool(n_entities);
    for (int i = 0; i < n_entities; ++i) pool[i] = i;
    rng.shuffle(pool);
    pool.resize(pool_size);

    for (size_t i = 0; i < subjects.size(); ++i) {
      int o = pool[i % pool.size()];
      if (o == subjects[i]) o = pool[(i + 1) % pool.size()];
      w.facts.push_back(Fact{subjects[i], r, o});
    }
  }

  w.validate();
  for (int r = 0; r < n_relations; ++r) {
    std::map<int, int> counts;
    int total = 0;
    for (const Fact& f : w.facts)
      if (f.r == r) {
        counts[f.o] += 1;
        total += 1;
      }
    for (auto& [o, c] : counts)
      require(2 * c <= total, Error::Kind::Generation,
              "generate_world: degenerate object distribution in relation " + w.relations[r].id);
  }
  return w;
}

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

Tokenizer Tokenizer::build(const World& w) {
  Tokenizer t;
  auto push = [&t](const std::string& word) {
    if (!t.index_.count(word)) {
      t.index_[word] = static_cast<int>(t.words_.size());
      t.words_.push_back(word);
    }
  };
  push("<pad>");
  push("<unk>");
  for (const std::string& e : w.entities) push(e);
  for (const RelationSpec& r : w.relations) {
    for (const auto* fam : {&r.templates_entity, &r.templates_relation}) {
      for (const std::string& tpl : *fam) {
        for (const std::string& word : split_words(tpl)) {
          if (word != kSubjectSlot) push(word);
        }
      }
    }
  }
  return t;
}

int Tokenizer::encode_word(const std::string& w) const {
  auto it = index_.find(w);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::decode(int id) const {
  require(id >= 0 && id < vocab_size(), Error::Kind::Vocab, "decode: id out of range");
  return words_[id];
}

std::vector<int> Tokenizer::encode(const std::vector<std::string>& words) const {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(encode_word(w));
  return out;
}

// ---------------------------------------------------------------------------
// verbalization
// ---------------------------------------------------------------------------

const char* perspective_name(Perspective p) { return p == Perspective::Entity ? "entity" : "relation"; }

namespace {

bool contains_block(const std::vector<std::string>& words, const std::vector<std::string>& block) {
  if (block.size() > words.size()) return false;
  for (size_t i = 0; i + block.size() <= words.size(); ++i) {
    bool ok = true;
    for (size_t j = 0; j < block.size(); ++j) {
      if (words[i + j] != block[j]) {
        ok = false;
        break;
      }
    }
    if (ok) return true;
  }
  return false;
}

/// The relation phrase of a template: the longest contiguous word block,
/// excluding the subject slot, that occurs in every template of the family.
std::pair<int, int> derive_relation_span(const std::vector<std::string>& family, int template_id) {
  auto words = split_words(family.at(template_id));
  std::vector<std::vector<std::string>> others;
  for (size_t i = 0; i < family.size(); ++i)
    if (static_cast<int>(i) != template_id) others.push_back(split_words(family[i]));

  int best_len = 0, best_begin = -1;
  int n = static_cast<int>(words.size());
  for (int b = 0; b < n; ++b) {
    if (words[b] == kSubjectSlot) continue;
    for (int e = b + 1; e <= n; ++e) {
      if (words[e - 1] == kSubjectSlot) break;
      std::vector<std::string> block(words.begin() + b, words.begin() + e);
      bool common = true;
      for (const auto& other : others) {
        if (!contains_block(other, block)) {
          common = false;
          break;
        }
      }
      if (common && e - b > best_len) {
        best_len = e - b;
        best_begin = b;
      }
    }
  }
  require(best_len > 0, Error::Kind::Span, "template family shares no relation phrase");
  return {best_begin, best_begin + best_len};
}

}  // namespace

PromptInstance verbalize(const World& w, const Tokenizer& tok, int fact_id, Perspective perspective,
                         int template_id) {
  require(fact_id >= 0 && fact_id < static_cast<int>(w.facts.size()), Error::Kind::Index,
          "verbalize: fact out of range");
  const Fact& f = w.facts[fact_id];
  const RelationSpec& rel = w.relations.at(f.r);
  const auto& family = perspective == Perspective::Entity ? rel.templates_entity : rel.templates_relation;
  require(template_id >= 0 && template_id < static_cast<int>(family.size()), Error::Kind::Template,
          "verbalize: unknown template " + std::to_string(template_id) + " for relation " + rel.id);

  auto words = split_words(family[template_id]);
  auto [rb, re] = derive_relation_span(family, template_id);

  PromptInstance pi;
  pi.perspective = perspective;
  pi.template_id = template_id;
  pi.fact_id = fact_id;
  pi.rel_begin = rb;
  pi.rel_end = re;
  int subj_pos = -1;
  for (size_t i = 0; i < words.size(); ++i) {
    if (words[i] == kSubjectSlot) {
      subj_pos = static_cast<int>(i);
      words[i] = w.entities[f.s];
    }
  }
  require(subj_pos >= 0, Error::Kind::Template, "verbalize: template lacks {s}");
  pi.subj_begin = subj_pos;
  pi.subj_end = subj_pos + 1;
  pi.tokens = tok.encode(words);
  for (int t : pi.tokens)
    require(t != Tokenizer::kUnk, Error::Kind::Vocab, "verbalize: template word missing from vocabulary");
  pi.answer = tok.encode_word(w.entities[f.o]);

  int T = static_cast<int>(pi.tokens.size());
  bool disjoint = pi.subj_end <= pi.rel_begin || pi.rel_end <= pi.subj_begin;
  require(disjoint, Error::Kind::Span, "verbalize: overlapping spans");
  if (perspective == Perspective::Entity)
    require(pi.subj_end == T, Error::Kind::Span, "verbalize: entity template must end on the subject");
  else
    require(pi.rel_end == T, Error::Kind::Span, "verbalize: relation template must end on the relation phrase");
  return pi;
}

ProbeSplit split_probe_sets(const World& w) {
  ProbeSplit s;
  for (const RelationSpec& r : w.relations) {
    for (const auto* fam : {&r.templates_entity, &r.templates_relation}) {
      require(fam->size() >= 3, Error::Kind::Split,
              "split_probe_sets: relation " + r.id + " needs at least 3 templates per perspective");
      TemplateSplit ts;
      for (size_t i = 0; i + 1 < fam->size(); ++i) ts.train.push_back(static_cast<int>(i));
      ts.heldout.push_back(static_cast<int>(fam->size()) - 1);
      if (fam == &r.templates_entity)
        s.entity.push_back(std::move(ts));
      else
        s.relation.push_back(std::move(ts));
    }
  }
  return s;
}

}  // namespace kloc
