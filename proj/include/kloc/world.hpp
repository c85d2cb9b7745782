#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kloc/errors.hpp"

namespace kloc {

/// Template strings hold one `{s}` placeholder for the subject; every other
/// word is a literal token. Entity-perspective templates end on the subject,
/// relation-perspective templates end on the relation phrase.
struct RelationSpec {
  std::string id;
  std::vector<std::string> templates_entity;
  std::vector<std::string> templates_relation;
};

struct Fact {
  int s = 0, r = 0, o = 0;
};

struct World {
  uint64_t seed = 0;
  std::vector<std::string> entities;
  std::vector<RelationSpec> relations;
  std::vector<Fact> facts;

  void validate() const;
  /// Distinct objects observed for relation r, ascending.
  std::vector<int> object_pool(int r) const;

  nlohmann::json to_json() const;
  static World from_json(const nlohmann::json& j);
};

/// Deterministic closed world; functionality (one object per (s, r)) holds
/// and no object covers more than half of a relation's facts.
World generate_world(uint64_t seed, int n_entities, int n_relations, int n_facts);

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

/// Word-level vocabulary derived from a world; ids are stable across runs.
class Tokenizer {
 public:
  static Tokenizer build(const World& w);

  int vocab_size() const { return static_cast<int>(words_.size()); }
  int encode_word(const std::string& w) const;
  const std::string& decode(int id) const;
  std::vector<int> encode(const std::vector<std::string>& words) const;

  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// prompts
// ---------------------------------------------------------------------------

enum class Perspective { Entity, Relation };

const char* perspective_name(Perspective p);

struct PromptInstance {
  std::vector<int> tokens;
  int subj_begin = 0, subj_end = 0;  // [begin, end)
  int rel_begin = 0, rel_end = 0;
  int answer = 0;  // token id of the object
  Perspective perspective = Perspective::Entity;
  int template_id = 0;
  int fact_id = 0;
};

/// Instantiates one template for one fact, with exact span annotations.
/// The relation span is the longest contiguous word block shared by every
/// template of the same family; the subject span is the `{s}` position.
PromptInstance verbalize(const World& w, const Tokenizer& tok, int fact_id, Perspective perspective,
                         int template_id);

struct TemplateSplit {
  std::vector<int> train;
  std::vector<int> heldout;
};

/// Train / held-out template ids per relation and perspective; held-out
/// realizes the rephrase sets used by the generality metric.
struct ProbeSplit {
  std::vector<TemplateSplit> entity;    // indexed by relation
  std::vector<TemplateSplit> relation;  // indexed by relation

  const TemplateSplit& of(int rel, Perspective p) const {
    return p == Perspective::Entity ? entity.at(rel) : relation.at(rel);
  }
};

ProbeSplit split_probe_sets(const World& w);

}  // namespace kloc
