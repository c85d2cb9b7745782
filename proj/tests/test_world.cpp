#include <doctest.h>

#include <set>

#include "kloc/world.hpp"
#include "test_util.hpp"

using namespace kloc;
using namespace kloc::testutil;

TEST_CASE("generate_world: deterministic given the seed") {
  World a = generate_world(42, 20, 4, 50);
  World b = generate_world(42, 20, 4, 50);
  CHECK(a.to_json() == b.to_json());
  World c = generate_world(43, 20, 4, 50);
  CHECK(a.to_json() != c.to_json());
}

TEST_CASE("generate_world: default-shaped world has distinct (s, r) keys") {
  World w = generate_world(1, 50, 10, 300);
  CHECK(w.facts.size() == 300);
  std::set<std::pair<int, int>> keys;
  for (const Fact& f : w.facts) keys.insert({f.s, f.r});
  CHECK(keys.size() == 300);
}

TEST_CASE("generate_world: unsatisfiable counts are refused") {
  CHECK_THROWS_AS(generate_world(1, 5, 2, 11), Error);  // pigeonhole: 11 > 5*2
  try {
    generate_world(1, 5, 2, 11);
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Generation);
  }
}

TEST_CASE("generate_world: object distribution is non-degenerate") {
  World w = generate_world(5, 30, 6, 120);
  for (int r = 0; r < 6; ++r) {
    std::map<int, int> counts;
    int total = 0;
    for (const Fact& f : w.facts)
      if (f.r == r) {
        counts[f.o] += 1;
        total += 1;
      }
    CHECK(total >= 2);
    for (auto& [o, c] : counts) CHECK(2 * c <= total);
  }
}

TEST_CASE("world: functionality violation is rejected by validate") {
  World w = tiny_world();
  w.facts.push_back(w.facts.front());  // duplicate (s, r)
  CHECK_THROWS_AS(w.validate(), Error);
}

TEST_CASE("world: JSON round trip preserves everything") {
  World w = tiny_world(9);
  World back = World::from_json(w.to_json());
  CHECK(back.to_json() == w.to_json());
  CHECK(back.seed == w.seed);
  CHECK(back.entities == w.entities);
  CHECK(back.facts.size() == w.facts.size());
}

TEST_CASE("tokenizer: encode/decode identity on the world vocabulary") {
  World w = tiny_world(11);
  Tokenizer tok = Tokenizer::build(w);
  CHECK(tok.vocab_size() > 2);
  for (int id = 0; id < tok.vocab_size(); ++id) CHECK(tok.encode_word(tok.decode(id)) == id);
  CHECK(tok.encode_word("definitely-not-a-word") == Tokenizer::kUnk);
}

TEST_CASE("verbalize: span placement per perspective") {
  World w = tiny_world(13);
  Tokenizer tok = Tokenizer::build(w);

  PromptInstance ent = verbalize(w, tok, 0, Perspective::Entity, 0);
  CHECK(ent.subj_end == static_cast<int>(ent.tokens.size()));  // subject is final
  CHECK(ent.subj_end - ent.subj_begin == 1);
  CHECK(tok.decode(ent.tokens[ent.subj_begin]) == w.entities[w.facts[0].s]);
  CHECK(ent.answer == tok.encode_word(w.entities[w.facts[0].o]));

  PromptInstance rel = verbalize(w, tok, 0, Perspective::Relation, 0);
  CHECK(rel.rel_end == static_cast<int>(rel.tokens.size()));  // relation phrase is final
  CHECK(rel.answer == ent.answer);
}

TEST_CASE("verbalize: two templates of a family share the answer, not the tokens") {
  World w = tiny_world(17);
  Tokenizer tok = Tokenizer::build(w);
  PromptInstance a = verbalize(w, tok, 3, Perspective::Relation, 0);
  PromptInstance b = verbalize(w, tok, 3, Perspective::Relation, 1);
  CHECK(a.answer == b.answer);
  CHECK(a.tokens != b.tokens);
}

TEST_CASE("verbalize: unknown template id is a template error") {
  World w = tiny_world(19);
  Tokenizer tok = Tokenizer::build(w);
  CHECK_THROWS_AS(verbalize(w, tok, 0, Perspective::Entity, 12), Error);
  try {
    verbalize(w, tok, 0, Perspective::Entity, 12);
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Template);
  }
}

TEST_CASE("verbalize: span invariants hold over the full world x template product") {
  World w = tiny_world(23);
  Tokenizer tok = Tokenizer::build(w);
  for (int f = 0; f < static_cast<int>(w.facts.size()); ++f) {
    const RelationSpec& rel = w.relations[w.facts[f].r];
    for (Perspective persp : {Perspective::Entity, Perspective::Relation}) {
      int n = static_cast<int>(
          (persp == Perspective::Entity ? rel.templates_entity : rel.templates_relation).size());
      for (int t = 0; t < n; ++t) {
        PromptInstance pi = verbalize(w, tok, f, persp, t);
        int T = static_cast<int>(pi.tokens.size());
        CHECK(pi.subj_begin >= 0);
        CHECK(pi.subj_begin < pi.subj_end);
        CHECK(pi.subj_end <= T);
        CHECK(pi.rel_begin >= 0);
        CHECK(pi.rel_begin < pi.rel_end);
        CHECK(pi.rel_end <= T);
        bool disjoint = pi.subj_end <= pi.rel_begin || pi.rel_end <= pi.subj_begin;
        CHECK(disjoint);
        // spans decode to the expected surface strings
        CHECK(tok.decode(pi.tokens[pi.subj_begin]) == w.entities[w.facts[f].s]);
        for (int i = 0; i < T; ++i) CHECK(tok.encode_word(tok.decode(pi.tokens[i])) == pi.tokens[i]);
      }
    }
  }
}

TEST_CASE("verbalize: the relation span decodes identically across a family") {
  World w = tiny_world(29);
  Tokenizer tok = Tokenizer::build(w);
  for (int r = 0; r < static_cast<int>(w.relations.size()); ++r) {
    int fact = -1;
    for (int f = 0; f < static_cast<int>(w.facts.size()); ++f)
      if (w.facts[f].r == r) {
        fact = f;
        break;
      }
    REQUIRE(fact >= 0);
    for (Perspective persp : {Perspective::Entity, Perspective::Relation}) {
      std::vector<std::string> first;
      int n = static_cast<int>(
          (persp == Perspective::Entity ? w.relations[r].templates_entity : w.relations[r].templates_relation)
              .size());
      for (int t = 0; t < n; ++t) {
        PromptInstance pi = verbalize(w, tok, fact, persp, t);
        std::vector<std::string> words;
        for (int i = pi.rel_begin; i < pi.rel_end; ++i) words.push_back(tok.decode(pi.tokens[i]));
        if (t == 0)
          first = words;
        else
          CHECK(words == first);
      }
    }
  }
}

TEST_CASE("split_probe_sets: minimal split and disjointness") {
  World w = tiny_world(31);
  ProbeSplit split = split_probe_sets(w);
  for (int r = 0; r < static_cast<int>(w.relations.size()); ++r) {
    for (Perspective persp : {Perspective::Entity, Perspective::Relation}) {
      const TemplateSplit& ts = split.of(r, persp);
      CHECK(ts.train.size() == 2);  // 3 templates -> 2 train + 1 held out
      CHECK(ts.heldout.size() == 1);
      for (int t : ts.train)
        for (int h : ts.heldout) CHECK(t != h);
    }
  }
}

TEST_CASE("split_probe_sets: too few templates is a split error") {
  World w = tiny_world(37);
  w.relations[0].templates_entity.pop_back();
  CHECK_THROWS_AS(split_probe_sets(w), Error);
  try {
    split_probe_sets(w);
  } catch (const Error& e) {
    CHECK(e.kind() == Error::Kind::Split);
  }
}
