#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "jointlk/kg.hpp"
#include "jointlk/rng.hpp"

using namespace jointlk;

namespace {

KnowledgeGraph guitar_kg() {
  const std::vector<std::string> concepts = {
      "guitar",  "people",        "play",   "play_guitar", "playing", "playing_guitar",
      "typically", "singe",       "singing", "take_lessons", "dance",  "singer",
      "wood",    "fun",           "action"};
  const std::vector<std::array<std::string, 3>> triples = {
      {"play_guitar", "HasSubevent", "take_lessons"},
      {"take_lessons", "RelatedTo", "singing"},
      {"play", "HasSubevent", "dance"},
      {"dance", "RelatedTo", "singing"},
      {"play_guitar", "RelatedTo", "action"},
      {"action", "RelatedTo", "singer"},
      {"singer", "RelatedTo", "singing"},
      {"guitar", "MadeOf", "wood"},
      {"wood", "RelatedTo", "play"},
      {"play_guitar", "UsedFor", "fun"},
      {"fun", "RelatedTo", "people"},
      {"playing_guitar", "RelatedTo", "playing"},
  };
  return KnowledgeGraph::from_triples(concepts, triples,
                                      RelationVocab::conceptnet_default());
}

}  // namespace

TEST_CASE("default relation table: 19 merged, 38 with reverses, involution") {
  RelationVocab v = RelationVocab::conceptnet_default();
  CHECK(v.merged_count() == 19);
  CHECK(v.num_relations() == 38);
  for (int r = 0; r < v.num_relations(); ++r) CHECK(v.reverse(v.reverse(r)) == r);
  CHECK(v.ctx_question_rel() >= 0);
  CHECK(v.ctx_answer_rel() >= 0);
  CHECK(v.ctx_question_rel() != v.ctx_answer_rel());
}

TEST_CASE("relation merging follows the ConceptNet table") {
  RelationVocab v = RelationVocab::conceptnet_default();
  const int related = v.merged_id("RelatedTo");
  CHECK(v.raw("SimilarTo").merged_id == related);
  CHECK(v.raw("Synonym").merged_id == related);
  CHECK(v.raw("RelatedTo").merged_id == related);
  CHECK_FALSE(v.raw("RelatedTo").flip);

  // starred raws flip direction before merging
  CHECK(v.raw("MotivatedByGoal").merged_id == v.merged_id("Causes"));
  CHECK(v.raw("MotivatedByGoal").flip);
  CHECK(v.raw("HasA").merged_id == v.merged_id("PartOf"));
  CHECK(v.raw("HasA").flip);

  CHECK_THROWS_AS(v.raw("NoSuchRelation"), std::out_of_range);
}

TEST_CASE("load_kg materializes reverse edges") {
  KnowledgeGraph kg = KnowledgeGraph::from_triples(
      {"a", "b"}, {{"a", "IsA", "b"}}, RelationVocab::conceptnet_default());
  CHECK(kg.num_edges() == 2);
  const RelationVocab& v = kg.relations();
  const int isa = v.merged_id("IsA");
  bool forward = false, backward = false;
  for (const Edge& e : kg.edges()) {
    if (e.src == kg.concept_id("a") && e.dst == kg.concept_id("b") && e.rel == isa)
      forward = true;
    if (e.src == kg.concept_id("b") && e.dst == kg.concept_id("a") && e.rel == v.reverse(isa))
      backward = true;
  }
  CHECK(forward);
  CHECK(backward);
}

TEST_CASE("flipped raws store the edge reversed") {
  KnowledgeGraph kg = KnowledgeGraph::from_triples(
      {"goal", "act"}, {{"act", "MotivatedByGoal", "goal"}},
      RelationVocab::conceptnet_default());
  const int causes = kg.relations().merged_id("Causes");
  bool found = false;
  for (const Edge& e : kg.edges())
    if (e.src == kg.concept_id("goal") && e.dst == kg.concept_id("act") && e.rel == causes)
      found = true;
  CHECK(found);
}

TEST_CASE("load_kg rejects bad records with line numbers and empty graphs") {
  namespace fs = std::filesystem;
  const std::string dir = "/tmp/jointlk_kg_test";
  fs::create_directories(dir);
  {
    std::ofstream v(dir + "/vocab.txt");
    v << "a\nb\n";
    std::ofstream e(dir + "/edges.tsv");
    e << "a\tIsA\tb\n";
    e << "a\tIsA\tzebra\n";
  }
  try {
    KnowledgeGraph::load(dir + "/edges.tsv", dir + "/vocab.txt",
                         RelationVocab::conceptnet_default());
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("zebra") != std::string::npos);
  }
  {
    std::ofstream e(dir + "/edges.tsv");
    e << "a\tNotARelation\tb\n";
  }
  CHECK_THROWS_AS(KnowledgeGraph::load(dir + "/edges.tsv", dir + "/vocab.txt",
                                       RelationVocab::conceptnet_default()),
                  std::invalid_argument);
  {
    std::ofstream e(dir + "/edges.tsv");
  }
  CHECK_THROWS_AS(KnowledgeGraph::load(dir + "/edges.tsv", dir + "/vocab.txt",
                                       RelationVocab::conceptnet_default()),
                  std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("hand-built 20-triple file: node and edge counts match hand count") {
  std::vector<std::string> concepts;
  std::vector<std::array<std::string, 3>> triples;
  for (int i = 0; i < 21; ++i) concepts.push_back("c" + std::to_string(i));
  for (int i = 0; i < 20; ++i)
    triples.push_back({"c" + std::to_string(i), "RelatedTo", "c" + std::to_string(i + 1)});
  KnowledgeGraph kg =
      KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
  CHECK(kg.num_concepts() == 21);
  CHECK(kg.num_edges() == 40);  // 20 plus 20 reverses
}

TEST_CASE("grounding reproduces the printed question entity set") {
  KnowledgeGraph kg = guitar_kg();
  const auto tokens = tokenize("What do people typically do while playing guitar?");
  const std::set<int> grounded = ground_concepts(tokens, kg);
  std::set<std::string> names;
  for (int id : grounded) names.insert(kg.concept_name(id));
  const std::set<std::string> expected = {"guitar",  "people",        "play",
                                          "play_guitar", "playing",   "playing_guitar",
                                          "typically"};
  CHECK(names == expected);
}

TEST_CASE("grounding reproduces the printed answer entity set") {
  KnowledgeGraph kg = guitar_kg();
  const std::set<int> grounded = ground_concepts(tokenize("singing"), kg);
  std::set<std::string> names;
  for (int id : grounded) names.insert(kg.concept_name(id));
  CHECK(names == std::set<std::string>{"singe", "singing"});
}

TEST_CASE("grounding with no vocabulary hits is empty") {
  KnowledgeGraph kg = guitar_kg();
  CHECK(ground_concepts(tokenize("zephyr quux"), kg).empty());
}

TEST_CASE("retrieval: single 2-hop bridge is included") {
  KnowledgeGraph kg = KnowledgeGraph::from_triples(
      {"a", "b", "c"}, {{"a", "RelatedTo", "b"}, {"b", "RelatedTo", "c"}},
      RelationVocab::conceptnet_default());
  Subgraph sub = retrieve_subgraph({kg.concept_id("a")}, {kg.concept_id("c")}, kg, 200);
  std::set<std::string> names;
  for (const SubgraphNode& n : sub.nodes)
    if (n.concept_id >= 0) names.insert(kg.concept_name(n.concept_id));
  CHECK(names == std::set<std::string>{"a", "b", "c"});
  sub.validate(kg.relations());
}

TEST_CASE("retrieval: 3-hop paths contribute no bridge") {
  KnowledgeGraph kg = KnowledgeGraph::from_triples(
      {"a", "x", "y", "d"},
      {{"a", "RelatedTo", "x"}, {"x", "RelatedTo", "y"}, {"y", "RelatedTo", "d"}},
      RelationVocab::conceptnet_default());
  Subgraph sub = retrieve_subgraph({kg.concept_id("a")}, {kg.concept_id("d")}, kg, 200);
  std::set<std::string> names;
  for (const SubgraphNode& n : sub.nodes)
    if (n.concept_id >= 0) names.insert(kg.concept_name(n.concept_id));
  CHECK(names == std::set<std::string>{"a", "d"});
}

namespace {

// brute-force oracle: enumerate every 1/2-hop undirected path between grounded
// pairs and collect the midpoints
std::set<int> brute_force_nodes(const std::set<int>& vq, const std::set<int>& va,
                                const KnowledgeGraph& kg) {
  std::set<int> grounded(vq);
  grounded.insert(va.begin(), va.end());
  std::set<int> keep(grounded);
  for (int u : grounded)
    for (int w : grounded) {
      if (u == w) continue;
      for (const auto& [m1, r1] : kg.neighbors(u))
        for (const auto& [m2, r2] : kg.neighbors(w))
          if (m1 == m2 && !grounded.count(m1)) keep.insert(m1);
    }
  return keep;
}

}  // namespace

TEST_CASE("retrieval equals the brute-force path oracle on random graphs") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.below(9);  // up to 12 nodes
    std::vector<std::string> concepts;
    for (std::size_t i = 0; i < n; ++i) concepts.push_back("n" + std::to_string(i));
    std::vector<std::array<std::string, 3>> triples;
    const std::size_t n_edges = 3 + rng.below(2 * n);
    for (std::size_t e = 0; e < n_edges; ++e) {
      const std::size_t u = rng.below(n);
      std::size_t w = rng.below(n);
      if (u == w) continue;
      triples.push_back({concepts[u], "RelatedTo", concepts[w]});
    }
    if (triples.empty()) triples.push_back({concepts[0], "IsA", concepts[1]});
    KnowledgeGraph kg =
        KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
    std::set<int> vq = {static_cast<int>(rng.below(n))};
    std::set<int> va = {static_cast<int>(rng.below(n))};
    vq.insert(static_cast<int>(rng.below(n)));
    va.erase(*vq.begin());
    if (va.empty()) va.insert(static_cast<int>((*vq.rbegin() + 1) % n));

    Subgraph sub = retrieve_subgraph(vq, va, kg, 200);
    std::set<int> got;
    for (const SubgraphNode& nd : sub.nodes)
      if (nd.concept_id >= 0) got.insert(nd.concept_id);
    CHECK(got == brute_force_nodes(vq, va, kg));
    sub.validate(kg.relations());
  }
}

TEST_CASE("retrieval is permutation-invariant to edge order") {
  Rng rng(5);
  std::vector<std::string> concepts;
  for (int i = 0; i < 10; ++i) concepts.push_back("p" + std::to_string(i));
  std::vector<std::array<std::string, 3>> triples;
  for (int e = 0; e < 18; ++e) {
    int u = static_cast<int>(rng.below(10)), w = static_cast<int>(rng.below(10));
    if (u == w) continue;
    triples.push_back({concepts[u], "RelatedTo", concepts[w]});
  }
  KnowledgeGraph kg1 =
      KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
  std::vector<std::array<std::string, 3>> shuffled = triples;
  rng.shuffle(shuffled);
  KnowledgeGraph kg2 =
      KnowledgeGraph::from_triples(concepts, shuffled, RelationVocab::conceptnet_default());
  Subgraph s1 = retrieve_subgraph({0, 3}, {7}, kg1, 200);
  Subgraph s2 = retrieve_subgraph({0, 3}, {7}, kg2, 200);
  REQUIRE(s1.nodes.size() == s2.nodes.size());
  for (std::size_t i = 0; i < s1.nodes.size(); ++i) {
    CHECK(s1.nodes[i].concept_id == s2.nodes[i].concept_id);
    CHECK(s1.nodes[i].type == s2.nodes[i].type);
  }
  CHECK(s1.edges == s2.edges);
}

TEST_CASE("retrieval monotonicity: larger caps only add nodes") {
  Rng rng(11);
  std::vector<std::string> concepts;
  for (int i = 0; i < 14; ++i) concepts.push_back("m" + std::to_string(i));
  std::vector<std::array<std::string, 3>> triples;
  for (int i = 2; i < 14; ++i) {
    triples.push_back({concepts[0], "RelatedTo", concepts[i]});
    triples.push_back({concepts[i], "RelatedTo", concepts[1]});
  }
  KnowledgeGraph kg =
      KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
  std::set<int> prev;
  for (std::size_t cap = 2; cap <= 14; ++cap) {
    Subgraph sub = retrieve_subgraph({0}, {1}, kg, cap);
    std::set<int> now;
    for (const SubgraphNode& n : sub.nodes)
      if (n.concept_id >= 0) now.insert(n.concept_id);
    for (int kept : prev) CHECK(now.count(kept));
    prev = now;
  }
}

TEST_CASE("score_nodes: grounded-neighbor count dominates, ties break by id") {
  // hub with 3 grounded neighbors vs node with 1, equal degree
  std::vector<std::string> concepts = {"q1", "q2", "q3", "a1", "hub", "leaf",
                                       "x1", "x2", "x3"};
  std::vector<std::array<std::string, 3>> triples = {
      {"hub", "RelatedTo", "q1"}, {"hub", "RelatedTo", "q2"}, {"hub", "RelatedTo", "q3"},
      {"leaf", "RelatedTo", "q1"}, {"leaf", "RelatedTo", "x1"}, {"leaf", "RelatedTo", "x2"},
  };
  KnowledgeGraph kg =
      KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
  std::set<int> vq = {kg.concept_id("q1"), kg.concept_id("q2"), kg.concept_id("q3")};
  std::set<int> va = {kg.concept_id("a1")};
  std::vector<int> cands = {kg.concept_id("hub"), kg.concept_id("leaf")};
  std::vector<double> scores = score_nodes(cands, vq, va, kg);
  CHECK(scores[0] > scores[1]);

  // identical structure: lower id must win after scoring ties
  std::vector<int> tie = {kg.concept_id("x1"), kg.concept_id("x2")};
  std::vector<double> tie_scores = score_nodes(tie, vq, va, kg);
  CHECK(tie_scores[0] == tie_scores[1]);
}

TEST_CASE("score_nodes: top-5 of a 12-candidate fixture matches hand ranking") {
  // candidates b0..b11; bi neighbors the first (i % 4) grounded entities plus
  // i extra filler neighbors, so grounded-count ranks i%4 and the degree
  // percentile penalizes the fillers within a tier.
  std::vector<std::string> concepts = {"g0", "g1", "g2", "a0"};
  for (int i = 0; i < 12; ++i) concepts.push_back("b" + std::to_string(i));
  for (int i = 0; i < 40; ++i) concepts.push_back("f" + std::to_string(i));
  std::vector<std::array<std::string, 3>> triples;
  int filler = 0;
  const std::vector<std::string> grounded = {"g0", "g1", "g2", "a0"};
  for (int i = 0; i < 12; ++i) {
    const std::string b = "b" + std::to_string(i);
    for (int gix = 0; gix < (i % 4); ++gix)
      triples.push_back({b, "RelatedTo", grounded[static_cast<std::size_t>(gix)]});
    for (int f = 0; f < i % 3; ++f)
      triples.push_back({b, "RelatedTo", "f" + std::to_string(filler++)});
    if (i % 4 == 0) triples.push_back({b, "RelatedTo", "f" + std::to_string(filler++)});
  }
  KnowledgeGraph kg =
      KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
  std::set<int> vq = {kg.concept_id("g0"), kg.concept_id("g1"), kg.concept_id("g2")};
  std::set<int> va = {kg.concept_id("a0")};
  std::vector<int> cands;
  for (int i = 0; i < 12; ++i) cands.push_back(kg.concept_id("b" + std::to_string(i)));
  std::vector<double> scores = score_nodes(cands, vq, va, kg);

  // independent straight-line recomputation of the documented formula
  std::vector<std::size_t> degrees;
  for (int c : cands) degrees.push_back(kg.degree(c));
  std::vector<double> expected(12);
  for (int i = 0; i < 12; ++i) {
    std::set<int> gn;
    for (auto [nbr, rel] : kg.neighbors(cands[static_cast<std::size_t>(i)]))
      if (vq.count(nbr) || va.count(nbr)) gn.insert(nbr);
    std::size_t below = 0;
    for (std::size_t d : degrees)
      if (d <= degrees[static_cast<std::size_t>(i)]) ++below;
    expected[static_cast<std::size_t>(i)] =
        static_cast<double>(gn.size()) + 0.1 / (static_cast<double>(below) / 12.0);
  }
  for (int i = 0; i < 12; ++i)
    CHECK(scores[static_cast<std::size_t>(i)] ==
          doctest::Approx(expected[static_cast<std::size_t>(i)]).epsilon(1e-12));

  // hand-derived ordering of the top tier: highest grounded count, then lower
  // degree percentile, then lower id
  std::vector<std::size_t> order(12);
  for (std::size_t i = 0; i < 12; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return cands[x] < cands[y];
  });
  CHECK((order[0] % 4) == 3);
  CHECK((order[1] % 4) == 3);
  CHECK((order[2] % 4) == 3);
}

TEST_CASE("add_context_node wiring and degree counts") {
  KnowledgeGraph kg = guitar_kg();
  // 2 question entities, 1 answer entity -> 6 new directed edges
  Subgraph sub;
  sub.nodes = {{kg.concept_id("guitar"), NodeType::kQuestion},
               {kg.concept_id("people"), NodeType::kQuestion},
               {kg.concept_id("singing"), NodeType::kAnswer}};
  add_context_node(sub, kg.relations());
  CHECK(sub.nodes.size() == 4);
  CHECK(sub.edges.size() == 6);
  sub.validate(kg.relations());
  CHECK_THROWS_AS(add_context_node(sub, kg.relations()), std::invalid_argument);

  // empty answer set: edges only to question entities
  Subgraph sub2;
  sub2.nodes = {{kg.concept_id("guitar"), NodeType::kQuestion},
                {kg.concept_id("people"), NodeType::kQuestion}};
  add_context_node(sub2, kg.relations());
  CHECK(sub2.edges.size() == 4);
}

TEST_CASE("guitar fixture: context degree is |Vq|+|Va| = 9 each direction") {
  KnowledgeGraph kg = guitar_kg();
  const std::set<int> vq = ground_concepts(
      tokenize("what do people typically do while playing guitar"), kg);
  const std::set<int> va = ground_concepts(tokenize("singing"), kg);
  REQUIRE(vq.size() == 7);
  REQUIRE(va.size() == 2);
  Subgraph sub = retrieve_subgraph(vq, va, kg, 200);
  std::size_t out_deg = 0, in_deg = 0;
  for (const Edge& e : sub.edges) {
    if (e.src == sub.context_index) ++out_deg;
    if (e.dst == sub.context_index) ++in_deg;
  }
  CHECK(out_deg == 9);
  CHECK(in_deg == 9);
}

TEST_CASE("subgraph invariants hold on random small graphs") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    std::vector<std::string> concepts;
    for (std::size_t i = 0; i < n; ++i) concepts.push_back("r" + std::to_string(i));
    std::vector<std::array<std::string, 3>> triples;
    for (std::size_t e = 0; e < 2 * n; ++e) {
      std::size_t u = rng.below(n), w = rng.below(n);
      if (u != w) triples.push_back({concepts[u], "RelatedTo", concepts[w]});
    }
    if (triples.empty()) triples.push_back({concepts[0], "IsA", concepts[1]});
    KnowledgeGraph kg =
        KnowledgeGraph::from_triples(concepts, triples, RelationVocab::conceptnet_default());
    std::set<int> vq = {static_cast<int>(rng.below(n))};
    std::set<int> va = {static_cast<int>(rng.below(n))};
    if (*va.begin() == *vq.begin()) va = {static_cast<int>((*vq.begin() + 1) % n)};
    const std::size_t cap = 2 + rng.below(8);
    Subgraph sub = retrieve_subgraph(vq, va, kg, cap);
    sub.validate(kg.relations());
    CHECK(sub.nodes.size() <= cap + 1);
  }
}

TEST_CASE("retrieval with no grounded concepts is rejected") {
  KnowledgeGraph kg = guitar_kg();
  CHECK_THROWS_AS(retrieve_subgraph({}, {}, kg, 10), std::invalid_argument);
}

TEST_CASE("token variant generation covers the fixture inflections") {
  auto has = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  CHECK(has(token_variants("playing"), "play"));
  CHECK(has(token_variants("singing"), "singe"));
  CHECK(has(token_variants("running"), "run"));
  CHECK(has(token_variants("baked"), "bake"));
  CHECK(has(token_variants("sounds"), "sound"));
  CHECK(has(token_variants("people"), "people"));
}
