#include "jointlk/kg.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace jointlk {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, '\t')) out.push_back(field);
  return out;
}

bool blank(const std::string& s) {
  return s.empty() || s.find_first_not_of(" \t\r\n") == std::string::npos;
}

}  // namespace

// --- RelationVocab ------------------------------------------------------------

RelationVocab RelationVocab::conceptnet_default() {
  // ConceptNet merge table: 17 lexical merged relations plus the two context
  // links, 19 merged / 38 with reverses. '*' marks direction-flipping raws.
  static const std::vector<std::string> lines = {
      "AtLocation\tAtLocation",
      "LocatedNear\tAtLocation",
      "Causes\tCauses",
      "CausesDesire\tCauses",
      "*MotivatedByGoal\tCauses",
      "Antonym\tAntonym",
      "DistinctFrom\tAntonym",
      "HasSubevent\tHasSubevent",
      "HasFirstSubevent\tHasSubevent",
      "HasLastSubevent\tHasSubevent",
      "HasPrerequisite\tHasSubevent",
      "Entails\tHasSubevent",
      "MannerOf\tHasSubevent",
      "IsA\tIsA",
      "InstanceOf\tIsA",
      "DefinedAs\tIsA",
      "PartOf\tPartOf",
      "*HasA\tPartOf",
      "RelatedTo\tRelatedTo",
      "SimilarTo\tRelatedTo",
      "Synonym\tRelatedTo",
      "CapableOf\tCapableOf",
      "CreatedBy\tCreatedBy",
      "Desires\tDesires",
      "UsedFor\tUsedFor",
      "HasContext\tHasContext",
      "HasProperty\tHasProperty",
      "MadeOf\tMadeOf",
      "NotCapableOf\tNotCapableOf",
      "NotDesires\tNotDesires",
      "ReceivesAction\tReceivesAction",
      "CtxToQuestion\tCtxToQuestion",
      "CtxToAnswer\tCtxToAnswer",
  };
  return from_lines(lines);
}

RelationVocab RelationVocab::from_lines(const std::vector<std::string>& lines) {
  RelationVocab v;
  std::map<std::string, int> merged_ids;
  int line_no = 0;
  for (const std::string& line : lines) {
    ++line_no;
    if (blank(line) || line[0] == '#') continue;
    auto fields = split_tabs(line);
    if (fields.size() != 2)
      throw std::invalid_argument("relation table line " + std::to_string(line_no) +
                                  ": expected raw<TAB>merged");
    std::string raw = fields[0];
    bool flip = false;
    if (!raw.empty() && raw[0] == '*') {
      flip = true;
      raw = raw.substr(1);
    }
    const std::string& merged = fields[1];
    auto it = merged_ids.find(merged);
    int id;
    if (it == merged_ids.end()) {
      id = static_cast<int>(v.merged_names_.size());
      merged_ids.emplace(merged, id);
      v.merged_names_.push_back(merged);
    } else {
      id = it->second;
    }
    if (v.raw_.count(raw))
      throw std::invalid_argument("relation table line " + std::to_string(line_no) +
                                  ": duplicate raw relation " + raw);
    v.raw_.emplace(raw, Mapping{id, flip});
  }
  if (v.merged_names_.empty()) throw std::invalid_argument("relation table is empty");
  v.ctx_question_ = v.merged_id("CtxToQuestion");
  v.ctx_answer_ = v.merged_id("CtxToAnswer");
  if (v.ctx_question_ < 0 || v.ctx_answer_ < 0)
    throw std::invalid_argument(
        "relation table must define CtxToQuestion and CtxToAnswer context links");
  return v;
}

RelationVocab RelationVocab::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read relation table: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return from_lines(lines);
}

int RelationVocab::reverse(int rel) const {
  if (rel < 0 || rel >= num_relations())
    throw std::out_of_range("relation id out of range: " + std::to_string(rel));
  return rel < merged_count() ? rel + merged_count() : rel - merged_count();
}

RelationVocab::Mapping RelationVocab::raw(const std::string& name) const {
  auto it = raw_.find(name);
  if (it == raw_.end()) throw std::out_of_range("unknown raw relation: " + name);
  return it->second;
}

int RelationVocab::merged_id(const std::string& merged_name) const {
  for (std::size_t i = 0; i < merged_names_.size(); ++i)
    if (merged_names_[i] == merged_name) return static_cast<int>(i);
  return -1;
}

const std::string& RelationVocab::merged_name(int id) const {
  if (id < 0 || id >= merged_count())
    throw std::out_of_range("merged relation id out of range: " + std::to_string(id));
  return merged_names_[static_cast<std::size_t>(id)];
}

std::string RelationVocab::relation_name(int rel) const {
  if (rel < merged_count()) return merged_name(rel);
  return "*" + merged_name(rel - merged_count());
}

std::vector<std::pair<std::string, std::string>> RelationVocab::table_rows() const {
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& [raw, m] : raw_)
    rows.push_back({m.flip ? "*" + raw : raw, merged_names_[static_cast<std::size_t>(m.merged_id)]});
  return rows;
}

std::vector<std::string> RelationVocab::lexical_merged_names() const {
  std::vector<std::string> names;
  for (int i = 0; i < merged_count(); ++i)
    if (i != ctx_question_ && i != ctx_answer_) names.push_back(merged_names_[static_cast<std::size_t>(i)]);
  return names;
}

const char* node_type_name(NodeType t) {
  switch (t) {
    case NodeType::kContext: return "context";
    case NodeType::kQuestion: return "question";
    case NodeType::kAnswer: return "answer";
    case NodeType::kBridge: return "bridge";
  }
  return "?";
}

// --- KnowledgeGraph -------------------------------------------------------------

KnowledgeGraph KnowledgeGraph::load(const std::string& edges_path,
                                    const std::string& vocab_path,
                                    const RelationVocab& relations) {
  std::ifstream vin(vocab_path);
  if (!vin) throw std::runtime_error("cannot read concept vocabulary: " + vocab_path);
  std::vector<std::string> concepts;
  std::string line;
  while (std::getline(vin, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!blank(line)) concepts.push_back(line);
  }

  std::set<std::string> known(concepts.begin(), concepts.end());

  std::ifstream ein(edges_path);
  if (!ein) throw std::runtime_error("cannot read edge file: " + edges_path);
  std::vector<std::array<std::string, 3>> triples;
  int line_no = 0;
  while (std::getline(ein, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line) || line[0] == '#') continue;
    auto fields = split_tabs(line);
    if (fields.size() != 3)
      throw std::invalid_argument("edge file line " + std::to_string(line_no) +
                                  ": expected head<TAB>relation<TAB>tail");
    if (!known.count(fields[0]))
      throw std::invalid_argument("edge file line " + std::to_string(line_no) +
                                  ": unknown concept " + fields[0]);
    if (!known.count(fields[2]))
      throw std::invalid_argument("edge file line " + std::to_string(line_no) +
                                  ": unknown concept " + fields[2]);
    if (!relations.has_raw(fields[1]))
      throw std::invalid_argument("edge file line " + std::to_string(line_no) +
                                  ": unknown relation " + fields[1]);
    triples.push_back({fields[0], fields[1], fields[2]});
  }
  return from_triples(concepts, triples, relations);
}

KnowledgeGraph KnowledgeGraph::from_triples(
    const std::vector<std::string>& concepts,
    const std::vector<std::array<std::string, 3>>& triples, const RelationVocab& relations) {
  KnowledgeGraph kg;
  kg.relations_ = relations;
  kg.concept_names_ = concepts;
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    if (kg.concept_ids_.count(concepts[i]))
      throw std::invalid_argument("duplicate concept in vocabulary: " + concepts[i]);
    kg.concept_ids_.emplace(concepts[i], static_cast<int>(i));
  }

  std::set<Edge> edge_set;
  std::size_t n = 0;
  for (const auto& [head, rel, tail] : triples) {
    ++n;
    const int h = kg.concept_id(head);
    const int t = kg.concept_id(tail);
    if (h < 0)
      throw std::invalid_argument("triple " + std::to_string(n) + ": unknown concept " + head);
    if (t < 0)
      throw std::invalid_argument("triple " + std::to_string(n) + ": unknown concept " + tail);
    if (!relations.has_raw(rel))
      throw std::invalid_argument("triple " + std::to_string(n) + ": unknown relation " + rel);
    const auto m = relations.raw(rel);
    int src = h, dst = t;
    if (m.flip) std::swap(src, dst);
    edge_set.insert(Edge{src, m.merged_id, dst});
    edge_set.insert(Edge{dst, relations.reverse(m.merged_id), src});
  }
  if (edge_set.empty()) throw std::invalid_argument("knowledge graph has no edges");

  kg.edges_.assign(edge_set.begin(), edge_set.end());
  kg.adjacency_.resize(kg.concept_names_.size());
  for (const Edge& e : kg.edges_) kg.adjacency_[static_cast<std::size_t>(e.src)].push_back({e.dst, e.rel});
  return kg;
}

int KnowledgeGraph::concept_id(const std::string& name) const {
  auto it = concept_ids_.find(name);
  return it == concept_ids_.end() ? -1 : it->second;
}

const std::string& KnowledgeGraph::concept_name(int id) const {
  if (id < 0 || id >= static_cast<int>(concept_names_.size()))
    throw std::out_of_range("concept id out of range: " + std::to_string(id));
  return concept_names_[static_cast<std::size_t>(id)];
}

const std::vector<std::pair<int, int>>& KnowledgeGraph::neighbors(int cid) const {
  if (cid < 0 || cid >= static_cast<int>(adjacency_.size()))
    throw std::out_of_range("concept id out of range: " + std::to_string(cid));
  return adjacency_[static_cast<std::size_t>(cid)];
}

// --- Subgraph -------------------------------------------------------------------

void Subgraph::validate(const RelationVocab& relations) const {
  int ctx_count = 0;
  for (const SubgraphNode& n : nodes)
    if (n.type == NodeType::kContext) ++ctx_count;
  if (ctx_count != 1)
    throw std::runtime_error("subgraph must have exactly one context node, found " +
                             std::to_string(ctx_count));
  if (context_index < 0 || context_index >= static_cast<int>(nodes.size()) ||
      nodes[static_cast<std::size_t>(context_index)].type != NodeType::kContext)
    throw std::runtime_error("context_index does not point at the context node");

  std::set<Edge> seen;
  for (const Edge& e : edges) {
    if (e.src < 0 || e.src >= static_cast<int>(nodes.size()) || e.dst < 0 ||
        e.dst >= static_cast<int>(nodes.size()))
      throw std::runtime_error("subgraph edge endpoint out of range");
    if (!seen.insert(e).second) throw std::runtime_error("duplicate subgraph edge");
  }

  // every entity node is linked with the context node in both directions
  const int rq = relations.ctx_question_rel();
  const int ra = relations.ctx_answer_rel();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    int want = nodes[i].type == NodeType::kQuestion ? rq
               : nodes[i].type == NodeType::kAnswer ? ra
                                                    : -1;
    if (want < 0) continue;
    const Edge out{context_index, want, static_cast<int>(i)};
    const Edge back{static_cast<int>(i), relations.reverse(want), context_index};
    if (!seen.count(out) || !seen.count(back))
      throw std::runtime_error("entity node " + std::to_string(i) +
                               " is not bidirectionally linked to the context node");
  }
}

// --- grounding ------------------------------------------------------------------

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    const unsigned char uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

std::vector<std::string> token_variants(const std::string& token) {
  std::vector<std::string> out{token};
  auto push = [&out](const std::string& s) {
    if (s.size() >= 2 && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  };
  auto undouble = [&push](const std::string& base) {
    if (base.size() >= 3 && base[base.size() - 1] == base[base.size() - 2])
      push(base.substr(0, base.size() - 1));
  };
  const std::size_t n = token.size();
  if (n > 4 && token.ends_with("ing")) {
    const std::string base = token.substr(0, n - 3);
    push(base);
    push(base + "e");
    undouble(base);
  }
  if (n > 3 && token.ends_with("ed")) {
    const std::string base = token.substr(0, n - 2);
    push(base);
    push(token.substr(0, n - 1));  // "baked" -> "bake"
    undouble(base);
  }
  if (n > 3 && token.ends_with("ies")) {
    push(token.substr(0, n - 3) + "y");
  } else if (n > 3 && token.ends_with("es")) {
    push(token.substr(0, n - 2));
    push(token.substr(0, n - 1));
  } else if (n > 3 && token.ends_with("s") && !token.ends_with("ss")) {
    push(token.substr(0, n - 1));
  }
  out.erase(std::remove(out.begin(), out.end(), std::string()), out.end());
  return out;
}

std::set<int> ground_concepts(const std::vector<std::string>& tokens,
                              const KnowledgeGraph& kg) {
  constexpr std::size_t kMaxGram = 4;
  std::set<int> found;
  std::vector<std::vector<std::string>> variants;
  variants.reserve(tokens.size());
  for (const std::string& t : tokens) variants.push_back(token_variants(t));

  for (std::size_t start = 0; start < tokens.size(); ++start) {
    std::vector<std::string> joined{""};
    for (std::size_t len = 1; len <= kMaxGram && start + len <= tokens.size(); ++len) {
      std::vector<std::string> next;
      for (const std::string& prefix : joined)
        for (const std::string& v : variants[start + len - 1])
          next.push_back(prefix.empty() ? v : prefix + "_" + v);
      joined = std::move(next);
      for (const std::string& candidate : joined) {
        const int id = kg.concept_id(candidate);
        if (id >= 0) found.insert(id);
      }
    }
  }
  return found;
}

// --- retrieval ------------------------------------------------------------------

std::vector<double> score_nodes(const std::vector<int>& candidates, const std::set<int>& vq,
                                const std::set<int>& va, const KnowledgeGraph& kg, double w1,
                                double w2) {
  std::set<int> grounded(vq);
  grounded.insert(va.begin(), va.end());
  std::vector<std::size_t> degrees;
  degrees.reserve(candidates.size());
  for (int c : candidates) degrees.push_back(kg.degree(c));

  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::set<int> grounded_neighbors;
    for (const auto& [nbr, rel] : kg.neighbors(candidates[i]))
      if (grounded.count(nbr)) grounded_neighbors.insert(nbr);
    std::size_t at_or_below = 0;
    for (std::size_t d : degrees)
      if (d <= degrees[i]) ++at_or_below;
    const double percentile =
        static_cast<double>(at_or_below) / static_cast<double>(candidates.size());
    scores[i] = w1 * static_cast<double>(grounded_neighbors.size()) + w2 / percentile;
  }
  return scores;
}

Subgraph retrieve_subgraph(const std::set<int>& vq, const std::set<int>& va,
                           const KnowledgeGraph& kg, std::size_t max_nodes) {
  std::set<int> grounded(vq);
  grounded.insert(va.begin(), va.end());
  if (grounded.empty())
    throw std::invalid_argument("retrieve_subgraph: no grounded concepts to start from");
  for (int c : grounded) kg.concept_name(c);  // bounds check

  // bridge nodes: adjacent to two distinct grounded entities (2-hop path), not
  // themselves grounded
  std::map<int, std::set<int>> touches;  // candidate -> grounded entities it neighbors
  for (int g : grounded)
    for (const auto& [nbr, rel] : kg.neighbors(g))
      if (!grounded.count(nbr)) touches[nbr].insert(g);
  std::vector<int> bridges;
  for (const auto& [cand, gs] : touches)
    if (gs.size() >= 2) bridges.push_back(cand);

  if (grounded.size() + bridges.size() > max_nodes && !bridges.empty()) {
    const std::size_t quota = max_nodes > grounded.size() ? max_nodes - grounded.size() : 0;
    const std::vector<double> scores = score_nodes(bridges, vq, va, kg);
    std::vector<std::size_t> order(bridges.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return bridges[a] < bridges[b];
    });
    std::vector<int> kept;
    for (std::size_t i = 0; i < std::min(quota, order.size()); ++i)
      kept.push_back(bridges[order[i]]);
    bridges = std::move(kept);
  }

  std::vector<int> concepts(grounded.begin(), grounded.end());
  concepts.insert(concepts.end(), bridges.begin(), bridges.end());
  std::sort(concepts.begin(), concepts.end());

  Subgraph sub;
  std::map<int, int> local;
  for (int c : concepts) {
    NodeType type = vq.count(c)   ? NodeType::kQuestion
                    : va.count(c) ? NodeType::kAnswer
                                  : NodeType::kBridge;
    local.emplace(c, static_cast<int>(sub.nodes.size()));
    sub.nodes.push_back(SubgraphNode{.concept_id = c, .type = type});
  }
  for (int c : concepts)
    for (const auto& [nbr, rel] : kg.neighbors(c)) {
      auto it = local.find(nbr);
      if (it != local.end()) sub.edges.push_back(Edge{local.at(c), rel, it->second});
    }
  std::sort(sub.edges.begin(), sub.edges.end());
  sub.edges.erase(std::unique(sub.edges.begin(), sub.edges.end()), sub.edges.end());

  add_context_node(sub, kg.relations());
  return sub;
}

void add_context_node(Subgraph& sub, const RelationVocab& relations) {
  if (sub.has_context())
    throw std::invalid_argument("add_context_node: subgraph already has a context node");
  const int ctx = static_cast<int>(sub.nodes.size());
  sub.nodes.push_back(SubgraphNode{.concept_id = -1, .type = NodeType::kContext});
  sub.context_index = ctx;
  for (int i = 0; i < ctx; ++i) {
    int rel = -1;
    if (sub.nodes[static_cast<std::size_t>(i)].type == NodeType::kQuestion)
      rel = relations.ctx_question_rel();
    else if (sub.nodes[static_cast<std::size_t>(i)].type == NodeType::kAnswer)
      rel = relations.ctx_answer_rel();
    if (rel < 0) continue;
    sub.edges.push_back(Edge{ctx, rel, i});
    sub.edges.push_back(Edge{i, relations.reverse(rel), ctx});
  }
  std::sort(sub.edges.begin(), sub.edges.end());
}

std::string subgraph_to_json(const Subgraph& sub, const KnowledgeGraph& kg) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < sub.nodes.size(); ++i) {
    const SubgraphNode& n = sub.nodes[i];
    j["nodes"].push_back({{"id", i},
                          {"concept", n.concept_id < 0 ? "[context]" : kg.concept_name(n.concept_id)},
                          {"type", node_type_name(n.type)}});
  }
  j["edges"] = nlohmann::json::array();
  for (const Edge& e : sub.edges)
    j["edges"].push_back({{"src", e.src},
                          {"rel", e.rel},
                          {"rel_name", kg.relations().relation_name(e.rel)},
                          {"dst", e.dst}});
  j["context"] = sub.context_index;
  return j.dump(2);
}

}  // namespace jointlk
