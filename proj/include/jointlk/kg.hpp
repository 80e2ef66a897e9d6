#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace jointlk {

// Merged relation vocabulary. Raw relation names map onto a smaller merged set;
// a raw name prefixed with '*' in the table means the edge direction flips
// before merging. Every merged relation gets a materialized reverse id at
// merged_count() + id.
class RelationVocab {
 public:
  struct Mapping {
    int merged_id;
    bool flip;
  };

  static RelationVocab conceptnet_default();
  static RelationVocab from_lines(const std::vector<std::string>& lines);
  static RelationVocab from_file(const std::string& path);

  int merged_count() const { return static_cast<int>(merged_names_.size()); }
  int num_relations() const { return 2 * merged_count(); }  // with reverses
  int reverse_offset() const { return merged_count(); }
  int reverse(int rel) const;
  bool is_reverse(int rel) const { return rel >= merged_count(); }

  // Lookup for a raw edge-file name. Throws on unknown relation.
  Mapping raw(const std::string& name) const;
  bool has_raw(const std::string& name) const { return raw_.count(name) > 0; }
  int merged_id(const std::string& merged_name) const;  // -1 if unknown
  const std::string& merged_name(int id) const;
  std::string relation_name(int rel) const;  // reverse ids rendered with '*' prefix

  // Dedicated context-link relations (query node to question/answer entities).
  int ctx_question_rel() const { return ctx_question_; }
  int ctx_answer_rel() const { return ctx_answer_; }

  // (raw name with '*' flip marker, merged name) rows, e.g. for writing a table.
  std::vector<std::pair<std::string, std::string>> table_rows() const;
  // Merged names that correspond to real lexical relations (no context links).
  std::vector<std::string> lexical_merged_names() const;

 private:
  std::map<std::string, Mapping> raw_;
  std::vector<std::string> merged_names_;
  int ctx_question_ = -1;
  int ctx_answer_ = -1;
};

enum class NodeType { kContext = 0, kQuestion = 1, kAnswer = 2, kBridge = 3 };
constexpr int kNumNodeTypes = 4;
const char* node_type_name(NodeType t);

struct Edge {
  int src;
  int rel;
  int dst;
  auto operator<=>(const Edge&) const = default;
};

// Immutable after load; shareable across threads.
class KnowledgeGraph {
 public:
  static KnowledgeGraph load(const std::string& edges_path, const std::string& vocab_path,
                             const RelationVocab& relations);
  // head / raw relation / tail triples, concepts from `concepts` in id order.
  static KnowledgeGraph from_triples(
      const std::vector<std::string>& concepts,
      const std::vector<std::array<std::string, 3>>& triples, const RelationVocab& relations);

  int concept_id(const std::string& name) const;  // -1 if unknown
  const std::string& concept_name(int id) const;
  std::size_t num_concepts() const { return concept_names_.size(); }
  std::size_t num_edges() const { return edges_.size(); }  // directed, reverses included
  const std::vector<Edge>& edges() const { return edges_; }
  const RelationVocab& relations() const { return relations_; }

  // Outgoing (neighbor, relation) pairs, sorted. Reverses are materialized, so
  // this covers undirected reachability.
  const std::vector<std::pair<int, int>>& neighbors(int cid) const;
  std::size_t degree(int cid) const { return neighbors(cid).size(); }

 private:
  std::vector<std::string> concept_names_;
  std::map<std::string, int> concept_ids_;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::pair<int, int>>> adjacency_;
  RelationVocab relations_;
};

struct SubgraphNode {
  int concept_id;  // -1 for the context node
  NodeType type;
};

// Per-question retrieved neighborhood. Node indices are local; `edges` use
// local indices. Exactly one context node once injected.
struct Subgraph {
  std::vector<SubgraphNode> nodes;
  std::vector<Edge> edges;  // local indices
  int context_index = -1;

  std::size_t size() const { return nodes.size(); }
  bool has_context() const { return context_index >= 0; }
  void validate(const RelationVocab& relations) const;  // throws on invariant breach
};

// Lowercases and splits into alphanumeric tokens ('_' kept inside tokens).
std::vector<std::string> tokenize(const std::string& text);

// Inflection variants used during grounding (strip -s/-es/-ed/-ing, restore a
// trailing 'e', undouble final consonants). Includes the token itself.
std::vector<std::string> token_variants(const std::string& token);

// All n-gram matches (n <= 4, underscore-joined, inflection-expanded) against
// the concept vocabulary. Returns a set of concept ids.
std::set<int> ground_concepts(const std::vector<std::string>& tokens,
                              const KnowledgeGraph& kg);

// Deterministic structural relevance score for retrieval capping.
// score = w1 * (# distinct grounded neighbors) + w2 / degree-percentile,
// where degree-percentile is the fraction of candidates with degree <= own.
std::vector<double> score_nodes(const std::vector<int>& candidates, const std::set<int>& vq,
                                const std::set<int>& va, const KnowledgeGraph& kg,
                                double w1 = 1.0, double w2 = 0.1);

// Appendix-style retrieval: grounded entities plus every bridge node on a 1- or
// 2-hop undirected path between any pair of grounded entities, capped at
// max_nodes by score_nodes (grounded entities always kept), induced edges, and
// an injected context node.
Subgraph retrieve_subgraph(const std::set<int>& vq, const std::set<int>& va,
                           const KnowledgeGraph& kg, std::size_t max_nodes = 200);

// Adds the context node with bidirectional links to every question/answer
// entity. Throws if a context node is already present.
void add_context_node(Subgraph& sub, const RelationVocab& relations);

std::string subgraph_to_json(const Subgraph& sub, const KnowledgeGraph& kg);

}  // namespace jointlk
