#pragma once

#include <set>
#include <string>
#include <vector>

#include "jointlk/kg.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

// Attention-guided node pruning: importance from LM-to-KG attention, top-k
// retention with the context node exempt, scalar gating of kept rows, and
// adjacency re-indexing.

// Z_j = mean over unmasked tokens of lm_to_kg[i,j]; sums to 1 over nodes.
Tensor node_importance(Tape& tape, Tensor lm_to_kg,
                       const std::vector<std::uint8_t>& token_mask);

// Keeps all exempt indices plus the ceil(K * #prunable) highest-Z prunable
// nodes; ties broken by lower index. Returns sorted ascending indices.
std::vector<std::size_t> top_rank(const std::vector<double>& z, double retention,
                                  const std::set<std::size_t>& exempt);

struct PrunedGraph {
  Tensor x;                        // kept rows of the input, gated by Z
  std::vector<Edge> edges;         // re-indexed to the kept set
  std::vector<int> old_to_new;     // -1 for dropped nodes
};

// x_bar: |V| x D features, z: |V| (x 1) importance tensor on the same tape.
// The gate multiplies each kept row by its raw Z so the retention decision
// stays on the gradient path.
PrunedGraph apply_prune(Tape& tape, Tensor x_bar, const std::vector<Edge>& edges,
                        const std::vector<std::size_t>& kept, Tensor z);

struct PruneLayerRecord {
  std::vector<double> importance;       // Z over this layer's node universe
  std::vector<std::size_t> kept;        // local indices kept (sorted)
  std::vector<std::string> concepts;    // names of this layer's universe
  std::vector<int> original;            // original subgraph index per node
  std::vector<Edge> edges;              // edges of this layer's universe
};

// Layer-by-layer record of what survived; the interpretability artifact.
struct PruneTrace {
  std::vector<PruneLayerRecord> layers;

  std::string to_json() const;
  // One graph per layer: kept nodes solid, pruned nodes dashed.
  std::string to_dot(std::size_t layer) const;
};

}  // namespace jointlk
