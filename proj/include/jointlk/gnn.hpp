#pragma once

#include <map>
#include <vector>

#include "jointlk/kg.hpp"
#include "jointlk/optim.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

// Relation-aware attention layer. Attention for edge (j -> i):
//   score = (x_i Wq) . (x_j Wk + r_ji) / sqrt(D), normalized over j in N_i u {i}
//   message = alpha_ji (x_j Wv + r_ji), output = LayerNorm(x_i + (sum msg) Wo)
// r_ji is a linear map of the one-hot (relation, src type, dst type) triple.
// Self-loops use a reserved relation id (= number of real relations).

struct GnnLeaves {
  Tensor wq, wk, wv, wo, rel_w;  // rel_w: (num_relations+1 + 2*4) x D

  static GnnLeaves from(const std::map<std::string, Tensor>& leaves, std::size_t layer);
};

// Incoming (src, relation) lists per node, plus segment layout for attention.
struct AdjacencyView {
  std::vector<std::vector<std::pair<int, int>>> in_edges;  // per dst: (src, rel)
  bool self_loops = true;

  static AdjacencyView from_edges(const std::vector<Edge>& edges, std::size_t num_nodes,
                                  bool self_loops = true);
};

void add_gnn_params(ParamStore& store, std::size_t layer, std::size_t dim,
                    std::size_t num_relations, Rng& rng);

// psi for a single edge: rows of rel_w summed for (relation, src type, dst type).
Tensor relation_feature(Tape& tape, int rel, NodeType src_type, NodeType dst_type,
                        Tensor rel_w, std::size_t num_relations);

// One message-passing layer over the current graph. `types` gives each node's
// type; `x` is |V| x D. Dropout (train mode) applies to the aggregated message
// after Wo, before the residual.
Tensor gnn_forward(Tape& tape, Tensor x, const AdjacencyView& adj,
                   const std::vector<NodeType>& types, const GnnLeaves& leaves,
                   std::size_t num_relations, double dropout, bool train, Rng& rng);

}  // namespace jointlk
