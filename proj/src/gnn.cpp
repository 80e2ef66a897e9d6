#include "jointlk/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace jointlk {

GnnLeaves GnnLeaves::from(const std::map<std::string, Tensor>& leaves, std::size_t layer) {
  const std::string p = "gnn." + std::to_string(layer) + ".";
  return GnnLeaves{leaves.at(p + "wq"), leaves.at(p + "wk"), leaves.at(p + "wv"),
                   leaves.at(p + "wo"), leaves.at(p + "rel_w")};
}

AdjacencyView AdjacencyView::from_edges(const std::vector<Edge>& edges, std::size_t num_nodes,
                                        bool self_loops) {
  AdjacencyView adj;
  adj.self_loops = self_loops;
  adj.in_edges.resize(num_nodes);
  for (const Edge& e : edges) {
    if (e.src < 0 || e.dst < 0 || e.src >= static_cast<int>(num_nodes) ||
        e.dst >= static_cast<int>(num_nodes))
      throw std::invalid_argument("adjacency: edge endpoint out of range");
    adj.in_edges[static_cast<std::size_t>(e.dst)].push_back({e.src, e.rel});
  }
  for (auto& lst : adj.in_edges) std::sort(lst.begin(), lst.end());
  return adj;
}

void add_gnn_params(ParamStore& store, std::size_t layer, std::size_t dim,
                    std::size_t num_relations, Rng& rng) {
  const std::string p = "gnn." + std::to_string(layer) + ".";
  store.add_xavier(p + "wq", {dim, dim}, rng);
  store.add_xavier(p + "wk", {dim, dim}, rng);
  store.add_xavier(p + "wv", {dim, dim}, rng);
  store.add_xavier(p + "wo", {dim, dim}, rng);
  // +1 reserved self-loop relation; node types enter as (src, dst) one-hots
  store.add_xavier(p + "rel_w", {num_relations + 1 + 2 * kNumNodeTypes, dim}, rng);
}

namespace {

// rel_w row layout: [0, R] relation ids (R = self-loop), then src types, then
// dst types.
std::size_t rel_row(int rel, std::size_t num_relations) {
  if (rel < 0 || rel > static_cast<int>(num_relations))
    throw std::out_of_range("relation id out of range: " + std::to_string(rel));
  return static_cast<std::size_t>(rel);
}
std::size_t src_type_row(NodeType t, std::size_t num_relations) {
  return num_relations + 1 + static_cast<std::size_t>(t);
}
std::size_t dst_type_row(NodeType t, std::size_t num_relations) {
  return num_relations + 1 + kNumNodeTypes + static_cast<std::size_t>(t);
}

}  // namespace

Tensor relation_feature(Tape& tape, int rel, NodeType src_type, NodeType dst_type,
                        Tensor rel_w, std::size_t num_relations) {
  Tensor a = tape.gather_rows(rel_w, {rel_row(rel, num_relations)});
  Tensor b = tape.gather_rows(rel_w, {src_type_row(src_type, num_relations)});
  Tensor c = tape.gather_rows(rel_w, {dst_type_row(dst_type, num_relations)});
  return tape.add(tape.add(a, b), c);
}

Tensor gnn_forward(Tape& tape, Tensor x, const AdjacencyView& adj,
                   const std::vector<NodeType>& types, const GnnLeaves& leaves,
                   std::size_t num_relations, double dropout, bool train, Rng& rng) {
  const std::size_t n = x.rows();
  const std::size_t dim = x.cols();
  if (adj.in_edges.size() != n || types.size() != n)
    throw std::invalid_argument("gnn_forward: adjacency/type size mismatch with " +
                                std::to_string(n) + " nodes");
  const int self_rel = static_cast<int>(num_relations);

  // flatten edges grouped by destination node
  std::vector<std::size_t> srcs, rel_rows, src_rows, dst_rows, seg{0};
  for (std::size_t i = 0; i < n; ++i) {
    auto entries = adj.in_edges[i];
    if (adj.self_loops) entries.push_back({static_cast<int>(i), self_rel});
    if (entries.empty())
      throw std::invalid_argument("gnn_forward: node " + std::to_string(i) +
                                  " has no neighbors and self-loops are disabled");
    for (const auto& [j, rel] : entries) {
      srcs.push_back(static_cast<std::size_t>(j));
      rel_rows.push_back(rel_row(rel, num_relations));
      src_rows.push_back(src_type_row(types[static_cast<std::size_t>(j)], num_relations));
      dst_rows.push_back(dst_type_row(types[i], num_relations));
    }
    seg.push_back(srcs.size());
  }

  Tensor q = tape.matmul(x, leaves.wq);
  Tensor k = tape.matmul(x, leaves.wk);
  Tensor v = tape.matmul(x, leaves.wv);

  Tensor r = tape.add(tape.add(tape.gather_rows(leaves.rel_w, rel_rows),
                               tape.gather_rows(leaves.rel_w, src_rows)),
                      tape.gather_rows(leaves.rel_w, dst_rows));
  Tensor keys = tape.add(tape.gather_rows(k, srcs), r);
  Tensor vals = tape.add(tape.gather_rows(v, srcs), r);

  // per-edge score (x_dst Wq) . key, normalized within each destination segment
  std::vector<std::size_t> dsts;
  dsts.reserve(srcs.size());
  for (std::size_t i = 0; i + 1 < seg.size(); ++i)
    for (std::size_t e = seg[i]; e < seg[i + 1]; ++e) dsts.push_back(i);
  Tensor scores = tape.row_sums(tape.mul(keys, tape.gather_rows(q, dsts)));
  scores = tape.scale(scores, 1.0 / std::sqrt(static_cast<double>(dim)));
  Tensor alpha = tape.segment_softmax(scores, seg);
  Tensor msg = tape.segment_weighted_sum_rows(alpha, vals, seg);

  Tensor out = tape.matmul(msg, leaves.wo);
  out = tape.dropout(out, dropout, train, rng);
  Tensor gamma = tape.full({dim}, 1.0);
  Tensor beta = tape.zeros({dim});
  return tape.layer_norm(tape.add(x, out), gamma, beta, 1e-5);
}

}  // namespace jointlk
