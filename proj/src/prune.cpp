#include "jointlk/prune.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace jointlk {

Tensor node_importance(Tape& tape, Tensor lm_to_kg,
                       const std::vector<std::uint8_t>& token_mask) {
  const std::size_t m = lm_to_kg.rows();
  if (token_mask.size() != m)
    throw std::invalid_argument("node_importance: token mask size mismatch");
  std::size_t unmasked = 0;
  for (std::uint8_t b : token_mask) unmasked += b;
  if (unmasked == 0) throw std::invalid_argument("node_importance: every token is masked");
  std::vector<double> weights(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    if (token_mask[i]) weights[i] = 1.0 / static_cast<double>(unmasked);
  Tensor w = tape.leaf({1, m}, std::move(weights));
  return tape.reshape(tape.matmul(w, lm_to_kg), {lm_to_kg.cols(), 1});
}

std::vector<std::size_t> top_rank(const std::vector<double>& z, double retention,
                                  const std::set<std::size_t>& exempt) {
  if (!(retention > 0.0 && retention <= 1.0))
    throw std::invalid_argument("top_rank: retention ratio must be in (0, 1], got " +
                                std::to_string(retention));
  std::vector<std::size_t> prunable;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (!exempt.count(i)) prunable.push_back(i);
  for (std::size_t e : exempt)
    if (e >= z.size())
      throw std::invalid_argument("top_rank: exempt index out of range");

  const std::size_t quota = static_cast<std::size_t>(
      std::ceil(retention * static_cast<double>(prunable.size())));
  std::stable_sort(prunable.begin(), prunable.end(), [&](std::size_t a, std::size_t b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;
  });
  std::vector<std::size_t> kept(exempt.begin(), exempt.end());
  kept.insert(kept.end(), prunable.begin(), prunable.begin() + std::min(quota, prunable.size()));
  std::sort(kept.begin(), kept.end());
  return kept;
}

PrunedGraph apply_prune(Tape& tape, Tensor x_bar, const std::vector<Edge>& edges,
                        const std::vector<std::size_t>& kept, Tensor z) {
  const std::size_t n = x_bar.rows();
  if (z.size() != n)
    throw std::invalid_argument("apply_prune: importance size does not match node count");
  PrunedGraph out;
  out.old_to_new.assign(n, -1);
  for (std::size_t r = 0; r < kept.size(); ++r) {
    if (kept[r] >= n) throw std::invalid_argument("apply_prune: kept index out of range");
    out.old_to_new[kept[r]] = static_cast<int>(r);
  }

  Tensor rows = tape.gather_rows(x_bar, kept);
  Tensor gate = tape.reshape(tape.gather_rows(tape.reshape(z, {n, 1}), kept),
                             {kept.size()});
  out.x = tape.mul_colvec(rows, gate);

  for (const Edge& e : edges) {
    const int s = out.old_to_new[static_cast<std::size_t>(e.src)];
    const int d = out.old_to_new[static_cast<std::size_t>(e.dst)];
    if (s >= 0 && d >= 0) out.edges.push_back(Edge{s, e.rel, d});
  }
  std::sort(out.edges.begin(), out.edges.end());
  return out;
}

std::string PruneTrace::to_json() const {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const PruneLayerRecord& layer : layers) {
    nlohmann::json nodes = nlohmann::json::array();
    std::set<std::size_t> kept_set(layer.kept.begin(), layer.kept.end());
    for (std::size_t i = 0; i < layer.concepts.size(); ++i) {
      nodes.push_back({{"index", i},
                       {"original", layer.original[i]},
                       {"concept", layer.concepts[i]},
                       {"importance", layer.importance[i]},
                       {"kept", kept_set.count(i) > 0}});
    }
    nlohmann::json edges = nlohmann::json::array();
    for (const Edge& e : layer.edges)
      edges.push_back({{"src", e.src}, {"rel", e.rel}, {"dst", e.dst}});
    j["layers"].push_back({{"nodes", std::move(nodes)}, {"edges", std::move(edges)}});
  }
  return j.dump(2);
}

std::string PruneTrace::to_dot(std::size_t layer_ix) const {
  if (layer_ix >= layers.size()) throw std::out_of_range("trace layer out of range");
  const PruneLayerRecord& layer = layers[layer_ix];
  std::set<std::size_t> kept_set(layer.kept.begin(), layer.kept.end());
  std::ostringstream os;
  os << "digraph prune_layer_" << layer_ix << " {\n";
  os << "  rankdir=LR;\n";
  for (std::size_t i = 0; i < layer.concepts.size(); ++i) {
    os << "  n" << i << " [label=\"" << layer.concepts[i] << "\\nZ="
       << layer.importance[i] << "\"";
    if (!kept_set.count(i)) os << ", style=dashed, color=gray";
    os << "];\n";
  }
  for (const Edge& e : layer.edges)
    os << "  n" << e.src << " -> n" << e.dst << " [label=\"" << e.rel << "\"];\n";
  os << "}\n";
  return os.str();
}

}  // namespace jointlk
