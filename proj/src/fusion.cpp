#include "jointlk/fusion.hpp"

#include <limits>
#include <stdexcept>
#include <string>

namespace jointlk {

FusionLeaves FusionLeaves::from(const std::map<std::string, Tensor>& leaves, std::size_t layer) {
  const std::string p = "fusion." + std::to_string(layer) + ".";
  return FusionLeaves{leaves.at(p + "w_s"), leaves.at(p + "w_q"), leaves.at(p + "w_x")};
}

void add_fusion_params(ParamStore& store, std::size_t layer, std::size_t dim, Rng& rng) {
  const std::string p = "fusion." + std::to_string(layer) + ".";
  store.add_xavier(p + "w_s", {3 * dim}, rng);
  store.add_xavier(p + "w_q", {4 * dim, dim}, rng);
  store.add_xavier(p + "w_x", {4 * dim, dim}, rng);
}

Tensor affinity(Tape& tape, Tensor q, Tensor x, Tensor w_s,
                const std::vector<std::uint8_t>& token_mask) {
  const std::size_t m = q.rows(), n = x.rows(), dim = q.cols();
  if (x.cols() != dim)
    throw std::invalid_argument("affinity: dimension mismatch " + shape_str(q.shape()) +
                                " vs " + shape_str(x.shape()));
  if (w_s.size() != 3 * dim)
    throw std::invalid_argument("affinity: w_s must have 3*D entries");
  if (token_mask.size() != m)
    throw std::invalid_argument("affinity: token mask size mismatch");

  Tensor parts = tape.reshape(w_s, {3, dim});
  Tensor wa = tape.reshape(tape.gather_rows(parts, {0}), {dim});  // weights on q_i
  Tensor wb = tape.reshape(tape.gather_rows(parts, {1}), {dim});  // weights on x_j
  Tensor wc = tape.reshape(tape.gather_rows(parts, {2}), {dim});  // weights on q_i*x_j

  Tensor u = tape.row_sums(tape.mul_rowvec(q, wa));               // M x 1
  Tensor v = tape.reshape(tape.row_sums(tape.mul_rowvec(x, wb)), {n});
  Tensor s = tape.matmul(tape.mul_rowvec(q, wc), tape.transpose(x));  // M x |V|
  s = tape.add_colvec(tape.add_rowvec(s, v), tape.reshape(u, {m}));

  std::vector<std::uint8_t> keep(m * n, 1);
  bool any_masked = false;
  for (std::size_t i = 0; i < m; ++i)
    if (!token_mask[i]) {
      any_masked = true;
      for (std::size_t j = 0; j < n; ++j) keep[i * n + j] = 0;
    }
  if (any_masked) s = tape.mask_fill(s, keep, std::numeric_limits<double>::lowest());
  return s;
}

AttentionPair bidirectional_attention(Tape& tape, Tensor s,
                                      const std::vector<std::uint8_t>& token_mask) {
  const std::size_t m = s.rows();
  if (token_mask.size() != m)
    throw std::invalid_argument("bidirectional_attention: token mask size mismatch");
  std::size_t unmasked = 0;
  for (std::uint8_t b : token_mask) unmasked += b;
  if (unmasked == 0)
    throw std::invalid_argument("bidirectional_attention: every token is masked");

  AttentionPair att;
  att.kg_to_lm = tape.softmax(s, 0);  // normalize over tokens, per node column
  Tensor over_nodes = tape.softmax(s, 1);  // normalize over nodes, per token row
  std::vector<double> mask_col(m);
  for (std::size_t i = 0; i < m; ++i) mask_col[i] = token_mask[i] ? 1.0 : 0.0;
  att.lm_to_kg = tape.mul_colvec(over_nodes, tape.leaf({m}, std::move(mask_col)));
  return att;
}

FusedPair fuse(Tape& tape, Tensor q, Tensor x, const AttentionPair& att,
               const FusionLeaves& leaves) {
  const std::size_t dim = q.cols();
  if (x.cols() != dim)
    throw std::invalid_argument("fuse: dimension mismatch " + shape_str(q.shape()) + " vs " +
                                shape_str(x.shape()));
  if (leaves.w_q.rows() != 4 * dim || leaves.w_x.rows() != 4 * dim)
    throw std::invalid_argument("fuse: weight shapes do not match 4*D concatenation");

  Tensor kg2lm_t = tape.transpose(att.kg_to_lm);            // |V| x M
  Tensor c = tape.matmul(att.lm_to_kg, x);                  // M x D
  Tensor e = tape.matmul(kg2lm_t, q);                       // |V| x D
  Tensor d = tape.matmul(att.lm_to_kg, e);                  // M x D
  Tensor f = tape.matmul(kg2lm_t, c);                       // |V| x D

  Tensor q_cat = tape.concat({q, c, tape.mul(q, c), tape.mul(q, d)}, 1);
  Tensor x_cat = tape.concat({x, e, tape.mul(x, e), tape.mul(x, f)}, 1);
  return FusedPair{tape.matmul(q_cat, leaves.w_q), tape.matmul(x_cat, leaves.w_x)};
}

}  // namespace jointlk
