#pragma once

#include <map>
#include <vector>

#include "jointlk/optim.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

// Dense bidirectional token/node attention and the 4-way fused update of both
// modalities.

struct FusionLeaves {
  Tensor w_s;  // 3D, scores [q; x; q*x]
  Tensor w_q;  // 4D x D, token update
  Tensor w_x;  // 4D x D, node update

  static FusionLeaves from(const std::map<std::string, Tensor>& leaves, std::size_t layer);
};

struct AttentionPair {
  Tensor kg_to_lm;  // M x |V|, each column a distribution over tokens
  Tensor lm_to_kg;  // M x |V|, each row a distribution over nodes (PAD rows zero)
};

void add_fusion_params(ParamStore& store, std::size_t layer, std::size_t dim, Rng& rng);

// S[i][j] = w_s . [q_i; x_j; q_i*x_j], with PAD-token rows set to the lowest
// finite double so they vanish under any later softmax.
Tensor affinity(Tape& tape, Tensor q, Tensor x, Tensor w_s,
                const std::vector<std::uint8_t>& token_mask);

// Normalizes the affinity both ways. Rejects a fully masked token axis.
AttentionPair bidirectional_attention(Tape& tape, Tensor s,
                                      const std::vector<std::uint8_t>& token_mask);

struct FusedPair {
  Tensor q;  // M x D
  Tensor x;  // |V| x D
};

// Coattention update:
//   c_i = sum_j lm_to_kg[i,j] x_j          (node context per token)
//   e_j = sum_i kg_to_lm[i,j] q_i          (token context per node)
//   d_i = sum_j lm_to_kg[i,j] e_j          (token -> node -> token summary)
//   f_j = sum_i kg_to_lm[i,j] c_i          (node -> token -> node summary)
//   q'_i = W_Q [q_i; c_i; q_i*c_i; q_i*d_i],  x'_j = W_X [x_j; e_j; x_j*e_j; x_j*f_j]
FusedPair fuse(Tape& tape, Tensor q, Tensor x, const AttentionPair& att,
               const FusionLeaves& leaves);

}  // namespace jointlk
