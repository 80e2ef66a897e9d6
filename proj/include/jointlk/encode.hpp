#pragma once

#include <map>
#include <string>
#include <vector>

#include "jointlk/kg.hpp"
#include "jointlk/optim.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

constexpr int kPadToken = 0;
constexpr int kUnkToken = 1;

class TokenVocab {
 public:
  TokenVocab();  // just PAD/UNK
  static TokenVocab from_tokens(const std::vector<std::string>& tokens);
  static TokenVocab from_file(const std::string& path);
  void save(const std::string& path) const;

  int add(const std::string& token);           // idempotent
  int id(const std::string& token) const;      // kUnkToken if missing
  bool has(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

// Parameter leaves the encoder consumes, loaded from a ParamStore by name:
//   encoder.token_emb  |vocab| x T
//   encoder.mix_wq/wk/wv  T x T     (one self-attention mixing layer)
//   encoder.proj_w  T x D, encoder.proj_b  D   (the alignment projection)
//   graph.type_emb  4 x D           (node-type embeddings)
struct EncoderLeaves {
  Tensor token_emb, mix_wq, mix_wk, mix_wv, proj_w, proj_b, type_emb;

  static EncoderLeaves from(const std::map<std::string, Tensor>& leaves, bool mixing);
};

struct EncodedQuery {
  Tensor q0;                       // M x D
  std::vector<std::uint8_t> mask;  // 1 for real tokens, 0 for PAD
  std::size_t unmasked = 0;
};

// Adds encoder parameters (and the node-type table) to the store.
void add_encoder_params(ParamStore& store, std::size_t vocab_size, std::size_t token_dim,
                        std::size_t dim, bool mixing, Rng& rng);

// Token embeddings, one optional self-attention mixing pass, then the GELU'd
// alignment projection. Overlong input is truncated with a warning; empty
// input is rejected.
EncodedQuery encode_query(Tape& tape, const std::vector<int>& token_ids,
                          const EncoderLeaves& leaves, std::size_t max_seq_len, bool mixing);

// Initial node features: mean of the concept-name token embeddings pushed
// through the alignment projection, plus the node-type embedding. The context
// node gets its type embedding plus the detached mean of q0's unmasked rows.
// node_tokens holds per-node token-id lists (ignored for the context node).
// ctx_summary, when given, replaces the detached mean (gradient checking needs
// the stop-gradient branch held fixed across evaluations).
Tensor init_nodes(Tape& tape, const Subgraph& sub,
                  const std::vector<std::vector<int>>& node_tokens,
                  const EncoderLeaves& leaves, const EncodedQuery& query,
                  const std::vector<double>* ctx_summary = nullptr);

// Token-id lists for each subgraph node's concept name ('_'-separated words).
// Unknown words map to UNK with a warning.
std::vector<std::vector<int>> concept_token_ids(const Subgraph& sub, const KnowledgeGraph& kg,
                                                const TokenVocab& vocab, bool warn = true);

}  // namespace jointlk
