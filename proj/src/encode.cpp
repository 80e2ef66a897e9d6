#include "jointlk/encode.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <stdexcept>

namespace jointlk {

TokenVocab::TokenVocab() {
  add("[pad]");
  add("[unk]");
}

TokenVocab TokenVocab::from_tokens(const std::vector<std::string>& tokens) {
  TokenVocab v;
  for (const std::string& t : tokens) v.add(t);
  return v;
}

TokenVocab TokenVocab::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read token vocabulary: " + path);
  TokenVocab v;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first && line == "[pad]") {
      // file written by save(): PAD/UNK are the first two lines
      std::getline(in, line);
      first = false;
      continue;
    }
    first = false;
    v.add(line);
  }
  return v;
}

void TokenVocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write token vocabulary: " + path);
  for (const std::string& t : tokens_) out << t << "\n";
}

int TokenVocab::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int TokenVocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkToken : it->second;
}

bool TokenVocab::has(const std::string& token) const { return ids_.count(token) > 0; }

const std::string& TokenVocab::token(int id) const {
  if (id < 0 || id >= static_cast<int>(tokens_.size()))
    throw std::out_of_range("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

EncoderLeaves EncoderLeaves::from(const std::map<std::string, Tensor>& leaves, bool mixing) {
  EncoderLeaves e;
  e.token_emb = leaves.at("encoder.token_emb");
  if (mixing) {
    e.mix_wq = leaves.at("encoder.mix_wq");
    e.mix_wk = leaves.at("encoder.mix_wk");
    e.mix_wv = leaves.at("encoder.mix_wv");
  }
  e.proj_w = leaves.at("encoder.proj_w");
  e.proj_b = leaves.at("encoder.proj_b");
  if (leaves.count("graph.type_emb")) e.type_emb = leaves.at("graph.type_emb");
  return e;
}

void add_encoder_params(ParamStore& store, std::size_t vocab_size, std::size_t token_dim,
                        std::size_t dim, bool mixing, Rng& rng) {
  store.add_xavier("encoder.token_emb", {vocab_size, token_dim}, rng);
  if (mixing) {
    store.add_xavier("encoder.mix_wq", {token_dim, token_dim}, rng);
    store.add_xavier("encoder.mix_wk", {token_dim, token_dim}, rng);
    store.add_xavier("encoder.mix_wv", {token_dim, token_dim}, rng);
  }
  store.add_xavier("encoder.proj_w", {token_dim, dim}, rng);
  store.add_zeros("encoder.proj_b", {dim});
}

EncodedQuery encode_query(Tape& tape, const std::vector<int>& token_ids,
                          const EncoderLeaves& leaves, std::size_t max_seq_len, bool mixing) {
  if (token_ids.empty()) throw std::invalid_argument("encode_query: empty token sequence");
  std::vector<int> ids = token_ids;
  if (ids.size() > max_seq_len) {
    std::cerr << "warning: query of " << ids.size() << " tokens truncated to " << max_seq_len
              << "\n";
    ids.resize(max_seq_len);
  }
  const std::size_t m = ids.size();
  const std::size_t vocab = leaves.token_emb.rows();
  std::vector<std::size_t> rows(m);
  EncodedQuery out;
  out.mask.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (ids[i] < 0 || ids[i] >= static_cast<int>(vocab))
      throw std::invalid_argument("encode_query: token id " + std::to_string(ids[i]) +
                                  " out of range");
    rows[i] = static_cast<std::size_t>(ids[i]);
    out.mask[i] = ids[i] != kPadToken;
    out.unmasked += out.mask[i];
  }
  if (out.unmasked == 0) throw std::invalid_argument("encode_query: all tokens are padding");

  Tensor emb = tape.gather_rows(leaves.token_emb, rows);  // M x T
  Tensor hidden = emb;
  if (mixing) {
    const std::size_t t_dim = leaves.token_emb.cols();
    Tensor q = tape.matmul(emb, leaves.mix_wq);
    Tensor k = tape.matmul(emb, leaves.mix_wk);
    Tensor v = tape.matmul(emb, leaves.mix_wv);
    Tensor scores = tape.scale(tape.matmul(q, tape.transpose(k)),
                               1.0 / std::sqrt(static_cast<double>(t_dim)));
    // PAD keys carry no attention mass
    std::vector<std::uint8_t> keep(m * m, 1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (!out.mask[j]) keep[i * m + j] = 0;
    scores = tape.mask_fill(scores, keep, std::numeric_limits<double>::lowest());
    Tensor att = tape.softmax(scores, 1);
    hidden = tape.add(emb, tape.matmul(att, v));
  }
  out.q0 = tape.gelu(tape.add_rowvec(tape.matmul(hidden, leaves.proj_w), leaves.proj_b));
  return out;
}

Tensor init_nodes(Tape& tape, const Subgraph& sub,
                  const std::vector<std::vector<int>>& node_tokens,
                  const EncoderLeaves& leaves, const EncodedQuery& query,
                  const std::vector<double>* ctx_summary) {
  if (node_tokens.size() != sub.nodes.size())
    throw std::invalid_argument("init_nodes: token lists do not match node count");
  if (!leaves.type_emb.defined())
    throw std::invalid_argument("init_nodes: node-type embeddings missing");
  const std::size_t n = sub.nodes.size();
  const std::size_t dim = leaves.proj_w.cols();

  // mean-pool each concept's name tokens: one gather of all tokens plus a
  // constant pooling matrix with 1/k rows
  std::vector<std::size_t> all_tokens;
  std::vector<double> pool;  // (n-ctx) x total
  std::vector<std::size_t> concept_rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<int>(i) == sub.context_index) continue;
    if (node_tokens[i].empty())
      throw std::invalid_argument("init_nodes: node " + std::to_string(i) + " has no tokens");
    concept_rows.push_back(i);
    for (int t : node_tokens[i]) all_tokens.push_back(static_cast<std::size_t>(t));
  }

  Tensor pooled;  // (#concept nodes) x T
  if (!concept_rows.empty()) {
    Tensor gathered = tape.gather_rows(leaves.token_emb, all_tokens);
    pool.assign(concept_rows.size() * all_tokens.size(), 0.0);
    std::size_t col = 0;
    for (std::size_t r = 0; r < concept_rows.size(); ++r) {
      const auto& toks = node_tokens[concept_rows[r]];
      for (std::size_t k = 0; k < toks.size(); ++k, ++col)
        pool[r * all_tokens.size() + col] = 1.0 / static_cast<double>(toks.size());
    }
    Tensor pool_t = tape.leaf({concept_rows.size(), all_tokens.size()}, std::move(pool));
    pooled = tape.matmul(pool_t, gathered);
  }

  std::vector<Tensor> pieces;
  if (!concept_rows.empty()) {
    Tensor projected =
        tape.add_rowvec(tape.matmul(pooled, leaves.proj_w), leaves.proj_b);
    std::vector<std::size_t> type_rows;
    for (std::size_t i : concept_rows)
      type_rows.push_back(static_cast<std::size_t>(sub.nodes[i].type));
    Tensor types = tape.gather_rows(leaves.type_emb, type_rows);
    pieces.push_back(tape.add(projected, types));
  }

  if (sub.has_context()) {
    if (sub.context_index != static_cast<int>(n) - 1)
      throw std::invalid_argument("init_nodes: context node must be last");
    if (!query.q0.defined())
      throw std::invalid_argument("init_nodes: context node needs the encoded query");
    // detached mean of q0 over unmasked rows
    std::vector<double> mean(dim, 0.0);
    if (ctx_summary) {
      if (ctx_summary->size() != dim)
        throw std::invalid_argument("init_nodes: context summary has wrong size");
      mean = *ctx_summary;
    } else {
      const auto& qv = query.q0.values();
      for (std::size_t i = 0; i < query.mask.size(); ++i) {
        if (!query.mask[i]) continue;
        for (std::size_t d = 0; d < dim; ++d) mean[d] += qv[i * dim + d];
      }
      for (double& x : mean) x /= static_cast<double>(query.unmasked);
    }
    Tensor q_mean = tape.leaf({1, dim}, std::move(mean));
    Tensor ctx_type = tape.gather_rows(
        leaves.type_emb, {static_cast<std::size_t>(NodeType::kContext)});
    pieces.push_back(tape.add(ctx_type, q_mean));
  }

  if (pieces.empty()) throw std::invalid_argument("init_nodes: empty subgraph");
  return pieces.size() == 1 ? pieces[0] : tape.concat(pieces, 0);
}

std::vector<std::vector<int>> concept_token_ids(const Subgraph& sub, const KnowledgeGraph& kg,
                                                const TokenVocab& vocab, bool warn) {
  std::vector<std::vector<int>> out(sub.nodes.size());
  for (std::size_t i = 0; i < sub.nodes.size(); ++i) {
    if (sub.nodes[i].type == NodeType::kContext) continue;
    const std::string& name = kg.concept_name(sub.nodes[i].concept_id);
    std::string word;
    std::vector<int> ids;
    for (char c : name + "_") {
      if (c == '_') {
        if (!word.empty()) {
          if (!vocab.has(word)) {
            if (warn)
              std::cerr << "warning: concept word '" << word << "' not in token vocabulary\n";
            ids.push_back(kUnkToken);
          } else {
            ids.push_back(vocab.id(word));
          }
          word.clear();
        }
      } else {
        word.push_back(c);
      }
    }
    if (ids.empty()) ids.push_back(kUnkToken);
    out[i] = std::move(ids);
  }
  return out;
}

}  // namespace jointlk
