#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jointlk/dataset.hpp"
#include "jointlk/encode.hpp"
#include "jointlk/kg.hpp"
#include "jointlk/optim.hpp"
#include "jointlk/prune.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

struct JointLKConfig {
  std::size_t n_layers = 5;        // stacked reasoning layers
  std::size_t dim = 200;           // hidden size D
  double retention = 0.92;         // per-layer keep ratio K
  double dropout = 0.2;
  std::size_t max_seq_len = 100;
  std::size_t token_dim = 0;       // 0 -> dim
  bool encoder_mixing = true;
  std::size_t num_relations = 38;  // merged relations incl. reverses
  double lr_encoder = 1e-3;
  double lr_graph = 1e-3;
  std::uint64_t seed = 0;
  bool no_prune = false;
  bool no_fusion = false;          // also disables pruning (importance needs fusion attention)
  bool no_kg = false;              // encoder + MLP baseline
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::size_t patience = 5;        // early stopping on dev accuracy
  double target_dev_acc = 2.0;     // stop once reached; >1 disables
  std::size_t entity_threshold = 7;
  std::size_t max_nodes = 200;     // retrieval cap
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t effective_token_dim() const { return token_dim == 0 ? dim : token_dim; }
  void validate() const;
};

ParamStore build_params(const JointLKConfig& config, std::size_t vocab_size);
std::map<std::string, Tensor> load_leaves(Tape& tape, const ParamStore& store);

// Learning-rate group: encoder.* parameters use lr_encoder, the rest lr_graph.
double lr_for_param(const JointLKConfig& config, const std::string& name);

// A dataset record with its per-choice retrieval done once up front.
struct PreparedExample {
  std::string id;
  std::size_t gold = 0;
  std::size_t num_question_entities = 0;
  std::vector<std::vector<int>> tokens;                    // per choice: question+choice ids
  std::vector<Subgraph> graphs;                            // per choice
  std::vector<std::vector<std::vector<int>>> node_tokens;  // per choice, per node
  std::vector<std::vector<std::string>> node_names;        // per choice, per node
};

PreparedExample prepare_example(const DatasetRecord& record, const KnowledgeGraph& kg,
                                const TokenVocab& vocab, const JointLKConfig& config);
std::vector<PreparedExample> prepare_examples(const std::vector<DatasetRecord>& records,
                                              const KnowledgeGraph& kg, const TokenVocab& vocab,
                                              const JointLKConfig& config);

// Final-layer internals, exposed for tests and diagnostics.
struct ForwardInspect {
  std::vector<double> q_first;   // encoded query Q^0
  std::vector<double> q_final;   // token stack after the last layer
  std::vector<double> x_final;   // node stack after the last layer
  std::vector<double> s, g;      // pooled summaries entering the scorer
};

// Plausibility score for one (question + choice, subgraph) pair. Traces the
// pruning decisions when `trace` is given.
Tensor model_forward(Tape& tape, const std::vector<int>& tokens, const Subgraph& sub,
                     const std::vector<std::vector<int>>& node_tokens,
                     const std::vector<std::string>& node_names,
                     const std::map<std::string, Tensor>& leaves, const JointLKConfig& config,
                     bool train, Rng& rng, PruneTrace* trace = nullptr,
                     const std::vector<double>* ctx_summary = nullptr,
                     ForwardInspect* inspect = nullptr);

struct ChoiceScore {
  std::vector<double> raw;
  std::vector<double> prob;  // softmax over choices
  std::size_t argmax = 0;
};

ChoiceScore predict(const PreparedExample& example, const ParamStore& store,
                    const JointLKConfig& config);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double dev_acc = 0.0;
};

struct TrainResult {
  ParamStore params;  // best-dev checkpoint
  std::vector<EpochMetrics> metrics;
  std::size_t best_epoch = 0;
  double best_dev_acc = 0.0;
  bool aborted = false;
  std::string note;
};

TrainResult train_model(const std::vector<PreparedExample>& train_set,
                        const std::vector<PreparedExample>& dev_set,
                        const JointLKConfig& config, ParamStore params);

struct EvalCategory {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct EvalResult {
  EvalCategory overall;
  EvalCategory few_entities;   // |V_q| <= threshold
  EvalCategory many_entities;  // |V_q| > threshold
  std::size_t failed = 0;
  std::string to_json(std::size_t threshold) const;  // empty categories omitted
};

EvalResult evaluate_model(const std::vector<PreparedExample>& examples, const ParamStore& store,
                          const JointLKConfig& config);

// Checkpoints bundle the trained parameters with the config that shaped them.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const JointLKConfig& config);
std::pair<ParamStore, JointLKConfig> load_checkpoint(const std::string& path);

std::map<std::string, std::string> config_to_kv(const JointLKConfig& config);
// Applies key=value settings; unknown keys rejected.
void apply_config_kv(JointLKConfig& config, const std::string& key, const std::string& value);

}  // namespace jointlk
