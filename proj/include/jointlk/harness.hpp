#pragma once

#include <array>
#include <string>
#include <vector>

#include "jointlk/dataset.hpp"
#include "jointlk/encode.hpp"
#include "jointlk/kg.hpp"
#include "jointlk/model.hpp"

namespace jointlk {

// Synthetic KG-QA generator. Each question gets its own fresh concepts, so the
// gold choice is the only one reachable from the question entities within the
// required hop count; token content alone carries no label signal.
struct SyntheticTaskSpec {
  std::size_t num_questions = 100;
  std::size_t num_choices = 4;
  std::size_t concept_budget = 0;        // 0: sized from the question count
  std::size_t relation_count = 38;       // merged relations incl. reverses
  double mean_question_entities = 7.0;   // question entities drawn from mean +/- 2
  std::size_t path_hops = 2;             // gold connection length (1 or 2)
  double distractor_density = 2.0;       // expected decoy bridges per question
  std::size_t filler_tokens = 4;
  double dev_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticTask {
  SyntheticTaskSpec spec;
  std::vector<std::string> concepts;
  std::vector<std::string> base_tokens;             // words concept names draw from
  std::vector<std::array<std::string, 3>> triples;  // head, raw relation, tail
  KnowledgeGraph kg;
  TokenVocab tokens;
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> dev;
};

// `seed` overrides spec.seed.
SyntheticTask generate_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed);

// Graph-path oracle: the choice whose concepts are reachable from a question
// concept within hop_limit hops. Returns the number of choices if none is.
std::size_t bfs_predict(const DatasetRecord& record, const KnowledgeGraph& kg,
                        std::size_t hop_limit);
double oracle_accuracy(const std::vector<DatasetRecord>& records, const KnowledgeGraph& kg,
                       std::size_t hop_limit);

// Hand-built interpretability fixture: one fresh question with a single 2-hop
// gold path and two decoy bridges, appended to the task's KG (rebuilt).
struct TraceFixture {
  DatasetRecord record;
  std::string gold_entity;      // question entity the gold path starts from
  std::string gold_bridge;
  std::string gold_answer;
  std::vector<std::string> decoys;  // the two decoy bridge concepts
};
TraceFixture make_trace_fixture(SyntheticTask& task, std::uint64_t seed);

// Artifact directory layout: kg_edges.tsv, kg_vocab.txt, relations.tsv,
// token_vocab.txt, train.jsonl, dev.jsonl.
void write_task(const SyntheticTask& task, const std::string& dir);
struct LoadedTask {
  KnowledgeGraph kg;
  TokenVocab tokens;
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> dev;
};
LoadedTask load_task(const std::string& dir);

// key=value config files; '#' starts a comment; unknown keys rejected.
JointLKConfig load_config_file(const std::string& path);
void save_config_file(const std::string& path, const JointLKConfig& config);

// Finite-difference sweep over every differentiable operation plus the
// end-to-end micro model. Used by tests and the `gradcheck` subcommand.
struct GradCheck {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};
std::vector<GradCheck> run_gradient_suite(std::uint64_t seed);

int run_cli(const std::vector<std::string>& args);

}  // namespace jointlk
