#include "jointlk/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "jointlk/fd_check.hpp"
#include "jointlk/fusion.hpp"
#include "jointlk/gnn.hpp"

namespace jointlk {

// --- dataset I/O (see dataset.hpp) -----------------------------------------------

void DatasetRecord::validate() const {
  if (choice_tokens.size() < 2)
    throw std::invalid_argument("record " + id + ": needs at least two choices");
  if (va.size() != choice_tokens.size())
    throw std::invalid_argument("record " + id + ": per-choice concept sets missing");
  if (gold >= choice_tokens.size())
    throw std::invalid_argument("record " + id + ": gold index out of range");
  if (vq.empty()) throw std::invalid_argument("record " + id + ": no question concepts");
  if (question_tokens.empty())
    throw std::invalid_argument("record " + id + ": empty question");
}

void save_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset: " + path);
  nlohmann::json header = {
      {"schema", "jointlk-dataset"}, {"version", 1}, {"num_records", records.size()}};
  out << header.dump() << "\n";
  for (const DatasetRecord& r : records) {
    nlohmann::json j = {{"id", r.id},
                        {"question_tokens", r.question_tokens},
                        {"choices", r.choice_tokens},
                        {"vq", r.vq},
                        {"va", r.va},
                        {"gold", r.gold}};
    out << j.dump() << "\n";
  }
}

std::vector<DatasetRecord> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset is empty: " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("schema", "") != "jointlk-dataset")
    throw std::runtime_error("missing dataset schema header: " + path);
  if (header.value("version", 0) != 1)
    throw std::runtime_error("unsupported dataset version in " + path);
  std::vector<DatasetRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    DatasetRecord r;
    r.id = j.at("id").get<std::string>();
    r.question_tokens = j.at("question_tokens").get<std::vector<int>>();
    r.choice_tokens = j.at("choices").get<std::vector<std::vector<int>>>();
    r.vq = j.at("vq").get<std::vector<std::string>>();
    r.va = j.at("va").get<std::vector<std::vector<std::string>>>();
    r.gold = j.at("gold").get<std::size_t>();
    r.validate();
    records.push_back(std::move(r));
  }
  return records;
}

// --- synthetic generator ----------------------------------------------------------

void SyntheticTaskSpec::validate() const {
  if (num_questions < 1) throw std::invalid_argument("task spec: num_questions must be >= 1");
  if (num_choices < 2) throw std::invalid_argument("task spec: num_choices must be >= 2");
  if (path_hops != 1 && path_hops != 2)
    throw std::invalid_argument("task spec: path_hops must be 1 or 2");
  if (mean_question_entities < 1)
    throw std::invalid_argument("task spec: mean_question_entities must be >= 1");
  if (distractor_density < 0)
    throw std::invalid_argument("task spec: distractor_density must be >= 0");
  if (dev_fraction < 0 || dev_fraction >= 1)
    throw std::invalid_argument("task spec: dev_fraction must be in [0, 1)");
}

namespace {

const std::vector<std::string>& filler_pool() {
  static const std::vector<std::string> pool = {
      "the",  "a",    "an",   "of",   "to",     "in",   "what", "which", "who",  "is",
      "are",  "was",  "best", "most", "linked", "with", "near", "from",  "about", "often"};
  return pool;
}

std::vector<std::string> make_syllables() {
  const std::string consonants = "bdfghjklmnprstvwz";
  const std::string vowels = "aeiou";
  std::vector<std::string> syl;
  for (char c : consonants)
    for (char v : vowels) syl.push_back(std::string{c, v});
  return syl;
}

std::string base_token(std::size_t i) {
  static const std::vector<std::string> syl = make_syllables();
  const std::size_t n = syl.size();
  return syl[i % n] + syl[(i / n) % n];
}

// All concepts are fresh two-token names, so questions stay disjoint and the
// gold path is the only short connection by construction.
struct ConceptFactory {
  Rng& rng;
  std::size_t alphabet;
  std::size_t budget;
  std::set<std::uint64_t> used_pairs;
  std::vector<std::string>& concepts;
  TokenVocab& vocab;
  std::vector<std::string>& base_tokens;
  std::set<std::size_t> base_seen;

  std::string fresh() {
    if (concepts.size() >= budget)
      throw std::runtime_error(
          "task spec: concept vocabulary too small for disjoint questions (budget " +
          std::to_string(budget) + ")");
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t a = rng.below(alphabet);
      const std::size_t b = rng.below(alphabet);
      const std::uint64_t key = a * alphabet + b;
      if (used_pairs.count(key)) continue;
      used_pairs.insert(key);
      const std::string ta = base_token(a), tb = base_token(b);
      vocab.add(ta);
      vocab.add(tb);
      if (base_seen.insert(a).second) base_tokens.push_back(ta);
      if (base_seen.insert(b).second) base_tokens.push_back(tb);
      concepts.push_back(ta + "_" + tb);
      return concepts.back();
    }
    throw std::runtime_error("task spec: concept name space exhausted");
  }
};

std::array<std::string, 3> random_edge(Rng& rng, const std::vector<std::string>& relations,
                                       const std::string& a, const std::string& b) {
  const std::string& rel = relations[rng.below(relations.size())];
  // direction is irrelevant for reachability (reverses are materialized)
  return rng.bernoulli(0.5) ? std::array<std::string, 3>{a, rel, b}
                            : std::array<std::string, 3>{b, rel, a};
}

std::vector<int> tokens_for(const std::vector<std::string>& words, TokenVocab& vocab) {
  std::vector<int> ids;
  for (const std::string& w : words) ids.push_back(vocab.add(w));
  return ids;
}

}  // namespace

SyntheticTask generate_synthetic(const SyntheticTaskSpec& spec_in, std::uint64_t seed) {
  SyntheticTaskSpec spec = spec_in;
  spec.seed = seed;
  spec.validate();
  const RelationVocab relations = RelationVocab::conceptnet_default();
  if (spec.relation_count != static_cast<std::size_t>(relations.num_relations()))
    throw std::invalid_argument("task spec: relation_count must be " +
                                std::to_string(relations.num_relations()));

  SyntheticTask task;
  task.spec = spec;
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);

  const std::size_t mean = static_cast<std::size_t>(std::llround(spec.mean_question_entities));
  const std::size_t per_question_estimate =
      (mean + 2) + spec.num_choices + 1 + static_cast<std::size_t>(spec.distractor_density) + 2;
  const std::size_t budget = spec.concept_budget
                                 ? spec.concept_budget
                                 : spec.num_questions * per_question_estimate;
  std::size_t alphabet = 16;
  while (alphabet * alphabet < 4 * budget) alphabet *= 2;

  // fillers enter the vocabulary first so their ids are stable across specs
  for (const std::string& f : filler_pool()) task.tokens.add(f);

  ConceptFactory factory{rng,          alphabet,    budget, {},
                         task.concepts, task.tokens, task.base_tokens, {}};
  const std::vector<std::string> lexical = relations.lexical_merged_names();

  std::vector<DatasetRecord> records;
  for (std::size_t qi = 0; qi < spec.num_questions; ++qi) {
    DatasetRecord rec;
    {
      std::ostringstream os;
      os << "q" << std::setw(5) << std::setfill('0') << qi;
      rec.id = os.str();
    }

    const long long lo = std::max<long long>(1, static_cast<long long>(mean) - 2);
    const long long hi = static_cast<long long>(mean) + 2;
    const std::size_t n_q = static_cast<std::size_t>(rng.range(lo, hi));

    std::vector<std::string> qs;
    for (std::size_t i = 0; i < n_q; ++i) qs.push_back(factory.fresh());
    std::vector<std::string> choices;
    for (std::size_t i = 0; i < spec.num_choices; ++i) choices.push_back(factory.fresh());
    rec.gold = rng.below(spec.num_choices);

    // the one short connection: question entity -> (bridge ->) gold answer
    const std::string& anchor = qs[rng.below(qs.size())];
    if (spec.path_hops == 2) {
      const std::string bridge = factory.fresh();
      task.triples.push_back(random_edge(rng, lexical, anchor, bridge));
      task.triples.push_back(random_edge(rng, lexical, bridge, choices[rec.gold]));
    } else {
      task.triples.push_back(random_edge(rng, lexical, anchor, choices[rec.gold]));
    }

    // decoy bridges between question entities: retrieval noise for pruning
    std::size_t n_decoys = static_cast<std::size_t>(spec.distractor_density);
    if (rng.uniform() < spec.distractor_density - static_cast<double>(n_decoys)) ++n_decoys;
    if (n_q >= 2) {
      for (std::size_t d = 0; d < n_decoys; ++d) {
        std::size_t u = rng.below(n_q), w = rng.below(n_q);
        while (w == u) w = rng.below(n_q);
        const std::string decoy = factory.fresh();
        task.triples.push_back(random_edge(rng, lexical, qs[u], decoy));
        task.triples.push_back(random_edge(rng, lexical, qs[w], decoy));
      }
    }

    // question text: concept word pairs plus fillers, shuffled as units
    std::vector<std::vector<std::string>> units;
    for (const std::string& c : qs) {
      const std::size_t us = c.find('_');
      units.push_back({c.substr(0, us), c.substr(us + 1)});
    }
    for (std::size_t f = 0; f < spec.filler_tokens; ++f)
      units.push_back({filler_pool()[rng.below(filler_pool().size())]});
    rng.shuffle(units);
    std::vector<std::string> words;
    for (const auto& u : units) words.insert(words.end(), u.begin(), u.end());
    rec.question_tokens = tokens_for(words, task.tokens);

    for (const std::string& c : choices) {
      const std::size_t us = c.find('_');
      rec.choice_tokens.push_back(tokens_for({c.substr(0, us), c.substr(us + 1)}, task.tokens));
      rec.va.push_back({c});
    }
    rec.vq = qs;
    rec.validate();
    records.push_back(std::move(rec));
  }

  task.kg = KnowledgeGraph::from_triples(task.concepts, task.triples, relations);

  const std::size_t n_dev = static_cast<std::size_t>(
      std::llround(spec.dev_fraction * static_cast<double>(spec.num_questions)));
  const std::size_t n_train = spec.num_questions - n_dev;
  task.train.assign(records.begin(), records.begin() + static_cast<long>(n_train));
  task.dev.assign(records.begin() + static_cast<long>(n_train), records.end());
  return task;
}

// --- path oracle ------------------------------------------------------------------

std::size_t bfs_predict(const DatasetRecord& record, const KnowledgeGraph& kg,
                        std::size_t hop_limit) {
  std::map<int, std::size_t> dist;
  std::queue<int> frontier;
  for (const std::string& name : record.vq) {
    const int id = kg.concept_id(name);
    if (id < 0) continue;
    dist[id] = 0;
    frontier.push(id);
  }
  while (!frontier.empty()) {
    const int u = frontier.front();
    frontier.pop();
    if (dist[u] >= hop_limit) continue;
    for (const auto& [v, rel] : kg.neighbors(u)) {
      if (dist.count(v)) continue;
      dist[v] = dist[u] + 1;
      frontier.push(v);
    }
  }
  for (std::size_t c = 0; c < record.va.size(); ++c)
    for (const std::string& name : record.va[c]) {
      const int id = kg.concept_id(name);
      if (id >= 0 && dist.count(id)) return c;
    }
  return record.va.size();
}

double oracle_accuracy(const std::vector<DatasetRecord>& records, const KnowledgeGraph& kg,
                       std::size_t hop_limit) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const DatasetRecord& r : records) correct += bfs_predict(r, kg, hop_limit) == r.gold;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

// --- trace fixture ----------------------------------------------------------------

TraceFixture make_trace_fixture(SyntheticTask& task, std::uint64_t seed) {
  if (task.base_tokens.size() < 4)
    throw std::invalid_argument("trace fixture needs a generated task with base tokens");
  Rng r2(seed * 0x9e3779b97f4a7c15ULL + 7);

  std::set<std::string> existing(task.concepts.begin(), task.concepts.end());
  auto fresh = [&]() {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const std::string& a = task.base_tokens[r2.below(task.base_tokens.size())];
      const std::string& b = task.base_tokens[r2.below(task.base_tokens.size())];
      const std::string name = a + "_" + b;
      if (existing.count(name)) continue;
      existing.insert(name);
      task.concepts.push_back(name);
      return name;
    }
    throw std::runtime_error("trace fixture: concept name space exhausted");
  };

  const RelationVocab relations = RelationVocab::conceptnet_default();
  const std::vector<std::string> lexical = relations.lexical_merged_names();

  TraceFixture fx;
  std::vector<std::string> qs;
  for (int i = 0; i < 7; ++i) qs.push_back(fresh());
  std::vector<std::string> choices;
  for (int i = 0; i < 4; ++i) choices.push_back(fresh());

  fx.gold_entity = qs[0];
  fx.gold_bridge = fresh();
  fx.record.gold = r2.below(4);
  fx.gold_answer = choices[fx.record.gold];
  task.triples.push_back(random_edge(r2, lexical, fx.gold_entity, fx.gold_bridge));
  task.triples.push_back(random_edge(r2, lexical, fx.gold_bridge, fx.gold_answer));

  for (int d = 0; d < 2; ++d) {
    const std::string decoy = fresh();
    fx.decoys.push_back(decoy);
    task.triples.push_back(random_edge(r2, lexical, qs[1 + 2 * d], decoy));
    task.triples.push_back(random_edge(r2, lexical, qs[2 + 2 * d], decoy));
  }

  fx.record.id = "trace_fixture";
  std::vector<std::vector<std::string>> units;
  for (const std::string& c : qs) {
    const std::size_t us = c.find('_');
    units.push_back({c.substr(0, us), c.substr(us + 1)});
  }
  for (int f = 0; f < 4; ++f)
    units.push_back({filler_pool()[r2.below(filler_pool().size())]});
  r2.shuffle(units);
  std::vector<std::string> words;
  for (const auto& u : units) words.insert(words.end(), u.begin(), u.end());
  fx.record.question_tokens = tokens_for(words, task.tokens);
  for (const std::string& c : choices) {
    const std::size_t us = c.find('_');
    fx.record.choice_tokens.push_back(
        tokens_for({c.substr(0, us), c.substr(us + 1)}, task.tokens));
    fx.record.va.push_back({c});
  }
  fx.record.vq = qs;
  fx.record.validate();

  task.kg = KnowledgeGraph::from_triples(task.concepts, task.triples, relations);
  return fx;
}

// --- artifact directory -----------------------------------------------------------

void write_task(const SyntheticTask& task, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const RelationVocab relations = RelationVocab::conceptnet_default();
  {
    std::ofstream out(dir + "/relations.tsv");
    if (!out) throw std::runtime_error("cannot write " + dir + "/relations.tsv");
    for (const auto& [raw, merged] : relations.table_rows()) out << raw << "\t" << merged << "\n";
  }
  {
    std::ofstream out(dir + "/kg_vocab.txt");
    if (!out) throw std::runtime_error("cannot write " + dir + "/kg_vocab.txt");
    for (const std::string& c : task.concepts) out << c << "\n";
  }
  {
    std::ofstream out(dir + "/kg_edges.tsv");
    if (!out) throw std::runtime_error("cannot write " + dir + "/kg_edges.tsv");
    for (const auto& [h, r, t] : task.triples) out << h << "\t" << r << "\t" << t << "\n";
  }
  task.tokens.save(dir + "/token_vocab.txt");
  save_dataset(dir + "/train.jsonl", task.train);
  save_dataset(dir + "/dev.jsonl", task.dev);
}

LoadedTask load_task(const std::string& dir) {
  const RelationVocab relations = RelationVocab::from_file(dir + "/relations.tsv");
  LoadedTask t{KnowledgeGraph::load(dir + "/kg_edges.tsv", dir + "/kg_vocab.txt", relations),
               TokenVocab::from_file(dir + "/token_vocab.txt"),
               load_dataset(dir + "/train.jsonl"), load_dataset(dir + "/dev.jsonl")};
  return t;
}

// --- config files -----------------------------------------------------------------

JointLKConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path);
  JointLKConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::size_t b = line.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) continue;
    const std::size_t e = line.find_last_not_of(" \t\r\n");
    line = line.substr(b, e - b + 1);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key=value");
    auto trim = [](std::string s) {
      const std::size_t x = s.find_first_not_of(" \t");
      if (x == std::string::npos) return std::string();
      const std::size_t y = s.find_last_not_of(" \t");
      return s.substr(x, y - x + 1);
    };
    apply_config_kv(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  config.validate();
  return config;
}

void save_config_file(const std::string& path, const JointLKConfig& config) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config: " + path);
  for (const auto& [k, v] : config_to_kv(config)) out << k << "=" << v << "\n";
}

// --- gradient suite ---------------------------------------------------------------

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// dot with a fixed random weighting so d(loss)/d(out) is non-uniform; the
// seed pins the weights so repeated builds evaluate the same function
Tensor weighted(Tape& tape, Tensor t, std::uint64_t wseed) {
  Rng r(wseed * 0x9e3779b97f4a7c15ULL + 3);
  Tensor w = tape.leaf(t.shape(), random_values(r, t.size()));
  return tape.sum(tape.mul(t, w));
}

GradCheck run_check(const std::string& name, double tol,
                    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& build,
                    const std::vector<Shape>& shapes,
                    std::vector<std::vector<double>> values) {
  FdReport rep = check_gradients(build, shapes, std::move(values));
  return GradCheck{name, rep.max_rel_err, tol, rep.max_rel_err <= tol};
}

struct MicroFixture {
  KnowledgeGraph kg;
  TokenVocab vocab;
  Subgraph sub;
  std::vector<int> tokens;
  std::vector<std::vector<int>> node_tokens;
  std::vector<std::string> node_names;
  JointLKConfig config;
};

// N=2, D=8 model over a 6-node subgraph (5 concepts + context), M=5 tokens.
MicroFixture make_micro_fixture() {
  MicroFixture fx;
  const RelationVocab relations = RelationVocab::conceptnet_default();
  const std::vector<std::string> concepts = {"alpha", "bravo", "charlie", "delta", "echo"};
  const std::vector<std::array<std::string, 3>> triples = {
      {"alpha", "IsA", "charlie"},     {"bravo", "Causes", "charlie"},
      {"bravo", "UsedFor", "delta"},   {"delta", "RelatedTo", "echo"},
      {"alpha", "AtLocation", "echo"},
  };
  fx.kg = KnowledgeGraph::from_triples(concepts, triples, relations);
  fx.vocab = TokenVocab::from_tokens(
      {"alpha", "bravo", "charlie", "delta", "echo", "why", "now"});

  const std::set<int> vq = {fx.kg.concept_id("alpha"), fx.kg.concept_id("bravo")};
  const std::set<int> va = {fx.kg.concept_id("echo")};
  fx.sub = retrieve_subgraph(vq, va, fx.kg, 200);
  if (fx.sub.size() != 6)
    throw std::logic_error("micro fixture: expected 6 nodes, got " +
                           std::to_string(fx.sub.size()));

  fx.tokens = {fx.vocab.id("alpha"), fx.vocab.id("bravo"), fx.vocab.id("why"),
               fx.vocab.id("echo"), fx.vocab.id("now")};
  fx.node_tokens = concept_token_ids(fx.sub, fx.kg, fx.vocab);
  for (const SubgraphNode& n : fx.sub.nodes)
    fx.node_names.push_back(n.concept_id < 0 ? "[context]" : fx.kg.concept_name(n.concept_id));

  fx.config.n_layers = 2;
  fx.config.dim = 8;
  fx.config.token_dim = 8;
  fx.config.retention = 0.7;
  fx.config.dropout = 0.0;  // finite differences need a deterministic forward
  fx.config.num_relations = static_cast<std::size_t>(relations.num_relations());
  fx.config.seed = 11;
  return fx;
}

}  // namespace

std::vector<GradCheck> run_gradient_suite(std::uint64_t seed) {
  std::vector<GradCheck> checks;
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  const double tol = 1e-4;

  checks.push_back(run_check(
      "matmul 3x4 * 4x2", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.matmul(in[0], in[1]), 1);
      },
      {{3, 4}, {4, 2}}, {random_values(rng, 12), random_values(rng, 8)}));

  checks.push_back(run_check(
      "add / mul elementwise", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.mul(t.add(in[0], in[1]), in[1]), 2);
      },
      {{3, 3}, {3, 3}}, {random_values(rng, 9), random_values(rng, 9)}));

  checks.push_back(run_check(
      "scalar broadcast add/mul", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.mul(t.add(in[0], in[1]), in[2]), 3);
      },
      {{2, 3}, {1}, {1}},
      {random_values(rng, 6), random_values(rng, 1), random_values(rng, 1)}));

  checks.push_back(run_check(
      "softmax rows", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.softmax(in[0], 1), 4);
      },
      {{4, 5}}, {random_values(rng, 20, -2, 2)}));

  checks.push_back(run_check(
      "softmax cols", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.softmax(in[0], 0), 5);
      },
      {{4, 5}}, {random_values(rng, 20, -2, 2)}));

  checks.push_back(run_check(
      "layer_norm 4x8", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.layer_norm(in[0], in[1], in[2], 1e-5), 6);
      },
      {{4, 8}, {8}, {8}},
      {random_values(rng, 32), random_values(rng, 8, 0.5, 1.5), random_values(rng, 8)}));

  checks.push_back(run_check(
      "concat rows+cols", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        Tensor a = t.concat({in[0], in[1]}, 0);
        Tensor b = t.concat({a, a}, 1);
        return weighted(t, b, 7);
      },
      {{2, 3}, {1, 3}}, {random_values(rng, 6), random_values(rng, 3)}));

  checks.push_back(run_check(
      "gather_rows with repeats", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.gather_rows(in[0], {2, 0, 2, 1}), 8);
      },
      {{3, 4}}, {random_values(rng, 12)}));

  checks.push_back(run_check(
      "transpose + reshape", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.reshape(t.transpose(in[0]), {2, 6}), 9);
      },
      {{3, 4}}, {random_values(rng, 12)}));

  checks.push_back(run_check(
      "row/col expansion ops", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        Tensor a = t.add_rowvec(in[0], in[1]);
        Tensor b = t.mul_rowvec(a, in[1]);
        Tensor c = t.add_colvec(b, in[2]);
        Tensor d = t.mul_colvec(c, in[2]);
        return weighted(t, t.row_sums(d), 10);
      },
      {{3, 4}, {4}, {3}},
      {random_values(rng, 12), random_values(rng, 4), random_values(rng, 3)}));

  checks.push_back(run_check(
      "gelu + scale", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.gelu(t.scale(in[0], 1.7)), 11);
      },
      {{3, 3}}, {random_values(rng, 9, -2, 2)}));

  checks.push_back(run_check(
      "mask_fill", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        std::vector<std::uint8_t> keep = {1, 0, 1, 1, 0, 1};
        return weighted(t, t.softmax(t.mask_fill(in[0], keep,
                                                 std::numeric_limits<double>::lowest()),
                                     1),
                        12);
      },
      {{2, 3}}, {random_values(rng, 6)}));

  checks.push_back(run_check(
      "segment_softmax", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.segment_softmax(in[0], {0, 3, 4, 7}), 13);
      },
      {{7, 1}}, {random_values(rng, 7, -2, 2)}));

  checks.push_back(run_check(
      "segment_weighted_sum_rows", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return weighted(t, t.segment_weighted_sum_rows(in[0], in[1], {0, 2, 5}), 14);
      },
      {{5, 1}, {5, 3}}, {random_values(rng, 5), random_values(rng, 15)}));

  checks.push_back(run_check(
      "cross_entropy_with_logits", tol,
      [&](Tape& t, const std::vector<Tensor>& in) {
        return t.cross_entropy_with_logits(in[0], 2);
      },
      {{4}}, {random_values(rng, 4, -2, 2)}));

  // module level: one message-passing layer on a 5-node graph
  {
    const std::size_t n = 5, dim = 4, nrel = 6;
    std::vector<Edge> edges = {{0, 1, 1}, {1, 4, 2}, {2, 0, 3}, {3, 2, 4}, {4, 5, 0}, {1, 3, 3}};
    std::vector<NodeType> types = {NodeType::kQuestion, NodeType::kQuestion, NodeType::kBridge,
                                   NodeType::kAnswer, NodeType::kContext};
    AdjacencyView adj = AdjacencyView::from_edges(edges, n);
    Rng dummy(0);
    checks.push_back(run_check(
        "gnn_forward params", tol,
        [&](Tape& t, const std::vector<Tensor>& in) {
          GnnLeaves leaves{in[1], in[2], in[3], in[4], in[5]};
          Tensor out = gnn_forward(t, in[0], adj, types, leaves, nrel, 0.0, false, dummy);
          return weighted(t, out, 15);
        },
        {{n, dim}, {dim, dim}, {dim, dim}, {dim, dim}, {dim, dim}, {nrel + 1 + 8, dim}},
        {random_values(rng, n * dim), random_values(rng, dim * dim),
         random_values(rng, dim * dim), random_values(rng, dim * dim),
         random_values(rng, dim * dim), random_values(rng, (nrel + 1 + 8) * dim)}));
  }

  // module level: affinity + bidirectional attention + fused update
  {
    const std::size_t m = 3, n = 4, dim = 4;
    std::vector<std::uint8_t> mask(m, 1);
    checks.push_back(run_check(
        "fusion params", tol,
        [&](Tape& t, const std::vector<Tensor>& in) {
          Tensor s = affinity(t, in[0], in[1], in[2], mask);
          AttentionPair att = bidirectional_attention(t, s, mask);
          FusionLeaves leaves{in[2], in[3], in[4]};
          FusedPair fused = fuse(t, in[0], in[1], att, leaves);
          return t.add(weighted(t, fused.q, 16), weighted(t, fused.x, 17));
        },
        {{m, dim}, {n, dim}, {3 * dim}, {4 * dim, dim}, {4 * dim, dim}},
        {random_values(rng, m * dim), random_values(rng, n * dim),
         random_values(rng, 3 * dim), random_values(rng, 4 * dim * dim),
         random_values(rng, 4 * dim * dim)}));
  }

  // module level: query encoding through the mixing layer and projection
  {
    const std::size_t vocab = 7, tdim = 6, dim = 5;
    const std::vector<int> ids = {2, 3, 2, 5};
    checks.push_back(run_check(
        "encode_query params", tol,
        [&](Tape& t, const std::vector<Tensor>& in) {
          EncoderLeaves leaves;
          leaves.token_emb = in[0];
          leaves.mix_wq = in[1];
          leaves.mix_wk = in[2];
          leaves.mix_wv = in[3];
          leaves.proj_w = in[4];
          leaves.proj_b = in[5];
          EncodedQuery q = encode_query(t, ids, leaves, 100, true);
          return weighted(t, q.q0, 18);
        },
        {{vocab, tdim}, {tdim, tdim}, {tdim, tdim}, {tdim, tdim}, {tdim, dim}, {dim}},
        {random_values(rng, vocab * tdim), random_values(rng, tdim * tdim),
         random_values(rng, tdim * tdim), random_values(rng, tdim * tdim),
         random_values(rng, tdim * dim), random_values(rng, dim)}));
  }

  // end to end: every parameter of the N=2, D=8 model against finite differences.
  // The context node's query summary is a stop-gradient branch; it is held at
  // its unperturbed value so finite differences and backprop evaluate the same
  // differentiable function.
  {
    MicroFixture fx = make_micro_fixture();
    ParamStore store = build_params(fx.config, fx.vocab.size());
    Rng dummy(0);
    std::vector<double> frozen_summary;
    {
      Tape t0;
      std::map<std::string, Tensor> leaves = load_leaves(t0, store);
      EncoderLeaves enc = EncoderLeaves::from(leaves, fx.config.encoder_mixing);
      EncodedQuery q = encode_query(t0, fx.tokens, enc, fx.config.max_seq_len,
                                    fx.config.encoder_mixing);
      frozen_summary.assign(fx.config.dim, 0.0);
      for (std::size_t i = 0; i < q.mask.size(); ++i) {
        if (!q.mask[i]) continue;
        for (std::size_t d = 0; d < fx.config.dim; ++d)
          frozen_summary[d] += q.q0.values()[i * fx.config.dim + d];
      }
      for (double& v : frozen_summary) v /= static_cast<double>(q.unmasked);
    }
    FdReport rep = check_param_gradients(
        [&](Tape& t, std::map<std::string, Tensor>& leaves) {
          return model_forward(t, fx.tokens, fx.sub, fx.node_tokens, fx.node_names, leaves,
                               fx.config, false, dummy, nullptr, &frozen_summary);
        },
        store);
    checks.push_back(GradCheck{"end-to-end N=2 D=8 model (" + rep.worst + ")",
                               rep.max_rel_err, 1e-3, rep.max_rel_err <= 1e-3});
  }

  return checks;
}

}  // namespace jointlk
