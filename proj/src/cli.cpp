#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "jointlk/harness.hpp"

namespace jointlk {

namespace {

JointLKConfig config_from_options(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  JointLKConfig config;
  if (!config_path.empty()) config = load_config_file(config_path);
  for (const std::string& kv : overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_config_kv(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  config.validate();
  return config;
}

int cmd_gen(const SyntheticTaskSpec& spec, std::uint64_t seed, const std::string& out_dir) {
  SyntheticTask task = generate_synthetic(spec, seed);
  write_task(task, out_dir);
  const double oracle = oracle_accuracy(task.train, task.kg, spec.path_hops);
  std::cout << "generated " << task.train.size() << " train / " << task.dev.size()
            << " dev questions, " << task.kg.num_concepts() << " concepts, "
            << task.kg.num_edges() << " directed edges\n";
  std::cout << "path-oracle accuracy on train: " << oracle << "\n";
  return 0;
}

int cmd_retrieve(const std::string& dir, const std::string& dataset_path,
                 const std::string& out_path, std::size_t max_nodes) {
  LoadedTask task = load_task(dir);
  const std::vector<DatasetRecord> records =
      dataset_path.empty() ? task.dev : load_dataset(dataset_path);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  for (const DatasetRecord& rec : records) {
    for (std::size_t c = 0; c < rec.va.size(); ++c) {
      std::set<int> vq, va;
      for (const std::string& n : rec.vq) {
        const int id = task.kg.concept_id(n);
        if (id < 0) throw std::runtime_error("record " + rec.id + ": unknown concept " + n);
        vq.insert(id);
      }
      for (const std::string& n : rec.va[c]) {
        const int id = task.kg.concept_id(n);
        if (id < 0) throw std::runtime_error("record " + rec.id + ": unknown concept " + n);
        va.insert(id);
      }
      Subgraph sub = retrieve_subgraph(vq, va, task.kg, max_nodes);
      nlohmann::json j = nlohmann::json::parse(subgraph_to_json(sub, task.kg));
      nlohmann::json line = {{"id", rec.id}, {"choice", c}, {"subgraph", std::move(j)}};
      out << line.dump() << "\n";
    }
  }
  std::cout << "wrote per-choice subgraphs for " << records.size() << " records to "
            << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& dir, const std::string& config_path,
              const std::vector<std::string>& overrides, const std::string& checkpoint_path,
              const std::string& metrics_path) {
  JointLKConfig config = config_from_options(config_path, overrides);
  LoadedTask task = load_task(dir);
  const RelationVocab relations = RelationVocab::from_file(dir + "/relations.tsv");
  config.num_relations = static_cast<std::size_t>(relations.num_relations());

  std::vector<PreparedExample> train = prepare_examples(task.train, task.kg, task.tokens, config);
  std::vector<PreparedExample> dev = prepare_examples(task.dev, task.kg, task.tokens, config);

  ParamStore params = build_params(config, task.tokens.size());
  TrainResult result = train_model(train, dev, config, std::move(params));

  save_checkpoint(checkpoint_path, result.params, config);
  if (!metrics_path.empty()) {
    std::ofstream m(metrics_path);
    if (!m) throw std::runtime_error("cannot write metrics: " + metrics_path);
    for (const EpochMetrics& e : result.metrics) {
      m << nlohmann::json({{"epoch", e.epoch},
                           {"split", "train"},
                           {"loss", e.train_loss},
                           {"accuracy", e.train_acc}})
               .dump()
        << "\n";
      m << nlohmann::json(
               {{"epoch", e.epoch}, {"split", "dev"}, {"accuracy", e.dev_acc}})
               .dump()
        << "\n";
    }
    m << nlohmann::json({{"best_epoch", result.best_epoch},
                         {"best_dev_accuracy", result.best_dev_acc},
                         {"aborted", result.aborted}})
             .dump()
      << "\n";
  }
  if (result.aborted) {
    std::cerr << "error: " << result.note << " (saved last good checkpoint)\n";
    return 2;
  }
  std::cout << "best dev accuracy " << result.best_dev_acc << " at epoch "
            << result.best_epoch << "; checkpoint written to " << checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& dir, const std::string& checkpoint_path,
             const std::string& split, const std::string& out_path) {
  auto [params, config] = load_checkpoint(checkpoint_path);
  LoadedTask task = load_task(dir);
  const std::vector<DatasetRecord>& records = split == "train" ? task.train : task.dev;
  std::vector<PreparedExample> examples =
      prepare_examples(records, task.kg, task.tokens, config);
  EvalResult res = evaluate_model(examples, params, config);
  const std::string report = res.to_json(config.entity_threshold);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << report << "\n";
  }
  std::cout << report << "\n";
  return 0;
}

int cmd_trace(const std::string& dir, const std::string& checkpoint_path,
              const std::string& record_id, const std::string& out_prefix, bool gold_only) {
  auto [params, config] = load_checkpoint(checkpoint_path);
  LoadedTask task = load_task(dir);
  std::vector<DatasetRecord> all = task.train;
  all.insert(all.end(), task.dev.begin(), task.dev.end());
  const DatasetRecord* rec = nullptr;
  for (const DatasetRecord& r : all)
    if (r.id == record_id) rec = &r;
  if (!rec) throw std::runtime_error("record not found: " + record_id);

  PreparedExample ex = prepare_example(*rec, task.kg, task.tokens, config);
  const std::size_t choice = gold_only ? ex.gold : 0;

  Tape tape;
  std::map<std::string, Tensor> leaves = load_leaves(tape, params);
  Rng rng(0);
  PruneTrace trace;
  model_forward(tape, ex.tokens[choice], ex.graphs[choice], ex.node_tokens[choice],
                ex.node_names[choice], leaves, config, false, rng, &trace);

  std::ofstream js(out_prefix + ".json");
  if (!js) throw std::runtime_error("cannot write " + out_prefix + ".json");
  js << trace.to_json() << "\n";
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const std::string path = out_prefix + ".layer" + std::to_string(l) + ".dot";
    std::ofstream dot(path);
    if (!dot) throw std::runtime_error("cannot write " + path);
    dot << trace.to_dot(l);
  }
  std::cout << "traced record " << record_id << " choice " << choice << ": "
            << trace.layers.size() << " layers";
  for (const PruneLayerRecord& layer : trace.layers)
    std::cout << " " << layer.kept.size() << "/" << layer.concepts.size();
  std::cout << " kept; wrote " << out_prefix << ".json and " << trace.layers.size()
            << " DOT files\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const std::vector<GradCheck> checks = run_gradient_suite(seed);
  bool all_pass = true;
  for (const GradCheck& c : checks) {
    std::cout << (c.pass ? "PASS" : "FAIL") << "  " << c.name << "  max_rel_err="
              << c.max_rel_err << " tol=" << c.tolerance << "\n";
    all_pass = all_pass && c.pass;
  }
  std::cout << (all_pass ? "gradient suite: all checks passed\n"
                         : "gradient suite: FAILURES above\n");
  return all_pass ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"joint language/knowledge-graph reasoning over retrieved subgraphs"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic KG-QA task");
  SyntheticTaskSpec spec;
  std::string gen_out = "task";
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--questions", spec.num_questions, "number of questions");
  gen->add_option("--choices", spec.num_choices, "choices per question");
  gen->add_option("--concepts", spec.concept_budget, "concept budget (0 = auto)");
  gen->add_option("--mean-entities", spec.mean_question_entities,
                  "mean question entities per question");
  gen->add_option("--hops", spec.path_hops, "gold path length (1 or 2)");
  gen->add_option("--density", spec.distractor_density, "expected decoy bridges per question");
  gen->add_option("--fillers", spec.filler_tokens, "filler tokens per question");
  gen->add_option("--dev-fraction", spec.dev_fraction, "fraction of questions held out");
  gen->add_option("--seed", gen_seed, "generator seed");

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "export per-choice subgraphs as JSON lines");
  std::string r_dir, r_dataset, r_out = "subgraphs.jsonl";
  std::size_t r_max_nodes = 200;
  retrieve->add_option("--dir", r_dir, "task directory")->required();
  retrieve->add_option("--dataset", r_dataset, "dataset file (default: the task's dev split)");
  retrieve->add_option("--out", r_out, "output file");
  retrieve->add_option("--max-nodes", r_max_nodes, "retrieval node cap");

  // train
  auto* train = app.add_subcommand("train", "train a model on a task directory");
  std::string t_dir, t_config, t_checkpoint = "checkpoint.json", t_metrics = "metrics.jsonl";
  std::vector<std::string> t_set;
  train->add_option("--dir", t_dir, "task directory")->required();
  train->add_option("--config", t_config, "key=value config file");
  train->add_option("--set", t_set, "config override key=value (repeatable)");
  train->add_option("--checkpoint", t_checkpoint, "checkpoint output path");
  train->add_option("--metrics", t_metrics, "metrics JSONL output path");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string e_dir, e_checkpoint, e_split = "dev", e_out;
  eval->add_option("--dir", e_dir, "task directory")->required();
  eval->add_option("--checkpoint", e_checkpoint, "model checkpoint")->required();
  eval->add_option("--split", e_split, "train or dev")->check(CLI::IsMember({"train", "dev"}));
  eval->add_option("--out", e_out, "report output path");

  // trace
  auto* trace = app.add_subcommand("trace", "dump the pruning trace for one record");
  std::string tr_dir, tr_checkpoint, tr_record, tr_prefix = "trace";
  bool tr_gold = true;
  trace->add_option("--dir", tr_dir, "task directory")->required();
  trace->add_option("--checkpoint", tr_checkpoint, "model checkpoint")->required();
  trace->add_option("--record", tr_record, "record id")->required();
  trace->add_option("--out-prefix", tr_prefix, "output prefix for .json/.dot files");
  trace->add_flag("--gold,!--first-choice", tr_gold,
                  "trace the gold choice (default) or choice 0");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t g_seed = 7;
  gradcheck->add_option("--seed", g_seed, "randomization seed");

  std::vector<const char*> argv;
  argv.push_back("jointlk");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_gen(spec, gen_seed, gen_out);
    if (retrieve->parsed()) return cmd_retrieve(r_dir, r_dataset, r_out, r_max_nodes);
    if (train->parsed()) return cmd_train(t_dir, t_config, t_set, t_checkpoint, t_metrics);
    if (eval->parsed()) return cmd_eval(e_dir, e_checkpoint, e_split, e_out);
    if (trace->parsed()) return cmd_trace(tr_dir, tr_checkpoint, tr_record, tr_prefix, tr_gold);
    if (gradcheck->parsed()) return cmd_gradcheck(g_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}

}  // namespace jointlk
