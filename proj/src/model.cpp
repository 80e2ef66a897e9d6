#include "jointlk/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "jointlk/fusion.hpp"
#include "jointlk/gnn.hpp"

namespace jointlk {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void JointLKConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
  if (dim < 1) throw std::invalid_argument("config: dim must be >= 1");
  if (!(retention > 0.0 && retention <= 1.0))
    throw std::invalid_argument("config: retention must be in (0, 1]");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("config: dropout must be in [0, 1)");
  if (max_seq_len < 1) throw std::invalid_argument("config: max_seq_len must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (num_relations < 1) throw std::invalid_argument("config: num_relations must be >= 1");
}

ParamStore build_params(const JointLKConfig& config, std::size_t vocab_size) {
  config.validate();
  Rng rng(mix64(config.seed));
  ParamStore store;
  const std::size_t dim = config.dim;
  add_encoder_params(store, vocab_size, config.effective_token_dim(), dim,
                     config.encoder_mixing, rng);
  if (!config.no_kg) {
    store.add_xavier("graph.type_emb", {static_cast<std::size_t>(kNumNodeTypes), dim}, rng);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      add_gnn_params(store, l, dim, config.num_relations, rng);
      if (!config.no_fusion) add_fusion_params(store, l, dim, rng);
    }
    store.add_xavier("readout.w_pool", {dim, dim}, rng);
  }
  store.add_xavier("readout.mlp_w1", {2 * dim, dim}, rng);
  store.add_zeros("readout.mlp_b1", {dim});
  store.add_xavier("readout.mlp_w2", {dim, 1}, rng);
  store.add_zeros("readout.mlp_b2", {1});
  return store;
}

std::map<std::string, Tensor> load_leaves(Tape& tape, const ParamStore& store) {
  std::map<std::string, Tensor> leaves;
  for (const auto& [name, p] : store.all()) leaves.emplace(name, store.leaf(tape, name));
  return leaves;
}

double lr_for_param(const JointLKConfig& config, const std::string& name) {
  return name.rfind("encoder.", 0) == 0 ? config.lr_encoder : config.lr_graph;
}

PreparedExample prepare_example(const DatasetRecord& record, const KnowledgeGraph& kg,
                                const TokenVocab& vocab, const JointLKConfig& config) {
  record.validate();
  PreparedExample ex;
  ex.id = record.id;
  ex.gold = record.gold;
  ex.num_question_entities = record.vq.size();

  std::set<int> vq;
  for (const std::string& name : record.vq) {
    const int id = kg.concept_id(name);
    if (id < 0)
      throw std::runtime_error("record " + record.id + ": concept '" + name +
                               "' not in the knowledge graph");
    vq.insert(id);
  }
  for (std::size_t c = 0; c < record.choice_tokens.size(); ++c) {
    std::set<int> va;
    for (const std::string& name : record.va[c]) {
      const int id = kg.concept_id(name);
      if (id < 0)
        throw std::runtime_error("record " + record.id + ": concept '" + name +
                                 "' not in the knowledge graph");
      va.insert(id);
    }
    std::vector<int> tokens = record.question_tokens;
    tokens.insert(tokens.end(), record.choice_tokens[c].begin(),
                  record.choice_tokens[c].end());
    ex.tokens.push_back(std::move(tokens));

    if (!config.no_kg) {
      Subgraph sub = retrieve_subgraph(vq, va, kg, config.max_nodes);
      ex.node_tokens.push_back(concept_token_ids(sub, kg, vocab));
      std::vector<std::string> names;
      for (const SubgraphNode& n : sub.nodes)
        names.push_back(n.concept_id < 0 ? "[context]" : kg.concept_name(n.concept_id));
      ex.node_names.push_back(std::move(names));
      ex.graphs.push_back(std::move(sub));
    } else {
      ex.graphs.emplace_back();
      ex.node_tokens.emplace_back();
      ex.node_names.emplace_back();
    }
  }
  return ex;
}

std::vector<PreparedExample> prepare_examples(const std::vector<DatasetRecord>& records,
                                              const KnowledgeGraph& kg, const TokenVocab& vocab,
                                              const JointLKConfig& config) {
  std::vector<PreparedExample> out;
  out.reserve(records.size());
  for (const DatasetRecord& r : records) out.push_back(prepare_example(r, kg, vocab, config));
  return out;
}

namespace {

struct GraphState {
  std::vector<NodeType> types;
  std::vector<std::string> names;
  std::vector<Edge> edges;
  std::vector<int> original;
  std::size_t ctx = 0;

  std::size_t size() const { return types.size(); }
};

GraphState state_from(const Subgraph& sub, const std::vector<std::string>& names) {
  GraphState st;
  for (const SubgraphNode& n : sub.nodes) st.types.push_back(n.type);
  st.names = names;
  if (st.names.empty()) st.names.assign(sub.nodes.size(), "");
  st.edges = sub.edges;
  st.original.resize(sub.nodes.size());
  for (std::size_t i = 0; i < sub.nodes.size(); ++i) st.original[i] = static_cast<int>(i);
  st.ctx = static_cast<std::size_t>(sub.context_index);
  return st;
}

GraphState restrict_state(const GraphState& st, const std::vector<std::size_t>& kept,
                          std::vector<Edge> new_edges) {
  GraphState out;
  for (std::size_t r : kept) {
    out.types.push_back(st.types[r]);
    out.names.push_back(st.names[r]);
    out.original.push_back(st.original[r]);
    if (r == st.ctx) out.ctx = out.types.size() - 1;
  }
  out.edges = std::move(new_edges);
  return out;
}

// mean over unmasked token rows as a constant pooling row vector
Tensor mean_rows(Tape& tape, Tensor q, const std::vector<std::uint8_t>& mask,
                 std::size_t unmasked) {
  std::vector<double> w(mask.size(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) w[i] = 1.0 / static_cast<double>(unmasked);
  return tape.matmul(tape.leaf({1, mask.size()}, std::move(w)), q);
}

Tensor readout_score(Tape& tape, Tensor s, Tensor g,
                     const std::map<std::string, Tensor>& leaves) {
  Tensor cat = tape.concat({s, g}, 1);
  Tensor h = tape.gelu(
      tape.add_rowvec(tape.matmul(cat, leaves.at("readout.mlp_w1")), leaves.at("readout.mlp_b1")));
  Tensor out = tape.add(tape.matmul(h, leaves.at("readout.mlp_w2")), leaves.at("readout.mlp_b2"));
  return tape.reshape(out, {1});
}

}  // namespace

Tensor model_forward(Tape& tape, const std::vector<int>& tokens, const Subgraph& sub,
                     const std::vector<std::vector<int>>& node_tokens,
                     const std::vector<std::string>& node_names,
                     const std::map<std::string, Tensor>& leaves, const JointLKConfig& config,
                     bool train, Rng& rng, PruneTrace* trace,
                     const std::vector<double>* ctx_summary, ForwardInspect* inspect) {
  config.validate();
  EncoderLeaves enc = EncoderLeaves::from(leaves, config.encoder_mixing);
  EncodedQuery query = encode_query(tape, tokens, enc, config.max_seq_len,
                                    config.encoder_mixing);
  Tensor s_vec, g_vec;

  if (inspect) inspect->q_first = query.q0.values();

  if (config.no_kg) {
    s_vec = mean_rows(tape, query.q0, query.mask, query.unmasked);
    g_vec = tape.zeros({1, config.dim});
    if (inspect) {
      inspect->q_final = query.q0.values();
      inspect->s = s_vec.values();
      inspect->g = g_vec.values();
    }
    return readout_score(tape, s_vec, g_vec, leaves);
  }

  if (!sub.has_context() || sub.size() < 2)
    throw std::invalid_argument(
        "model_forward: subgraph needs a context node and at least one entity node");

  Tensor x = init_nodes(tape, sub, node_tokens, enc, query, ctx_summary);
  Tensor q = query.q0;
  GraphState st = state_from(sub, node_names);

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    AdjacencyView adj = AdjacencyView::from_edges(st.edges, st.size());
    Tensor x_tilde = gnn_forward(tape, x, adj, st.types, GnnLeaves::from(leaves, l),
                                 config.num_relations, config.dropout, train, rng);
    if (config.no_fusion) {
      // the importance signal comes from fusion attention, so pruning goes too
      x = x_tilde;
      continue;
    }
    FusionLeaves fus = FusionLeaves::from(leaves, l);
    Tensor s = affinity(tape, q, x_tilde, fus.w_s, query.mask);
    AttentionPair att = bidirectional_attention(tape, s, query.mask);
    FusedPair fused = fuse(tape, q, x_tilde, att, fus);
    q = fused.q;
    if (config.no_prune) {
      x = fused.x;
      continue;
    }

    Tensor z = node_importance(tape, att.lm_to_kg, query.mask);
    const std::vector<double>& zv = z.values();
    std::vector<std::size_t> kept =
        top_rank(std::vector<double>(zv.begin(), zv.end()), config.retention, {st.ctx});
    if (kept.size() < 2) {
      // quota can only collapse if the graph had no prunable nodes left
      std::cerr << "warning: pruning would empty the graph at layer " << l
                << "; keeping the highest-importance node\n";
      std::size_t best = st.ctx == 0 ? 1 : 0;
      for (std::size_t i = 0; i < zv.size(); ++i)
        if (i != st.ctx && zv[i] > zv[best]) best = i;
      kept.push_back(best);
      std::sort(kept.begin(), kept.end());
    }
    if (trace) {
      PruneLayerRecord rec;
      rec.importance.assign(zv.begin(), zv.end());
      rec.kept = kept;
      rec.concepts = st.names;
      rec.original = st.original;
      rec.edges = st.edges;
      trace->layers.push_back(std::move(rec));
    }
    PrunedGraph pruned = apply_prune(tape, fused.x, st.edges, kept, z);
    x = pruned.x;
    st = restrict_state(st, kept, std::move(pruned.edges));
  }

  s_vec = mean_rows(tape, q, query.mask, query.unmasked);
  // attention pooling of the node stack with the pooled query as the probe
  Tensor probe = tape.matmul(s_vec, leaves.at("readout.w_pool"));  // 1 x D
  Tensor scores = tape.matmul(x, tape.transpose(probe));           // |V| x 1
  Tensor beta = tape.softmax(scores, 0);
  g_vec = tape.matmul(tape.transpose(beta), x);  // 1 x D
  if (inspect) {
    inspect->q_final = q.values();
    inspect->x_final = x.values();
    inspect->s = s_vec.values();
    inspect->g = g_vec.values();
  }
  return readout_score(tape, s_vec, g_vec, leaves);
}

ChoiceScore predict(const PreparedExample& example, const ParamStore& store,
                    const JointLKConfig& config) {
  if (example.tokens.size() < 2)
    throw std::invalid_argument("predict: need at least two choices");
  Tape tape;
  std::map<std::string, Tensor> leaves = load_leaves(tape, store);
  Rng rng(0);  // eval mode: no dropout, rng unused
  ChoiceScore out;
  for (std::size_t c = 0; c < example.tokens.size(); ++c) {
    Tensor score = model_forward(tape, example.tokens[c], example.graphs[c],
                                 example.node_tokens[c], example.node_names[c], leaves, config,
                                 /*train=*/false, rng);
    out.raw.push_back(score.scalar());
  }
  double mx = *std::max_element(out.raw.begin(), out.raw.end());
  double z = 0.0;
  for (double r : out.raw) z += std::exp(r - mx);
  for (double r : out.raw) out.prob.push_back(std::exp(r - mx) / z);
  out.argmax = static_cast<std::size_t>(
      std::max_element(out.prob.begin(), out.prob.end()) - out.prob.begin());
  return out;
}

TrainResult train_model(const std::vector<PreparedExample>& train_set,
                        const std::vector<PreparedExample>& dev_set,
                        const JointLKConfig& config, ParamStore params) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  TrainResult result;
  result.params = params;
  GradBuffer grads(params);
  AdamOptimizer optimizer(
      AdamConfig{config.lr_graph, config.adam_beta1, config.adam_beta2, config.adam_eps});
  auto lr_of = [&config](const std::string& name) { return lr_for_param(config, name); };

  Rng shuffle_rng(mix64(config.seed ^ 0x5bf03635ULL));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best = -1.0;
  std::size_t best_epoch = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t pos = 0; pos < order.size();) {
      const std::size_t batch_end = std::min(pos + config.batch_size, order.size());
      const std::size_t batch_count = batch_end - pos;
      grads.zero();
      for (; pos < batch_end; ++pos) {
        const PreparedExample& ex = train_set[order[pos]];
        Rng ex_rng(mix64(config.seed) ^ mix64(epoch * 0x10001ULL + order[pos]));
        Tape tape;
        std::map<std::string, Tensor> leaves = load_leaves(tape, params);
        std::vector<Tensor> scores;
        for (std::size_t c = 0; c < ex.tokens.size(); ++c)
          scores.push_back(model_forward(tape, ex.tokens[c], ex.graphs[c], ex.node_tokens[c],
                                         ex.node_names[c], leaves, config, /*train=*/true,
                                         ex_rng));
        Tensor logits = tape.concat(scores, 0);
        Tensor loss = tape.cross_entropy_with_logits(logits, ex.gold);
        const double loss_val = loss.scalar();
        if (!std::isfinite(loss_val)) {
          result.aborted = true;
          result.note = "training loss diverged at epoch " + std::to_string(epoch);
          result.best_epoch = best_epoch;
          result.best_dev_acc = std::max(best, 0.0);
          return result;
        }
        loss_sum += loss_val;
        const std::vector<double>& lv = logits.values();
        if (static_cast<std::size_t>(std::max_element(lv.begin(), lv.end()) - lv.begin()) ==
            ex.gold)
          ++correct;
        tape.backward(loss);
        for (const auto& [name, leaf] : leaves)
          if (leaf.requires_grad() && leaf.grad().size() == leaf.size())
            grads.accumulate(name, leaf.grad());
      }
      try {
        optimizer.step(params, grads, 1.0 / static_cast<double>(batch_count), lr_of);
      } catch (const std::runtime_error& e) {
        result.aborted = true;
        result.note = std::string("optimizer rejected step: ") + e.what();
        result.best_epoch = best_epoch;
        result.best_dev_acc = std::max(best, 0.0);
        return result;
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    m.dev_acc = dev_set.empty()
                    ? 0.0
                    : evaluate_model(dev_set, params, config).overall.accuracy();
    result.metrics.push_back(m);

    if (m.dev_acc > best) {
      best = m.dev_acc;
      best_epoch = epoch;
      result.params = params;
    }
    if (m.dev_acc >= config.target_dev_acc) break;
    if (epoch - best_epoch >= config.patience) break;
  }
  result.best_epoch = best_epoch;
  result.best_dev_acc = std::max(best, 0.0);
  return result;
}

EvalResult evaluate_model(const std::vector<PreparedExample>& examples, const ParamStore& store,
                          const JointLKConfig& config) {
  EvalResult res;
  for (const PreparedExample& ex : examples) {
    bool ok = false;
    try {
      ChoiceScore score = predict(ex, store, config);
      ok = score.argmax == ex.gold;
    } catch (const std::exception& e) {
      ++res.failed;
      std::cerr << "warning: prediction failed for " << ex.id << ": " << e.what() << "\n";
    }
    res.overall.total += 1;
    res.overall.correct += ok;
    EvalCategory& cat = ex.num_question_entities <= config.entity_threshold
                            ? res.few_entities
                            : res.many_entities;
    cat.total += 1;
    cat.correct += ok;
  }
  return res;
}

std::string EvalResult::to_json(std::size_t threshold) const {
  nlohmann::json j;
  j["accuracy"] = overall.accuracy();
  j["correct"] = overall.correct;
  j["total"] = overall.total;
  j["failed"] = failed;
  nlohmann::json by = nlohmann::json::object();
  if (few_entities.total > 0)
    by["entities<=" + std::to_string(threshold)] = {{"accuracy", few_entities.accuracy()},
                                                    {"correct", few_entities.correct},
                                                    {"total", few_entities.total}};
  if (many_entities.total > 0)
    by["entities>" + std::to_string(threshold)] = {{"accuracy", many_entities.accuracy()},
                                                   {"correct", many_entities.correct},
                                                   {"total", many_entities.total}};
  j["by_entity_count"] = std::move(by);
  return j.dump(2);
}

// --- checkpoint / config --------------------------------------------------------

std::map<std::string, std::string> config_to_kv(const JointLKConfig& c) {
  std::map<std::string, std::string> kv;
  kv["n_layers"] = std::to_string(c.n_layers);
  kv["dim"] = std::to_string(c.dim);
  kv["retention"] = fmt_double(c.retention);
  kv["dropout"] = fmt_double(c.dropout);
  kv["max_seq_len"] = std::to_string(c.max_seq_len);
  kv["token_dim"] = std::to_string(c.token_dim);
  kv["encoder_mixing"] = c.encoder_mixing ? "true" : "false";
  kv["num_relations"] = std::to_string(c.num_relations);
  kv["lr_encoder"] = fmt_double(c.lr_encoder);
  kv["lr_graph"] = fmt_double(c.lr_graph);
  kv["seed"] = std::to_string(c.seed);
  kv["no_prune"] = c.no_prune ? "true" : "false";
  kv["no_fusion"] = c.no_fusion ? "true" : "false";
  kv["no_kg"] = c.no_kg ? "true" : "false";
  kv["epochs"] = std::to_string(c.epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  kv["patience"] = std::to_string(c.patience);
  kv["target_dev_acc"] = fmt_double(c.target_dev_acc);
  kv["entity_threshold"] = std::to_string(c.entity_threshold);
  kv["max_nodes"] = std::to_string(c.max_nodes);
  kv["adam_beta1"] = fmt_double(c.adam_beta1);
  kv["adam_beta2"] = fmt_double(c.adam_beta2);
  kv["adam_eps"] = fmt_double(c.adam_eps);
  return kv;
}

namespace {
bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: " + key + " expects true/false, got '" + v + "'");
}
}  // namespace

void apply_config_kv(JointLKConfig& c, const std::string& key, const std::string& value) {
  try {
    if (key == "n_layers") c.n_layers = std::stoul(value);
    else if (key == "dim") c.dim = std::stoul(value);
    else if (key == "retention") c.retention = std::stod(value);
    else if (key == "dropout") c.dropout = std::stod(value);
    else if (key == "max_seq_len") c.max_seq_len = std::stoul(value);
    else if (key == "token_dim") c.token_dim = std::stoul(value);
    else if (key == "encoder_mixing") c.encoder_mixing = parse_bool(key, value);
    else if (key == "num_relations") c.num_relations = std::stoul(value);
    else if (key == "lr_encoder") c.lr_encoder = std::stod(value);
    else if (key == "lr_graph") c.lr_graph = std::stod(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "no_prune") c.no_prune = parse_bool(key, value);
    else if (key == "no_fusion") c.no_fusion = parse_bool(key, value);
    else if (key == "no_kg") c.no_kg = parse_bool(key, value);
    else if (key == "epochs") c.epochs = std::stoul(value);
    else if (key == "batch_size") c.batch_size = std::stoul(value);
    else if (key == "patience") c.patience = std::stoul(value);
    else if (key == "target_dev_acc") c.target_dev_acc = std::stod(value);
    else if (key == "entity_threshold") c.entity_threshold = std::stoul(value);
    else if (key == "max_nodes") c.max_nodes = std::stoul(value);
    else if (key == "adam_beta1") c.adam_beta1 = std::stod(value);
    else if (key == "adam_beta2") c.adam_beta2 = std::stod(value);
    else if (key == "adam_eps") c.adam_eps = std::stod(value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "'");
  }
}

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const JointLKConfig& config) {
  nlohmann::json j;
  j["format"] = "jointlk-checkpoint";
  j["version"] = 1;
  j["config"] = config_to_kv(config);
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, p] : store.all())
    params[name] = {{"shape", p.shape}, {"values", p.value}};
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

std::pair<ParamStore, JointLKConfig> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "jointlk-checkpoint")
    throw std::runtime_error("not a model checkpoint: " + path);
  JointLKConfig config;
  for (const auto& [key, value] : j.at("config").items())
    apply_config_kv(config, key, value.get<std::string>());
  ParamStore store;
  for (const auto& [name, pj] : j.at("params").items())
    store.add(name, pj.at("shape").get<Shape>(), pj.at("values").get<std::vector<double>>());
  return {std::move(store), config};
}

}  // namespace jointlk
