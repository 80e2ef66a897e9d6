#include "jointlk/optim.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace jointlk {

void ParamStore::add(const std::string& name, Shape shape, std::vector<double> value) {
  if (params_.count(name)) throw std::invalid_argument("param already exists: " + name);
  if (shape_size(shape) != value.size())
    throw std::invalid_argument("param " + name + ": shape " + shape_str(shape) +
                                " does not match " + std::to_string(value.size()) + " values");
  params_.emplace(name, Param{std::move(shape), std::move(value)});
}

void ParamStore::add_xavier(const std::string& name, Shape shape, Rng& rng) {
  const std::size_t fan_in = shape.size() == 2 ? shape[0] : shape.back();
  const std::size_t fan_out = shape.back();
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-limit, limit);
  add(name, std::move(shape), std::move(v));
}

void ParamStore::add_zeros(const std::string& name, Shape shape) {
  std::vector<double> v(shape_size(shape), 0.0);
  add(name, std::move(shape), std::move(v));
}

ParamStore::Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
  return it->second;
}

const ParamStore::Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
  return it->second;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

Tensor ParamStore::leaf(Tape& tape, const std::string& name) const {
  const Param& p = at(name);
  return tape.leaf(p.shape, p.value, /*requires_grad=*/true);
}

void ParamStore::save_json(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "jointlk-params";
  j["version"] = 1;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, p] : params_) {
    params[name] = {{"shape", p.shape}, {"values", p.value}};
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

ParamStore ParamStore::load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "jointlk-params")
    throw std::runtime_error("not a parameter checkpoint: " + path);
  ParamStore store;
  for (const auto& [name, pj] : j.at("params").items()) {
    Shape shape = pj.at("shape").get<Shape>();
    std::vector<double> values = pj.at("values").get<std::vector<double>>();
    store.add(name, std::move(shape), std::move(values));
  }
  return store;
}

GradBuffer::GradBuffer(const ParamStore& store) {
  for (const auto& [name, p] : store.all()) grads_[name].assign(p.value.size(), 0.0);
}

void GradBuffer::accumulate(const std::string& name, const std::vector<double>& grad) {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw std::out_of_range("no such parameter: " + name);
  if (it->second.size() != grad.size())
    throw std::invalid_argument("gradient size mismatch for " + name);
  for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += grad[i];
}

void GradBuffer::zero() {
  for (auto& [_, g] : grads_) std::fill(g.begin(), g.end(), 0.0);
}

const std::vector<double>& GradBuffer::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw std::out_of_range("no such parameter: " + name);
  return it->second;
}

void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
               const AdamConfig& cfg) {
  if (param.size() != grad.size())
    throw std::invalid_argument("adam_step: param/grad size mismatch");
  for (double g : grad)
    if (!std::isfinite(g))
      throw std::runtime_error("adam_step: non-finite gradient, step rejected");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void AdamOptimizer::step(ParamStore& store, const GradBuffer& grads, double grad_scale,
                         const std::function<double(const std::string&)>& lr_of) {
  for (auto& [name, p] : store.all_mutable()) {
    std::vector<double> g = grads.at(name);
    for (double& x : g) x *= grad_scale;
    AdamConfig cfg = cfg_;
    cfg.lr = lr_of(name);
    adam_step(p.value, g, state_[name], cfg);
  }
}

}  // namespace jointlk
