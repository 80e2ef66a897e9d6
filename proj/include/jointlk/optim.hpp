#pragma once

#include <map>
#include <string>
#include <vector>

#include "jointlk/rng.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

// Named f64 parameter arrays. Parameters live outside any tape; a forward pass
// loads them as leaves and gradients are read back after backward().
class ParamStore {
 public:
  struct Param {
    Shape shape;
    std::vector<double> value;
  };

  void add(const std::string& name, Shape shape, std::vector<double> value);
  void add_xavier(const std::string& name, Shape shape, Rng& rng);
  void add_zeros(const std::string& name, Shape shape);

  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  std::size_t count() const { return params_.size(); }
  std::size_t total_values() const;
  const std::map<std::string, Param>& all() const { return params_; }
  std::map<std::string, Param>& all_mutable() { return params_; }

  // Leaf with requires_grad=true holding a copy of the parameter values.
  Tensor leaf(Tape& tape, const std::string& name) const;

  void save_json(const std::string& path) const;
  static ParamStore load_json(const std::string& path);

 private:
  std::map<std::string, Param> params_;  // ordered: deterministic iteration
};

// Per-parameter gradient accumulation across a minibatch.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamStore& store);
  void accumulate(const std::string& name, const std::vector<double>& grad);
  void zero();
  const std::vector<double>& at(const std::string& name) const;

 private:
  std::map<std::string, std::vector<double>> grads_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

// One bias-corrected Adam update. Rejects non-finite gradients.
void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
               const AdamConfig& cfg);

// Adam over a whole store with a per-parameter learning-rate selector.
class AdamOptimizer {
 public:
  AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}
  // lr_of(name) returns the learning rate for that parameter group.
  void step(ParamStore& store, const GradBuffer& grads, double grad_scale,
            const std::function<double(const std::string&)>& lr_of);

 private:
  AdamConfig cfg_;
  std::map<std::string, AdamState> state_;
};

}  // namespace jointlk
