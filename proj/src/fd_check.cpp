#include "jointlk/fd_check.hpp"

#include <cmath>
#include <stdexcept>

namespace jointlk {

double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-4});
  return std::fabs(a - b) / denom;
}

FdReport check_gradients(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& build,
    const std::vector<Shape>& shapes, std::vector<std::vector<double>> values, double h) {
  auto eval = [&](const std::vector<std::vector<double>>& vals) {
    Tape tape;
    std::vector<Tensor> leaves;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      leaves.push_back(tape.leaf(shapes[i], vals[i], true));
    return build(tape, leaves).scalar();
  };

  // analytic gradients
  Tape tape;
  std::vector<Tensor> leaves;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    leaves.push_back(tape.leaf(shapes[i], values[i], true));
  Tensor loss = build(tape, leaves);
  tape.backward(loss);

  FdReport report;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    // a leaf may end up unused by the closure; its analytic gradient is zero
    std::vector<double> analytic;
    try {
      analytic = leaves[i].grad();
    } catch (const std::runtime_error&) {
      analytic.assign(values[i].size(), 0.0);
    }
    for (std::size_t k = 0; k < values[i].size(); ++k) {
      const double orig = values[i][k];
      values[i][k] = orig + h;
      const double fp = eval(values);
      values[i][k] = orig - h;
      const double fm = eval(values);
      values[i][k] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = rel_err(analytic[k], fd);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = "input " + std::to_string(i) + "[" + std::to_string(k) + "]";
      }
    }
  }
  return report;
}

FdReport check_param_gradients(
    const std::function<Tensor(Tape&, std::map<std::string, Tensor>&)>& build_loss,
    ParamStore store, double h) {
  auto eval = [&]() {
    Tape tape;
    std::map<std::string, Tensor> leaves;
    for (const auto& [name, p] : store.all()) leaves[name] = store.leaf(tape, name);
    return build_loss(tape, leaves).scalar();
  };

  Tape tape;
  std::map<std::string, Tensor> leaves;
  for (const auto& [name, p] : store.all()) leaves[name] = store.leaf(tape, name);
  Tensor loss = build_loss(tape, leaves);
  tape.backward(loss);
  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, leaf] : leaves) {
    try {
      analytic[name] = leaf.grad();
    } catch (const std::runtime_error&) {
      analytic[name].assign(leaf.size(), 0.0);
    }
  }

  FdReport report;
  for (auto& [name, p] : store.all_mutable()) {
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      p.value[k] = orig + h;
      const double fp = eval();
      p.value[k] = orig - h;
      const double fm = eval();
      p.value[k] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = rel_err(analytic[name][k], fd);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return report;
}

}  // namespace jointlk
