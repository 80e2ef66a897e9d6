#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "jointlk/rng.hpp"

namespace jointlk {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Handle to a value recorded on a Tape. Copying a Tensor copies the handle,
// not the data.
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // 2-d only
  std::size_t cols() const;  // 2-d only
  const std::vector<double>& values() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
  bool defined() const { return tape_ != nullptr; }

  double scalar() const;                          // size()==1
  double at(std::size_t i) const;                 // flat index
  double at(std::size_t i, std::size_t j) const;  // 2-d index

  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records every operation so a single reverse sweep can populate d(loss)/d(leaf)
// for all requires_grad leaves. Inputs always precede their consumers, so the
// recorded order is already topological.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- leaves -------------------------------------------------------------
  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
  Tensor scalar(double v, bool requires_grad = false);
  Tensor zeros(Shape shape, bool requires_grad = false);
  Tensor full(Shape shape, double v, bool requires_grad = false);

  // --- operations ----------------------------------------------------------
  Tensor matmul(Tensor a, Tensor b);
  Tensor add(Tensor a, Tensor b);  // equal shapes, or either side scalar
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);  // elementwise; equal shapes or scalar
  Tensor scale(Tensor a, double c);
  // Explicit row/column expansion (a: m x n). No implicit broadcasting.
  Tensor add_rowvec(Tensor a, Tensor v);  // v: n
  Tensor mul_rowvec(Tensor a, Tensor v);  // v: n
  Tensor add_colvec(Tensor a, Tensor u);  // u: m
  Tensor mul_colvec(Tensor a, Tensor u);  // u: m
  Tensor row_sums(Tensor a);  // m x n -> m x 1
  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
  Tensor gather_rows(Tensor a, std::vector<std::size_t> rows);
  Tensor transpose(Tensor a);
  Tensor reshape(Tensor a, Shape shape);
  Tensor softmax(Tensor a, std::size_t axis);
  Tensor layer_norm(Tensor a, Tensor gamma, Tensor beta, double eps);
  Tensor gelu(Tensor a);
  Tensor sum(Tensor a);
  Tensor dropout(Tensor a, double rate, bool train, Rng& rng);
  // -log softmax(logits)[gold]; logits is a flat vector of choice scores.
  Tensor cross_entropy_with_logits(Tensor logits, std::size_t gold);
  // Replaces entries where keep[i]==0 with `fill`; gradient is zero there.
  Tensor mask_fill(Tensor a, const std::vector<std::uint8_t>& keep, double fill);
  // Softmax over contiguous row segments of a column vector (m x 1 or m).
  // seg_starts has one entry per segment boundary plus the total length.
  Tensor segment_softmax(Tensor a, std::vector<std::size_t> seg_starts);
  // out[s] = sum over rows e in segment s of w[e] * rows[e]; w is m x 1 or m.
  Tensor segment_weighted_sum_rows(Tensor w, Tensor rows, std::vector<std::size_t> seg_starts);

  // --- backward ------------------------------------------------------------
  // Populates grad slots of every requires_grad tensor reachable from `loss`.
  // A second call on the same tape is rejected unless `accumulate` is set, in
  // which case gradients add up across calls.
  void backward(Tensor loss, bool accumulate = false);

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_ops() const { return ops_.size(); }

 private:
  friend class Tensor;

  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily at backward time
    bool requires_grad = false;
  };
  struct OpRecord {
    int output;
    std::function<void(Tape&)> backward;
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor make(Shape shape, std::vector<double> values, bool requires_grad);
  void record(int output, std::function<void(Tape&)> fn);
  std::vector<double>& grad_of(int id);
  void check_same_tape(const Tensor& t) const;

  std::vector<Node> nodes_;
  std::vector<OpRecord> ops_;
  bool backward_done_ = false;
};

// Throws std::runtime_error if any entry is non-finite.
void check_finite(const Tensor& t, const std::string& what);

}  // namespace jointlk
