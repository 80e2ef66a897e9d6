#include "jointlk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace jointlk {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  return os.str();
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// --- Tensor accessors --------------------------------------------------------

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::size_t Tensor::size() const { return tape_->node(id_).values.size(); }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() != 2) fail("rows(): tensor is not 2-d, shape " + shape_str(s));
  return s[0];
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() != 2) fail("cols(): tensor is not 2-d, shape " + shape_str(s));
  return s[1];
}

const std::vector<double>& Tensor::values() const { return tape_->node(id_).values; }

const std::vector<double>& Tensor::grad() const {
  auto& n = tape_->node(id_);
  if (n.grad.size() != n.values.size())
    throw std::runtime_error("grad(): no gradient recorded for this tensor");
  return n.grad;
}

bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::scalar() const {
  if (size() != 1) fail("scalar(): tensor has shape " + shape_str(shape()));
  return values()[0];
}

double Tensor::at(std::size_t i) const { return values().at(i); }
double Tensor::at(std::size_t i, std::size_t j) const { return values().at(i * cols() + j); }

// --- Tape plumbing -------------------------------------------------------------

Tensor Tape::make(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size())
    fail("tensor: shape " + shape_str(shape) + " does not match " +
         std::to_string(values.size()) + " values");
  for (std::size_t d : shape)
    if (d == 0) fail("tensor: zero dimension in shape " + shape_str(shape));
  nodes_.push_back(Node{std::move(shape), std::move(values), {}, requires_grad});
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::record(int output, std::function<void(Tape&)> fn) {
  if (node(output).requires_grad) ops_.push_back(OpRecord{output, std::move(fn)});
}

std::vector<double>& Tape::grad_of(int id) {
  Node& n = node(id);
  if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

void Tape::check_same_tape(const Tensor& t) const {
  if (t.tape() != this) fail("operation mixes tensors from different tapes");
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  return make(std::move(shape), std::move(values), requires_grad);
}

Tensor Tape::scalar(double v, bool requires_grad) {
  return make({1}, {v}, requires_grad);
}

Tensor Tape::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_size(shape), 0.0);
  return make(std::move(shape), std::move(v), requires_grad);
}

Tensor Tape::full(Shape shape, double x, bool requires_grad) {
  std::vector<double> v(shape_size(shape), x);
  return make(std::move(shape), std::move(v), requires_grad);
}

// --- operations ---------------------------------------------------------------

Tensor Tape::matmul(Tensor a, Tensor b) {
  check_same_tape(a);
  check_same_tape(b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) fail(two_shapes("matmul", sa, sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  const std::vector<double>& av = a.values();
  const std::vector<double>& bv = b.values();
  std::vector<double> cv(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* crow = &cv[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  Tensor c = make({m, n}, std::move(cv), a.requires_grad() || b.requires_grad());
  record(c.id(), [a, b, c, m, k, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      const std::vector<double>& bv = t.node(b.id()).values;
      // dA += dC * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double d = dc[i * n + j];
          if (d == 0.0) continue;
          const double* brow = &bv[0] + j;  // column j of B
          double* darow = &da[i * k];
          for (std::size_t p = 0; p < k; ++p) darow[p] += d * brow[p * n];
        }
    }
    if (t.node(b.id()).requires_grad) {
      std::vector<double>& db = t.grad_of(b.id());
      const std::vector<double>& av = t.node(a.id()).values;
      // dB += A^T * dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          const double* dcrow = &dc[i * n];
          double* dbrow = &db[p * n];
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
        }
    }
  });
  return c;
}

namespace {
enum class EwKind { Add, Sub, Mul };
}

Tensor Tape::add(Tensor a, Tensor b) {
  check_same_tape(a);
  check_same_tape(b);
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    fail(two_shapes("add", a.shape(), b.shape()));
  const Shape out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const std::vector<double>& av = a.values();
  const std::vector<double>& bv = b.values();
  std::vector<double> cv(shape_size(out_shape));
  for (std::size_t i = 0; i < cv.size(); ++i)
    cv[i] = av[a_scalar ? 0 : i] + bv[b_scalar ? 0 : i];
  Tensor c = make(out_shape, std::move(cv), a.requires_grad() || b.requires_grad());
  record(c.id(), [a, b, c, a_scalar, b_scalar](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < dc.size(); ++i) da[a_scalar ? 0 : i] += dc[i];
    }
    if (t.node(b.id()).requires_grad) {
      std::vector<double>& db = t.grad_of(b.id());
      for (std::size_t i = 0; i < dc.size(); ++i) db[b_scalar ? 0 : i] += dc[i];
    }
  });
  return c;
}

Tensor Tape::sub(Tensor a, Tensor b) { return add(a, scale(b, -1.0)); }

Tensor Tape::mul(Tensor a, Tensor b) {
  check_same_tape(a);
  check_same_tape(b);
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    fail(two_shapes("mul", a.shape(), b.shape()));
  const Shape out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const std::vector<double>& av = a.values();
  const std::vector<double>& bv = b.values();
  std::vector<double> cv(shape_size(out_shape));
  for (std::size_t i = 0; i < cv.size(); ++i)
    cv[i] = av[a_scalar ? 0 : i] * bv[b_scalar ? 0 : i];
  Tensor c = make(out_shape, std::move(cv), a.requires_grad() || b.requires_grad());
  record(c.id(), [a, b, c, a_scalar, b_scalar](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& av = t.node(a.id()).values;
    const std::vector<double>& bv = t.node(b.id()).values;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < dc.size(); ++i)
        da[a_scalar ? 0 : i] += dc[i] * bv[b_scalar ? 0 : i];
    }
    if (t.node(b.id()).requires_grad) {
      std::vector<double>& db = t.grad_of(b.id());
      for (std::size_t i = 0; i < dc.size(); ++i)
        db[b_scalar ? 0 : i] += dc[i] * av[a_scalar ? 0 : i];
    }
  });
  return c;
}

Tensor Tape::scale(Tensor a, double cst) {
  check_same_tape(a);
  std::vector<double> cv(a.values());
  for (double& x : cv) x *= cst;
  Tensor c = make(a.shape(), std::move(cv), a.requires_grad());
  record(c.id(), [a, c, cst](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < dc.size(); ++i) da[i] += cst * dc[i];
  });
  return c;
}

Tensor Tape::add_rowvec(Tensor a, Tensor v) {
  check_same_tape(a);
  check_same_tape(v);
  if (a.shape().size() != 2 || shape_size(v.shape()) != a.cols())
    fail(two_shapes("add_rowvec", a.shape(), v.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  const std::vector<double>& av = a.values();
  const std::vector<double>& vv = v.values();
  std::vector<double> cv(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cv[i * n + j] = av[i * n + j] + vv[j];
  Tensor c = make({m, n}, std::move(cv), a.requires_grad() || v.requires_grad());
  record(c.id(), [a, v, c, m, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < m * n; ++i) da[i] += dc[i];
    }
    if (t.node(v.id()).requires_grad) {
      std::vector<double>& dv = t.grad_of(v.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dv[j] += dc[i * n + j];
    }
  });
  return c;
}

Tensor Tape::mul_rowvec(Tensor a, Tensor v) {
  check_same_tape(a);
  check_same_tape(v);
  if (a.shape().size() != 2 || shape_size(v.shape()) != a.cols())
    fail(two_shapes("mul_rowvec", a.shape(), v.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  const std::vector<double>& av = a.values();
  const std::vector<double>& vv = v.values();
  std::vector<double> cv(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cv[i * n + j] = av[i * n + j] * vv[j];
  Tensor c = make({m, n}, std::move(cv), a.requires_grad() || v.requires_grad());
  record(c.id(), [a, v, c, m, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& av = t.node(a.id()).values;
    const std::vector<double>& vv = t.node(v.id()).values;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dc[i * n + j] * vv[j];
    }
    if (t.node(v.id()).requires_grad) {
      std::vector<double>& dv = t.grad_of(v.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dv[j] += dc[i * n + j] * av[i * n + j];
    }
  });
  return c;
}

Tensor Tape::add_colvec(Tensor a, Tensor u) {
  check_same_tape(a);
  check_same_tape(u);
  if (a.shape().size() != 2 || shape_size(u.shape()) != a.rows())
    fail(two_shapes("add_colvec", a.shape(), u.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  const std::vector<double>& av = a.values();
  const std::vector<double>& uv = u.values();
  std::vector<double> cv(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cv[i * n + j] = av[i * n + j] + uv[i];
  Tensor c = make({m, n}, std::move(cv), a.requires_grad() || u.requires_grad());
  record(c.id(), [a, u, c, m, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < m * n; ++i) da[i] += dc[i];
    }
    if (t.node(u.id()).requires_grad) {
      std::vector<double>& du = t.grad_of(u.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) du[i] += dc[i * n + j];
    }
  });
  return c;
}

Tensor Tape::row_sums(Tensor a) {
  check_same_tape(a);
  if (a.shape().size() != 2) fail("row_sums: tensor is not 2-d");
  const std::size_t m = a.rows(), n = a.cols();
  const std::vector<double>& av = a.values();
  std::vector<double> cv(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cv[i] += av[i * n + j];
  Tensor c = make({m, 1}, std::move(cv), a.requires_grad());
  record(c.id(), [a, c, m, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dc[i];
  });
  return c;
}

Tensor Tape::mul_colvec(Tensor a, Tensor u) {
  check_same_tape(a);
  check_same_tape(u);
  if (a.shape().size() != 2 || shape_size(u.shape()) != a.rows())
    fail(two_shapes("mul_colvec", a.shape(), u.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  const std::vector<double>& av = a.values();
  const std::vector<double>& uv = u.values();
  std::vector<double> cv(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cv[i * n + j] = av[i * n + j] * uv[i];
  Tensor c = make({m, n}, std::move(cv), a.requires_grad() || u.requires_grad());
  record(c.id(), [a, u, c, m, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& av = t.node(a.id()).values;
    const std::vector<double>& uv = t.node(u.id()).values;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dc[i * n + j] * uv[i];
    }
    if (t.node(u.id()).requires_grad) {
      std::vector<double>& du = t.grad_of(u.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) du[i] += dc[i * n + j] * av[i * n + j];
    }
  });
  return c;
}

Tensor Tape::concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail("concat: no inputs");
  for (const Tensor& p : parts) check_same_tape(p);
  const std::size_t rank = parts[0].shape().size();
  if (axis >= rank) fail("concat: axis " + std::to_string(axis) + " out of range");
  Shape out = parts[0].shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    if (s.size() != rank) fail(two_shapes("concat", parts[0].shape(), s));
    for (std::size_t d = 0; d < rank; ++d)
      if (d != axis && s[d] != out[d]) fail(two_shapes("concat", parts[0].shape(), s));
    out[axis] += s[axis];
  }
  // Row-major concat: treat as (outer, concat_dim * inner) blocks.
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out[d];
  for (std::size_t d = axis + 1; d < rank; ++d) inner *= out[d];
  std::vector<double> cv(shape_size(out));
  const std::size_t out_stride = out[axis] * inner;
  std::size_t offset = 0;
  bool any_grad = false;
  struct Piece {
    Tensor t;
    std::size_t offset, stride;
  };
  std::vector<Piece> pieces;
  for (const Tensor& p : parts) {
    const std::size_t stride = p.shape()[axis] * inner;
    const std::vector<double>& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + o * stride, pv.begin() + (o + 1) * stride,
                cv.begin() + o * out_stride + offset);
    pieces.push_back({p, offset, stride});
    offset += stride;
    any_grad = any_grad || p.requires_grad();
  }
  Tensor c = make(out, std::move(cv), any_grad);
  record(c.id(), [pieces, c, outer, out_stride](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    for (const auto& piece : pieces) {
      if (!t.node(piece.t.id()).requires_grad) continue;
      std::vector<double>& dp = t.grad_of(piece.t.id());
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < piece.stride; ++i)
          dp[o * piece.stride + i] += dc[o * out_stride + piece.offset + i];
    }
  });
  return c;
}

Tensor Tape::gather_rows(Tensor a, std::vector<std::size_t> rows) {
  check_same_tape(a);
  if (a.shape().size() != 2) fail("gather_rows: tensor is not 2-d");
  if (rows.empty()) fail("gather_rows: empty index list");
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t r : rows)
    if (r >= m) fail("gather_rows: index " + std::to_string(r) + " out of range for " +
                     std::to_string(m) + " rows");
  const std::vector<double>& av = a.values();
  std::vector<double> cv(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(av.begin() + rows[i] * n, av.begin() + (rows[i] + 1) * n, cv.begin() + i * n);
  Tensor c = make({rows.size(), n}, std::move(cv), a.requires_grad());
  record(c.id(), [a, c, rows = std::move(rows), n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) da[rows[i] * n + j] += dc[i * n + j];
  });
  return c;
}

Tensor Tape::transpose(Tensor a) {
  check_same_tape(a);
  if (a.shape().size() != 2) fail("transpose: tensor is not 2-d");
  const std::size_t m = a.rows(), n = a.cols();
  const std::vector<double>& av = a.values();
  std::vector<double> cv(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cv[j * m + i] = av[i * n + j];
  Tensor c = make({n, m}, std::move(cv), a.requires_grad());
  record(c.id(), [a, c, m, n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dc[j * m + i];
  });
  return c;
}

Tensor Tape::reshape(Tensor a, Shape shape) {
  check_same_tape(a);
  if (shape_size(shape) != a.size())
    fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor c = make(std::move(shape), a.values(), a.requires_grad());
  record(c.id(), [a, c](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
  });
  return c;
}

Tensor Tape::softmax(Tensor a, std::size_t axis) {
  check_same_tape(a);
  const Shape& s = a.shape();
  if (s.size() > 2 || axis >= s.size())
    fail("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  const std::size_t m = s.size() == 2 ? s[0] : 1;
  const std::size_t n = s.size() == 2 ? s[1] : s[0];
  // slice iteration: axis selects which dimension is normalized
  const bool over_cols = (s.size() == 1) || axis == 1;
  const std::size_t num_slices = over_cols ? m : n;
  const std::size_t slice_len = over_cols ? n : m;
  auto index = [over_cols, n](std::size_t slice, std::size_t k) {
    return over_cols ? slice * n + k : k * n + slice;
  };
  const std::vector<double>& av = a.values();
  std::vector<double> cv(av.size());
  for (std::size_t sl = 0; sl < num_slices; ++sl) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < slice_len; ++k) mx = std::max(mx, av[index(sl, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < slice_len; ++k) {
      double e = std::exp(av[index(sl, k)] - mx);
      cv[index(sl, k)] = e;
      z += e;
    }
    for (std::size_t k = 0; k < slice_len; ++k) cv[index(sl, k)] /= z;
  }
  Tensor c = make(s, std::move(cv), a.requires_grad());
  record(c.id(), [a, c, num_slices, slice_len, index](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& y = t.node(c.id()).values;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t sl = 0; sl < num_slices; ++sl) {
      double dot = 0.0;
      for (std::size_t k = 0; k < slice_len; ++k) {
        const std::size_t ix = index(sl, k);
        dot += dc[ix] * y[ix];
      }
      for (std::size_t k = 0; k < slice_len; ++k) {
        const std::size_t ix = index(sl, k);
        da[ix] += y[ix] * (dc[ix] - dot);
      }
    }
  });
  return c;
}

Tensor Tape::layer_norm(Tensor a, Tensor gamma, Tensor beta, double eps) {
  check_same_tape(a);
  check_same_tape(gamma);
  check_same_tape(beta);
  const Shape& s = a.shape();
  const std::size_t n = s.back();
  const std::size_t m = a.size() / n;
  if (shape_size(gamma.shape()) != n || shape_size(beta.shape()) != n)
    fail("layer_norm: gamma/beta must match last dimension " + std::to_string(n));
  const std::vector<double>& av = a.values();
  const std::vector<double>& gv = gamma.values();
  const std::vector<double>& bv = beta.values();
  std::vector<double> cv(av.size());
  std::vector<double> inv_sd(m), xhat(av.size());
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += av[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = av[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_sd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (av[i * n + j] - mean) * inv_sd[i];
      cv[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  Tensor c = make(s, std::move(cv),
                  a.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  record(c.id(), [a, gamma, beta, c, m, n, inv_sd = std::move(inv_sd),
                  xhat = std::move(xhat)](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& gv = t.node(gamma.id()).values;
    if (t.node(a.id()).requires_grad) {
      std::vector<double>& da = t.grad_of(a.id());
      for (std::size_t i = 0; i < m; ++i) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double g = dc[i * n + j] * gv[j];
          mean_g += g;
          mean_gx += g * xhat[i * n + j];
        }
        mean_g /= static_cast<double>(n);
        mean_gx /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const double g = dc[i * n + j] * gv[j];
          da[i * n + j] += (g - mean_g - xhat[i * n + j] * mean_gx) * inv_sd[i];
        }
      }
    }
    if (t.node(gamma.id()).requires_grad) {
      std::vector<double>& dg = t.grad_of(gamma.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dg[j] += dc[i * n + j] * xhat[i * n + j];
    }
    if (t.node(beta.id()).requires_grad) {
      std::vector<double>& db = t.grad_of(beta.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += dc[i * n + j];
    }
  });
  return c;
}

Tensor Tape::gelu(Tensor a) {
  check_same_tape(a);
  const std::vector<double>& av = a.values();
  std::vector<double> cv(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    cv[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * M_SQRT1_2));
  Tensor c = make(a.shape(), std::move(cv), a.requires_grad());
  record(c.id(), [a, c](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& av = t.node(a.id()).values;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < dc.size(); ++i) {
      const double x = av[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      da[i] += dc[i] * (cdf + x * pdf);
    }
  });
  return c;
}

Tensor Tape::sum(Tensor a) {
  check_same_tape(a);
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor c = make({1}, {s}, a.requires_grad());
  record(c.id(), [a, c](Tape& t) {
    const double d = t.node(c.id()).grad[0];
    std::vector<double>& da = t.grad_of(a.id());
    for (double& x : da) x += d;
  });
  return c;
}

Tensor Tape::dropout(Tensor a, double rate, bool train, Rng& rng) {
  check_same_tape(a);
  if (rate < 0.0 || rate >= 1.0) fail("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return a;
  const double keep = 1.0 - rate;
  std::vector<double> mask(a.size());
  for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;  // inverted scaling
  const std::vector<double>& av = a.values();
  std::vector<double> cv(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) cv[i] = av[i] * mask[i];
  Tensor c = make(a.shape(), std::move(cv), a.requires_grad());
  record(c.id(), [a, c, mask = std::move(mask)](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * mask[i];
  });
  return c;
}

Tensor Tape::cross_entropy_with_logits(Tensor logits, std::size_t gold) {
  check_same_tape(logits);
  const std::size_t n = logits.size();
  if (gold >= n) fail("cross_entropy: gold index " + std::to_string(gold) +
                      " out of range for " + std::to_string(n) + " choices");
  const std::vector<double>& z = logits.values();
  double mx = z[0];
  for (double x : z) mx = std::max(mx, x);
  double lse = 0.0;
  for (double x : z) lse += std::exp(x - mx);
  lse = mx + std::log(lse);
  Tensor c = make({1}, {lse - z[gold]}, logits.requires_grad());
  record(c.id(), [logits, c, gold, n](Tape& t) {
    const double d = t.node(c.id()).grad[0];
    const std::vector<double>& z = t.node(logits.id()).values;
    std::vector<double>& dz = t.grad_of(logits.id());
    double mx = z[0];
    for (double x : z) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : z) sum += std::exp(x - mx);
    for (std::size_t i = 0; i < n; ++i) {
      double p = std::exp(z[i] - mx) / sum;
      dz[i] += d * (p - (i == gold ? 1.0 : 0.0));
    }
  });
  return c;
}

Tensor Tape::mask_fill(Tensor a, const std::vector<std::uint8_t>& keep, double fill) {
  check_same_tape(a);
  if (keep.size() != a.size())
    fail("mask_fill: mask has " + std::to_string(keep.size()) + " entries for tensor " +
         shape_str(a.shape()));
  std::vector<double> cv(a.values());
  for (std::size_t i = 0; i < cv.size(); ++i)
    if (!keep[i]) cv[i] = fill;
  Tensor c = make(a.shape(), std::move(cv), a.requires_grad());
  record(c.id(), [a, c, keep](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t i = 0; i < dc.size(); ++i)
      if (keep[i]) da[i] += dc[i];
  });
  return c;
}

namespace {
void check_segments(const std::vector<std::size_t>& seg, std::size_t total) {
  if (seg.size() < 2 || seg.front() != 0 || seg.back() != total)
    fail("segment boundaries must start at 0 and end at " + std::to_string(total));
  for (std::size_t s = 1; s < seg.size(); ++s)
    if (seg[s] <= seg[s - 1]) fail("segments must be nonempty and increasing");
}
}  // namespace

Tensor Tape::segment_softmax(Tensor a, std::vector<std::size_t> seg) {
  check_same_tape(a);
  const std::size_t m = a.size();
  if (a.shape().size() == 2 && a.cols() != 1) fail("segment_softmax: expected a column vector");
  check_segments(seg, m);
  const std::vector<double>& av = a.values();
  std::vector<double> cv(m);
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = seg[s]; i < seg[s + 1]; ++i) mx = std::max(mx, av[i]);
    double z = 0.0;
    for (std::size_t i = seg[s]; i < seg[s + 1]; ++i) {
      cv[i] = std::exp(av[i] - mx);
      z += cv[i];
    }
    for (std::size_t i = seg[s]; i < seg[s + 1]; ++i) cv[i] /= z;
  }
  Tensor c = make(a.shape(), std::move(cv), a.requires_grad());
  record(c.id(), [a, c, seg = std::move(seg)](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& y = t.node(c.id()).values;
    std::vector<double>& da = t.grad_of(a.id());
    for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
      double dot = 0.0;
      for (std::size_t i = seg[s]; i < seg[s + 1]; ++i) dot += dc[i] * y[i];
      for (std::size_t i = seg[s]; i < seg[s + 1]; ++i) da[i] += y[i] * (dc[i] - dot);
    }
  });
  return c;
}

Tensor Tape::segment_weighted_sum_rows(Tensor w, Tensor rows, std::vector<std::size_t> seg) {
  check_same_tape(w);
  check_same_tape(rows);
  if (rows.shape().size() != 2) fail("segment_weighted_sum_rows: rows must be 2-d");
  const std::size_t m = rows.rows(), n = rows.cols();
  if (w.size() != m) fail(two_shapes("segment_weighted_sum_rows", w.shape(), rows.shape()));
  check_segments(seg, m);
  const std::size_t num_segs = seg.size() - 1;
  const std::vector<double>& wv = w.values();
  const std::vector<double>& rv = rows.values();
  std::vector<double> cv(num_segs * n, 0.0);
  for (std::size_t s = 0; s < num_segs; ++s)
    for (std::size_t i = seg[s]; i < seg[s + 1]; ++i)
      for (std::size_t j = 0; j < n; ++j) cv[s * n + j] += wv[i] * rv[i * n + j];
  Tensor c = make({num_segs, n}, std::move(cv),
                  w.requires_grad() || rows.requires_grad());
  record(c.id(), [w, rows, c, seg = std::move(seg), n](Tape& t) {
    const std::vector<double>& dc = t.node(c.id()).grad;
    const std::vector<double>& wv = t.node(w.id()).values;
    const std::vector<double>& rv = t.node(rows.id()).values;
    const bool need_w = t.node(w.id()).requires_grad;
    const bool need_r = t.node(rows.id()).requires_grad;
    for (std::size_t s = 0; s + 1 < seg.size(); ++s)
      for (std::size_t i = seg[s]; i < seg[s + 1]; ++i) {
        if (need_w) {
          double d = 0.0;
          for (std::size_t j = 0; j < n; ++j) d += dc[s * n + j] * rv[i * n + j];
          t.grad_of(w.id())[i] += d;
        }
        if (need_r) {
          std::vector<double>& dr = t.grad_of(rows.id());
          for (std::size_t j = 0; j < n; ++j) dr[i * n + j] += dc[s * n + j] * wv[i];
        }
      }
  });
  return c;
}

void Tape::backward(Tensor loss, bool accumulate) {
  check_same_tape(loss);
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (backward_done_ && !accumulate)
    throw std::runtime_error(
        "backward: already called on this tape (pass accumulate=true to add gradients)");
  if (backward_done_) {
    // only leaf gradients accumulate across passes; op outputs restart at zero
    for (const OpRecord& op : ops_) {
      Node& out = node(op.output);
      if (out.grad.size() == out.values.size()) std::fill(out.grad.begin(), out.grad.end(), 0.0);
    }
  }
  backward_done_ = true;
  grad_of(loss.id())[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node& out = node(it->output);
    if (out.grad.size() != out.values.size()) continue;  // no gradient flowed here
    it->backward(*this);
  }
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double x : t.values())
    if (!std::isfinite(x)) throw std::runtime_error(what + ": non-finite value in tensor");
}

}  // namespace jointlk
