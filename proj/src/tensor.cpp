#include "opama/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "opama/error.hpp"

namespace opama {

namespace {

thread_local Tape* g_active_tape = nullptr;

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void record(std::vector<NodePtr> inputs, const Tensor& out, Tape::BackwardFn fn) {
  active_tape()->record(std::move(inputs), {out.node()}, std::move(fn));
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t n,
             std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::int64_t last_dim(const Tensor& x) { return x.rank() == 0 ? 1 : x.shape().back(); }

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<TensorNode>()) {
  const auto n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->data.assign(static_cast<std::size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<TensorNode>()) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::from_node(NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::span<double> Tensor::grad() { return grad_buffer(node_); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.set_requires_grad(requires_grad());
  return t;
}

std::span<double> grad_buffer(const NodePtr& node) {
  if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
  return node->grad;
}

// ---------------------------------------------------------------------------

void Tape::record(std::vector<NodePtr> inputs, std::vector<NodePtr> outputs, BackwardFn fn) {
  for (auto& o : outputs) o->requires_grad = true;
  entries_.push_back({std::move(inputs), std::move(outputs), std::move(fn)});
}

void Tape::backward(const Tensor& root) {
  require_defined(root, "backward");
  if (root.size() != 1)
    throw ContractError("backward: root must be scalar, got " + shape_str(root.shape()));
  if (entries_.empty()) throw ContractError("backward: tape is empty");
  grad_buffer(root.node())[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const bool reached = std::any_of(it->outputs.begin(), it->outputs.end(),
                                     [](const NodePtr& n) { return !n->grad.empty(); });
    if (reached) it->fn();
  }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape* tape) : previous_(g_active_tape) { g_active_tape = tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record({an, bn}, out, [an, bn, on, m, k, n] {
      if (an->requires_grad)
        gemm_nt(on->grad.data(), bn->data.data(), grad_buffer(an).data(), m, n, k);
      if (bn->requires_grad)
        gemm_tn(an->data.data(), on->grad.data(), grad_buffer(bn).data(), m, k, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(x.shape()));
  const auto r = x.dim(0), c = x.dim(1);
  Tensor out(Shape{c, r});
  auto src = x.data();
  auto dst = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, r, c] {
      auto g = grad_buffer(xn);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[i * c + j] += on->grad[j * r + i];
    });
  }
  return out;
}

Tensor map_unary(const Tensor& x, UnaryOp f) {
  require_defined(x, "map_unary");
  const std::size_t n = x.size();
  auto in = x.data();
  std::vector<double> y(n);
  // d[i] = dy/dx at x[i]
  std::vector<double> d(n);
  switch (f) {
    case UnaryOp::exp:
      for (std::size_t i = 0; i < n; ++i) d[i] = y[i] = std::exp(in[i]);
      break;
    case UnaryOp::sigmoid:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = stable_sigmoid(in[i]);
        d[i] = y[i] * (1.0 - y[i]);
      }
      break;
    case UnaryOp::softplus:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::log1p(std::exp(-std::abs(in[i]))) + std::max(in[i], 0.0);
        d[i] = stable_sigmoid(in[i]);
      }
      break;
    case UnaryOp::silu:
      for (std::size_t i = 0; i < n; ++i) {
        const double s = stable_sigmoid(in[i]);
        y[i] = in[i] * s;
        d[i] = s * (1.0 + in[i] * (1.0 - s));
      }
      break;
    case UnaryOp::neg:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = -in[i];
        d[i] = -1.0;
      }
      break;
    case UnaryOp::reciprocal:
      for (std::size_t i = 0; i < n; ++i) {
        if (in[i] == 0.0) throw DomainError("reciprocal: zero entry at index " + std::to_string(i));
        y[i] = 1.0 / in[i];
        d[i] = -y[i] * y[i];
      }
      break;
  }
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, d = std::move(d)] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < d.size(); ++i) g[i] += on->grad[i] * d[i];
    });
  }
  return out;
}

Tensor combine_binary(const Tensor& a, const Tensor& b, BinaryOp f) {
  require_defined(a, "combine_binary");
  require_defined(b, "combine_binary");
  Shape out_shape;
  if (a.shape() == b.shape() || is_suffix(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (is_suffix(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw DimensionError("combine_binary: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(shape_numel(out_shape));
  const std::size_t na = a.size(), nb = b.size();
  if (na == 0 || nb == 0) return Tensor(out_shape);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = av[i % na], x2 = bv[i % nb];
    switch (f) {
      case BinaryOp::add: y[i] = x1 + x2; break;
      case BinaryOp::sub: y[i] = x1 - x2; break;
      case BinaryOp::mul: y[i] = x1 * x2; break;
      case BinaryOp::div: y[i] = x1 / x2; break;
    }
  }
  Tensor out(out_shape, std::move(y));
  if (should_record({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    record({an, bn}, out, [an, bn, on, f, n, na, nb] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto ga = grad_buffer(an);
        for (std::size_t i = 0; i < n; ++i) {
          double d = 1.0;
          switch (f) {
            case BinaryOp::add: d = 1.0; break;
            case BinaryOp::sub: d = 1.0; break;
            case BinaryOp::mul: d = bn->data[i % nb]; break;
            case BinaryOp::div: d = 1.0 / bn->data[i % nb]; break;
          }
          ga[i % na] += g[i] * d;
        }
      }
      if (bn->requires_grad) {
        auto gb = grad_buffer(bn);
        for (std::size_t i = 0; i < n; ++i) {
          double d = 1.0;
          switch (f) {
            case BinaryOp::add: d = 1.0; break;
            case BinaryOp::sub: d = -1.0; break;
            case BinaryOp::mul: d = an->data[i % na]; break;
            case BinaryOp::div: {
              const double bv = bn->data[i % nb];
              d = -an->data[i % na] / (bv * bv);
              break;
            }
          }
          gb[i % nb] += g[i] * d;
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double s) {
  require_defined(x, "scale");
  std::vector<double> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= s;
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, s] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * on->grad[i];
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& x, double s) {
  require_defined(x, "add_scalar");
  std::vector<double> y(x.data().begin(), x.data().end());
  for (auto& v : y) v += s;
  Tensor out(x.shape(), std::move(y));
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

Tensor reduce(const Tensor& x, ReduceOp op, std::vector<std::int64_t> axes) {
  require_defined(x, "reduce");
  const auto rank = static_cast<std::int64_t>(x.rank());
  std::vector<bool> reduced(x.rank(), false);
  for (auto a : axes) {
    const auto ax = a < 0 ? a + rank : a;
    if (ax < 0 || ax >= rank)
      throw DimensionError("reduce: axis " + std::to_string(a) + " invalid for shape " +
                           shape_str(x.shape()));
    reduced[static_cast<std::size_t>(ax)] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (!reduced[i]) out_shape.push_back(x.dim(i));
  // stride of each input axis within the output (0 for reduced axes)
  std::vector<std::int64_t> ostride(x.rank(), 0);
  std::int64_t acc = 1;
  for (std::int64_t i = rank - 1; i >= 0; --i) {
    if (!reduced[static_cast<std::size_t>(i)]) {
      ostride[static_cast<std::size_t>(i)] = acc;
      acc *= x.dim(static_cast<std::size_t>(i));
    }
  }
  const std::size_t n = x.size();
  std::vector<std::size_t> index(n);
  {
    std::vector<std::int64_t> counter(x.rank(), 0);
    std::int64_t o = 0;
    for (std::size_t i = 0; i < n; ++i) {
      index[i] = static_cast<std::size_t>(o);
      for (std::int64_t ax = rank - 1; ax >= 0; --ax) {
        const auto u = static_cast<std::size_t>(ax);
        ++counter[u];
        o += ostride[u];
        if (counter[u] < x.dim(u)) break;
        o -= ostride[u] * counter[u];
        counter[u] = 0;
      }
    }
  }
  Tensor out(out_shape);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) ov[index[i]] += xv[i];
  const double factor =
      op == ReduceOp::mean && !out.data().empty() && n > 0
          ? static_cast<double>(out.size()) / static_cast<double>(n)
          : 1.0;
  if (factor != 1.0)
    for (auto& v : ov) v *= factor;
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, index = std::move(index), factor] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * on->grad[index[i]];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  std::vector<std::int64_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(x, ReduceOp::sum, axes);
}

Tensor mean_all(const Tensor& x) {
  std::vector<std::int64_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(x, ReduceOp::mean, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != static_cast<std::int64_t>(x.size()))
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_rows");
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      throw DimensionError("concat_rows: incompatible shape " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    rows += p.dim(0);
  }
  Shape out_shape = tail;
  out_shape.insert(out_shape.begin(), rows);
  std::vector<double> y;
  y.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
  for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  Tensor out(out_shape, std::move(y));
  bool any = false;
  for (const auto& p : parts) any = any || should_record({&p});
  if (any) {
    std::vector<NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    record(ins, out, [ins, on] {
      std::size_t off = 0;
      for (const auto& in : ins) {
        if (in->requires_grad) {
          auto g = grad_buffer(in);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
        }
        off += in->data.size();
      }
    });
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  const Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_last");
    if (p.rank() == 0 || Shape(p.shape().begin(), p.shape().end() - 1) != lead)
      throw DimensionError("concat_last: incompatible shape " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::int64_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  auto ov = out.data();
  std::int64_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    const auto w = widths[k];
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(pv.begin() + r * w, w, ov.begin() + r * total + col);
    col += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || should_record({&p});
  if (any) {
    std::vector<NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    record(ins, out, [ins, on, widths, rows, total] {
      std::int64_t c = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const auto w = widths[k];
        if (ins[k]->requires_grad) {
          auto g = grad_buffer(ins[k]);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < w; ++j) g[r * w + j] += on->grad[r * total + c + j];
        }
        c += w;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end) {
  require_defined(x, "slice_rows");
  if (x.rank() == 0 || begin < 0 || end < begin || end > x.dim(0))
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  const std::int64_t row = x.dim(0) == 0 ? 0 : static_cast<std::int64_t>(x.size()) / x.dim(0);
  Shape s = x.shape();
  s[0] = end - begin;
  Tensor out(s, std::vector<double>(x.data().begin() + begin * row, x.data().begin() + end * row));
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, off = begin * row] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[off + i] += on->grad[i];
    });
  }
  return out;
}

Tensor reverse_rows(const Tensor& x) {
  require_defined(x, "reverse_rows");
  if (x.rank() == 0) throw DimensionError("reverse_rows: scalar input");
  const std::int64_t rows = x.dim(0);
  const std::int64_t row = rows == 0 ? 0 : static_cast<std::int64_t>(x.size()) / rows;
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(xv.begin() + r * row, row, ov.begin() + (rows - 1 - r) * row);
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, rows, row] {
      auto g = grad_buffer(xn);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < row; ++j) g[r * row + j] += on->grad[(rows - 1 - r) * row + j];
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V, d]");
  const auto vocab = table.dim(0), d = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  Tensor out(Shape{n, d});
  auto tv = table.data();
  auto ov = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab)
      throw ContractError("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(vocab));
    std::copy_n(tv.begin() + id * d, d, ov.begin() + i * d);
  }
  if (should_record({&table})) {
    auto tn = table.node(), on = out.node();
    record({tn}, out, [tn, on, ids, d] {
      auto g = grad_buffer(tn);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::int64_t j = 0; j < d; ++j)
          g[ids[i] * d + j] += on->grad[static_cast<std::int64_t>(i) * d + j];
    });
  }
  return out;
}

Tensor softmax_last(const Tensor& x) {
  require_defined(x, "softmax_last");
  const auto d = last_dim(x);
  const auto rows = d == 0 ? 0 : static_cast<std::int64_t>(x.size()) / d;
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* y = ov.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += (y[j] = std::exp(in[j] - mx));
    for (std::int64_t j = 0; j < d; ++j) y[j] /= s;
  }
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, rows, d] {
      auto g = grad_buffer(xn);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = on->data.data() + r * d;
        const double* gy = on->grad.data() + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (std::int64_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  require_defined(x, "rms_norm");
  require_defined(weight, "rms_norm");
  const auto d = last_dim(x);
  if (weight.rank() != 1 || weight.dim(0) != d)
    throw DimensionError("rms_norm: weight " + shape_str(weight.shape()) + " for input " +
                         shape_str(x.shape()));
  const auto rows = static_cast<std::int64_t>(x.size()) / d;
  Tensor out(x.shape());
  std::vector<double> inv(static_cast<std::size_t>(rows));
  auto xv = x.data();
  auto wv = weight.data();
  auto ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    const double iv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv[static_cast<std::size_t>(r)] = iv;
    for (std::int64_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] * iv * wv[j];
  }
  if (should_record({&x, &weight})) {
    auto xn = x.node(), wn = weight.node(), on = out.node();
    record({xn, wn}, out, [xn, wn, on, inv = std::move(inv), rows, d] {
      const auto& gy = on->grad;
      const auto& xs = xn->data;
      const auto& w = wn->data;
      if (wn->requires_grad) {
        auto gw = grad_buffer(wn);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j)
            gw[j] += gy[r * d + j] * xs[r * d + j] * inv[static_cast<std::size_t>(r)];
      }
      if (xn->requires_grad) {
        auto gx = grad_buffer(xn);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double iv = inv[static_cast<std::size_t>(r)];
          double dot = 0.0;
          for (std::int64_t j = 0; j < d; ++j) dot += gy[r * d + j] * w[j] * xs[r * d + j];
          const double c = dot * iv * iv * iv / static_cast<double>(d);
          for (std::int64_t j = 0; j < d; ++j)
            gx[r * d + j] += gy[r * d + j] * w[j] * iv - xs[r * d + j] * c;
        }
      }
    });
  }
  return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  require_defined(x, "group_norm");
  const auto c = last_dim(x);
  if (groups <= 0 || c % groups != 0)
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c))
    throw DimensionError("group_norm: affine parameters must have " + std::to_string(c) +
                         " entries");
  const auto positions = static_cast<std::int64_t>(x.size()) / c;
  const auto cg = c / groups;
  const double count = static_cast<double>(positions * cg);
  std::vector<double> mean(static_cast<std::size_t>(groups)), inv(static_cast<std::size_t>(groups));
  auto xv = x.data();
  for (int g = 0; g < groups; ++g) {
    double s = 0.0;
    for (std::int64_t p = 0; p < positions; ++p)
      for (std::int64_t j = g * cg; j < (g + 1) * cg; ++j) s += xv[p * c + j];
    const double mu = s / count;
    double v = 0.0;
    for (std::int64_t p = 0; p < positions; ++p)
      for (std::int64_t j = g * cg; j < (g + 1) * cg; ++j) {
        const double dlt = xv[p * c + j] - mu;
        v += dlt * dlt;
      }
    mean[static_cast<std::size_t>(g)] = mu;
    inv[static_cast<std::size_t>(g)] = 1.0 / std::sqrt(v / count + eps);
  }
  Tensor out(x.shape());
  auto ov = out.data();
  auto ga = gamma.data();
  auto be = beta.data();
  for (std::int64_t p = 0; p < positions; ++p)
    for (std::int64_t j = 0; j < c; ++j) {
      const auto g = static_cast<std::size_t>(j / cg);
      ov[p * c + j] = (xv[p * c + j] - mean[g]) * inv[g] * ga[j] + be[j];
    }
  if (should_record({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    record({xn, gn, bn}, out,
           [xn, gn, bn, on, mean = std::move(mean), inv = std::move(inv), positions, c, cg,
            groups, count] {
             const auto& gy = on->grad;
             const auto& xs = xn->data;
             const auto& ga = gn->data;
             auto xhat = [&](std::int64_t p, std::int64_t j) {
               const auto g = static_cast<std::size_t>(j / cg);
               return (xs[p * c + j] - mean[g]) * inv[g];
             };
             if (gn->requires_grad || bn->requires_grad) {
               auto ggm = grad_buffer(gn);
               auto gbt = grad_buffer(bn);
               for (std::int64_t p = 0; p < positions; ++p)
                 for (std::int64_t j = 0; j < c; ++j) {
                   ggm[j] += gy[p * c + j] * xhat(p, j);
                   gbt[j] += gy[p * c + j];
                 }
             }
             if (xn->requires_grad) {
               auto gx = grad_buffer(xn);
               for (int g = 0; g < groups; ++g) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::int64_t p = 0; p < positions; ++p)
                   for (std::int64_t j = g * cg; j < (g + 1) * cg; ++j) {
                     const double dxh = gy[p * c + j] * ga[j];
                     m1 += dxh;
                     m2 += dxh * xhat(p, j);
                   }
                 m1 /= count;
                 m2 /= count;
                 const double iv = inv[static_cast<std::size_t>(g)];
                 for (std::int64_t p = 0; p < positions; ++p)
                   for (std::int64_t j = g * cg; j < (g + 1) * cg; ++j) {
                     const double dxh = gy[p * c + j] * ga[j];
                     gx[p * c + j] += iv * (dxh - m1 - xhat(p, j) * m2);
                   }
               }
             }
           });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel, int stride,
              int pad) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  if (x.rank() != 3) throw DimensionError("conv2d: input must be [H,W,C], got " + shape_str(x.shape()));
  const auto h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::int64_t k = kernel;
  if (weight.rank() != 2 || weight.dim(0) != k * k * cin)
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()) + " with kernel " + std::to_string(kernel));
  const auto cout = weight.dim(1);
  if (bias.defined() && bias.size() != static_cast<std::size_t>(cout))
    throw DimensionError("conv2d: bias must have " + std::to_string(cout) + " entries");
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: input too small " + shape_str(x.shape()));
  const std::int64_t kc = k * k * cin;
  const std::int64_t positions = ho * wo;
  // im2col: col[pos, (ky*k+kx)*cin + ci]; -1 marks padding
  std::vector<std::int64_t> src(static_cast<std::size_t>(positions * k * k));
  for (std::int64_t oy = 0; oy < ho; ++oy)
    for (std::int64_t ox = 0; ox < wo; ++ox)
      for (std::int64_t ky = 0; ky < k; ++ky)
        for (std::int64_t kx = 0; kx < k; ++kx) {
          const std::int64_t iy = oy * stride - pad + ky;
          const std::int64_t ix = ox * stride - pad + kx;
          const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
          src[static_cast<std::size_t>(((oy * wo + ox) * k + ky) * k + kx)] =
              inside ? (iy * w + ix) * cin : -1;
        }
  std::vector<double> col(static_cast<std::size_t>(positions * kc), 0.0);
  auto xv = x.data();
  for (std::int64_t p = 0; p < positions; ++p)
    for (std::int64_t t = 0; t < k * k; ++t) {
      const auto s = src[static_cast<std::size_t>(p * k * k + t)];
      if (s < 0) continue;
      std::copy_n(xv.begin() + s, cin, col.begin() + p * kc + t * cin);
    }
  Tensor out(Shape{ho, wo, cout});
  auto ov = out.data();
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::int64_t p = 0; p < positions; ++p) std::copy_n(bv.begin(), cout, ov.begin() + p * cout);
  }
  gemm_nn(col.data(), weight.data().data(), ov.data(), positions, kc, cout);
  if (should_record({&x, &weight, &bias})) {
    auto xn = x.node(), wn = weight.node(), on = out.node();
    NodePtr bn = bias.defined() ? bias.node() : nullptr;
    std::vector<NodePtr> ins{xn, wn};
    if (bn) ins.push_back(bn);
    record(ins, out,
           [xn, wn, bn, on, col = std::move(col), src = std::move(src), positions, kc, cout, cin,
            k] {
             const auto& gy = on->grad;
             if (wn->requires_grad)
               gemm_tn(col.data(), gy.data(), grad_buffer(wn).data(), positions, kc, cout);
             if (bn && bn->requires_grad) {
               auto gb = grad_buffer(bn);
               for (std::int64_t p = 0; p < positions; ++p)
                 for (std::int64_t j = 0; j < cout; ++j) gb[j] += gy[p * cout + j];
             }
             if (xn->requires_grad) {
               std::vector<double> dcol(static_cast<std::size_t>(positions * kc), 0.0);
               gemm_nt(gy.data(), wn->data.data(), dcol.data(), positions, cout, kc);
               auto gx = grad_buffer(xn);
               for (std::int64_t p = 0; p < positions; ++p)
                 for (std::int64_t t = 0; t < k * k; ++t) {
                   const auto s = src[static_cast<std::size_t>(p * k * k + t)];
                   if (s < 0) continue;
                   const double* d = dcol.data() + p * kc + t * cin;
                   for (std::int64_t ci = 0; ci < cin; ++ci) gx[s + ci] += d[ci];
                 }
             }
           });
  }
  return out;
}

Tensor upsample_nearest2(const Tensor& x) {
  require_defined(x, "upsample_nearest2");
  if (x.rank() != 3) throw DimensionError("upsample_nearest2: expected [H,W,C]");
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out(Shape{2 * h, 2 * w, c});
  auto xv = x.data();
  auto ov = out.data();
  for (std::int64_t y = 0; y < 2 * h; ++y)
    for (std::int64_t xx = 0; xx < 2 * w; ++xx)
      std::copy_n(xv.begin() + ((y / 2) * w + xx / 2) * c, c, ov.begin() + (y * 2 * w + xx) * c);
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, h, w, c] {
      auto g = grad_buffer(xn);
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx)
          for (std::int64_t j = 0; j < c; ++j)
            g[((y / 2) * w + xx / 2) * c + j] += on->grad[(y * 2 * w + xx) * c + j];
    });
  }
  return out;
}

Tensor patchify(const Tensor& x, int patch) {
  require_defined(x, "patchify");
  if (x.rank() != 3) throw DimensionError("patchify: expected [H,W,C], got " + shape_str(x.shape()));
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::int64_t p = patch;
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw DimensionError("patchify: " + shape_str(x.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  const auto ph = h / p, pw = w / p;
  const auto row = p * p * c;
  std::vector<std::int64_t> index(x.size());
  for (std::int64_t i = 0; i < ph; ++i)
    for (std::int64_t j = 0; j < pw; ++j)
      for (std::int64_t dy = 0; dy < p; ++dy)
        for (std::int64_t dx = 0; dx < p; ++dx)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto dst = (i * pw + j) * row + (dy * p + dx) * c + ch;
            const auto srcidx = ((i * p + dy) * w + (j * p + dx)) * c + ch;
            index[static_cast<std::size_t>(dst)] = srcidx;
          }
  Tensor out(Shape{ph * pw, row});
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < index.size(); ++i) ov[i] = xv[static_cast<std::size_t>(index[i])];
  if (should_record({&x})) {
    auto xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, index = std::move(index)] {
      auto g = grad_buffer(xn);
      for (std::size_t i = 0; i < index.size(); ++i)
        g[static_cast<std::size_t>(index[i])] += on->grad[i];
    });
  }
  return out;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     const Tensor& prefix) {
  require_defined(x, "causal_conv1d");
  if (x.rank() != 2) throw DimensionError("causal_conv1d: expected [L,C], got " + shape_str(x.shape()));
  const auto len = x.dim(0), c = x.dim(1);
  if (weight.rank() != 2 || weight.dim(1) != c)
    throw DimensionError("causal_conv1d: weight " + shape_str(weight.shape()) + " for input " +
                         shape_str(x.shape()));
  const auto k = weight.dim(0);
  if (bias.size() != static_cast<std::size_t>(c))
    throw DimensionError("causal_conv1d: bias must have " + std::to_string(c) + " entries");
  if (prefix.defined() && (prefix.rank() != 2 || prefix.dim(0) != k - 1 || prefix.dim(1) != c))
    throw DimensionError("causal_conv1d: prefix must be [" + std::to_string(k - 1) + "," +
                         std::to_string(c) + "], got " + shape_str(prefix.shape()));
  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  // value of the extended sequence at step s (s may be negative)
  auto at = [&](std::int64_t s, std::int64_t ch) -> double {
    if (s >= 0) return xv[s * c + ch];
    if (!prefix.defined()) return 0.0;
    return prefix.data()[(k - 1 + s) * c + ch];
  };
  Tensor out(Shape{len, c});
  auto ov = out.data();
  for (std::int64_t t = 0; t < len; ++t)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = bv[ch];
      for (std::int64_t j = 0; j < k; ++j) {
        s += wv[j * c + ch] * at(t - (k - 1) + j, ch);
      }
      ov[t * c + ch] = s;
    }
  if (should_record({&x, &weight, &bias, &prefix})) {
    auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    NodePtr pn = prefix.defined() ? prefix.node() : nullptr;
    std::vector<NodePtr> ins{xn, wn, bn};
    if (pn) ins.push_back(pn);
    record(ins, out, [xn, wn, bn, pn, on, len, c, k] {
      const auto& gy = on->grad;
      auto val = [&](std::int64_t s, std::int64_t ch) -> double {
        if (s >= 0) return xn->data[s * c + ch];
        return pn ? pn->data[(k - 1 + s) * c + ch] : 0.0;
      };
      if (bn->requires_grad) {
        auto gb = grad_buffer(bn);
        for (std::int64_t t = 0; t < len; ++t)
          for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] += gy[t * c + ch];
      }
      if (wn->requires_grad) {
        auto gw = grad_buffer(wn);
        for (std::int64_t t = 0; t < len; ++t)
          for (std::int64_t j = 0; j < k; ++j)
            for (std::int64_t ch = 0; ch < c; ++ch)
              gw[j * c + ch] += gy[t * c + ch] * val(t - (k - 1) + j, ch);
      }
      const bool gx_needed = xn->requires_grad;
      const bool gp_needed = pn && pn->requires_grad;
      if (gx_needed || gp_needed) {
        std::span<double> gx = gx_needed ? grad_buffer(xn) : std::span<double>();
        std::span<double> gp = gp_needed ? grad_buffer(pn) : std::span<double>();
        for (std::int64_t t = 0; t < len; ++t)
          for (std::int64_t j = 0; j < k; ++j) {
            const auto st = t - (k - 1) + j;
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const double d = gy[t * c + ch] * wn->data[j * c + ch];
              if (st >= 0) {
                if (gx_needed) gx[st * c + ch] += d;
              } else if (gp_needed) {
                gp[(k - 1 + st) * c + ch] += d;
              }
            }
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor xv = x.detach();
  xv.set_requires_grad(true);
  return gradcheck_params([&] { return f(xv); }, {xv}, eps);
}

double gradcheck_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                        double eps, std::size_t max_coords_per_tensor, std::uint64_t seed) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ContractError("gradcheck: eps must lie in (0, 1e-2]");
  std::vector<Tensor> ps = params;
  std::vector<bool> flags;
  for (auto& p : ps) {
    flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(&tape);
    Tensor y = f();
    if (y.size() != 1) throw ContractError("gradcheck: function must be scalar-valued");
    tape.backward(y);
    for (auto& p : ps) {
      std::vector<double> g(p.size(), 0.0);
      if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
      analytic.push_back(std::move(g));
    }
  }
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  TapeScope no_tape(nullptr);
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto data = ps[k].data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_tensor > 0 && coords.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_tensor);
    }
    for (auto i : coords) {
      const double v = data[i];
      data[i] = v + eps;
      const double fp = f().item();
      data[i] = v - eps;
      const double fm = f().item();
      data[i] = v;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  for (std::size_t k = 0; k < ps.size(); ++k) {
    ps[k].zero_grad();
    ps[k].set_requires_grad(flags[k]);
  }
  return worst;
}

}  // namespace opama
