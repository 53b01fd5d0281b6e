#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace opama {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
};

using NodePtr = std::shared_ptr<TensorNode>;

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage (handle semantics). Use clone() or detach() for an
/// independent copy. Operations record themselves on the thread's active Tape
/// when at least one input requires a gradient.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<double> grad();
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Independent copy of the values, outside any graph.
  Tensor detach() const;
  /// Alias of detach() that keeps requires_grad.
  Tensor clone() const;

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

/// Ordered record of differentiable operations.
///
/// Entries are appended in execution order, so the list is topologically
/// sorted; backward() walks it once in reverse and accumulates gradients.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<NodePtr> inputs, std::vector<NodePtr> outputs, BackwardFn fn);
  void backward(const Tensor& root);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::vector<NodePtr> inputs;
    std::vector<NodePtr> outputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

/// Tape that ops on this thread currently record onto, or nullptr.
Tape* active_tape();

/// Installs a tape as the thread's active tape for the scope's lifetime.
/// Pass nullptr to suspend recording (inference on frozen modules).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Gradient buffer of a node, allocated (zero-filled) on first use.
std::span<double> grad_buffer(const NodePtr& node);

/// True when a tape is active and any input requires a gradient.
bool should_record(std::initializer_list<const Tensor*> inputs);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

enum class UnaryOp { exp, sigmoid, softplus, silu, neg, reciprocal };
enum class BinaryOp { add, sub, mul, div };
enum class ReduceOp { sum, mean };

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor map_unary(const Tensor& x, UnaryOp f);
inline Tensor exp(const Tensor& x) { return map_unary(x, UnaryOp::exp); }
inline Tensor sigmoid(const Tensor& x) { return map_unary(x, UnaryOp::sigmoid); }
inline Tensor softplus(const Tensor& x) { return map_unary(x, UnaryOp::softplus); }
inline Tensor silu(const Tensor& x) { return map_unary(x, UnaryOp::silu); }
inline Tensor neg(const Tensor& x) { return map_unary(x, UnaryOp::neg); }
inline Tensor reciprocal(const Tensor& x) { return map_unary(x, UnaryOp::reciprocal); }

/// Elementwise a (op) b. Broadcasting: shapes must be equal, or the shape of
/// one operand must equal the trailing dimensions of the other (e.g. [n]
/// against [m,n], or [w,c] against [h,w,c]). The smaller operand is tiled.
/// Anything else is a DimensionError.
Tensor combine_binary(const Tensor& a, const Tensor& b, BinaryOp f);
inline Tensor add(const Tensor& a, const Tensor& b) { return combine_binary(a, b, BinaryOp::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return combine_binary(a, b, BinaryOp::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return combine_binary(a, b, BinaryOp::mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return combine_binary(a, b, BinaryOp::div); }

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

/// Reduces over the listed axes (dropped from the result shape).
Tensor reduce(const Tensor& x, ReduceOp op, std::vector<std::int64_t> axes);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);  // along axis 0
Tensor concat_last(const std::vector<Tensor>& parts);  // along the last axis
Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor reverse_rows(const Tensor& x);

/// Gathers rows of table [V, d] -> [ids.size(), d].
Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids);
/// Softmax over the last axis.
Tensor softmax_last(const Tensor& x);
/// x [.., d] / rms(x) * weight [d].
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps = 1e-5);
/// Group normalization of channels-last x [.., C] with affine gamma/beta [C].
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-5);
/// 2D convolution on x [H, W, Cin] with weight [k*k*Cin, Cout] (row index
/// (ky*k + kx)*Cin + ci) and bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel, int stride,
              int pad);
/// Nearest-neighbour 2x upsampling of [H, W, C].
Tensor upsample_nearest2(const Tensor& x);
/// [H, W, C] -> [(H/p)*(W/p), p*p*C], patches in row-major order.
Tensor patchify(const Tensor& x, int patch);
/// Depthwise causal conv over x [L, C] with weight [K, C]; weight row K-1
/// multiplies the current step. prefix [K-1, C] supplies the steps before
/// t = 0 (zeros when undefined).
Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     const Tensor& prefix = Tensor());

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |central
/// difference|) for scalar f at x.
double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                 double eps = 1e-5);

/// Same check over several parameter tensors of a closure. When
/// max_coords_per_tensor > 0 only that many coordinates (chosen by seed) are
/// probed per tensor.
double gradcheck_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                        double eps = 1e-5, std::size_t max_coords_per_tensor = 0,
                        std::uint64_t seed = 0);

}  // namespace opama
