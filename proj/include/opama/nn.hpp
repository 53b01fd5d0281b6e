#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "opama/rng.hpp"
#include "opama/tensor.hpp"

namespace opama {

struct Parameter {
  std::string name;  // dotted path, e.g. "vcr.block3.in_proj.weight"
  Tensor tensor;
};

/// Named parameter handles. Tensors are shared with the owning module, so
/// writes through the list (optimizer steps, checkpoint loads) are visible to
/// the model.
class ParamList {
 public:
  void add(std::string name, Tensor tensor);
  void append(const ParamList& other);

  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t numel() const;
  const Parameter* find(const std::string& name) const;

  std::vector<Tensor> tensors() const;
  void zero_grad();
  void set_requires_grad(bool on);

 private:
  std::vector<Parameter> items_;
  std::map<std::string, std::size_t> index_;
};

std::string join_name(const std::string& prefix, const std::string& leaf);

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor init_fan_in(Shape shape, std::int64_t fan_in, Rng& rng);
Tensor init_uniform(Shape shape, double bound, Rng& rng);

/// Dense layer y = x W + b with W [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  std::int64_t in_features() const { return weight.dim(0); }
  std::int64_t out_features() const { return weight.dim(1); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight-decay Adam. Moment buffers are keyed by parameter name
/// so they survive checkpoint round trips.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : opt_(options) {}

  void step(const ParamList& params);
  std::int64_t steps() const { return t_; }
  const AdamWOptions& options() const { return opt_; }

  /// Moment buffers as checkpointable entries ("adamw.m.<name>", ...).
  ParamList state() const;
  void load_state(const ParamList& state);

 private:
  AdamWOptions opt_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace opama
