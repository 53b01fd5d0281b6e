#include "opama/nn.hpp"

#include <cmath>

#include "opama/error.hpp"

namespace opama {

void ParamList::add(std::string name, Tensor tensor) {
  if (!tensor.defined()) throw ContractError("ParamList: undefined tensor for " + name);
  if (index_.count(name)) throw ContractError("ParamList: duplicate parameter name " + name);
  index_[name] = items_.size();
  items_.push_back({std::move(name), std::move(tensor)});
}

void ParamList::append(const ParamList& other) {
  for (const auto& p : other.items()) add(p.name, p.tensor);
}

std::size_t ParamList::numel() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.size();
  return n;
}

const Parameter* ParamList::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

std::vector<Tensor> ParamList::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.tensor);
  return out;
}

void ParamList::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

void ParamList::set_requires_grad(bool on) {
  for (auto& p : items_) p.tensor.set_requires_grad(on);
}

std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

Tensor init_uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

Tensor init_fan_in(Shape shape, std::int64_t fan_in, Rng& rng) {
  return init_uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng)
    : weight(init_fan_in({in, out}, in, rng)) {
  if (with_bias) {
    bias = Tensor(Shape{out});
    bias.set_requires_grad(true);
  }
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "weight"), weight);
  if (bias.defined()) out.add(join_name(prefix, "bias"), bias);
}

void AdamW::step(const ParamList& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (const auto& p : params.items()) {
    Tensor w = p.tensor;
    if (!w.requires_grad()) continue;
    auto [mit, fresh] = m_.try_emplace(p.name, Tensor(w.shape()));
    auto vit = v_.try_emplace(p.name, Tensor(w.shape())).first;
    (void)fresh;
    auto m = mit->second.data();
    auto v = vit->second.data();
    auto x = w.data();
    const bool has = w.has_grad();
    std::span<const double> g = has ? std::span<const double>(w.grad()) : std::span<const double>();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      x[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * x[i]);
    }
  }
}

ParamList AdamW::state() const {
  ParamList out;
  out.add("adamw.step", Tensor(Shape{1}, {static_cast<double>(t_)}));
  for (const auto& [name, t] : m_) out.add("adamw.m." + name, t);
  for (const auto& [name, t] : v_) out.add("adamw.v." + name, t);
  return out;
}

void AdamW::load_state(const ParamList& state) {
  m_.clear();
  v_.clear();
  t_ = 0;
  for (const auto& p : state.items()) {
    if (p.name == "adamw.step") {
      t_ = static_cast<std::int64_t>(p.tensor.item());
    } else if (p.name.rfind("adamw.m.", 0) == 0) {
      m_[p.name.substr(8)] = p.tensor.detach();
    } else if (p.name.rfind("adamw.v.", 0) == 0) {
      v_[p.name.substr(8)] = p.tensor.detach();
    }
  }
}

}  // namespace opama
