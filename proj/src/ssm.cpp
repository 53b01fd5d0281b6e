#include "opama/ssm.hpp"

#include <atomic>
#include <cmath>

#include "opama/error.hpp"

namespace opama {

namespace {

std::atomic<ScanVariant> g_variant{ScanVariant::parallel};

// (u e^u - expm1(u)), the numerator of d/dA [expm1(dt A) / A] * A^2
double zoh_slope_numerator(double u) {
  if (std::abs(u) < 1e-4) {
    const double u2 = u * u;
    return u2 * (0.5 + u * (1.0 / 3.0 + u * (1.0 / 8.0 + u / 30.0)));
  }
  return u * std::exp(u) - std::expm1(u);
}

// Runs one scan branch on the projected sequence xin [L, inner].
ScanOutput run_branch(const ScanBranch& br, const Tensor& xin, const Tensor& h0) {
  Tensor xs = silu(causal_conv1d(xin, br.conv_weight, br.conv_bias));
  Tensor dt = softplus(br.dt_up(br.dt_down(xs)));
  Tensor b = br.x_to_b(xs);
  Tensor c = br.x_to_c(xs);
  ScanOutput so = selective_scan(xs, dt, br.a_log, b, c, h0);
  so.y = add(so.y, mul(xs, br.d_skip));
  return so;
}

void check_sequence(const Tensor& seq, std::int64_t d_model, const char* who) {
  if (seq.rank() != 2 || seq.dim(1) != d_model)
    throw DimensionError(std::string(who) + ": expected [L," + std::to_string(d_model) + "], got " +
                         shape_str(seq.shape()));
  if (seq.dim(0) < 1) throw ContractError(std::string(who) + ": empty sequence");
}

}  // namespace

ScanVariant default_scan_variant() { return g_variant.load(); }
void set_default_scan_variant(ScanVariant v) { g_variant.store(v); }

ScanOutput selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a_log,
                          const Tensor& b, const Tensor& c, const Tensor& h0,
                          ScanVariant variant) {
  if (x.rank() != 2 || delta.shape() != x.shape())
    throw DimensionError("selective_scan: x " + shape_str(x.shape()) + " and delta " +
                         shape_str(delta.shape()) + " must both be [L,D]");
  const auto len = x.dim(0), dch = x.dim(1);
  if (a_log.rank() != 2 || a_log.dim(0) != dch)
    throw DimensionError("selective_scan: A_log must be [D,N], got " + shape_str(a_log.shape()));
  const auto ns = a_log.dim(1);
  if (b.shape() != Shape{len, ns} || c.shape() != Shape{len, ns})
    throw DimensionError("selective_scan: B " + shape_str(b.shape()) + " and C " +
                         shape_str(c.shape()) + " must be [L,N] = " + shape_str({len, ns}));
  if (h0.defined() && h0.shape() != Shape{dch, ns})
    throw DimensionError("selective_scan: initial state must be [D,N], got " +
                         shape_str(h0.shape()));

  const auto L = static_cast<std::size_t>(len), D = static_cast<std::size_t>(dch),
             N = static_cast<std::size_t>(ns);
  std::vector<double> a(D * N);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
  auto disc = scan::discretize_zoh<double>(a, b.data(), delta.data(), L, D, N);

  std::vector<double> h;
  if (h0.defined()) h.assign(h0.data().begin(), h0.data().end());
  std::vector<double> states;
  Tensor y(Shape{len, dch});
  scan::selective_scan<double>(disc, c.data(), x.data(), y.data(), h, variant, &states);
  Tensor final_state(Shape{dch, ns}, std::move(h));

  if (should_record({&x, &delta, &a_log, &b, &c, &h0})) {
    auto xn = x.node(), dn = delta.node(), an = a_log.node(), bn = b.node(), cn = c.node();
    NodePtr hn = h0.defined() ? h0.node() : nullptr;
    auto yn = y.node(), fn = final_state.node();
    std::vector<NodePtr> ins{xn, dn, an, bn, cn};
    if (hn) ins.push_back(hn);
    active_tape()->record(
        ins, {yn, fn},
        [=, a = std::move(a), disc = std::move(disc), states = std::move(states)] {
          const std::size_t W = D * N;
          std::vector<double> gy(L * D, 0.0), gh(W, 0.0);
          if (!yn->grad.empty()) gy = yn->grad;
          if (!fn->grad.empty()) gh = fn->grad;
          const auto& xv = xn->data;
          const auto& cv = cn->data;

          // adjoint recurrence, run backwards in time as a forward scan
          std::vector<double> ra(L * W, 0.0), rb(L * W, 0.0);
          for (std::size_t s = 0; s < L; ++s) {
            const std::size_t t = L - 1 - s;
            if (s > 0) std::copy_n(disc.a_bar.begin() + (t + 1) * W, W, ra.begin() + s * W);
            for (std::size_t d = 0; d < D; ++d)
              for (std::size_t n = 0; n < N; ++n)
                rb[s * W + d * N + n] = gy[t * D + d] * cv[t * N + n];
            if (s == 0)
              for (std::size_t j = 0; j < W; ++j) rb[j] += gh[j];
          }
          if (variant == ScanVariant::sequential)
            scan::linear_recurrence_sequential<double>(ra, rb, L, W);
          else
            scan::linear_recurrence_parallel<double>(ra, rb, L, W);
          auto g_at = [&](std::size_t t) { return rb.data() + (L - 1 - t) * W; };

          std::vector<double> gx(L * D, 0.0), gdelta(L * D, 0.0), ga(W, 0.0), gb(L * N, 0.0),
              gc(L * N, 0.0), gh0(W, 0.0);
          for (std::size_t t = 0; t < L; ++t) {
            const double* g = g_at(t);
            const double* hprev = t > 0 ? states.data() + (t - 1) * W
                                        : (hn ? hn->data.data() : nullptr);
            const double* hcur = states.data() + t * W;
            for (std::size_t d = 0; d < D; ++d) {
              const double dt = dn->data[t * D + d];
              const double xt = xv[t * D + d];
              for (std::size_t n = 0; n < N; ++n) {
                const std::size_t k = d * N + n;
                const std::size_t i = t * W + k;
                const double abar = disc.a_bar[i];
                const double av = a[k];
                const double bt = bn->data[t * N + n];
                const double u = dt * av;
                const double d_abar = hprev ? g[k] * hprev[k] : 0.0;
                const double d_bbar = g[k] * xt;
                gx[t * D + d] += g[k] * disc.b_bar[i];
                gc[t * N + n] += gy[t * D + d] * hcur[k];
                gdelta[t * D + d] += d_abar * av * abar;
                ga[k] += d_abar * dt * abar;
                if (std::abs(u) < scan::kZohSeriesThreshold) {
                  gdelta[t * D + d] += d_bbar * bt * (1.0 + u);
                  ga[k] += d_bbar * bt * 0.5 * dt * dt;
                  gb[t * N + n] += d_bbar * dt * (1.0 + 0.5 * u);
                } else {
                  gdelta[t * D + d] += d_bbar * abar * bt;
                  ga[k] += d_bbar * bt * zoh_slope_numerator(u) / (av * av);
                  gb[t * N + n] += d_bbar * std::expm1(u) / av;
                }
              }
            }
          }
          if (hn) {
            const double* g0 = g_at(0);
            for (std::size_t k = 0; k < W; ++k) gh0[k] = disc.a_bar[k] * g0[k];
          }
          auto acc = [](const NodePtr& node, const std::vector<double>& g) {
            if (!node || !node->requires_grad) return;
            auto dst = grad_buffer(node);
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
          };
          acc(xn, gx);
          acc(dn, gdelta);
          acc(bn, gb);
          acc(cn, gc);
          acc(hn, gh0);
          if (an->requires_grad) {
            auto dst = grad_buffer(an);
            for (std::size_t k = 0; k < W; ++k) dst[k] += ga[k] * a[k];  // dA/dA_log = A
          }
        });
  }
  return {y, final_state};
}

// ---------------------------------------------------------------------------

ScanBranch::ScanBranch(const MambaConfig& cfg, Rng& rng) {
  const auto inner = cfg.inner(), n = cfg.state, k = cfg.conv_width, r = cfg.rank();
  conv_weight = init_fan_in({k, inner}, k, rng);
  conv_bias = Tensor(Shape{inner});
  conv_bias.set_requires_grad(true);
  dt_down = Linear(inner, r, false, rng);
  dt_up = Linear(r, inner, true, rng);
  // softplus(bias) = dt with log(dt) uniform in [log 1e-3, log 0.1]
  for (auto& v : dt_up.bias.data()) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
    v = dt + std::log(-std::expm1(-dt));
  }
  x_to_b = Linear(inner, n, false, rng);
  x_to_c = Linear(inner, n, false, rng);
  a_log = Tensor(Shape{inner, n});
  for (std::int64_t d = 0; d < inner; ++d)
    for (std::int64_t j = 0; j < n; ++j) a_log.data()[d * n + j] = std::log(static_cast<double>(j + 1));
  a_log.set_requires_grad(true);
  d_skip = Tensor(Shape{inner}, 1.0);
  d_skip.set_requires_grad(true);
}

void ScanBranch::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "conv.weight"), conv_weight);
  out.add(join_name(prefix, "conv.bias"), conv_bias);
  dt_down.collect(out, join_name(prefix, "x_to_delta.down"));
  dt_up.collect(out, join_name(prefix, "x_to_delta.up"));
  x_to_b.collect(out, join_name(prefix, "x_to_B"));
  x_to_c.collect(out, join_name(prefix, "x_to_C"));
  out.add(join_name(prefix, "A_log"), a_log);
  out.add(join_name(prefix, "D_skip"), d_skip);
}

MambaBlock::MambaBlock(const MambaConfig& config, Rng& rng) : cfg(config) {
  norm_weight = Tensor(Shape{cfg.d_model}, 1.0);
  norm_weight.set_requires_grad(true);
  in_proj = Linear(cfg.d_model, cfg.inner(), false, rng);
  gate_proj = Linear(cfg.d_model, cfg.inner(), false, rng);
  out_proj = Linear(cfg.inner(), cfg.d_model, false, rng);
  branch = ScanBranch(cfg, rng);
}

Tensor MambaBlock::forward(const Tensor& seq) const {
  MambaState state;
  return forward(seq, state);
}

Tensor MambaBlock::forward(const Tensor& seq, MambaState& state) const {
  check_sequence(seq, cfg.d_model, "mamba1d_forward");
  Tensor xn = rms_norm(seq, norm_weight);
  Tensor z = gate_proj(xn);
  ScanOutput so = run_branch(branch, in_proj(xn), state.h);
  state.h = so.final_state;
  return add(seq, out_proj(mul(so.y, silu(z))));
}

void MambaBlock::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "norm.weight"), norm_weight);
  in_proj.collect(out, join_name(prefix, "in_proj"));
  gate_proj.collect(out, join_name(prefix, "gate_proj"));
  out_proj.collect(out, join_name(prefix, "out_proj"));
  branch.collect(out, prefix);
}

Mamba2DBlock::Mamba2DBlock(const MambaConfig& config, Rng& rng) : cfg(config) {
  norm_weight = Tensor(Shape{cfg.d_model}, 1.0);
  norm_weight.set_requires_grad(true);
  in_proj = Linear(cfg.d_model, cfg.inner(), false, rng);
  gate_proj = Linear(cfg.d_model, cfg.inner(), false, rng);
  out_proj = Linear(cfg.inner(), cfg.d_model, false, rng);
  forward_branch = ScanBranch(cfg, rng);
  backward_branch = ScanBranch(cfg, rng);
}

Tensor Mamba2DBlock::forward_sequence(const Tensor& seq) const {
  check_sequence(seq, cfg.d_model, "mamba2d_forward");
  Tensor xn = rms_norm(seq, norm_weight);
  Tensor xin = in_proj(xn);
  Tensor z = gate_proj(xn);
  Tensor yf = run_branch(forward_branch, xin, Tensor()).y;
  Tensor yb = reverse_rows(run_branch(backward_branch, reverse_rows(xin), Tensor()).y);
  return add(seq, out_proj(mul(add(yf, yb), silu(z))));
}

Tensor Mamba2DBlock::forward(const Tensor& grid) const {
  if (grid.rank() != 3 || grid.dim(2) != cfg.d_model)
    throw DimensionError("mamba2d_forward: expected [Hf,Wf," + std::to_string(cfg.d_model) +
                         "], got " + shape_str(grid.shape()));
  if (grid.dim(0) < 1 || grid.dim(1) < 1) throw ContractError("mamba2d_forward: empty grid");
  Tensor out = forward_sequence(reshape(grid, {grid.dim(0) * grid.dim(1), cfg.d_model}));
  return reshape(out, grid.shape());
}

void Mamba2DBlock::collect(ParamList& out, const std::string& prefix) const {
  out.add(join_name(prefix, "norm.weight"), norm_weight);
  in_proj.collect(out, join_name(prefix, "in_proj"));
  gate_proj.collect(out, join_name(prefix, "gate_proj"));
  out_proj.collect(out, join_name(prefix, "out_proj"));
  forward_branch.collect(out, join_name(prefix, "fwd"));
  backward_branch.collect(out, join_name(prefix, "bwd"));
}

Tensor mamba1d_forward(const MambaBlock& block, const Tensor& seq) { return block.forward(seq); }
Tensor mamba2d_forward(const Mamba2DBlock& block, const Tensor& grid) { return block.forward(grid); }

GlobalLocalOutput global_local_scan(const MambaBlock& block, const std::vector<Tensor>& segments) {
  if (segments.empty()) throw ContractError("global_local_scan: at least one segment required");
  GlobalLocalOutput out;
  MambaState state;
  for (const auto& seg : segments) {
    out.outputs.push_back(block.forward(seg, state));
    out.states.push_back(state);
  }
  return out;
}

}  // namespace opama
