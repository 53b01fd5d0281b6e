#pragma once

#include <string>
#include <vector>

#include "opama/nn.hpp"
#include "opama/scan_kernels.hpp"
#include "opama/tensor.hpp"

namespace opama {

using ScanVariant = scan::Variant;

/// Scan kernel used by the differentiable blocks. Defaults to the parallel
/// form; tests flip it to compare against the sequential oracle.
ScanVariant default_scan_variant();
void set_default_scan_variant(ScanVariant v);

struct ScanOutput {
  Tensor y;            // [L, D]
  Tensor final_state;  // [D, N]
};

/// Differentiable selective scan with A = -exp(a_log):
///   h_t = A_bar_t h_{t-1} + B_bar_t x_t,  y_t = C_t h_t
/// x, delta [L, D]; a_log [D, N]; b, c [L, N]; h0 [D, N] or undefined.
/// Backward runs the adjoint recurrence with the same kernel variant.
ScanOutput selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a_log,
                          const Tensor& b, const Tensor& c, const Tensor& h0 = Tensor(),
                          ScanVariant variant = default_scan_variant());

struct MambaConfig {
  std::int64_t d_model = 64;
  std::int64_t state = 16;  // N
  std::int64_t expand = 2;
  std::int64_t conv_width = 4;
  std::int64_t dt_rank = 0;  // 0: ceil(d_model / 16)

  std::int64_t inner() const { return expand * d_model; }
  std::int64_t rank() const { return dt_rank > 0 ? dt_rank : (d_model + 15) / 16; }
};

/// Direction-specific part of a Mamba block: short causal conv, selective
/// projections, state matrix and skip.
struct ScanBranch {
  Tensor conv_weight;  // [K, inner]
  Tensor conv_bias;    // [inner]
  Linear dt_down;      // inner -> rank
  Linear dt_up;        // rank -> inner (bias sets the initial step size)
  Linear x_to_b;       // inner -> N
  Linear x_to_c;       // inner -> N
  Tensor a_log;        // [inner, N]
  Tensor d_skip;       // [inner]

  ScanBranch() = default;
  ScanBranch(const MambaConfig& cfg, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Recurrent state carried between segments of a chained scan.
struct MambaState {
  Tensor h;  // [inner, N]; undefined means zeros
};

/// Residual Mamba block for 1D sequences:
///   u -> rmsnorm -> in_proj -> conv -> silu -> selective scan (+ D skip)
///     -> * silu(gate_proj) -> out_proj -> + u
struct MambaBlock {
  MambaConfig cfg;
  Tensor norm_weight;
  Linear in_proj, gate_proj, out_proj;
  ScanBranch branch;

  MambaBlock() = default;
  MambaBlock(const MambaConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& seq) const;
  /// Forward with an initial SSM state; `state` is replaced by the final one.
  Tensor forward(const Tensor& seq, MambaState& state) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Bidirectional block for flattened 2D grids: shared projections, one scan
/// branch over the row-major sequence and one over its reverse; the branch
/// outputs are summed before the gate and out_proj.
struct Mamba2DBlock {
  MambaConfig cfg;
  Tensor norm_weight;
  Linear in_proj, gate_proj, out_proj;
  ScanBranch forward_branch, backward_branch;

  Mamba2DBlock() = default;
  Mamba2DBlock(const MambaConfig& cfg, Rng& rng);

  /// grid [Hf, Wf, d_model] -> same shape.
  Tensor forward(const Tensor& grid) const;
  /// Flattened variant: seq [L, d_model].
  Tensor forward_sequence(const Tensor& seq) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor mamba1d_forward(const MambaBlock& block, const Tensor& seq);
Tensor mamba2d_forward(const Mamba2DBlock& block, const Tensor& grid);

struct GlobalLocalOutput {
  std::vector<Tensor> outputs;       // one per segment
  std::vector<MambaState> states;    // state after each segment
};

/// Runs `block` over the segments in order, seeding each segment's SSM state
/// with the final state of the previous one. The causal conv restarts per
/// segment; only the recurrent state crosses segment boundaries.
GlobalLocalOutput global_local_scan(const MambaBlock& block, const std::vector<Tensor>& segments);

}  // namespace opama
