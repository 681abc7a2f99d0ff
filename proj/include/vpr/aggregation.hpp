#pragma once

// Aggregation heads mapping a C x H x W feature map to a global descriptor.
//
// Every head comes as a forward pass returning a trace, and a backward pass
// that consumes that trace plus the upstream gradient of the descriptor.
// Backward passes *accumulate* into the supplied gradient bundle and into the
// feature-map gradient (when one is requested), so a caller can sum over a
// batch without extra buffers.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vpr/numerics.hpp"

namespace vpr {

/// Unit-norm global descriptor.
using Descriptor = Tensor;

struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor values;              // [C, H, W], channel-major
  std::optional<Tensor> cls;  // [C]

  static FeatureMap make(Tensor values, std::optional<Tensor> cls = std::nullopt);

  std::size_t locations() const noexcept { return height * width; }
  /// Value of channel `c` at flattened spatial position `loc`.
  double at(std::size_t c, std::size_t loc) const { return values[c * locations() + loc]; }
  std::span<const double> channel(std::size_t c) const {
    return values.span().subspan(c * locations(), locations());
  }
};

/// Gradient w.r.t. a feature map (values and, optionally, the CLS vector).
struct FeatureMapGrad {
  Tensor values;
  std::optional<Tensor> cls;

  static FeatureMapGrad zeros_for(const FeatureMap& fm);
};

// ---------------------------------------------------------------- parameters

/// Per-channel GeM exponents, stored as log(p) so p stays positive under any
/// gradient step.
struct GemParams {
  Tensor log_p;  // [C]

  static GemParams uniform(std::size_t channels, double p = 3.0);
  static GemParams from_exponents(const Tensor& p);
  Tensor exponents() const;
  std::size_t channels() const { return log_p.size(); }
};

/// Low-rank gate: sigmoid(w_up^T gelu(w_down^T gem(x) + b_down) + b_up).
struct GcaParams {
  std::size_t rank = 0;
  Tensor w_down;  // [C, r]
  Tensor w_up;    // [r, C]
  Tensor b_down;  // [r]
  Tensor b_up;    // [C]
  GemParams gate_p;

  static GcaParams init(std::size_t channels, std::size_t rank, std::mt19937_64& rng);
  static GcaParams zeros(std::size_t channels, std::size_t rank);
};

/// GeM -> fully connected -> L2, the ungated baseline head.
struct GemFcParams {
  GemParams main_p;
  Tensor w_fc;  // [C, D_out]
  Tensor b_fc;  // [D_out]

  static GemFcParams init(std::size_t channels, std::size_t out_dim, std::mt19937_64& rng);
};

struct G2mParams {
  GemParams main_p;
  GcaParams gca;
  Tensor w_fc;  // [C, D_out]
  Tensor b_fc;  // [D_out]

  static G2mParams init(std::size_t channels, std::size_t rank, std::size_t out_dim, std::mt19937_64& rng);
  std::size_t out_dim() const { return b_fc.size(); }
};

struct NetVladParams {
  Tensor centers;   // [K, C]
  Tensor assign_w;  // [K, C]
  Tensor assign_b;  // [K]

  /// assign_w_k = 2 gamma c_k, assign_b_k = -gamma |c_k|^2.
  static NetVladParams from_centers(const Tensor& centers, double gamma = 10.0);
  static NetVladParams random(std::size_t clusters, std::size_t channels, std::mt19937_64& rng, double gamma = 10.0);
  std::size_t clusters() const { return centers.dim(0); }
  std::size_t channels() const { return centers.dim(1); }
};

/// NetVLAD followed by one C x C' projection shared by all clusters.
struct NvlParams {
  NetVladParams vlad;
  Tensor w_proj;  // [C, C']

  static NvlParams init(NetVladParams vlad, std::size_t proj_dim, std::mt19937_64& rng);
  std::size_t proj_dim() const { return w_proj.dim(1); }
  std::size_t out_dim() const { return vlad.clusters() * proj_dim(); }
};

inline constexpr std::size_t kClsProjectionDim = 256;
inline constexpr double kGemInputFloor = 1e-6;

// Zero-filled bundles with the same shapes, used as gradient accumulators.
GemParams zeros_like(const GemParams& p);
GcaParams zeros_like(const GcaParams& p);
GemFcParams zeros_like(const GemFcParams& p);
G2mParams zeros_like(const G2mParams& p);
NetVladParams zeros_like(const NetVladParams& p);
NvlParams zeros_like(const NvlParams& p);

// Named views used by checkpoints, optimisers and gradient checks.
using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;
using ConstNamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

NamedTensors named_tensors(GemParams& p, const std::string& prefix);
NamedTensors named_tensors(GcaParams& p, const std::string& prefix);
NamedTensors named_tensors(GemFcParams& p, const std::string& prefix);
NamedTensors named_tensors(G2mParams& p, const std::string& prefix);
NamedTensors named_tensors(NetVladParams& p, const std::string& prefix);
NamedTensors named_tensors(NvlParams& p, const std::string& prefix);

template <class Params>
ConstNamedTensors named_tensors(const Params& p, const std::string& prefix) {
  ConstNamedTensors out;
  for (auto& [name, t] : named_tensors(const_cast<Params&>(p), prefix)) out.emplace_back(name, t);
  return out;
}

std::size_t parameter_count(const ConstNamedTensors& tensors);

/// Weights-only learnable count of a G2M head: C r + r C + C D_out.
constexpr std::size_t g2m_weight_count(std::size_t channels, std::size_t rank, std::size_t out_dim) {
  return channels * rank + rank * channels + channels * out_dim;
}
/// Weights of the shared NVL projection: C C'.
constexpr std::size_t nvl_projection_count(std::size_t channels, std::size_t proj_dim) {
  return channels * proj_dim;
}
constexpr std::size_t netvlad_dim(std::size_t channels, std::size_t clusters) { return channels * clusters; }
constexpr std::size_t nvl_dim(std::size_t clusters, std::size_t proj_dim) { return clusters * proj_dim; }
constexpr std::size_t nvl_cls_dim(std::size_t clusters, std::size_t proj_dim) {
  return clusters * proj_dim + kClsProjectionDim;
}

// ---------------------------------------------------------------------- GeM

/// f_c = (mean_x x^{p_c})^{1/p_c}. Inputs below kGemInputFloor are raised to
/// it; negative inputs are rejected.
Tensor gem_pool(const FeatureMap& fm, const GemParams& p);

/// Accumulates dL/dvalues (if non-empty) and dL/dlog_p (if non-null).
void gem_pool_backward(const FeatureMap& fm, const GemParams& p, const Tensor& pooled, std::span<const double> d_pooled,
                       std::span<double> d_values, Tensor* d_log_p);

// ---------------------------------------------------------------------- GCA

struct GcaTrace {
  Tensor pooled;                // gate-branch GeM, [C]
  std::vector<double> hidden;   // pre-activation, [r]
  std::vector<double> activ;    // gelu(hidden), [r]
  Tensor gate;                  // [C], in (0, 1)
};

GcaTrace gca_forward(const FeatureMap& fm, const GcaParams& g);
Tensor gca_gate(const FeatureMap& fm, const GcaParams& g);
void gca_backward(const FeatureMap& fm, const GcaParams& g, const GcaTrace& trace, std::span<const double> d_gate,
                  GcaParams* grad, std::span<double> d_values);

// ------------------------------------------------------------ GeM-FC / G2M

struct GemFcTrace {
  Tensor pooled;
  std::vector<double> pre_norm;
  double norm = 0.0;
  Descriptor out;
};

GemFcTrace gem_fc_trace(const FeatureMap& fm, const GemFcParams& params);
Descriptor gem_fc_forward(const FeatureMap& fm, const GemFcParams& params);
void gem_fc_backward(const FeatureMap& fm, const GemFcParams& params, const GemFcTrace& trace,
                     std::span<const double> d_out, GemFcParams* grad, std::span<double> d_values);

struct G2mTrace {
  Tensor pooled;                 // main-branch GeM
  GcaTrace gca;
  std::vector<double> gated;     // pooled * gate
  std::vector<double> pre_norm;  // w_fc^T gated + b_fc
  double norm = 0.0;
  Descriptor out;
};

G2mTrace g2m_trace(const FeatureMap& fm, const G2mParams& params);
Descriptor g2m_forward(const FeatureMap& fm, const G2mParams& params);
void g2m_backward(const FeatureMap& fm, const G2mParams& params, const G2mTrace& trace, std::span<const double> d_out,
                  G2mParams* grad, std::span<double> d_values);

// ------------------------------------------------------------------ NetVLAD

/// Per-cluster residual aggregation shared by NetVLAD and NVL.
struct VladCore {
  std::size_t clusters = 0;
  std::size_t channels = 0;
  std::size_t locations = 0;
  std::vector<double> points;      // [N, C], locations as rows
  std::vector<double> assignment;  // [N, K], softmax over K
  std::vector<double> residual;    // [K, C], before intra-normalisation
  std::vector<double> norms;       // [K]
  std::vector<double> normalized;  // [K, C], intra-normalised
};

VladCore vlad_core(const FeatureMap& fm, const NetVladParams& params);
/// d_normalized is [K, C].
void vlad_core_backward(const VladCore& core, const NetVladParams& params, std::span<const double> d_normalized,
                        NetVladParams* grad, std::span<double> d_values);

struct NetVladTrace {
  VladCore core;
  double norm = 0.0;
  Descriptor out;  // [K C]
};

NetVladTrace netvlad_trace(const FeatureMap& fm, const NetVladParams& params);
Descriptor netvlad_forward(const FeatureMap& fm, const NetVladParams& params);
void netvlad_backward(const NetVladParams& params, const NetVladTrace& trace, std::span<const double> d_out,
                      NetVladParams* grad, std::span<double> d_values);

struct NvlTrace {
  VladCore core;
  std::vector<double> projected;  // [K, C'] (+ 256 CLS entries for the CLS variant)
  double norm = 0.0;
  Descriptor out;
};

NvlTrace nvl_trace(const FeatureMap& fm, const NvlParams& params);
Descriptor nvl_forward(const FeatureMap& fm, const NvlParams& params);
/// Projects already-computed intra-normalised residuals; used when the
/// backbone and NetVLAD are frozen.
NvlTrace nvl_from_core(VladCore core, const NvlParams& params);
void nvl_backward(const NvlParams& params, const NvlTrace& trace, std::span<const double> d_out, NvlParams* grad,
                  std::span<double> d_values);

/// Gradient of the shared projection only; the trace's core needs just
/// `normalized` (plus its sizes).
void nvl_projection_backward(const NvlParams& params, const NvlTrace& trace, std::span<const double> d_out,
                             Tensor* d_w_proj);

/// NVL descriptor concatenated with w_cls^T cls, jointly normalised.
NvlTrace nvl_cls_trace(const FeatureMap& fm, const NvlParams& params, const Tensor& w_cls);
Descriptor nvl_cls_forward(const FeatureMap& fm, const NvlParams& params, const Tensor& w_cls);
void nvl_cls_backward(const FeatureMap& fm, const NvlParams& params, const Tensor& w_cls, const NvlTrace& trace,
                      std::span<const double> d_out, NvlParams* grad, Tensor* d_w_cls, FeatureMapGrad* d_fm);

// ------------------------------------------------------------------ k-means

/// Lloyd's algorithm with k-means++ seeding over rows of `samples` [N, C].
Tensor kmeans(const Tensor& samples, std::size_t clusters, std::uint64_t seed, int iterations = 25);

}  // namespace vpr
