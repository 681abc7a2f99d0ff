#include "vpr/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace vpr {

namespace {

void require(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) throw Error(code, msg);
}

std::vector<double> affine_t(const Tensor& w, std::span<const double> x, const Tensor& b) {
  std::vector<double> y(w.dim(1));
  matvec_t(w, x, y);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

void check_channels(const FeatureMap& fm, std::size_t expected, const char* what) {
  require(fm.channels == expected, ErrorCode::InvalidArgument,
          std::string(what) + ": feature map has " + std::to_string(fm.channels) + " channels, parameters expect " +
              std::to_string(expected));
}

Tensor normal_init(std::vector<std::size_t> shape, std::mt19937_64& rng, double fan_in) {
  return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(fan_in));
}

}  // namespace

FeatureMap FeatureMap::make(Tensor values, std::optional<Tensor> cls) {
  require(values.rank() == 3, ErrorCode::InvalidArgument,
          "feature map values must be [C,H,W], got " + shape_string(values.shape()));
  values.require_finite("feature map");
  FeatureMap fm;
  fm.channels = values.dim(0);
  fm.height = values.dim(1);
  fm.width = values.dim(2);
  if (cls) {
    require(cls->size() == fm.channels, ErrorCode::InvalidArgument, "CLS vector length must equal channel count");
    cls->require_finite("CLS vector");
  }
  fm.values = std::move(values);
  fm.cls = std::move(cls);
  return fm;
}

FeatureMapGrad FeatureMapGrad::zeros_for(const FeatureMap& fm) {
  FeatureMapGrad g{Tensor::zeros_like(fm.values), std::nullopt};
  if (fm.cls) g.cls = Tensor::zeros_like(*fm.cls);
  return g;
}

// ------------------------------------------------------------------ params

GemParams GemParams::uniform(std::size_t channels, double p) {
  require(p > 0 && std::isfinite(p), ErrorCode::InvalidArgument, "GeM exponent must be positive");
  return GemParams{Tensor::filled({channels}, std::log(p))};
}

GemParams GemParams::from_exponents(const Tensor& p) {
  Tensor log_p = Tensor::zeros_like(p);
  for (std::size_t c = 0; c < p.size(); ++c) {
    require(p[c] > 0 && std::isfinite(p[c]), ErrorCode::InvalidArgument,
            "GeM exponent p_" + std::to_string(c) + " must be positive");
    log_p[c] = std::log(p[c]);
  }
  return GemParams{std::move(log_p)};
}

Tensor GemParams::exponents() const {
  Tensor p = Tensor::zeros_like(log_p);
  for (std::size_t c = 0; c < p.size(); ++c) p[c] = std::exp(log_p[c]);
  return p;
}

GcaParams GcaParams::zeros(std::size_t channels, std::size_t rank) {
  require(rank >= 1 && rank < channels, ErrorCode::InvalidArgument,
          "GCA rank must satisfy 1 <= r < C (r=" + std::to_string(rank) + ", C=" + std::to_string(channels) + ")");
  GcaParams g;
  g.rank = rank;
  g.w_down = Tensor::zeros({channels, rank});
  g.w_up = Tensor::zeros({rank, channels});
  g.b_down = Tensor::zeros({rank});
  g.b_up = Tensor::zeros({channels});
  g.gate_p = GemParams::uniform(channels);
  return g;
}

GcaParams GcaParams::init(std::size_t channels, std::size_t rank, std::mt19937_64& rng) {
  GcaParams g = zeros(channels, rank);
  // w_up starts at zero so the gate is a uniform 0.5 until training moves it.
  g.w_down = normal_init({channels, rank}, rng, static_cast<double>(channels));
  return g;
}

GemFcParams GemFcParams::init(std::size_t channels, std::size_t out_dim, std::mt19937_64& rng) {
  GemFcParams p;
  p.main_p = GemParams::uniform(channels);
  p.w_fc = normal_init({channels, out_dim}, rng, static_cast<double>(channels));
  p.b_fc = Tensor::zeros({out_dim});
  return p;
}

G2mParams G2mParams::init(std::size_t channels, std::size_t rank, std::size_t out_dim, std::mt19937_64& rng) {
  G2mParams p;
  p.main_p = GemParams::uniform(channels);
  // Same draw order as GemFcParams::init: identical seeds give identical FC layers.
  p.w_fc = normal_init({channels, out_dim}, rng, static_cast<double>(channels));
  p.b_fc = Tensor::zeros({out_dim});
  p.gca = GcaParams::init(channels, rank, rng);
  return p;
}

NetVladParams NetVladParams::from_centers(const Tensor& centers, double gamma) {
  require(centers.rank() == 2, ErrorCode::InvalidArgument, "NetVLAD centers must be [K,C]");
  const std::size_t k_count = centers.dim(0), c_count = centers.dim(1);
  NetVladParams p;
  p.centers = centers;
  p.assign_w = Tensor::zeros({k_count, c_count});
  p.assign_b = Tensor::zeros({k_count});
  for (std::size_t k = 0; k < k_count; ++k) {
    double sq = 0.0;
    for (std::size_t c = 0; c < c_count; ++c) {
      p.assign_w.at(k, c) = 2.0 * gamma * centers.at(k, c);
      sq += centers.at(k, c) * centers.at(k, c);
    }
    p.assign_b[k] = -gamma * sq;
  }
  return p;
}

NetVladParams NetVladParams::random(std::size_t clusters, std::size_t channels, std::mt19937_64& rng, double gamma) {
  require(clusters >= 1, ErrorCode::InvalidArgument, "NetVLAD needs K >= 1");
  return from_centers(Tensor::randn({clusters, channels}, rng), gamma);
}

NvlParams NvlParams::init(NetVladParams vlad, std::size_t proj_dim, std::mt19937_64& rng) {
  const std::size_t c = vlad.channels();
  require(proj_dim >= 1 && proj_dim <= c, ErrorCode::InvalidArgument,
          "NVL projection dimension C'=" + std::to_string(proj_dim) + " must be in [1, C=" + std::to_string(c) + "]");
  NvlParams p;
  p.vlad = std::move(vlad);
  p.w_proj = normal_init({c, proj_dim}, rng, static_cast<double>(c));
  return p;
}

GemParams zeros_like(const GemParams& p) { return GemParams{Tensor::zeros_like(p.log_p)}; }

GcaParams zeros_like(const GcaParams& p) {
  GcaParams g;
  g.rank = p.rank;
  g.w_down = Tensor::zeros_like(p.w_down);
  g.w_up = Tensor::zeros_like(p.w_up);
  g.b_down = Tensor::zeros_like(p.b_down);
  g.b_up = Tensor::zeros_like(p.b_up);
  g.gate_p = zeros_like(p.gate_p);
  return g;
}

GemFcParams zeros_like(const GemFcParams& p) {
  return GemFcParams{zeros_like(p.main_p), Tensor::zeros_like(p.w_fc), Tensor::zeros_like(p.b_fc)};
}

G2mParams zeros_like(const G2mParams& p) {
  return G2mParams{zeros_like(p.main_p), zeros_like(p.gca), Tensor::zeros_like(p.w_fc), Tensor::zeros_like(p.b_fc)};
}

NetVladParams zeros_like(const NetVladParams& p) {
  return NetVladParams{Tensor::zeros_like(p.centers), Tensor::zeros_like(p.assign_w), Tensor::zeros_like(p.assign_b)};
}

NvlParams zeros_like(const NvlParams& p) { return NvlParams{zeros_like(p.vlad), Tensor::zeros_like(p.w_proj)}; }

NamedTensors named_tensors(GemParams& p, const std::string& prefix) { return {{prefix + ".log_p", &p.log_p}}; }

NamedTensors named_tensors(GcaParams& p, const std::string& prefix) {
  NamedTensors out{{prefix + ".w_down", &p.w_down},
                   {prefix + ".w_up", &p.w_up},
                   {prefix + ".b_down", &p.b_down},
                   {prefix + ".b_up", &p.b_up}};
  for (auto& e : named_tensors(p.gate_p, prefix + ".gate_p")) out.push_back(e);
  return out;
}

NamedTensors named_tensors(GemFcParams& p, const std::string& prefix) {
  NamedTensors out = named_tensors(p.main_p, prefix + ".main_p");
  out.emplace_back(prefix + ".w_fc", &p.w_fc);
  out.emplace_back(prefix + ".b_fc", &p.b_fc);
  return out;
}

NamedTensors named_tensors(G2mParams& p, const std::string& prefix) {
  NamedTensors out = named_tensors(p.main_p, prefix + ".main_p");
  for (auto& e : named_tensors(p.gca, prefix + ".gca")) out.push_back(e);
  out.emplace_back(prefix + ".w_fc", &p.w_fc);
  out.emplace_back(prefix + ".b_fc", &p.b_fc);
  return out;
}

NamedTensors named_tensors(NetVladParams& p, const std::string& prefix) {
  return {{prefix + ".centers", &p.centers}, {prefix + ".assign_w", &p.assign_w}, {prefix + ".assign_b", &p.assign_b}};
}

NamedTensors named_tensors(NvlParams& p, const std::string& prefix) {
  NamedTensors out = named_tensors(p.vlad, prefix + ".vlad");
  out.emplace_back(prefix + ".w_proj", &p.w_proj);
  return out;
}

std::size_t parameter_count(const ConstNamedTensors& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t->size();
  return n;
}

// --------------------------------------------------------------------- GeM

namespace {

struct GemChannel {
  double xmax = 0.0;
  double mean_pow = 0.0;  // mean over locations of (x / xmax)^p
};

// Factoring out the channel maximum keeps x^p finite for large p.
GemChannel gem_channel(std::span<const double> x, double p) {
  GemChannel g;
  g.xmax = kGemInputFloor;
  for (double v : x) g.xmax = std::max(g.xmax, v);
  double s = 0.0;
  for (double v : x) s += std::pow(std::max(v, kGemInputFloor) / g.xmax, p);
  g.mean_pow = s / static_cast<double>(x.size());
  return g;
}

void check_gem_inputs(const FeatureMap& fm, const GemParams& p) {
  check_channels(fm, p.channels(), "gem_pool");
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double e = std::exp(p.log_p[c]);
    require(e > 0 && std::isfinite(e), ErrorCode::InvalidArgument,
            "GeM exponent p_" + std::to_string(c) + " must be positive and finite");
  }
  for (std::size_t i = 0; i < fm.values.size(); ++i) {
    if (fm.values[i] < 0.0) {
      throw Error(ErrorCode::InvalidArgument, "gem_pool: negative input value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace

Tensor gem_pool(const FeatureMap& fm, const GemParams& p) {
  check_gem_inputs(fm, p);
  Tensor out({fm.channels});
  for (std::size_t c = 0; c < fm.channels; ++c) {
    const double e = std::exp(p.log_p[c]);
    const GemChannel g = gem_channel(fm.channel(c), e);
    out[c] = g.xmax * std::pow(g.mean_pow, 1.0 / e);
  }
  return out;
}

void gem_pool_backward(const FeatureMap& fm, const GemParams& p, const Tensor& pooled, std::span<const double> d_pooled,
                       std::span<double> d_values, Tensor* d_log_p) {
  const std::size_t n = fm.locations();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t c = 0; c < fm.channels; ++c) {
    const double df = d_pooled[c];
    if (df == 0.0) continue;
    const double e = std::exp(p.log_p[c]);
    const auto x = fm.channel(c);
    const GemChannel g = gem_channel(x, e);
    if (!d_values.empty()) {
      // df/dx_i = s^{1/p - 1} r_i^{p-1} / n with r_i = x_i / xmax.
      const double scale = df * std::pow(g.mean_pow, 1.0 / e - 1.0) * inv_n;
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] < kGemInputFloor) continue;
        d_values[c * n + i] += scale * std::pow(x[i] / g.xmax, e - 1.0);
      }
    }
    if (d_log_p) {
      double weighted_log = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = std::max(x[i], kGemInputFloor) / g.xmax;
        weighted_log += std::pow(r, e) * std::log(r);
      }
      weighted_log *= inv_n;
      // d f / d log p = f (-log s / p + E[r^p log r] / s).
      const double dlog = pooled[c] * (-std::log(g.mean_pow) / e + weighted_log / g.mean_pow);
      (*d_log_p)[c] += df * dlog;
    }
  }
}

// --------------------------------------------------------------------- GCA

GcaTrace gca_forward(const FeatureMap& fm, const GcaParams& g) {
  require(g.rank >= 1 && g.rank < fm.channels, ErrorCode::InvalidArgument, "GCA rank must satisfy 1 <= r < C");
  GcaTrace t;
  t.pooled = gem_pool(fm, g.gate_p);
  t.hidden = affine_t(g.w_down, t.pooled.span(), g.b_down);
  t.activ.resize(t.hidden.size());
  for (std::size_t j = 0; j < t.hidden.size(); ++j) t.activ[j] = gelu(t.hidden[j]);
  const auto logits = affine_t(g.w_up, t.activ, g.b_up);
  t.gate = Tensor({fm.channels});
  for (std::size_t c = 0; c < fm.channels; ++c) t.gate[c] = sigmoid(logits[c]);
  return t;
}

Tensor gca_gate(const FeatureMap& fm, const GcaParams& g) { return gca_forward(fm, g).gate; }

void gca_backward(const FeatureMap& fm, const GcaParams& g, const GcaTrace& trace, std::span<const double> d_gate,
                  GcaParams* grad, std::span<double> d_values) {
  const std::size_t c_count = fm.channels, r = g.rank;
  std::vector<double> d_logits(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    const double s = trace.gate[c];
    d_logits[c] = d_gate[c] * s * (1.0 - s);
  }
  std::vector<double> d_activ(r, 0.0);
  matvec_t_backward(g.w_up, trace.activ, d_logits, d_activ, grad ? &grad->w_up : nullptr);
  std::vector<double> d_hidden(r);
  for (std::size_t j = 0; j < r; ++j) d_hidden[j] = d_activ[j] * gelu_grad(trace.hidden[j]);
  std::vector<double> d_pooled(c_count, 0.0);
  matvec_t_backward(g.w_down, trace.pooled.span(), d_hidden, d_pooled, grad ? &grad->w_down : nullptr);
  if (grad) {
    for (std::size_t c = 0; c < c_count; ++c) grad->b_up[c] += d_logits[c];
    for (std::size_t j = 0; j < r; ++j) grad->b_down[j] += d_hidden[j];
  }
  gem_pool_backward(fm, g.gate_p, trace.pooled, d_pooled, d_values, grad ? &grad->gate_p.log_p : nullptr);
}

// ---------------------------------------------------------- GeM-FC and G2M

GemFcTrace gem_fc_trace(const FeatureMap& fm, const GemFcParams& params) {
  GemFcTrace t;
  t.pooled = gem_pool(fm, params.main_p);
  t.pre_norm = affine_t(params.w_fc, t.pooled.span(), params.b_fc);
  std::vector<double> out = t.pre_norm;
  t.norm = l2_normalize(out);
  t.out = Tensor::vector(std::move(out));
  return t;
}

Descriptor gem_fc_forward(const FeatureMap& fm, const GemFcParams& params) { return gem_fc_trace(fm, params).out; }

void gem_fc_backward(const FeatureMap& fm, const GemFcParams& params, const GemFcTrace& trace,
                     std::span<const double> d_out, GemFcParams* grad, std::span<double> d_values) {
  std::vector<double> d_pre(trace.pre_norm.size());
  l2_normalize_backward(trace.out.span(), trace.norm, d_out, d_pre);
  std::vector<double> d_pooled(fm.channels, 0.0);
  matvec_t_backward(params.w_fc, trace.pooled.span(), d_pre, d_pooled, grad ? &grad->w_fc : nullptr);
  if (grad) {
    for (std::size_t d = 0; d < d_pre.size(); ++d) grad->b_fc[d] += d_pre[d];
  }
  gem_pool_backward(fm, params.main_p, trace.pooled, d_pooled, d_values, grad ? &grad->main_p.log_p : nullptr);
}

G2mTrace g2m_trace(const FeatureMap& fm, const G2mParams& params) {
  G2mTrace t;
  t.pooled = gem_pool(fm, params.main_p);
  t.gca = gca_forward(fm, params.gca);
  t.gated.resize(fm.channels);
  for (std::size_t c = 0; c < fm.channels; ++c) t.gated[c] = t.pooled[c] * t.gca.gate[c];
  t.pre_norm = affine_t(params.w_fc, t.gated, params.b_fc);
  std::vector<double> out = t.pre_norm;
  t.norm = l2_normalize(out);
  t.out = Tensor::vector(std::move(out));
  return t;
}

Descriptor g2m_forward(const FeatureMap& fm, const G2mParams& params) { return g2m_trace(fm, params).out; }

void g2m_backward(const FeatureMap& fm, const G2mParams& params, const G2mTrace& trace, std::span<const double> d_out,
                  G2mParams* grad, std::span<double> d_values) {
  const std::size_t c_count = fm.channels;
  std::vector<double> d_pre(trace.pre_norm.size());
  l2_normalize_backward(trace.out.span(), trace.norm, d_out, d_pre);
  std::vector<double> d_gated(c_count, 0.0);
  matvec_t_backward(params.w_fc, trace.gated, d_pre, d_gated, grad ? &grad->w_fc : nullptr);
  if (grad) {
    for (std::size_t d = 0; d < d_pre.size(); ++d) grad->b_fc[d] += d_pre[d];
  }
  std::vector<double> d_pooled(c_count), d_gate(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    d_pooled[c] = d_gated[c] * trace.gca.gate[c];
    d_gate[c] = d_gated[c] * trace.pooled[c];
  }
  gem_pool_backward(fm, params.main_p, trace.pooled, d_pooled, d_values, grad ? &grad->main_p.log_p : nullptr);
  gca_backward(fm, params.gca, trace.gca, d_gate, grad ? &grad->gca : nullptr, d_values);
}

// ----------------------------------------------------------------- NetVLAD

VladCore vlad_core(const FeatureMap& fm, const NetVladParams& params) {
  require(params.centers.rank() == 2 && params.centers.dim(0) >= 1, ErrorCode::InvalidArgument,
          "NetVLAD needs K >= 1 cluster centers");
  check_channels(fm, params.channels(), "netvlad");
  VladCore core;
  const std::size_t K = params.clusters(), C = fm.channels, N = fm.locations();
  core.clusters = K;
  core.channels = C;
  core.locations = N;
  core.points.resize(N * C);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < N; ++i) core.points[i * C + c] = fm.at(c, i);
  }

  core.assignment.resize(N * K);
  std::vector<double> logits(K);
  for (std::size_t i = 0; i < N; ++i) {
    const std::span<const double> x(core.points.data() + i * C, C);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      logits[k] = dot(params.assign_w.span().subspan(k * C, C), x) + params.assign_b[k];
      top = std::max(top, logits[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      logits[k] = std::exp(logits[k] - top);
      z += logits[k];
    }
    for (std::size_t k = 0; k < K; ++k) core.assignment[i * K + k] = logits[k] / z;
  }

  core.residual.assign(K * C, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double* v = core.residual.data() + k * C;
    double mass = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double a = core.assignment[i * K + k];
      mass += a;
      const double* x = core.points.data() + i * C;
      for (std::size_t c = 0; c < C; ++c) v[c] += a * x[c];
    }
    for (std::size_t c = 0; c < C; ++c) v[c] -= mass * params.centers.at(k, c);
  }

  core.normalized = core.residual;
  core.norms.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    core.norms[k] = l2_normalize(std::span<double>(core.normalized.data() + k * C, C));
  }
  return core;
}

void vlad_core_backward(const VladCore& core, const NetVladParams& params, std::span<const double> d_normalized,
                        NetVladParams* grad, std::span<double> d_values) {
  const std::size_t K = core.clusters, C = core.channels, N = core.locations;
  std::vector<double> d_res(K * C);
  for (std::size_t k = 0; k < K; ++k) {
    l2_normalize_backward(std::span<const double>(core.normalized.data() + k * C, C), core.norms[k],
                          d_normalized.subspan(k * C, C), std::span<double>(d_res.data() + k * C, C));
  }

  if (grad) {
    for (std::size_t k = 0; k < K; ++k) {
      double mass = 0.0;
      for (std::size_t i = 0; i < N; ++i) mass += core.assignment[i * K + k];
      for (std::size_t c = 0; c < C; ++c) grad->centers.at(k, c) -= mass * d_res[k * C + c];
    }
  }

  // dV_k . c_k, reused for every location.
  std::vector<double> res_dot_center(K);
  for (std::size_t k = 0; k < K; ++k) {
    res_dot_center[k] = dot(std::span<const double>(d_res.data() + k * C, C), params.centers.span().subspan(k * C, C));
  }

  std::vector<double> d_assign(K), d_logit(K), d_x(C);
  for (std::size_t i = 0; i < N; ++i) {
    const std::span<const double> x(core.points.data() + i * C, C);
    const double* a = core.assignment.data() + i * K;
    double mean_d = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      d_assign[k] = dot(std::span<const double>(d_res.data() + k * C, C), x) - res_dot_center[k];
      mean_d += a[k] * d_assign[k];
    }
    for (std::size_t k = 0; k < K; ++k) d_logit[k] = a[k] * (d_assign[k] - mean_d);

    if (grad) {
      for (std::size_t k = 0; k < K; ++k) {
        if (d_logit[k] == 0.0) continue;
        grad->assign_b[k] += d_logit[k];
        double* gw = grad->assign_w.data().data() + k * C;
        for (std::size_t c = 0; c < C; ++c) gw[c] += d_logit[k] * x[c];
      }
    }
    if (!d_values.empty()) {
      std::fill(d_x.begin(), d_x.end(), 0.0);
      for (std::size_t k = 0; k < K; ++k) {
        const double* dr = d_res.data() + k * C;
        const double* w = params.assign_w.data().data() + k * C;
        for (std::size_t c = 0; c < C; ++c) d_x[c] += a[k] * dr[c] + d_logit[k] * w[c];
      }
      for (std::size_t c = 0; c < C; ++c) d_values[c * N + i] += d_x[c];
    }
  }
}

NetVladTrace netvlad_trace(const FeatureMap& fm, const NetVladParams& params) {
  NetVladTrace t;
  t.core = vlad_core(fm, params);
  std::vector<double> flat = t.core.normalized;
  t.norm = l2_normalize(flat);
  t.out = Tensor::vector(std::move(flat));
  return t;
}

Descriptor netvlad_forward(const FeatureMap& fm, const NetVladParams& params) { return netvlad_trace(fm, params).out; }

void netvlad_backward(const NetVladParams& params, const NetVladTrace& trace, std::span<const double> d_out,
                      NetVladParams* grad, std::span<double> d_values) {
  std::vector<double> d_flat(trace.out.size());
  l2_normalize_backward(trace.out.span(), trace.norm, d_out, d_flat);
  vlad_core_backward(trace.core, params, d_flat, grad, d_values);
}

// --------------------------------------------------------------------- NVL

namespace {

void check_projection(const NvlParams& params) {
  require(params.w_proj.rank() == 2 && params.w_proj.dim(0) == params.vlad.channels(), ErrorCode::InvalidArgument,
          "NVL projection must be [C, C'] with C = " + std::to_string(params.vlad.channels()));
  require(params.w_proj.dim(1) <= params.w_proj.dim(0), ErrorCode::InvalidArgument,
          "NVL projection dimension C'=" + std::to_string(params.w_proj.dim(1)) + " exceeds C=" +
              std::to_string(params.w_proj.dim(0)));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

// projected[K, C'] = normalized[K, C] * w_proj[C, C']
void project_clusters(const VladCore& core, const Tensor& w_proj, std::vector<double>& projected) {
  const auto K = static_cast<Eigen::Index>(core.clusters), C = static_cast<Eigen::Index>(core.channels),
             P = static_cast<Eigen::Index>(w_proj.dim(1));
  RowMap(projected.data(), K, P).noalias() =
      ConstRowMap(core.normalized.data(), K, C) * ConstRowMap(w_proj.data().data(), C, P);
}

// Backward through the shared projection; returns dL/d(normalized residuals).
std::vector<double> project_clusters_backward(const VladCore& core, const Tensor& w_proj,
                                              std::span<const double> d_projected, Tensor* d_w_proj,
                                              bool input_grad = true) {
  const auto K = static_cast<Eigen::Index>(core.clusters), C = static_cast<Eigen::Index>(core.channels),
             P = static_cast<Eigen::Index>(w_proj.dim(1));
  const ConstRowMap d_proj(d_projected.data(), K, P);
  std::vector<double> d_norm(input_grad ? core.clusters * core.channels : 0, 0.0);
  if (input_grad) {
    RowMap(d_norm.data(), K, C).noalias() = d_proj * ConstRowMap(w_proj.data().data(), C, P).transpose();
  }
  if (d_w_proj) {
    RowMap(d_w_proj->data().data(), C, P).noalias() += ConstRowMap(core.normalized.data(), K, C).transpose() * d_proj;
  }
  return d_norm;
}

}  // namespace

NvlTrace nvl_from_core(VladCore core, const NvlParams& params) {
  check_projection(params);
  NvlTrace t;
  t.core = std::move(core);
  t.projected.assign(t.core.clusters * params.proj_dim(), 0.0);
  project_clusters(t.core, params.w_proj, t.projected);
  std::vector<double> out = t.projected;
  t.norm = l2_normalize(out);
  t.out = Tensor::vector(std::move(out));
  return t;
}

NvlTrace nvl_trace(const FeatureMap& fm, const NvlParams& params) {
  check_projection(params);
  return nvl_from_core(vlad_core(fm, params.vlad), params);
}

Descriptor nvl_forward(const FeatureMap& fm, const NvlParams& params) { return nvl_trace(fm, params).out; }

void nvl_backward(const NvlParams& params, const NvlTrace& trace, std::span<const double> d_out, NvlParams* grad,
                  std::span<double> d_values) {
  std::vector<double> d_proj(trace.projected.size());
  l2_normalize_backward(trace.out.span(), trace.norm, d_out, d_proj);
  const auto d_norm = project_clusters_backward(trace.core, params.w_proj, d_proj, grad ? &grad->w_proj : nullptr);
  if (grad == nullptr && d_values.empty()) return;
  vlad_core_backward(trace.core, params.vlad, d_norm, grad ? &grad->vlad : nullptr, d_values);
}

void nvl_projection_backward(const NvlParams& params, const NvlTrace& trace, std::span<const double> d_out,
                             Tensor* d_w_proj) {
  std::vector<double> d_proj(trace.projected.size());
  l2_normalize_backward(trace.out.span(), trace.norm, d_out, d_proj);
  project_clusters_backward(trace.core, params.w_proj, d_proj, d_w_proj, false);
}

NvlTrace nvl_cls_trace(const FeatureMap& fm, const NvlParams& params, const Tensor& w_cls) {
  require(fm.cls.has_value(), ErrorCode::InvalidArgument, "nvl_cls_forward requires a CLS vector");
  require(w_cls.rank() == 2 && w_cls.dim(0) == fm.channels, ErrorCode::InvalidArgument,
          "CLS projection must be [C, 256]");
  check_projection(params);
  NvlTrace t;
  t.core = vlad_core(fm, params.vlad);
  const std::size_t body = t.core.clusters * params.proj_dim();
  t.projected.assign(body + w_cls.dim(1), 0.0);
  project_clusters(t.core, params.w_proj, t.projected);
  matvec_t(w_cls, fm.cls->span(), std::span<double>(t.projected.data() + body, w_cls.dim(1)));
  std::vector<double> out = t.projected;
  t.norm = l2_normalize(out);
  t.out = Tensor::vector(std::move(out));
  return t;
}

Descriptor nvl_cls_forward(const FeatureMap& fm, const NvlParams& params, const Tensor& w_cls) {
  return nvl_cls_trace(fm, params, w_cls).out;
}

void nvl_cls_backward(const FeatureMap& fm, const NvlParams& params, const Tensor& w_cls, const NvlTrace& trace,
                      std::span<const double> d_out, NvlParams* grad, Tensor* d_w_cls, FeatureMapGrad* d_fm) {
  std::vector<double> d_proj(trace.projected.size());
  l2_normalize_backward(trace.out.span(), trace.norm, d_out, d_proj);
  const std::size_t body = trace.core.clusters * params.proj_dim();
  const auto d_cls_proj = std::span<const double>(d_proj).subspan(body);
  std::span<double> d_cls;
  if (d_fm && d_fm->cls) d_cls = d_fm->cls->span();
  matvec_t_backward(w_cls, fm.cls->span(), d_cls_proj, d_cls, d_w_cls);
  const auto d_norm = project_clusters_backward(trace.core, params.w_proj, std::span<const double>(d_proj).first(body),
                                                grad ? &grad->w_proj : nullptr);
  vlad_core_backward(trace.core, params.vlad, d_norm, grad ? &grad->vlad : nullptr,
                     d_fm ? d_fm->values.span() : std::span<double>());
}

// ------------------------------------------------------------------ k-means

Tensor kmeans(const Tensor& samples, std::size_t clusters, std::uint64_t seed, int iterations) {
  require(samples.rank() == 2, ErrorCode::InvalidArgument, "kmeans samples must be [N,C]");
  const std::size_t N = samples.dim(0), C = samples.dim(1);
  require(clusters >= 1 && N >= clusters, ErrorCode::InvalidArgument,
          "kmeans needs at least K=" + std::to_string(clusters) + " samples, got " + std::to_string(N));
  std::mt19937_64 rng(seed);
  auto row = [&](std::size_t i) { return samples.span().subspan(i * C, C); };
  auto sqdist = [&](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return s;
  };

  Tensor centers({clusters, C});
  auto set_center = [&](std::size_t k, std::size_t i) {
    std::copy_n(row(i).begin(), C, centers.data().begin() + static_cast<std::ptrdiff_t>(k * C));
  };
  std::vector<double> best(N, std::numeric_limits<double>::infinity());
  set_center(0, std::uniform_int_distribution<std::size_t>(0, N - 1)(rng));
  for (std::size_t k = 1; k < clusters; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      best[i] = std::min(best[i], sqdist(row(i), centers.span().subspan((k - 1) * C, C)));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < N; ++pick) {
        u -= best[pick];
        if (u <= 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, N - 1)(rng);
    }
    set_center(k, pick);
  }

  std::vector<std::size_t> label(N, 0);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < N; ++i) {
      std::size_t arg = 0;
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < clusters; ++k) {
        const double dk = sqdist(row(i), centers.span().subspan(k * C, C));
        if (dk < d) {
          d = dk;
          arg = k;
        }
      }
      changed |= (arg != label[i]) || it == 0;
      label[i] = arg;
    }
    if (!changed) break;
    Tensor sums({clusters, C});
    std::vector<std::size_t> counts(clusters, 0);
    for (std::size_t i = 0; i < N; ++i) {
      ++counts[label[i]];
      for (std::size_t c = 0; c < C; ++c) sums.at(label[i], c) += samples.at(i, c);
    }
    for (std::size_t k = 0; k < clusters; ++k) {
      if (counts[k] == 0) {
        // Re-seed an empty cluster at the sample farthest from its center.
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < N; ++i) {
          const double di = sqdist(row(i), centers.span().subspan(label[i] * C, C));
          if (di > fd) {
            fd = di;
            far = i;
          }
        }
        set_center(k, far);
        continue;
      }
      for (std::size_t c = 0; c < C; ++c) centers.at(k, c) = sums.at(k, c) / static_cast<double>(counts[k]);
    }
  }
  return centers;
}

}  // namespace vpr
