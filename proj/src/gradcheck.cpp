#include "vpr/gradcheck.hpp"

#include <random>

#include "vpr/backbone.hpp"
#include "vpr/loss.hpp"

namespace vpr {

namespace {

constexpr std::size_t kC = 6, kH = 3, kW = 3;

Tensor uniform(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

double weighted(const Tensor& out, const Tensor& weights) { return dot(out.span(), weights.span()); }

template <class P>
void load(P& p, const ParamMap& pm) {
  for (auto& [name, t] : named_tensors(p, "p")) *t = pm.at(name);
}

template <class P>
void store(const P& p, ParamMap& pm) {
  for (auto& [name, t] : named_tensors(p, "p")) pm[name] = *t;
}

// Checks gradients w.r.t. the map values and every tensor of `params`.
// objective(x, p, d_values, grad) returns the scalar and, when grad is
// non-null, accumulates its gradients.
template <class P, class Objective>
GradReport check_head(const std::string& name, const FeatureMap& fm, const P& params, Objective objective,
                      const GradCheckOptions& opts) {
  ParamMap init{{"input", fm.values}};
  store(params, init);
  GradFn f = [&](const ParamMap& pm, ParamMap* grad) {
    FeatureMap x = fm;
    x.values = pm.at("input");
    P p = params;
    load(p, pm);
    if (!grad) return objective(x, p, std::span<double>(), nullptr);
    P g = zeros_like(p);
    Tensor dx = Tensor::zeros_like(x.values);
    const double v = objective(x, p, dx.span(), &g);
    (*grad)["input"] = dx;
    store(g, *grad);
    return v;
  };
  return grad_check(name, f, init, opts.eps, opts.tol);
}

NetVladParams soft_vlad(std::size_t k, std::size_t c, std::mt19937_64& rng) {
  // Moderate assignment logits keep the softmax away from saturation.
  return NetVladParams{uniform({k, c}, rng, 0.0, 1.0), Tensor::randn({k, c}, rng, 0.4), Tensor::randn({k}, rng, 0.4)};
}

}  // namespace

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"gem", "gca", "gemfc", "g2m", "netvlad", "nvl", "nvl_cls", "backbone",
                                              "msloss"};
  return names;
}

GradReport gradcheck_component(const std::string& name, const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed * 7919 + 17);
  const FeatureMap fm = FeatureMap::make(uniform({kC, kH, kW}, rng, 0.2, 1.5));

  if (name == "gem") {
    GemParams p = GemParams::from_exponents(uniform({kC}, rng, 1.0, 4.0));
    const Tensor w = Tensor::randn({kC}, rng);
    return check_head(name, fm, p,
                      [&](const FeatureMap& x, const GemParams& q, std::span<double> dx, GemParams* g) {
                        const Tensor out = gem_pool(x, q);
                        if (g) gem_pool_backward(x, q, out, w.span(), dx, &g->log_p);
                        return weighted(out, w);
                      },
                      opts);
  }
  if (name == "gca") {
    GcaParams p = GcaParams::init(kC, 3, rng);
    p.w_up = Tensor::randn({3, kC}, rng, 0.5);
    p.b_down = Tensor::randn({3}, rng, 0.2);
    p.b_up = Tensor::randn({kC}, rng, 0.2);
    p.gate_p = GemParams::from_exponents(uniform({kC}, rng, 1.0, 4.0));
    const Tensor w = Tensor::randn({kC}, rng);
    return check_head(name, fm, p,
                      [&](const FeatureMap& x, const GcaParams& q, std::span<double> dx, GcaParams* g) {
                        const GcaTrace t = gca_forward(x, q);
                        if (g) gca_backward(x, q, t, w.span(), g, dx);
                        return weighted(t.gate, w);
                      },
                      opts);
  }
  if (name == "gemfc") {
    GemFcParams p = GemFcParams::init(kC, 4, rng);
    p.b_fc = Tensor::randn({4}, rng, 0.2);
    const Tensor w = Tensor::randn({4}, rng);
    return check_head(name, fm, p,
                      [&](const FeatureMap& x, const GemFcParams& q, std::span<double> dx, GemFcParams* g) {
                        const GemFcTrace t = gem_fc_trace(x, q);
                        if (g) gem_fc_backward(x, q, t, w.span(), g, dx);
                        return weighted(t.out, w);
                      },
                      opts);
  }
  if (name == "g2m") {
    G2mParams p = G2mParams::init(kC, 3, 4, rng);
    p.gca.w_up = Tensor::randn({3, kC}, rng, 0.5);
    p.gca.b_up = Tensor::randn({kC}, rng, 0.2);
    p.b_fc = Tensor::randn({4}, rng, 0.2);
    const Tensor w = Tensor::randn({4}, rng);
    return check_head(name, fm, p,
                      [&](const FeatureMap& x, const G2mParams& q, std::span<double> dx, G2mParams* g) {
                        const G2mTrace t = g2m_trace(x, q);
                        if (g) g2m_backward(x, q, t, w.span(), g, dx);
                        return weighted(t.out, w);
                      },
                      opts);
  }
  if (name == "netvlad") {
    const NetVladParams p = soft_vlad(4, kC, rng);
    const Tensor w = Tensor::randn({4 * kC}, rng);
    return check_head(name, fm, p,
                      [&](const FeatureMap& x, const NetVladParams& q, std::span<double> dx, NetVladParams* g) {
                        const NetVladTrace t = netvlad_trace(x, q);
                        if (g) netvlad_backward(q, t, w.span(), g, dx);
                        return weighted(t.out, w);
                      },
                      opts);
  }
  if (name == "nvl") {
    const NvlParams p = NvlParams::init(soft_vlad(4, kC, rng), 3, rng);
    const Tensor w = Tensor::randn({4 * 3}, rng);
    return check_head(name, fm, p,
                      [&](const FeatureMap& x, const NvlParams& q, std::span<double> dx, NvlParams* g) {
                        const NvlTrace t = nvl_trace(x, q);
                        if (g) nvl_backward(q, t, w.span(), g, dx);
                        return weighted(t.out, w);
                      },
                      opts);
  }
  if (name == "nvl_cls") {
    NvlParams p = NvlParams::init(soft_vlad(3, kC, rng), 2, rng);
    const Tensor w_cls0 = Tensor::randn({kC, kClsProjectionDim}, rng, 0.05);
    const Tensor cls0 = uniform({kC}, rng, 0.2, 1.5);
    const Tensor w = Tensor::randn({3 * 2 + kClsProjectionDim}, rng);
    ParamMap init{{"input", fm.values}, {"cls", cls0}, {"w_cls", w_cls0}};
    store(p, init);
    GradFn f = [&](const ParamMap& pm, ParamMap* grad) {
      FeatureMap x = FeatureMap::make(pm.at("input"), pm.at("cls"));
      NvlParams q = p;
      load(q, pm);
      const Tensor& w_cls = pm.at("w_cls");
      const NvlTrace t = nvl_cls_trace(x, q, w_cls);
      if (grad) {
        NvlParams g = zeros_like(q);
        Tensor d_w_cls = Tensor::zeros_like(w_cls);
        FeatureMapGrad d_fm = FeatureMapGrad::zeros_for(x);
        nvl_cls_backward(x, q, w_cls, t, w.span(), &g, &d_w_cls, &d_fm);
        (*grad)["input"] = d_fm.values;
        (*grad)["cls"] = *d_fm.cls;
        (*grad)["w_cls"] = d_w_cls;
        store(g, *grad);
      }
      return weighted(t.out, w);
    };
    return grad_check(name, f, init, opts.eps, opts.tol);
  }
  if (name == "backbone") {
    ToyBackbone b = ToyBackbone::init(kC, 2, rng, 1, 2);
    for (auto& blk : b.blocks) {
      blk.w = Tensor::randn({kC, kC}, rng, 0.3);
      blk.b = Tensor::randn({kC}, rng, 0.2);
    }
    const FeatureMap tokens = FeatureMap::make(Tensor::randn({kC, kH, kW}, rng));
    const Tensor w = Tensor::randn({kC * kH * kW}, rng);
    const Tensor wc = Tensor::randn({kC}, rng);
    ParamMap init;
    for (const auto& name_t : trainable_names(b, "b")) {
      for (auto& [n, t] : named_tensors(b, "b")) {
        if (n == name_t) init[n] = *t;
      }
    }
    GradFn f = [&](const ParamMap& pm, ParamMap* grad) {
      ToyBackbone q = b;
      for (auto& [n, t] : named_tensors(q, "b")) {
        if (pm.count(n)) *t = pm.at(n);
      }
      BackboneTrace trace;
      const FeatureMap out = backbone_forward_tokens(tokens, q, &trace);
      if (grad) {
        ToyBackbone g = zeros_like(q);
        const FeatureMapGrad d{Tensor({kC, kH, kW}, w.data()), wc};
        backbone_backward(q, trace, d, &g);
        for (auto& [n, t] : named_tensors(g, "b")) {
          if (pm.count(n)) (*grad)[n] = *t;
        }
      }
      return weighted(Tensor({out.values.size()}, out.values.data()), w) + weighted(*out.cls, wc);
    };
    return grad_check(name, f, init, opts.eps, opts.tol);
  }
  if (name == "msloss") {
    constexpr std::size_t B = 8, D = 5;
    std::vector<std::int64_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
    Tensor x0 = Tensor::randn({B, D}, rng);
    for (std::size_t i = 0; i < B; ++i) l2_normalize(x0.span().subspan(i * D, D));
    // Lower scale and threshold keep both log-sum-exp terms active.
    MsLossConfig cfg;
    cfg.beta = 10.0;
    cfg.lam = 0.2;
    cfg.eps_margin = 1.0;
    GradFn f = [&](const ParamMap& pm, ParamMap* grad) {
      const Tensor& x = pm.at("descriptors");
      std::vector<Descriptor> descs;
      for (std::size_t i = 0; i < B; ++i) {
        descs.push_back(Tensor({D}, std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(i * D),
                                                        x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * D))));
      }
      std::vector<Tensor> d;
      const double loss = ms_loss_descriptors(descs, labels, cfg, grad ? &d : nullptr);
      if (grad) {
        Tensor g({B, D});
        for (std::size_t i = 0; i < B; ++i) std::copy(d[i].data().begin(), d[i].data().end(), g.data().begin() + static_cast<std::ptrdiff_t>(i * D));
        (*grad)["descriptors"] = g;
      }
      return loss;
    };
    return grad_check(name, f, ParamMap{{"descriptors", x0}}, opts.eps, opts.tol);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown gradient-check component '" + name + "'");
}

}  // namespace vpr
