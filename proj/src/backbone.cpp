#include "vpr/backbone.hpp"

#include <cmath>

namespace vpr {

ToyBackbone ToyBackbone::init(std::size_t channels, std::size_t depth, std::mt19937_64& rng, std::size_t patch,
                              std::size_t trainable_tail) {
  if (patch == 0 || channels == 0) throw Error(ErrorCode::InvalidArgument, "backbone needs positive patch and width");
  ToyBackbone b;
  b.patch = patch;
  b.trainable_tail = trainable_tail;
  const double fan_in = 3.0 * static_cast<double>(patch * patch);
  b.patch_embed = Tensor::randn({3 * patch * patch, channels}, rng, 1.0 / std::sqrt(fan_in));
  for (std::size_t i = 0; i < depth; ++i) {
    b.blocks.push_back({Tensor::randn({channels, channels}, rng, 0.1 / std::sqrt(static_cast<double>(channels))),
                        Tensor::zeros({channels})});
  }
  return b;
}

ToyBackbone zeros_like(const ToyBackbone& b) {
  ToyBackbone z;
  z.patch = b.patch;
  z.trainable_tail = b.trainable_tail;
  z.patch_embed = Tensor::zeros_like(b.patch_embed);
  for (const auto& blk : b.blocks) z.blocks.push_back({Tensor::zeros_like(blk.w), Tensor::zeros_like(blk.b)});
  return z;
}

NamedTensors named_tensors(ToyBackbone& b, const std::string& prefix) {
  NamedTensors out{{prefix + ".patch_embed", &b.patch_embed}};
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    const auto p = prefix + ".block" + std::to_string(i);
    out.emplace_back(p + ".w", &b.blocks[i].w);
    out.emplace_back(p + ".b", &b.blocks[i].b);
  }
  return out;
}

std::vector<std::string> trainable_names(const ToyBackbone& b, const std::string& prefix) {
  std::vector<std::string> out;
  for (std::size_t i = b.first_trainable(); i < b.blocks.size(); ++i) {
    const auto p = prefix + ".block" + std::to_string(i);
    out.push_back(p + ".w");
    out.push_back(p + ".b");
  }
  return out;
}

namespace {

FeatureMap run_blocks(std::vector<double> tokens, std::size_t height, std::size_t width, const ToyBackbone& b,
                      BackboneTrace* trace) {
  const std::size_t C = b.channels(), N = height * width;
  if (trace) {
    trace->locations = N;
    trace->inputs.clear();
    trace->hidden.clear();
  }
  std::vector<double> hidden(N * C);
  for (const auto& blk : b.blocks) {
    for (std::size_t i = 0; i < N; ++i) {
      std::span<double> h(hidden.data() + i * C, C);
      matvec_t(blk.w, std::span<const double>(tokens.data() + i * C, C), h);
      for (std::size_t c = 0; c < C; ++c) h[c] += blk.b[c];
    }
    if (trace) {
      trace->inputs.push_back(tokens);
      trace->hidden.push_back(hidden);
    }
    for (std::size_t j = 0; j < N * C; ++j) tokens[j] += gelu(hidden[j]);
  }
  if (trace) trace->last = tokens;

  Tensor values({C, height, width});
  Tensor cls({C});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      const double v = std::max(0.0, gelu(tokens[i * C + c]) + kActivationOffset);
      values[c * N + i] = v;
      cls[c] += v / static_cast<double>(N);
    }
  }
  return FeatureMap::make(std::move(values), std::move(cls));
}

}  // namespace

FeatureMap backbone_forward_tokens(const FeatureMap& tokens, const ToyBackbone& b, BackboneTrace* trace) {
  const std::size_t C = b.channels(), N = tokens.locations();
  if (tokens.channels != C) {
    throw Error(ErrorCode::InvalidArgument, "backbone width " + std::to_string(C) + " does not match feature map with " +
                                                std::to_string(tokens.channels) + " channels");
  }
  std::vector<double> t(N * C);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < N; ++i) t[i * C + c] = tokens.at(c, i);
  }
  return run_blocks(std::move(t), tokens.height, tokens.width, b, trace);
}

FeatureMap toy_forward(const Tensor& image, const ToyBackbone& b, BackboneTrace* trace) {
  const std::size_t P = b.patch;
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw Error(ErrorCode::InvalidArgument, "toy_forward expects a [3,H,W] image, got " + shape_string(image.shape()));
  }
  const std::size_t hp = image.dim(1), wp = image.dim(2);
  if (hp % P != 0 || wp % P != 0) {
    throw Error(ErrorCode::InvalidArgument, "image size " + std::to_string(hp) + "x" + std::to_string(wp) +
                                                " is not divisible by patch size " + std::to_string(P));
  }
  image.require_finite("image");
  const std::size_t H = hp / P, W = wp / P, C = b.channels();
  std::vector<double> tokens(H * W * C);
  std::vector<double> patch(3 * P * P);
  for (std::size_t py = 0; py < H; ++py) {
    for (std::size_t px = 0; px < W; ++px) {
      std::size_t j = 0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t dy = 0; dy < P; ++dy) {
          for (std::size_t dx = 0; dx < P; ++dx) {
            patch[j++] = image[(ch * hp + py * P + dy) * wp + px * P + dx];
          }
        }
      }
      matvec_t(b.patch_embed, patch, std::span<double>(tokens.data() + (py * W + px) * C, C));
    }
  }
  return run_blocks(std::move(tokens), H, W, b, trace);
}

void backbone_backward(const ToyBackbone& b, const BackboneTrace& trace, const FeatureMapGrad& d_out,
                       ToyBackbone* grad) {
  const std::size_t C = b.channels(), N = trace.locations;
  const double inv_n = 1.0 / static_cast<double>(N);
  std::vector<double> d_t(N * C);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      const double t = trace.last[i * C + c];
      if (gelu(t) + kActivationOffset <= 0.0) continue;
      double g = d_out.values[c * N + i];
      if (d_out.cls) g += (*d_out.cls)[c] * inv_n;
      d_t[i * C + c] = g * gelu_grad(t);
    }
  }
  std::vector<double> d_h(C);
  for (std::size_t l = b.blocks.size(); l-- > b.first_trainable();) {
    const auto& blk = b.blocks[l];
    const auto& in = trace.inputs[l];
    const auto& hid = trace.hidden[l];
    const bool need_input_grad = l > b.first_trainable();
    for (std::size_t i = 0; i < N; ++i) {
      std::span<double> dt(d_t.data() + i * C, C);
      for (std::size_t c = 0; c < C; ++c) d_h[c] = dt[c] * gelu_grad(hid[i * C + c]);
      if (grad) {
        for (std::size_t c = 0; c < C; ++c) grad->blocks[l].b[c] += d_h[c];
      }
      // Residual path keeps dt; the block adds W d_h.
      matvec_t_backward(blk.w, std::span<const double>(in.data() + i * C, C), d_h,
                        need_input_grad ? dt : std::span<double>(), grad ? &grad->blocks[l].w : nullptr);
    }
  }
}

}  // namespace vpr
