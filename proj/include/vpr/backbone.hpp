#pragma once

// Small trainable stand-in for a ViT feature extractor: a frozen linear patch
// embedding followed by residual per-token blocks t <- t + gelu(W^T t + b).
// Only the last `trainable_tail` blocks take gradient steps. The output is
// relu(gelu(t) + kActivationOffset), which keeps every value nonnegative for
// GeM pooling.

#include <cstddef>
#include <random>
#include <vector>

#include "vpr/aggregation.hpp"

namespace vpr {

inline constexpr double kActivationOffset = 0.17;  // ~ |min gelu|

struct BackboneBlock {
  Tensor w;  // [C, C]
  Tensor b;  // [C]
};

struct ToyBackbone {
  std::size_t patch = 14;
  Tensor patch_embed;  // [3 P^2, C], frozen
  std::vector<BackboneBlock> blocks;
  std::size_t trainable_tail = 4;

  static ToyBackbone init(std::size_t channels, std::size_t depth, std::mt19937_64& rng, std::size_t patch = 14,
                          std::size_t trainable_tail = 4);

  std::size_t channels() const { return patch_embed.dim(1); }
  std::size_t first_trainable() const {
    return blocks.size() > trainable_tail ? blocks.size() - trainable_tail : 0;
  }
  bool block_trainable(std::size_t i) const { return i >= first_trainable(); }
};

ToyBackbone zeros_like(const ToyBackbone& b);
NamedTensors named_tensors(ToyBackbone& b, const std::string& prefix);
/// Names of the tensors that receive gradients.
std::vector<std::string> trainable_names(const ToyBackbone& b, const std::string& prefix);

struct BackboneTrace {
  std::size_t locations = 0;
  std::vector<std::vector<double>> inputs;  // per block: tokens [N, C] entering it
  std::vector<std::vector<double>> hidden;  // per block: W^T t + b, [N, C]
  std::vector<double> last;                 // tokens after the final block
};

/// Runs the blocks over the locations of an already-embedded token map.
FeatureMap backbone_forward_tokens(const FeatureMap& tokens, const ToyBackbone& b, BackboneTrace* trace = nullptr);

/// Patchifies a [3, hp, wp] image, embeds, and runs the blocks. The CLS
/// vector is the mean output token.
FeatureMap toy_forward(const Tensor& image, const ToyBackbone& b, BackboneTrace* trace = nullptr);

/// Accumulates gradients for the trainable tail into `grad` from dL/d(output
/// map). Frozen blocks are left untouched.
void backbone_backward(const ToyBackbone& b, const BackboneTrace& trace, const FeatureMapGrad& d_out,
                       ToyBackbone* grad);

}  // namespace vpr
