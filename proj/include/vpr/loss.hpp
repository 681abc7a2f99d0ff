#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vpr/aggregation.hpp"

namespace vpr {

/// Multi-similarity loss constants: positive scale, negative scale,
/// similarity threshold and mining margin.
struct MsLossConfig {
  double alpha = 1.0;
  double beta = 50.0;
  double lam = 0.5;
  double eps_margin = 0.1;

  void validate() const;
};

struct SimilarityMatrix {
  Tensor values;                 // [B, B]
  std::vector<std::int64_t> labels;

  /// Pairwise dot products of (unit-norm) descriptors.
  static SimilarityMatrix from_descriptors(std::span<const Descriptor> descriptors, std::vector<std::int64_t> labels);
  std::size_t batch() const { return labels.size(); }
};

struct MinedPairs {
  std::vector<std::vector<std::size_t>> positives;  // P_i
  std::vector<std::vector<std::size_t>> negatives;  // N_i

  bool all_empty() const;
};

/// Hard-pair mining: a negative is kept when it is more similar than the
/// hardest positive minus the margin, a positive when it is less similar than
/// the hardest negative plus the margin. When an anchor has no pairs of the
/// opposite kind, its pairs are kept unfiltered.
MinedPairs mine_pairs(const SimilarityMatrix& sim, const MsLossConfig& cfg);

/// Mean over anchors of the two log-sum-exp terms over the mined sets.
/// When `d_sim` is non-null it receives dL/dS (mined sets held fixed).
double ms_loss(const SimilarityMatrix& sim, const MsLossConfig& cfg, Tensor* d_sim = nullptr);

/// Loss straight from descriptors; `d_descriptors` (optional) is resized to
/// match and receives dL/dd_i.
double ms_loss_descriptors(std::span<const Descriptor> descriptors, const std::vector<std::int64_t>& labels,
                           const MsLossConfig& cfg, std::vector<Tensor>* d_descriptors = nullptr);

}  // namespace vpr
