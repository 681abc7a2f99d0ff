#pragma once

#include <cstddef>
#include <span>

#include "vpr/aggregation.hpp"

namespace vpr {

/// Mean-centred projection onto the leading principal directions.
struct PcaModel {
  Tensor mean;         // [D_in]
  Tensor basis;        // [D_in, D_out], orthonormal columns, descending variance
  Tensor eigenvalues;  // [D_out]
  bool whiten = false;

  std::size_t in_dim() const { return basis.dim(0); }
  std::size_t out_dim() const { return basis.dim(1); }
};

/// Fits from at least D_out + 1 descriptors. Uses the D_in x D_in covariance
/// when D_in <= N and the N x N Gram matrix otherwise. Throws
/// ErrorCode::RankDeficient (naming the achieved rank) when the centred data
/// spans fewer than D_out directions.
PcaModel pca_fit(std::span<const Tensor> descriptors, std::size_t out_dim, bool whiten = false);

/// basis^T (d - mean), optionally whitened; not normalised.
Tensor pca_project(const PcaModel& model, const Tensor& d);
/// Unit-norm reduced descriptor.
Descriptor pca_apply(const PcaModel& model, const Tensor& d);
/// pca_apply over many rows with one matrix product; rows must share the model's input size.
std::vector<Descriptor> pca_apply_all(const PcaModel& model, std::span<const Tensor> rows);
/// mean + basis basis^T (d - mean).
Tensor pca_reconstruct(const PcaModel& model, const Tensor& d);

}  // namespace vpr
