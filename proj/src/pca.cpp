#include "vpr/pca.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace vpr {

namespace {

constexpr double kRelativeRankTolerance = 1e-9;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

}  // namespace

PcaModel pca_fit(std::span<const Tensor> descriptors, std::size_t out_dim, bool whiten) {
  const std::size_t n = descriptors.size();
  if (out_dim == 0) throw Error(ErrorCode::InvalidArgument, "PCA output dimension must be positive");
  if (n <= out_dim) {
    throw Error(ErrorCode::InvalidArgument, "PCA needs more than D_out=" + std::to_string(out_dim) +
                                                " descriptors, got " + std::to_string(n));
  }
  const std::size_t dim = descriptors.front().size();
  if (out_dim > dim) {
    throw Error(ErrorCode::InvalidArgument, "PCA output dimension exceeds input dimension");
  }

  RowMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    if (descriptors[i].size() != dim) throw Error(ErrorCode::InvalidArgument, "PCA inputs differ in dimension");
    descriptors[i].require_finite("PCA input");
    x.row(static_cast<Eigen::Index>(i)) = ConstVecMap(descriptors[i].span().data(), static_cast<Eigen::Index>(dim));
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto k_out = static_cast<Eigen::Index>(out_dim);

  Eigen::VectorXd values;  // ascending
  Eigen::MatrixXd top;     // [dim, out_dim], columns in descending variance
  if (dim <= n) {
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    cov.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), inv_n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    values = solver.eigenvalues();
    top = solver.eigenvectors().rightCols(k_out).rowwise().reverse();
  } else {
    // Dual route: eigenvectors u of X X^T / n map to X^T u, renormalised.
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(x.rows(), x.rows());
    gram.selfadjointView<Eigen::Lower>().rankUpdate(x, inv_n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    values = solver.eigenvalues();
    top = x.transpose() * solver.eigenvectors().rightCols(k_out).rowwise().reverse();
    for (Eigen::Index k = 0; k < top.cols(); ++k) {
      const double norm = top.col(k).norm();
      if (norm > 0) top.col(k) /= norm;
    }
  }

  const double largest = std::max(values.maxCoeff(), 0.0);
  std::size_t rank = 0;
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    if (values(k) > kRelativeRankTolerance * largest && values(k) > 0) ++rank;
  }
  if (rank < out_dim) {
    throw Error(ErrorCode::RankDeficient, "PCA data has rank " + std::to_string(rank) + ", below requested D_out=" +
                                              std::to_string(out_dim));
  }

  PcaModel model;
  model.whiten = whiten;
  model.mean = Tensor({dim});
  VecMap(model.mean.span().data(), static_cast<Eigen::Index>(dim)) = mean.transpose();
  model.eigenvalues = Tensor({out_dim});
  const Eigen::Index last = values.size() - 1;
  for (Eigen::Index k = 0; k < k_out; ++k) {
    model.eigenvalues[static_cast<std::size_t>(k)] = values(last - k);
    // Sign convention: largest-magnitude coordinate positive.
    Eigen::Index arg = 0;
    top.col(k).cwiseAbs().maxCoeff(&arg);
    if (top(arg, k) < 0) top.col(k) *= -1.0;
  }
  model.basis = Tensor({dim, out_dim});
  RowMap(model.basis.span().data(), static_cast<Eigen::Index>(dim), k_out) = top;
  return model;
}

Tensor pca_project(const PcaModel& model, const Tensor& d) {
  if (d.size() != model.in_dim()) {
    throw Error(ErrorCode::InvalidArgument, "PCA input has dimension " + std::to_string(d.size()) + ", model expects " +
                                                std::to_string(model.in_dim()));
  }
  const auto dim = static_cast<Eigen::Index>(model.in_dim()), k_out = static_cast<Eigen::Index>(model.out_dim());
  Tensor out({model.out_dim()});
  VecMap(out.span().data(), k_out).noalias() =
      ConstRowMap(model.basis.span().data(), dim, k_out).transpose() *
      (ConstVecMap(d.span().data(), dim) - ConstVecMap(model.mean.span().data(), dim));
  if (model.whiten) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] /= std::sqrt(model.eigenvalues[k] + 1e-12);
  }
  return out;
}

Descriptor pca_apply(const PcaModel& model, const Tensor& d) {
  Tensor out = pca_project(model, d);
  l2_normalize(out.span());
  return out;
}

std::vector<Descriptor> pca_apply_all(const PcaModel& model, std::span<const Tensor> rows) {
  const auto dim = static_cast<Eigen::Index>(model.in_dim()), k_out = static_cast<Eigen::Index>(model.out_dim());
  RowMatrix x(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != model.in_dim()) {
      throw Error(ErrorCode::InvalidArgument, "PCA input has dimension " + std::to_string(rows[i].size()) +
                                                  ", model expects " + std::to_string(model.in_dim()));
    }
    x.row(static_cast<Eigen::Index>(i)) = ConstVecMap(rows[i].span().data(), dim);
  }
  x.rowwise() -= ConstVecMap(model.mean.span().data(), dim).transpose();
  const RowMatrix y = x * ConstRowMap(model.basis.span().data(), dim, k_out);
  std::vector<Descriptor> out;
  out.reserve(rows.size());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    Tensor d({model.out_dim()});
    VecMap(d.span().data(), k_out) = y.row(i).transpose();
    if (model.whiten) {
      for (std::size_t k = 0; k < d.size(); ++k) d[k] /= std::sqrt(model.eigenvalues[k] + 1e-12);
    }
    l2_normalize(d.span());
    out.push_back(std::move(d));
  }
  return out;
}

Tensor pca_reconstruct(const PcaModel& model, const Tensor& d) {
  PcaModel plain = model;
  plain.whiten = false;
  const Tensor coords = pca_project(plain, d);
  Tensor out = model.mean;
  for (std::size_t j = 0; j < model.in_dim(); ++j) {
    for (std::size_t k = 0; k < model.out_dim(); ++k) out[j] += model.basis.at(j, k) * coords[k];
  }
  return out;
}

}  // namespace vpr
