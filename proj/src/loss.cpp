#include "vpr/loss.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace vpr {

void MsLossConfig::validate() const {
  if (!(alpha > 0) || !(beta > 0)) throw Error(ErrorCode::InvalidArgument, "MS loss scales must be positive");
  if (!(eps_margin >= 0)) throw Error(ErrorCode::InvalidArgument, "MS loss mining margin must be nonnegative");
  if (!std::isfinite(lam)) throw Error(ErrorCode::InvalidArgument, "MS loss threshold must be finite");
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Descriptors stacked as rows, [B, D].
RowMatrix stack(std::span<const Descriptor> descriptors) {
  const std::size_t d = descriptors.front().size();
  RowMatrix x(static_cast<Eigen::Index>(descriptors.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    if (descriptors[i].size() != d) throw Error(ErrorCode::InvalidArgument, "descriptors differ in dimension");
    x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(descriptors[i].data().data(),
                                                                               static_cast<Eigen::Index>(d));
  }
  return x;
}

SimilarityMatrix gram(const RowMatrix& x, std::vector<std::int64_t> labels) {
  const auto b = static_cast<std::size_t>(x.rows());
  SimilarityMatrix s{Tensor({b, b}), std::move(labels)};
  RowMatrix g = x * x.transpose();
  // Symmetrise exactly so S_ij == S_ji bitwise.
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i; j < b; ++j) {
      const double v = g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      s.values.at(i, j) = v;
      s.values.at(j, i) = v;
    }
  }
  return s;
}

}  // namespace

SimilarityMatrix SimilarityMatrix::from_descriptors(std::span<const Descriptor> descriptors,
                                                    std::vector<std::int64_t> labels) {
  const std::size_t b = descriptors.size();
  if (labels.size() != b) throw Error(ErrorCode::InvalidArgument, "one label per descriptor required");
  if (b == 0) throw Error(ErrorCode::InvalidArgument, "empty batch");
  return gram(stack(descriptors), std::move(labels));
}

bool MinedPairs::all_empty() const {
  auto none = [](const auto& sets) {
    return std::all_of(sets.begin(), sets.end(), [](const auto& s) { return s.empty(); });
  };
  return none(positives) && none(negatives);
}

MinedPairs mine_pairs(const SimilarityMatrix& sim, const MsLossConfig& cfg) {
  const std::size_t b = sim.batch();
  MinedPairs out;
  out.positives.resize(b);
  out.negatives.resize(b);
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < b; ++i) {
    double hardest_pos = inf, hardest_neg = -inf;
    bool any_pos = false, any_neg = false;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const double s = sim.values.at(i, j);
      if (sim.labels[j] == sim.labels[i]) {
        any_pos = true;
        hardest_pos = std::min(hardest_pos, s);
      } else {
        any_neg = true;
        hardest_neg = std::max(hardest_neg, s);
      }
    }
    const double neg_cut = any_pos ? hardest_pos - cfg.eps_margin : -inf;
    const double pos_cut = any_neg ? hardest_neg + cfg.eps_margin : inf;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const double s = sim.values.at(i, j);
      if (sim.labels[j] == sim.labels[i]) {
        if (s < pos_cut) out.positives[i].push_back(j);
      } else if (s > neg_cut) {
        out.negatives[i].push_back(j);
      }
    }
  }
  return out;
}

namespace {

// log(1 + sum_j exp(z_j)), computed with a shifted exponent.
double log1p_sum_exp(const std::vector<double>& z, std::vector<double>& weights) {
  double m = 0.0;
  for (double v : z) m = std::max(m, v);
  double total = std::exp(-m);
  weights.resize(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    weights[j] = std::exp(z[j] - m);
    total += weights[j];
  }
  // weights become d/dz_j of the result.
  for (auto& w : weights) w /= total;
  return m + std::log(total);
}

}  // namespace

double ms_loss(const SimilarityMatrix& sim, const MsLossConfig& cfg, Tensor* d_sim) {
  cfg.validate();
  const std::size_t b = sim.batch();
  if (sim.values.rank() != 2 || sim.values.dim(0) != b || sim.values.dim(1) != b) {
    throw Error(ErrorCode::InvalidArgument, "similarity matrix must be [B,B] with B labels");
  }
  sim.values.require_finite("similarity matrix");
  const MinedPairs mined = mine_pairs(sim, cfg);
  if (d_sim) *d_sim = Tensor({b, b});
  const double inv_b = 1.0 / static_cast<double>(b);

  double loss = 0.0;
  std::vector<double> z, w;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& pos = mined.positives[i];
    if (!pos.empty()) {
      z.clear();
      for (auto j : pos) z.push_back(-cfg.alpha * (sim.values.at(i, j) - cfg.lam));
      loss += log1p_sum_exp(z, w) / cfg.alpha * inv_b;
      if (d_sim) {
        for (std::size_t t = 0; t < pos.size(); ++t) d_sim->at(i, pos[t]) -= w[t] * inv_b;
      }
    }
    const auto& neg = mined.negatives[i];
    if (!neg.empty()) {
      z.clear();
      for (auto j : neg) z.push_back(cfg.beta * (sim.values.at(i, j) - cfg.lam));
      loss += log1p_sum_exp(z, w) / cfg.beta * inv_b;
      if (d_sim) {
        for (std::size_t t = 0; t < neg.size(); ++t) d_sim->at(i, neg[t]) += w[t] * inv_b;
      }
    }
  }
  return loss;
}

double ms_loss_descriptors(std::span<const Descriptor> descriptors, const std::vector<std::int64_t>& labels,
                           const MsLossConfig& cfg, std::vector<Tensor>* d_descriptors) {
  const std::size_t b = descriptors.size();
  if (labels.size() != b) throw Error(ErrorCode::InvalidArgument, "one label per descriptor required");
  if (b == 0) throw Error(ErrorCode::InvalidArgument, "empty batch");
  const RowMatrix x = stack(descriptors);
  const auto sim = gram(x, labels);
  Tensor d_sim;
  const double loss = ms_loss(sim, cfg, d_descriptors ? &d_sim : nullptr);
  if (d_descriptors) {
    // S_ij = d_i . d_j, so dL/dd_i = sum_j (G_ij + G_ji) d_j with the diagonal excluded.
    const auto n = static_cast<Eigen::Index>(b);
    RowMatrix g(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
        g(i, j) = i == j ? 0.0 : d_sim.at(ui, uj) + d_sim.at(uj, ui);
      }
    }
    const RowMatrix dx = g * x;
    d_descriptors->clear();
    for (std::size_t i = 0; i < b; ++i) {
      Tensor t = Tensor::zeros_like(descriptors[i]);
      Eigen::Map<Eigen::RowVectorXd>(t.data().data(), x.cols()) = dx.row(static_cast<Eigen::Index>(i));
      d_descriptors->push_back(std::move(t));
    }
  }
  return loss;
}

}  // namespace vpr
