#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vpr/error.hpp"

namespace vpr {

/// Dense row-major array. Values are held in 64-bit; 32-bit precision only
/// appears at the file boundary (feature files, descriptor databases).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor filled(std::vector<std::size_t> shape, double value);
  static Tensor vector(std::vector<double> data);
  /// i.i.d. N(0, scale^2) entries.
  static Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  /// 2-D access; the tensor must have rank 2.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool all_finite() const noexcept;
  /// Throws ErrorCode::NonFinite naming `what` if any entry is NaN or infinite.
  void require_finite(const std::string& what) const;

  void fill(double value);
  Tensor& operator+=(const Tensor& other);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

enum class Elementwise { Power, Sigmoid, Gelu, Relu };

/// Applies an elementwise map. `exponent` is only read for Power.
Tensor elementwise(Elementwise kind, const Tensor& x, double exponent = 1.0);

double sigmoid(double x) noexcept;
/// Exact GELU, x * Phi(x).
double gelu(double x) noexcept;
double gelu_grad(double x) noexcept;

double dot(std::span<const double> a, std::span<const double> b) noexcept;
double l2_norm(std::span<const double> a) noexcept;

/// y = W^T x for W of shape [x.size(), y.size()].
void matvec_t(const Tensor& w, std::span<const double> x, std::span<double> y);
/// x_grad += W y_grad; w_grad += x y_grad^T. Either output may be skipped by
/// passing an empty span / nullptr.
void matvec_t_backward(const Tensor& w, std::span<const double> x, std::span<const double> y_grad,
                       std::span<double> x_grad, Tensor* w_grad);

/// In-place L2 normalisation; returns the norm before scaling. Norms below
/// `floor` are treated as `floor`.
double l2_normalize(std::span<double> v, double floor = 1e-12) noexcept;
/// Backward of y = x / max(|x|, floor) given the normalised output y and the
/// pre-normalisation norm. Writes dL/dx into `x_grad` (overwrites).
void l2_normalize_backward(std::span<const double> y, double norm, std::span<const double> y_grad,
                           std::span<double> x_grad, double floor = 1e-12);

using ParamMap = std::map<std::string, Tensor>;

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  std::map<std::string, double> per_param_errors;
  bool passed = false;
  std::string reason;
};

/// Scalar objective for gradient checking: returns f(params) and, when
/// `grad` is non-null, fills it with the analytic gradient (same keys/shapes).
using GradFn = std::function<double(const ParamMap& params, ParamMap* grad)>;

/// Central-difference check of every coordinate of every parameter.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
GradReport grad_check(const std::string& op_name, const GradFn& f, const ParamMap& params,
                      double eps = 1e-5, double tol = 1e-4);

/// Splits [0, n) into at most `threads` contiguous chunks and runs
/// fn(begin, end) on each. threads <= 1 runs inline on the caller.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace vpr
