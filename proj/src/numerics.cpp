#include "vpr/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace vpr {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::Constraint: return "constraint violation";
    case ErrorCode::NonFinite: return "non-finite value";
    case ErrorCode::Parse: return "parse error";
    case ErrorCode::Io: return "i/o error";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::BadVersion: return "bad version";
    case ErrorCode::Truncated: return "truncated file";
    case ErrorCode::RankDeficient: return "rank deficient";
    case ErrorCode::StageMismatch: return "stage mismatch";
  }
  return "unknown";
}

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)), data_(product(shape_), 0.0) {
  for (auto d : shape_) {
    if (d == 0) throw Error(ErrorCode::InvalidArgument, "tensor shape has a zero dimension: " + shape_string(shape_));
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw Error(ErrorCode::InvalidArgument, "tensor shape has a zero dimension: " + shape_string(shape_));
  }
  if (product(shape_) != data_.size()) {
    throw Error(ErrorCode::InvalidArgument, "tensor data length " + std::to_string(data_.size()) +
                                                " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::filled(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::vector(std::vector<double> data) {
  const auto n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(const std::string& what) const {
  if (!all_finite()) throw Error(ErrorCode::NonFinite, what + " contains non-finite values");
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw Error(ErrorCode::InvalidArgument,
                "shape mismatch in +=: " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double gelu(double x) noexcept { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

double gelu_grad(double x) noexcept {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const double cdf = 0.5 * std::erfc(-x / std::sqrt(2.0));
  return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

Tensor elementwise(Elementwise kind, const Tensor& x, double exponent) {
  x.require_finite("elementwise input");
  Tensor out = Tensor::zeros_like(x);
  const bool integral = std::floor(exponent) == exponent;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case Elementwise::Power:
        if (v < 0 && !integral) {
          throw Error(ErrorCode::InvalidArgument, "power with fractional exponent on negative base");
        }
        out[i] = std::pow(v, exponent);
        break;
      case Elementwise::Sigmoid: out[i] = sigmoid(v); break;
      case Elementwise::Gelu: out[i] = gelu(v); break;
      case Elementwise::Relu: out[i] = v > 0 ? v : 0.0; break;
    }
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

void matvec_t(const Tensor& w, std::span<const double> x, std::span<double> y) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (x.size() != rows || y.size() != cols) {
    throw Error(ErrorCode::InvalidArgument, "matvec_t: weight " + shape_string(w.shape()) + " vs x " +
                                                std::to_string(x.size()) + ", y " + std::to_string(y.size()));
  }
  std::fill(y.begin(), y.end(), 0.0);
  const double* wd = w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const double* row = wd + r * cols;
    for (std::size_t c = 0; c < cols; ++c) y[c] += xr * row[c];
  }
}

void matvec_t_backward(const Tensor& w, std::span<const double> x, std::span<const double> y_grad,
                       std::span<double> x_grad, Tensor* w_grad) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  const double* wd = w.data().data();
  if (!x_grad.empty()) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = wd + r * cols;
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += row[c] * y_grad[c];
      x_grad[r] += s;
    }
  }
  if (w_grad) {
    double* gd = w_grad->data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double xr = x[r];
      if (xr == 0.0) continue;
      double* grow = gd + r * cols;
      for (std::size_t c = 0; c < cols; ++c) grow[c] += xr * y_grad[c];
    }
  }
}

double l2_normalize(std::span<double> v, double floor) noexcept {
  const double n = l2_norm(v);
  const double denom = std::max(n, floor);
  for (auto& x : v) x /= denom;
  return n;
}

void l2_normalize_backward(std::span<const double> y, double norm, std::span<const double> y_grad,
                           std::span<double> x_grad, double floor) {
  if (norm < floor) {
    for (std::size_t i = 0; i < y.size(); ++i) x_grad[i] = y_grad[i] / floor;
    return;
  }
  const double proj = dot(y, y_grad);
  for (std::size_t i = 0; i < y.size(); ++i) x_grad[i] = (y_grad[i] - y[i] * proj) / norm;
}

GradReport grad_check(const std::string& op_name, const GradFn& f, const ParamMap& params, double eps, double tol) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw Error(ErrorCode::InvalidArgument, "grad_check eps must lie in [1e-7, 1e-3]");
  }
  GradReport report;
  report.op_name = op_name;

  ParamMap analytic;
  for (const auto& [name, t] : params) analytic.emplace(name, Tensor::zeros_like(t));
  f(params, &analytic);

  ParamMap probe = params;
  for (const auto& [name, t] : params) {
    const Tensor& a = analytic.at(name);
    if (!a.all_finite()) {
      report.max_rel_error = std::numeric_limits<double>::infinity();
      report.per_param_errors[name] = report.max_rel_error;
      report.reason = "non-finite analytic gradient for " + name;
      report.passed = false;
      return report;
    }
    Tensor& x = probe.at(name);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double fp = f(probe, nullptr);
      x[i] = saved - eps;
      const double fm = f(probe, nullptr);
      x[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric)) {
        report.max_rel_error = std::numeric_limits<double>::infinity();
        report.per_param_errors[name] = report.max_rel_error;
        report.reason = "non-finite numeric gradient for " + name + "[" + std::to_string(i) + "]";
        report.passed = false;
        return report;
      }
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a[i] - numeric) / denom);
    }
    report.per_param_errors[name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  report.passed = report.max_rel_error < tol;
  if (!report.passed) report.reason = "max relative error exceeds tolerance";
  return report;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> failures(workers);
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, &failures, w, b, e] {
      try {
        fn(b, e);
      } catch (...) {
        failures[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
}

}  // namespace vpr
