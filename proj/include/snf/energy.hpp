#pragma once

// Energies u(y) = -log(unnormalized density), their gradients and
// Hessian-vector products. Normalization constants are never represented.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

namespace snf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Point = Eigen::VectorXd;
using ConstVectorRef = Eigen::Ref<const Eigen::VectorXd>;

class Energy {
 public:
  virtual ~Energy() = default;

  virtual std::string_view kind() const = 0;
  virtual int dim() const = 0;

  double value(ConstVectorRef y) const {
    check_dim(y);
    return do_value(y);
  }
  Vector gradient(ConstVectorRef y) const {
    check_dim(y);
    return do_gradient(y);
  }
  Vector hessian_vector(ConstVectorRef y, ConstVectorRef v) const {
    check_dim(y);
    check_dim(v);
    return do_hessian_vector(y, v);
  }

 protected:
  virtual double do_value(ConstVectorRef y) const = 0;
  virtual Vector do_gradient(ConstVectorRef y) const = 0;
  virtual Vector do_hessian_vector(ConstVectorRef y, ConstVectorRef v) const = 0;

 private:
  void check_dim(ConstVectorRef y) const {
    if (y.size() != dim()) {
      throw std::invalid_argument(std::string(kind()) + ": expected dimension " +
                                  std::to_string(dim()) + ", got " + std::to_string(y.size()));
    }
  }
};

using EnergyModel = std::shared_ptr<const Energy>;

/// u(y) = 0.5 * ||(y - mean) / std||^2
class IsotropicGaussian final : public Energy {
 public:
  explicit IsotropicGaussian(int dim, double stddev = 1.0)
      : IsotropicGaussian(Vector::Zero(dim < 0 ? 0 : dim), stddev) {}
  IsotropicGaussian(Vector mean, double stddev) : mean_(std::move(mean)), std_(stddev) {
    if (mean_.size() < 1) throw std::invalid_argument("IsotropicGaussian: dim must be >= 1");
    if (!(std_ > 0.0)) throw std::invalid_argument("IsotropicGaussian: std must be > 0");
    inv_var_ = 1.0 / (std_ * std_);
  }

  std::string_view kind() const override { return "gaussian"; }
  int dim() const override { return static_cast<int>(mean_.size()); }
  const Vector& mean() const { return mean_; }
  double stddev() const { return std_; }

 protected:
  double do_value(ConstVectorRef y) const override {
    return 0.5 * (y - mean_).squaredNorm() * inv_var_;
  }
  Vector do_gradient(ConstVectorRef y) const override { return (y - mean_) * inv_var_; }
  Vector do_hessian_vector(ConstVectorRef, ConstVectorRef v) const override {
    return v * inv_var_;
  }

 private:
  Vector mean_;
  double std_;
  double inv_var_;
};

struct DoubleWellParams {
  double a = 1.0;
  double b = 6.0;
  double c = 1.0;
  double d = 1.0;
};

/// u(x) = a/4 x1^4 - b/2 x1^2 + c x1 + d/2 ||x_2..dim||^2
class DoubleWell final : public Energy {
 public:
  explicit DoubleWell(int dim = 2, DoubleWellParams p = {}) : dim_(dim), p_(p) {
    if (dim < 1) throw std::invalid_argument("DoubleWell: dim must be >= 1");
  }

  std::string_view kind() const override { return "double_well"; }
  int dim() const override { return dim_; }
  const DoubleWellParams& params() const { return p_; }

  /// The x1-only part of the energy; the remaining coordinates are Gaussian.
  double axis_energy(double x1) const {
    const double x2 = x1 * x1;
    return 0.25 * p_.a * x2 * x2 - 0.5 * p_.b * x2 + p_.c * x1;
  }

 protected:
  double do_value(ConstVectorRef y) const override {
    return axis_energy(y[0]) + 0.5 * p_.d * y.tail(dim_ - 1).squaredNorm();
  }
  Vector do_gradient(ConstVectorRef y) const override {
    Vector g = p_.d * y;
    const double x1 = y[0];
    g[0] = p_.a * x1 * x1 * x1 - p_.b * x1 + p_.c;
    return g;
  }
  Vector do_hessian_vector(ConstVectorRef y, ConstVectorRef v) const override {
    Vector hv = p_.d * v;
    hv[0] = (3.0 * p_.a * y[0] * y[0] - p_.b) * v[0];
    return hv;
  }

 private:
  int dim_;
  DoubleWellParams p_;
};

/// Convex combination (1 - lambda) * prior + lambda * target.
class InterpolatedPotential final : public Energy {
 public:
  InterpolatedPotential(EnergyModel prior, EnergyModel target, double lambda)
      : prior_(std::move(prior)), target_(std::move(target)), lambda_(lambda) {
    if (!prior_ || !target_) throw std::invalid_argument("interpolate: null energy");
    if (!(lambda_ >= 0.0 && lambda_ <= 1.0)) {
      throw std::invalid_argument("interpolate: lambda must lie in [0, 1], got " +
                                  std::to_string(lambda_));
    }
    if (prior_->dim() != target_->dim()) {
      throw std::invalid_argument("interpolate: prior and target dimensions differ");
    }
  }

  std::string_view kind() const override { return "interpolated"; }
  int dim() const override { return prior_->dim(); }
  double lambda() const { return lambda_; }
  const EnergyModel& prior() const { return prior_; }
  const EnergyModel& target() const { return target_; }

 protected:
  double do_value(ConstVectorRef y) const override {
    if (lambda_ == 0.0) return prior_->value(y);
    if (lambda_ == 1.0) return target_->value(y);
    return (1.0 - lambda_) * prior_->value(y) + lambda_ * target_->value(y);
  }
  Vector do_gradient(ConstVectorRef y) const override {
    if (lambda_ == 0.0) return prior_->gradient(y);
    if (lambda_ == 1.0) return target_->gradient(y);
    return (1.0 - lambda_) * prior_->gradient(y) + lambda_ * target_->gradient(y);
  }
  Vector do_hessian_vector(ConstVectorRef y, ConstVectorRef v) const override {
    if (lambda_ == 0.0) return prior_->hessian_vector(y, v);
    if (lambda_ == 1.0) return target_->hessian_vector(y, v);
    return (1.0 - lambda_) * prior_->hessian_vector(y, v) +
           lambda_ * target_->hessian_vector(y, v);
  }

 private:
  EnergyModel prior_;
  EnergyModel target_;
  double lambda_;
};

inline std::shared_ptr<const InterpolatedPotential> interpolate(EnergyModel prior,
                                                                EnergyModel target,
                                                                double lambda) {
  return std::make_shared<const InterpolatedPotential>(std::move(prior), std::move(target),
                                                       lambda);
}

inline double eval_energy(const Energy& model, ConstVectorRef y) { return model.value(y); }
inline Vector eval_gradient(const Energy& model, ConstVectorRef y) {
  return model.gradient(y);
}

/// Column-wise energies of a batch (dim x n).
inline Vector eval_energies(const Energy& model, const Matrix& ys) {
  Vector out(ys.cols());
  for (Eigen::Index k = 0; k < ys.cols(); ++k) out[k] = model.value(ys.col(k));
  return out;
}

inline Matrix eval_gradients(const Energy& model, const Matrix& ys) {
  Matrix out(ys.rows(), ys.cols());
  for (Eigen::Index k = 0; k < ys.cols(); ++k) out.col(k) = model.gradient(ys.col(k));
  return out;
}

}  // namespace snf
