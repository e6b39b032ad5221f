#pragma once

// Reweighting estimators over weighted flow samples. All weights are kept in
// log form and are unnormalized.

#include "snf/energy.hpp"
#include "snf/parallel.hpp"
#include "snf/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

namespace snf {

struct WeightedEnsemble {
  Matrix points;  // dim x n
  Vector log_weights;

  WeightedEnsemble() = default;
  WeightedEnsemble(Matrix pts, Vector lw) : points(std::move(pts)), log_weights(std::move(lw)) {
    if (points.cols() != log_weights.size()) {
      throw std::invalid_argument("WeightedEnsemble: point and weight counts differ");
    }
  }
  Eigen::Index size() const { return points.cols(); }
};

namespace detail {

// Scalar exp so that -inf maps to exactly 0; the packet version clamps.
inline Vector exp_shifted(const Vector& lw, double shift) {
  return lw.unaryExpr([shift](double v) { return std::exp(v - shift); });
}

/// exp(lw - max lw); throws if no weight is positive or any is NaN.
inline Vector relative_weights(const Vector& lw, const char* who) {
  if (lw.size() == 0) throw std::invalid_argument(std::string(who) + ": empty ensemble");
  if (lw.array().isNaN().any()) throw std::invalid_argument(std::string(who) + ": NaN log weight");
  const double m = lw.maxCoeff();
  if (!std::isfinite(m)) {
    throw std::invalid_argument(std::string(who) + ": log weights must have a finite maximum");
  }
  return exp_shifted(lw, m);
}

}  // namespace detail

inline double log_sum_exp(const Vector& lw) {
  const double m = lw.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log(detail::exp_shifted(lw, m).sum());
}

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Self-normalized sum_k w_k O(x_k) / sum_k w_k. The standard error is the
/// delta-method value sqrt(sum w^2 (O - mean)^2) / sum w.
inline Estimate importance_expectation(const Vector& log_weights, const Vector& observable) {
  if (observable.size() != log_weights.size()) {
    throw std::invalid_argument("importance_expectation: length mismatch");
  }
  const Vector w = detail::relative_weights(log_weights, "importance_expectation");
  const double sw = w.sum();
  const double mean = (w.array() * observable.array()).sum() / sw;
  const double var = (w.array().square() * (observable.array() - mean).square()).sum() / (sw * sw);
  return {mean, std::sqrt(var)};
}

inline Estimate importance_expectation(const WeightedEnsemble& ens,
                                       const std::function<double(ConstVectorRef)>& obs) {
  Vector o(ens.size());
  for (Eigen::Index k = 0; k < ens.size(); ++k) o[k] = obs(ens.points.col(k));
  return importance_expectation(ens.log_weights, o);
}

/// Effective sample size (sum w)^2 / sum w^2.
inline double effective_sample_size(const Vector& log_weights) {
  const Vector w = detail::relative_weights(log_weights, "effective_sample_size");
  return w.sum() * w.sum() / w.squaredNorm();
}

struct NeuralMcmcChain {
  Matrix states;                     // dim x n, one chain state per proposal
  std::vector<Eigen::Index> source;  // proposal index held at each step
  long accepted = 0;
};

/// Independence Metropolis chain over the ensemble in order: proposal k
/// replaces the current state with probability min{1, w_k / w_current}.
inline NeuralMcmcChain neural_mcmc_resample(const WeightedEnsemble& ens, RngStream& rng) {
  const Eigen::Index n = ens.size();
  if (n == 0) throw std::invalid_argument("neural_mcmc_resample: empty ensemble");
  NeuralMcmcChain chain;
  chain.states.resize(ens.points.rows(), n);
  chain.source.resize(static_cast<std::size_t>(n));
  Eigen::Index cur = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (k > 0) {
      const double lw_new = ens.log_weights[k];
      const double lw_cur = ens.log_weights[cur];
      const double u = rng.uniform();
      bool accept;
      if (lw_cur == -std::numeric_limits<double>::infinity()) {
        accept = true;
      } else {
        accept = u < std::exp(lw_new - lw_cur);
      }
      if (accept) {
        cur = k;
        ++chain.accepted;
      }
    }
    chain.states.col(k) = ens.points.col(cur);
    chain.source[static_cast<std::size_t>(k)] = cur;
  }
  return chain;
}

/// Mean of a correlated series with a batch-means standard error.
inline Estimate batch_means(const Vector& series, int n_batches = 50) {
  const Eigen::Index n = series.size();
  if (n < 2) throw std::invalid_argument("batch_means: need at least two values");
  n_batches = static_cast<int>(std::min<Eigen::Index>(n_batches, n));
  if (n_batches < 2) throw std::invalid_argument("batch_means: need at least two batches");
  const Eigen::Index len = n / n_batches;
  Vector means(n_batches);
  for (int b = 0; b < n_batches; ++b) means[b] = series.segment(b * len, len).mean();
  const double mu = means.mean();
  const double var = (means.array() - mu).square().sum() / (n_batches - 1);
  return {series.head(len * n_batches).mean(), std::sqrt(var / n_batches)};
}

// ---------------------------------------------------------------------------
// Free-energy profile along one axis

struct FreeEnergyProfile {
  Vector edges;        // bins + 1
  Vector centers;      // bins
  Vector free_energy;  // NaN where the bin carries no weight
  Vector std_error;    // NaN where not populated
  std::vector<bool> populated;  // weight in the bin for the sample and every resample
  int axis = 0;

  Eigen::Index bins() const { return centers.size(); }
};

struct ProfileOptions {
  int bins = 100;
  double lo = -2.5;
  double hi = 2.5;
  int n_bootstrap = 200;
  int workers = 1;
};

namespace detail {

inline Vector binned_mass(const Matrix& pts, const Vector& w, int axis, const ProfileOptions& o,
                          const std::vector<Eigen::Index>* pick) {
  Vector mass = Vector::Zero(o.bins);
  const double width = (o.hi - o.lo) / o.bins;
  const Eigen::Index n = pick ? static_cast<Eigen::Index>(pick->size()) : pts.cols();
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index k = pick ? (*pick)[static_cast<std::size_t>(j)] : j;
    const double v = pts(axis, k);
    if (!(v >= o.lo && v < o.hi)) continue;
    const int b = std::min(static_cast<int>((v - o.lo) / width), o.bins - 1);
    mass[b] += w[k];
  }
  return mass;
}

/// -log of the mass fraction per bin; NaN for empty bins or no mass at all.
inline Vector neg_log_fraction(const Vector& mass) {
  const double total = mass.sum();
  Vector out(mass.size());
  for (Eigen::Index b = 0; b < mass.size(); ++b) {
    out[b] = (total > 0.0 && mass[b] > 0.0) ? -std::log(mass[b] / total)
                                           : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

}  // namespace detail

/// Reweighted histogram along `axis`, F = -log(bin mass / in-range mass),
/// shifted so the lowest bin is 0. The standard error is the spread of the
/// unshifted F over bootstrap resamples of the paths (resample b uses
/// rng.split(b)).
inline FreeEnergyProfile free_energy_profile(const WeightedEnsemble& ens, int axis,
                                             const RngStream& rng, ProfileOptions opt = {}) {
  if (axis < 0 || axis >= ens.points.rows()) {
    throw std::invalid_argument("free_energy_profile: axis out of range");
  }
  if (!(opt.hi > opt.lo) || opt.bins < 1) {
    throw std::invalid_argument("free_energy_profile: empty range");
  }
  const Vector w = detail::relative_weights(ens.log_weights, "free_energy_profile");
  FreeEnergyProfile prof;
  prof.axis = axis;
  prof.edges = Vector::LinSpaced(opt.bins + 1, opt.lo, opt.hi);
  prof.centers = 0.5 * (prof.edges.head(opt.bins) + prof.edges.tail(opt.bins));
  const Vector f0 = detail::neg_log_fraction(detail::binned_mass(ens.points, w, axis, opt, nullptr));

  std::vector<Vector> boot(static_cast<std::size_t>(std::max(opt.n_bootstrap, 0)));
  const Eigen::Index n = ens.size();
  parallel_for(boot.size(), opt.workers, [&](std::size_t b) {
    RngStream r = rng.split(b);
    std::vector<Eigen::Index> pick(static_cast<std::size_t>(n));
    for (auto& i : pick) i = static_cast<Eigen::Index>(r.bounded(static_cast<std::uint64_t>(n)));
    boot[b] = detail::neg_log_fraction(detail::binned_mass(ens.points, w, axis, opt, &pick));
  });

  const double nan = std::numeric_limits<double>::quiet_NaN();
  prof.free_energy = Vector::Constant(opt.bins, nan);
  prof.std_error = Vector::Constant(opt.bins, nan);
  prof.populated.assign(static_cast<std::size_t>(opt.bins), false);
  double fmin = std::numeric_limits<double>::infinity();
  for (int b = 0; b < opt.bins; ++b) {
    if (!std::isnan(f0[b])) fmin = std::min(fmin, f0[b]);
  }
  if (!std::isfinite(fmin)) return prof;
  for (int b = 0; b < opt.bins; ++b) {
    if (std::isnan(f0[b])) continue;
    prof.free_energy[b] = f0[b] - fmin;
    bool all = !boot.empty();
    double s = 0.0, s2 = 0.0;
    for (const Vector& fb : boot) {
      if (std::isnan(fb[b])) {
        all = false;
        break;
      }
      s += fb[b];
      s2 += fb[b] * fb[b];
    }
    if (!all || boot.size() < 2) continue;
    const double m = static_cast<double>(boot.size());
    const double mean = s / m;
    prof.std_error[b] = std::sqrt(std::max(0.0, (s2 - m * mean * mean) / (m - 1.0)));
    prof.populated[static_cast<std::size_t>(b)] = true;
  }
  return prof;
}

// ---------------------------------------------------------------------------
// Histogram KL on a square 2D grid

struct HistogramGrid {
  int bins = 100;  // per axis
  double lo = -2.5;
  double hi = 2.5;
};

struct HistogramKL {
  int bins = 0;
  long n_samples = 0;  // samples that fell inside the grid
  double kl = 0.0;
};

/// KL(p || q) for p = (counts + pseudo) normalized and q = exact_probs
/// normalized. Cells with q = 0 are not allowed.
inline double histogram_kl_from_counts(const Vector& counts, const Vector& exact_probs,
                                       double pseudo = 0.5) {
  if (counts.size() != exact_probs.size() || counts.size() == 0) {
    throw std::invalid_argument("histogram_kl: counts and probabilities differ in size");
  }
  const Vector p = (counts.array() + pseudo).matrix() / (counts.sum() + pseudo * counts.size());
  const Vector q = exact_probs / exact_probs.sum();
  double kl = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    if (p[c] > 0.0) kl += p[c] * std::log(p[c] / q[c]);
  }
  return kl;
}

/// Exact cell probabilities: exp(-u) at cell centers, normalized over the
/// grid. Cell (i, j) with i along axis 0 is entry i * bins + j.
inline Vector grid_cell_probabilities(const Energy& exact, const HistogramGrid& g) {
  const int nb = g.bins;
  const double h = (g.hi - g.lo) / nb;
  Vector logp(static_cast<Eigen::Index>(nb) * nb);
  Vector y(2);
  for (int i = 0; i < nb; ++i) {
    for (int j = 0; j < nb; ++j) {
      y << g.lo + (i + 0.5) * h, g.lo + (j + 0.5) * h;
      logp[i * nb + j] = -exact.value(y);
    }
  }
  const double lse = log_sum_exp(logp);
  return detail::exp_shifted(logp, lse);
}

inline Vector grid_counts(const Matrix& samples, const HistogramGrid& g, long* inside = nullptr) {
  const int nb = g.bins;
  const double h = (g.hi - g.lo) / nb;
  Vector counts = Vector::Zero(static_cast<Eigen::Index>(nb) * nb);
  long n_in = 0;
  for (Eigen::Index k = 0; k < samples.cols(); ++k) {
    const double a = samples(0, k), b = samples(1, k);
    if (!(a >= g.lo && a < g.hi && b >= g.lo && b < g.hi)) continue;
    const int i = std::min(static_cast<int>((a - g.lo) / h), nb - 1);
    const int j = std::min(static_cast<int>((b - g.lo) / h), nb - 1);
    counts[i * nb + j] += 1.0;
    ++n_in;
  }
  if (inside) *inside = n_in;
  return counts;
}

/// KL(sample histogram || exact density on the grid), Jeffreys-smoothed.
inline HistogramKL histogram_kl(const Matrix& samples, const Energy& exact,
                                const HistogramGrid& g = {}) {
  if (samples.rows() != 2 || exact.dim() != 2) {
    throw std::invalid_argument("histogram_kl: needs two-dimensional samples");
  }
  if (g.bins < 2 || !(g.hi > g.lo)) throw std::invalid_argument("histogram_kl: bad grid");
  HistogramKL out;
  out.bins = g.bins;
  const Vector counts = grid_counts(samples, g, &out.n_samples);
  if (out.n_samples == 0) throw std::invalid_argument("histogram_kl: no samples inside the grid");
  out.kl = histogram_kl_from_counts(counts, grid_cell_probabilities(exact, g));
  return out;
}

}  // namespace snf
