#pragma once

// Stochastic layers. Each one runs a sampling kernel against the guiding
// potential u_lambda supplied in the BlockContext and reports the log
// ratio of backward to forward transition densities of the realized move.
// The kernels are their own reverse, so backward mode runs the same code.
//
// Gradients: Langevin steps are differentiated through the sampled noise.
// Metropolis and HMC differentiate the realized branch with the acceptance
// decision held fixed.

#include "snf/block.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace snf {

/// One realized transition of a single point.
struct StochStepResult {
  Point output;
  double delta_s = 0.0;
  int accepted_count = 0;
  /// Final velocity, for the underdamped kernel on the joint (x, v) space.
  Point velocity;
};

namespace detail {

inline Vector draw_normal(RngStream& rng, Eigen::Index n) {
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = rng.normal();
  return out;
}

inline void check_context(const FlowBlock& block, const Matrix& y, const BlockContext& ctx) {
  if (ctx.potential == nullptr) {
    throw std::invalid_argument(std::string(block.kind()) + ": no guiding potential");
  }
  if (ctx.potential->dim() != block.dim()) {
    throw std::invalid_argument(std::string(block.kind()) + ": potential dimension mismatch");
  }
  if (static_cast<Eigen::Index>(ctx.streams.size()) != y.cols()) {
    throw std::invalid_argument(std::string(block.kind()) + ": need one rng stream per column");
  }
}

/// Runs `block` on one point with one stream.
inline BlockResult apply_single(const FlowBlock& block, ConstVectorRef y, const Energy& u,
                                RngStream& rng, Direction dir) {
  BlockContext ctx{&u, std::span<RngStream>(&rng, 1)};
  return block.apply(Matrix(y), dir, ctx, false);
}

inline StochStepResult single_result(BlockResult&& r) {
  StochStepResult out;
  out.output = r.output.col(0);
  out.delta_s = r.delta_s[0];
  out.accepted_count = r.accepted.size() ? r.accepted[0] : 0;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Metropolis random walk

class MetropolisBlock final : public FlowBlock {
 public:
  MetropolisBlock(int dim, int n_steps, double proposal_std)
      : dim_(dim), n_steps_(n_steps), sigma_(proposal_std) {
    if (dim < 1) throw std::invalid_argument("metropolis: dim must be >= 1");
    if (n_steps < 1) throw std::invalid_argument("metropolis: n_steps must be >= 1");
    if (!(proposal_std > 0.0)) throw std::invalid_argument("metropolis: proposal_std must be > 0");
  }

  std::string_view kind() const override { return "metropolis"; }
  int dim() const override { return dim_; }
  bool stochastic() const override { return true; }
  std::unique_ptr<FlowBlock> clone() const override {
    return std::make_unique<MetropolisBlock>(*this);
  }
  int n_steps() const { return n_steps_; }
  double proposal_std() const { return sigma_; }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext& ctx,
                    bool record) const override {
    check_input(y);
    detail::check_context(*this, y, ctx);
    const Energy& u = *ctx.potential;
    BlockResult res;
    res.output = y;
    res.delta_s = Vector::Zero(y.cols());
    res.accepted = Eigen::VectorXi::Zero(y.cols());
    res.proposals = n_steps_;
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      RngStream& rng = ctx.streams[static_cast<std::size_t>(k)];
      Vector cur = y.col(k);
      double e_cur = u.value(cur);
      for (int s = 0; s < n_steps_; ++s) {
        Vector prop = cur + sigma_ * detail::draw_normal(rng, dim_);
        const double e_prop = u.value(prop);
        const double du = e_prop - e_cur;
        const double w = rng.uniform();
        if (w < std::exp(-du)) {
          cur = std::move(prop);
          e_cur = e_prop;
          res.delta_s[k] += du;
          ++res.accepted[k];
        }
      }
      res.output.col(k) = cur;
    }
    if (record) {
      auto tape = std::make_unique<Tape>();
      tape->direction = dir;
      tape->potential = ctx.potential;
      tape->input = y;
      tape->output = res.output;
      res.tape = std::move(tape);
    }
    return res;
  }

  // The output is the input plus a constant shift, and delta_s telescopes to
  // u(y_out) - u(y_in).
  Matrix pullback(const BlockTape& base, const Matrix& out_cot, const Vector& ds_cot,
                  std::span<double>) const override {
    const Tape& tape = tape_cast<Tape>(base, "MetropolisBlock::pullback");
    Matrix in_cot = out_cot;
    for (Eigen::Index k = 0; k < out_cot.cols(); ++k) {
      if (ds_cot[k] == 0.0) continue;
      in_cot.col(k) += ds_cot[k] * (tape.potential->gradient(tape.output.col(k)) -
                                    tape.potential->gradient(tape.input.col(k)));
    }
    return in_cot;
  }

 private:
  struct Tape final : BlockTape {
    const Energy* potential = nullptr;
    Matrix input;
    Matrix output;
  };

  int dim_;
  int n_steps_;
  double sigma_;
};

// ---------------------------------------------------------------------------
// Overdamped Langevin

struct OverdampedTransition {
  Point output;
  Point eta_tilde;
  double delta_s = 0.0;
};

class OverdampedLangevinBlock final : public FlowBlock {
 public:
  OverdampedLangevinBlock(int dim, int n_steps, double step_size, double beta = 1.0)
      : dim_(dim), n_steps_(n_steps), eps_(step_size), beta_(beta) {
    if (dim < 1) throw std::invalid_argument("overdamped_langevin: dim must be >= 1");
    if (n_steps < 1) throw std::invalid_argument("overdamped_langevin: n_steps must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("overdamped_langevin: eps must be > 0");
    if (!(beta > 0.0)) throw std::invalid_argument("overdamped_langevin: beta must be > 0");
  }

  std::string_view kind() const override { return "overdamped_langevin"; }
  int dim() const override { return dim_; }
  bool stochastic() const override { return true; }
  std::unique_ptr<FlowBlock> clone() const override {
    return std::make_unique<OverdampedLangevinBlock>(*this);
  }
  int n_steps() const { return n_steps_; }
  double step_size() const { return eps_; }
  double beta() const { return beta_; }

  /// y' = y - eps grad u(y) + sqrt(2 eps / beta) eta, with the noise that
  /// carries y' back to y under the same update.
  OverdampedTransition transition(ConstVectorRef y, const Energy& u, ConstVectorRef eta) const {
    const Vector g0 = u.gradient(y);
    OverdampedTransition t;
    t.output = y - eps_ * g0 + std::sqrt(2.0 * eps_ / beta_) * eta;
    const Vector g1 = u.gradient(t.output);
    t.eta_tilde = std::sqrt(beta_ * eps_ / 2.0) * (g0 + g1) - eta;
    t.delta_s = -0.5 * (t.eta_tilde.squaredNorm() - eta.squaredNorm());
    return t;
  }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext& ctx,
                    bool record) const override {
    check_input(y);
    detail::check_context(*this, y, ctx);
    const Energy& u = *ctx.potential;
    std::unique_ptr<Tape> tape;
    if (record) {
      tape = std::make_unique<Tape>();
      tape->direction = dir;
      tape->potential = ctx.potential;
      tape->states.assign(static_cast<std::size_t>(n_steps_) + 1, Matrix(dim_, y.cols()));
      tape->eta_tilde.assign(static_cast<std::size_t>(n_steps_), Matrix(dim_, y.cols()));
    }
    BlockResult res;
    res.output = y;
    res.delta_s = Vector::Zero(y.cols());
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      RngStream& rng = ctx.streams[static_cast<std::size_t>(k)];
      Vector cur = y.col(k);
      for (int s = 0; s < n_steps_; ++s) {
        const auto si = static_cast<std::size_t>(s);
        if (tape) tape->states[si].col(k) = cur;
        OverdampedTransition t = transition(cur, u, detail::draw_normal(rng, dim_));
        res.delta_s[k] += t.delta_s;
        if (tape) tape->eta_tilde[si].col(k) = t.eta_tilde;
        cur = std::move(t.output);
      }
      if (tape) tape->states.back().col(k) = cur;
      res.output.col(k) = cur;
    }
    res.tape = std::move(tape);
    return res;
  }

  Matrix pullback(const BlockTape& base, const Matrix& out_cot, const Vector& ds_cot,
                  std::span<double>) const override {
    const Tape& tape = tape_cast<Tape>(base, "OverdampedLangevinBlock::pullback");
    const Energy& u = *tape.potential;
    const double kk = std::sqrt(beta_ * eps_ / 2.0);
    Matrix cot = out_cot;
    for (Eigen::Index k = 0; k < cot.cols(); ++k) {
      Vector c = cot.col(k);
      const double ds = ds_cot[k];
      for (int s = n_steps_ - 1; s >= 0; --s) {
        const auto si = static_cast<std::size_t>(s);
        const Vector eta_t = tape.eta_tilde[si].col(k);
        const Vector y0 = tape.states[si].col(k);
        const Vector y1 = tape.states[si + 1].col(k);
        if (ds != 0.0) c -= ds * kk * u.hessian_vector(y1, eta_t);
        c += u.hessian_vector(y0, -eps_ * c - ds * kk * eta_t);
      }
      cot.col(k) = c;
    }
    return cot;
  }

 private:
  struct Tape final : BlockTape {
    const Energy* potential = nullptr;
    std::vector<Matrix> states;     // y_0 .. y_n
    std::vector<Matrix> eta_tilde;  // one per step
  };

  int dim_;
  int n_steps_;
  double eps_;
  double beta_;
};

// ---------------------------------------------------------------------------
// Underdamped Langevin, BBK integrator

struct BBKTransition {
  Point x;
  Point v;
  Point eta_tilde;
  Point eta_tilde_prime;
  double delta_s = 0.0;
};

/// Inside a flow the velocity is drawn from the Maxwell distribution
/// N(0, 1/(beta m)) at block entry and dropped at exit; both Gaussian
/// densities enter delta_s, so the block acts on positions alone.
class LangevinBBKBlock final : public FlowBlock {
 public:
  LangevinBBKBlock(int dim, int n_steps, double dt, double gamma, double mass,
                   double beta = 1.0)
      : dim_(dim), n_steps_(n_steps), dt_(dt), gamma_(gamma), mass_(mass), beta_(beta) {
    if (dim < 1) throw std::invalid_argument("bbk_langevin: dim must be >= 1");
    if (n_steps < 1) throw std::invalid_argument("bbk_langevin: n_steps must be >= 1");
    if (!(dt > 0.0) || !(gamma > 0.0) || !(mass > 0.0) || !(beta > 0.0)) {
      throw std::invalid_argument("bbk_langevin: dt, gamma, mass, beta must be > 0");
    }
    c1_ = dt_ / (2.0 * mass_);
    c2_ = std::sqrt(4.0 * gamma_ * mass_ / (dt_ * beta_));
    c3_ = 1.0 + gamma_ * dt_ / 2.0;
    r_ = std::sqrt(gamma_ * dt_ * mass_ * beta_);
  }

  std::string_view kind() const override { return "bbk_langevin"; }
  int dim() const override { return dim_; }
  bool stochastic() const override { return true; }
  std::unique_ptr<FlowBlock> clone() const override {
    return std::make_unique<LangevinBBKBlock>(*this);
  }
  int n_steps() const { return n_steps_; }
  double dt() const { return dt_; }
  double gamma() const { return gamma_; }
  double mass() const { return mass_; }
  double beta() const { return beta_; }

  /// One BBK step on (x, v) with noises (eta, eta'). Feeding (x', -v') and
  /// (eta~, eta~') back in returns (x, -v).
  BBKTransition transition(ConstVectorRef x, ConstVectorRef v, const Energy& u,
                           ConstVectorRef eta, ConstVectorRef eta_prime) const {
    BBKTransition t;
    const Vector vh = v + c1_ * (-u.gradient(x) - gamma_ * mass_ * v + c2_ * eta);
    t.x = x + dt_ * vh;
    t.v = (vh + c1_ * (-u.gradient(t.x) + c2_ * eta_prime)) / c3_;
    t.eta_tilde = eta_prime - r_ * t.v;
    t.eta_tilde_prime = eta - r_ * v;
    t.delta_s = -0.5 * ((t.eta_tilde.squaredNorm() + t.eta_tilde_prime.squaredNorm()) -
                        (eta.squaredNorm() + eta_prime.squaredNorm()));
    return t;
  }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext& ctx,
                    bool record) const override {
    check_input(y);
    detail::check_context(*this, y, ctx);
    const Energy& u = *ctx.potential;
    const double v_scale = 1.0 / std::sqrt(beta_ * mass_);
    std::unique_ptr<Tape> tape;
    if (record) {
      tape = std::make_unique<Tape>();
      tape->direction = dir;
      tape->potential = ctx.potential;
      tape->x.assign(static_cast<std::size_t>(n_steps_) + 1, Matrix(dim_, y.cols()));
      tape->eta_tilde.assign(static_cast<std::size_t>(n_steps_), Matrix(dim_, y.cols()));
      tape->eta_tilde_prime.assign(static_cast<std::size_t>(n_steps_), Matrix(dim_, y.cols()));
      tape->v_final.resize(dim_, y.cols());
    }
    BlockResult res;
    res.output = y;
    res.delta_s = Vector::Zero(y.cols());
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      RngStream& rng = ctx.streams[static_cast<std::size_t>(k)];
      Vector x = y.col(k);
      Vector v = v_scale * detail::draw_normal(rng, dim_);
      double ds = 0.5 * beta_ * mass_ * v.squaredNorm();
      for (int s = 0; s < n_steps_; ++s) {
        const auto si = static_cast<std::size_t>(s);
        if (tape) tape->x[si].col(k) = x;
        const Vector eta = detail::draw_normal(rng, dim_);
        const Vector eta_p = detail::draw_normal(rng, dim_);
        BBKTransition t = transition(x, v, u, eta, eta_p);
        ds += t.delta_s;
        if (tape) {
          tape->eta_tilde[si].col(k) = t.eta_tilde;
          tape->eta_tilde_prime[si].col(k) = t.eta_tilde_prime;
        }
        x = std::move(t.x);
        v = std::move(t.v);
      }
      ds -= 0.5 * beta_ * mass_ * v.squaredNorm();
      if (tape) {
        tape->x.back().col(k) = x;
        tape->v_final.col(k) = v;
      }
      res.output.col(k) = x;
      res.delta_s[k] = ds;
    }
    res.tape = std::move(tape);
    return res;
  }

  Matrix pullback(const BlockTape& base, const Matrix& out_cot, const Vector& ds_cot,
                  std::span<double>) const override {
    const Tape& tape = tape_cast<Tape>(base, "LangevinBBKBlock::pullback");
    const Energy& u = *tape.potential;
    Matrix cot = out_cot;
    for (Eigen::Index k = 0; k < cot.cols(); ++k) {
      const double ds = ds_cot[k];
      Vector xb = cot.col(k);
      Vector vb = -ds * beta_ * mass_ * tape.v_final.col(k);
      for (int s = n_steps_ - 1; s >= 0; --s) {
        const auto si = static_cast<std::size_t>(s);
        const Vector v1 = vb + ds * r_ * tape.eta_tilde[si].col(k);
        xb -= (c1_ / c3_) * u.hessian_vector(tape.x[si + 1].col(k), v1);
        const Vector vh = v1 / c3_ + dt_ * xb;
        xb -= c1_ * u.hessian_vector(tape.x[si].col(k), vh);
        vb = (1.0 - c1_ * gamma_ * mass_) * vh + ds * r_ * tape.eta_tilde_prime[si].col(k);
      }
      cot.col(k) = xb;
    }
    return cot;
  }

 private:
  struct Tape final : BlockTape {
    const Energy* potential = nullptr;
    std::vector<Matrix> x;  // x_0 .. x_n
    std::vector<Matrix> eta_tilde;
    std::vector<Matrix> eta_tilde_prime;
    Matrix v_final;
  };

  int dim_;
  int n_steps_;
  double dt_, gamma_, mass_, beta_;
  double c1_, c2_, c3_, r_;
};

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo

struct LeapfrogState {
  Point y;
  Point v;
};

/// K leapfrog steps for H(y, v) = u(y) + v' Sigma^-1 v / 2, Sigma diagonal.
inline LeapfrogState leapfrog(ConstVectorRef y, ConstVectorRef v, const Energy& u,
                              int n_leapfrog, double eps, const Vector& sigma_diag,
                              std::vector<Point>* trajectory = nullptr) {
  LeapfrogState s{y, v};
  if (trajectory) trajectory->assign(1, s.y);
  Vector g = u.gradient(s.y);
  for (int k = 0; k < n_leapfrog; ++k) {
    s.v -= 0.5 * eps * g;
    s.y += eps * s.v.cwiseQuotient(sigma_diag);
    g = u.gradient(s.y);
    s.v -= 0.5 * eps * g;
    if (trajectory) trajectory->push_back(s.y);
  }
  return s;
}

class HMCBlock final : public FlowBlock {
 public:
  /// `mass` holds the diagonal of Sigma, the velocity covariance.
  HMCBlock(int n_steps, int n_leapfrog, double eps, Vector mass)
      : n_steps_(n_steps), n_leapfrog_(n_leapfrog), eps_(eps), mass_(std::move(mass)) {
    if (mass_.size() < 1) throw std::invalid_argument("hmc: dim must be >= 1");
    if (n_steps < 1) throw std::invalid_argument("hmc: n_steps must be >= 1");
    if (n_leapfrog < 1) throw std::invalid_argument("hmc: n_leapfrog must be >= 1");
    if (!(eps > 0.0)) throw std::invalid_argument("hmc: eps must be > 0");
    if (!(mass_.array() > 0.0).all()) throw std::invalid_argument("hmc: mass must be > 0");
  }
  HMCBlock(int dim, int n_steps, int n_leapfrog, double eps)
      : HMCBlock(n_steps, n_leapfrog, eps, Vector::Ones(dim < 1 ? 0 : dim)) {}

  std::string_view kind() const override { return "hmc"; }
  int dim() const override { return static_cast<int>(mass_.size()); }
  bool stochastic() const override { return true; }
  std::unique_ptr<FlowBlock> clone() const override { return std::make_unique<HMCBlock>(*this); }
  int n_steps() const { return n_steps_; }
  int n_leapfrog() const { return n_leapfrog_; }
  double step_size() const { return eps_; }
  const Vector& mass() const { return mass_; }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext& ctx,
                    bool record) const override {
    check_input(y);
    detail::check_context(*this, y, ctx);
    const Energy& u = *ctx.potential;
    const Vector sd = mass_.cwiseSqrt();
    std::unique_ptr<Tape> tape;
    if (record) {
      tape = std::make_unique<Tape>();
      tape->direction = dir;
      tape->potential = ctx.potential;
      tape->paths.resize(static_cast<std::size_t>(y.cols()));
    }
    BlockResult res;
    res.output = y;
    res.delta_s = Vector::Zero(y.cols());
    res.accepted = Eigen::VectorXi::Zero(y.cols());
    res.proposals = n_steps_;
    std::vector<Point> traj;
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      RngStream& rng = ctx.streams[static_cast<std::size_t>(k)];
      Vector cur = y.col(k);
      double e_cur = u.value(cur);
      for (int s = 0; s < n_steps_; ++s) {
        const Vector v0 = sd.cwiseProduct(detail::draw_normal(rng, dim()));
        const LeapfrogState end =
            leapfrog(cur, v0, u, n_leapfrog_, eps_, mass_, tape ? &traj : nullptr);
        const double e_end = u.value(end.y);
        const double kin0 = 0.5 * v0.cwiseAbs2().cwiseQuotient(mass_).sum();
        const double kin1 = 0.5 * end.v.cwiseAbs2().cwiseQuotient(mass_).sum();
        const double w = rng.uniform();
        if (w < std::exp(e_cur - e_end + kin0 - kin1)) {
          res.delta_s[k] += e_end - e_cur;
          ++res.accepted[k];
          cur = end.y;
          e_cur = e_end;
          if (tape) tape->paths[static_cast<std::size_t>(k)].push_back({traj, v0});
        }
      }
      res.output.col(k) = cur;
    }
    res.tape = std::move(tape);
    return res;
  }

  Matrix pullback(const BlockTape& base, const Matrix& out_cot, const Vector& ds_cot,
                  std::span<double>) const override {
    const Tape& tape = tape_cast<Tape>(base, "HMCBlock::pullback");
    const Energy& u = *tape.potential;
    Matrix cot = out_cot;
    for (Eigen::Index k = 0; k < cot.cols(); ++k) {
      const double ds = ds_cot[k];
      Vector yb = cot.col(k);
      const auto& accepted = tape.paths[static_cast<std::size_t>(k)];
      for (auto it = accepted.rbegin(); it != accepted.rend(); ++it) {
        const std::vector<Point>& ys = it->trajectory;
        yb += ds * u.gradient(ys.back());
        Vector vb = Vector::Zero(dim());
        for (int j = n_leapfrog_ - 1; j >= 0; --j) {
          const auto ji = static_cast<std::size_t>(j);
          yb -= 0.5 * eps_ * u.hessian_vector(ys[ji + 1], vb);
          vb += eps_ * yb.cwiseQuotient(mass_);
          yb -= 0.5 * eps_ * u.hessian_vector(ys[ji], vb);
        }
        yb -= ds * u.gradient(ys.front());
      }
      cot.col(k) = yb;
    }
    return cot;
  }

 private:
  struct Accepted {
    std::vector<Point> trajectory;  // y^0 .. y^K
    Point v0;
  };
  struct Tape final : BlockTape {
    const Energy* potential = nullptr;
    std::vector<std::vector<Accepted>> paths;  // per column, accepted moves in order
  };

  int n_steps_;
  int n_leapfrog_;
  double eps_;
  Vector mass_;
};

// ---------------------------------------------------------------------------
// Single-point entry points

inline StochStepResult metropolis_step(const MetropolisBlock& block, ConstVectorRef y,
                                       const Energy& u, RngStream& rng) {
  return detail::single_result(detail::apply_single(block, y, u, rng, Direction::kForward));
}

inline StochStepResult overdamped_langevin_step(const OverdampedLangevinBlock& block,
                                                ConstVectorRef y, const Energy& u,
                                                RngStream& rng) {
  return detail::single_result(detail::apply_single(block, y, u, rng, Direction::kForward));
}

inline StochStepResult hmc_step(const HMCBlock& block, ConstVectorRef y, const Energy& u,
                                RngStream& rng) {
  return detail::single_result(detail::apply_single(block, y, u, rng, Direction::kForward));
}

/// BBK steps on the joint (x, v) state, velocity carried over between steps.
inline StochStepResult bbk_langevin_step(const LangevinBBKBlock& block, ConstVectorRef x,
                                         ConstVectorRef v, const Energy& u, RngStream& rng) {
  StochStepResult out;
  out.output = x;
  out.velocity = v;
  for (int s = 0; s < block.n_steps(); ++s) {
    const Vector eta = detail::draw_normal(rng, block.dim());
    const Vector eta_p = detail::draw_normal(rng, block.dim());
    BBKTransition t = block.transition(out.output, out.velocity, u, eta, eta_p);
    out.delta_s += t.delta_s;
    out.output = std::move(t.x);
    out.velocity = std::move(t.v);
  }
  return out;
}

/// Backward-mode application of any stochastic block: the same kernel, with
/// delta_s holding the backward log ratio.
inline StochStepResult stochastic_backward_step(const FlowBlock& block, ConstVectorRef y,
                                                const Energy& u, RngStream& rng) {
  if (!block.stochastic()) {
    throw std::invalid_argument("stochastic_backward_step: deterministic block");
  }
  return detail::single_result(detail::apply_single(block, y, u, rng, Direction::kBackward));
}

}  // namespace snf
