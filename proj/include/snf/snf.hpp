#pragma once

// A stochastic normalizing flow: prior u_Z, target u_X and an ordered list of
// layers. Layer i is guided by u_lambda with lambda_i = (i + 1) / T.

#include "snf/flow_det.hpp"
#include "snf/flow_stoch.hpp"
#include "snf/nn.hpp"
#include "snf/parallel.hpp"

#include "json.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace snf {

class SNFModel {
 public:
  SNFModel(EnergyModel prior, EnergyModel target)
      : prior_(std::move(prior)), target_(std::move(target)) {
    if (!prior_ || !target_) throw std::invalid_argument("SNFModel: null energy");
    if (prior_->dim() != target_->dim()) {
      throw std::invalid_argument("SNFModel: prior and target dimensions differ");
    }
    if (!dynamic_cast<const IsotropicGaussian*>(prior_.get())) {
      throw std::invalid_argument("SNFModel: prior must be an isotropic Gaussian");
    }
  }

  SNFModel(const SNFModel& other)
      : prior_(other.prior_), target_(other.target_), lambdas_(other.lambdas_),
        guides_(other.guides_) {
    for (const auto& b : other.blocks_) blocks_.push_back(b->clone());
  }
  SNFModel& operator=(const SNFModel& other) {
    if (this != &other) *this = SNFModel(other);
    return *this;
  }
  SNFModel(SNFModel&&) noexcept = default;
  SNFModel& operator=(SNFModel&&) noexcept = default;

  int dim() const { return prior_->dim(); }
  const EnergyModel& prior() const { return prior_; }
  const EnergyModel& target() const { return target_; }
  const IsotropicGaussian& prior_gaussian() const {
    return static_cast<const IsotropicGaussian&>(*prior_);
  }

  std::size_t size() const { return blocks_.size(); }
  const FlowBlock& block(std::size_t i) const { return *blocks_.at(i); }
  FlowBlock& block(std::size_t i) { return *blocks_.at(i); }
  const std::vector<double>& lambdas() const { return lambdas_; }
  const Energy& guide(std::size_t i) const { return *guides_.at(i); }

  void add_block(std::unique_ptr<FlowBlock> block) {
    if (!block) throw std::invalid_argument("SNFModel: null block");
    if (block->dim() != dim()) {
      throw std::invalid_argument("SNFModel: block " + std::to_string(blocks_.size()) + " (" +
                                  std::string(block->kind()) + ") has dimension " +
                                  std::to_string(block->dim()) + ", model has " +
                                  std::to_string(dim()));
    }
    blocks_.push_back(std::move(block));
    rebuild_schedule();
  }

  /// Replaces the default linear schedule; one nondecreasing value in [0, 1] per layer.
  void set_lambda_schedule(std::vector<double> lambdas) {
    if (lambdas.size() != blocks_.size()) {
      throw std::invalid_argument("SNFModel: lambda schedule length differs from layer count");
    }
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
      if (!(lambdas[i] >= 0.0 && lambdas[i] <= 1.0) || (i > 0 && lambdas[i] < lambdas[i - 1])) {
        throw std::invalid_argument("SNFModel: lambda schedule must be nondecreasing in [0, 1]");
      }
    }
    lambdas_ = std::move(lambdas);
    rebuild_guides();
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& b : blocks_) n += b->parameter_count();
    return n;
  }
  Vector get_parameters() const {
    Vector out(parameter_count());
    Eigen::Index off = 0;
    for (const auto& b : blocks_) {
      const Eigen::Index n = b->parameter_count();
      b->get_parameters({out.data() + off, static_cast<std::size_t>(n)});
      off += n;
    }
    return out;
  }
  void set_parameters(const Vector& params) {
    if (params.size() != parameter_count()) {
      throw std::invalid_argument("SNFModel: parameter vector has length " +
                                  std::to_string(params.size()) + ", model has " +
                                  std::to_string(parameter_count()));
    }
    Eigen::Index off = 0;
    for (auto& b : blocks_) {
      const Eigen::Index n = b->parameter_count();
      b->set_parameters({params.data() + off, static_cast<std::size_t>(n)});
      off += n;
    }
  }
  /// Offset of block i's parameters inside the flat vector.
  Eigen::Index parameter_offset(std::size_t i) const {
    Eigen::Index off = 0;
    for (std::size_t j = 0; j < i; ++j) off += blocks_[j]->parameter_count();
    return off;
  }

 private:
  void rebuild_schedule() {
    const auto t = static_cast<double>(blocks_.size());
    lambdas_.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i) lambdas_[i] = static_cast<double>(i + 1) / t;
    rebuild_guides();
  }
  void rebuild_guides() {
    guides_.clear();
    for (double l : lambdas_) guides_.push_back(interpolate(prior_, target_, l));
  }

  EnergyModel prior_;
  EnergyModel target_;
  std::vector<std::unique_ptr<FlowBlock>> blocks_;
  std::vector<double> lambdas_;
  std::vector<std::shared_ptr<const InterpolatedPotential>> guides_;
};

/// Appends two coupling layers with alternating even/odd masks, so every
/// coordinate is transformed once.
inline void add_realnvp_block(SNFModel& model, const std::vector<int>& hidden, RngStream& rng) {
  const int d = model.dim();
  if (d < 2) throw std::invalid_argument("add_realnvp_block: needs dimension >= 2");
  const auto even = parity_indices(d, 0);
  const auto odd = parity_indices(d, 1);
  model.add_block(std::make_unique<CouplingLayer>(d, even, odd, hidden, rng));
  model.add_block(std::make_unique<CouplingLayer>(d, odd, even, hidden, rng));
}

// ---------------------------------------------------------------------------
// Paths

/// One realized forward path, endpoints only.
struct PathSample {
  Point z;
  Point x;
  double sum_delta_s = 0.0;
  double log_weight = 0.0;
};

/// Exactly the expression used when sampling, so stored weights recompute bitwise.
inline double path_log_weight(double u_x, double u_z, double sum_delta_s) {
  return -u_x + u_z + sum_delta_s;
}

inline double recompute_log_weight(const SNFModel& model, const PathSample& p) {
  return path_log_weight(model.target()->value(p.x), model.prior()->value(p.z), p.sum_delta_s);
}

/// Forward paths in column form.
struct PathBatch {
  Matrix z;
  Matrix x;
  Vector u_z;
  Vector u_x;
  Vector sum_delta_s;
  Vector log_weight;
  /// Per layer: accepted and attempted proposals summed over paths.
  std::vector<long> accepted;
  std::vector<long> proposals;

  Eigen::Index size() const { return x.cols(); }
  PathSample path(Eigen::Index k) const {
    return {z.col(k), x.col(k), sum_delta_s[k], log_weight[k]};
  }
  std::vector<PathSample> paths() const {
    std::vector<PathSample> out;
    out.reserve(static_cast<std::size_t>(size()));
    for (Eigen::Index k = 0; k < size(); ++k) out.push_back(path(k));
    return out;
  }
};

/// Backward paths started from data: x = y_T, z = y_0.
struct BackwardPathBatch {
  Matrix x;
  Matrix z;
  Vector sum_delta_s;  // sum of backward log ratios
  Vector ml_term;      // u_Z(z) - sum_delta_s
  std::vector<long> accepted;
  std::vector<long> proposals;

  Eigen::Index size() const { return x.cols(); }
};

struct SampleOptions {
  int workers = 1;
  /// Paths per work unit. Fixed so results do not depend on the worker count.
  Eigen::Index chunk = 1024;
};

namespace detail {

struct LayerTrace {
  std::vector<std::unique_ptr<BlockTape>> tapes;
};

inline void tally(const BlockResult& r, std::size_t i, std::vector<long>& acc,
                  std::vector<long>& prop) {
  if (r.accepted.size() == 0) return;
  acc[i] += r.accepted.sum();
  prop[i] += static_cast<long>(r.proposals) * r.accepted.size();
}

inline void check_finite(const BlockResult& r, std::size_t i, const FlowBlock& b) {
  if (!r.output.allFinite() || !r.delta_s.allFinite()) {
    throw NumericalError("layer " + std::to_string(i) + " (" + std::string(b.kind()) +
                         ") produced a non-finite value");
  }
}

/// Pushes y_0 through all layers. Returns y_T; adds delta_s into `sum`.
inline Matrix run_forward(const SNFModel& m, Matrix y, std::span<RngStream> streams, Vector& sum,
                          LayerTrace* trace, std::vector<long>& acc, std::vector<long>& prop) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    BlockContext ctx{&m.guide(i), streams};
    BlockResult r = m.block(i).apply(y, Direction::kForward, ctx, trace != nullptr);
    check_finite(r, i, m.block(i));
    tally(r, i, acc, prop);
    sum += r.delta_s;
    y = std::move(r.output);
    if (trace) trace->tapes.push_back(std::move(r.tape));
  }
  return y;
}

/// Pulls y_T back to y_0. trace->tapes[i] belongs to layer i.
inline Matrix run_backward(const SNFModel& m, Matrix y, std::span<RngStream> streams, Vector& sum,
                           LayerTrace* trace, std::vector<long>& acc, std::vector<long>& prop) {
  if (trace) trace->tapes.resize(m.size());
  for (std::size_t j = m.size(); j-- > 0;) {
    BlockContext ctx{&m.guide(j), streams};
    BlockResult r = m.block(j).apply(y, Direction::kBackward, ctx, trace != nullptr);
    check_finite(r, j, m.block(j));
    tally(r, j, acc, prop);
    sum += r.delta_s;
    y = std::move(r.output);
    if (trace) trace->tapes[j] = std::move(r.tape);
  }
  return y;
}

inline Matrix draw_prior(const IsotropicGaussian& prior, std::span<RngStream> streams) {
  Matrix z(prior.dim(), static_cast<Eigen::Index>(streams.size()));
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    RngStream& rng = streams[static_cast<std::size_t>(k)];
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      z(i, k) = prior.mean()[i] + prior.stddev() * rng.normal();
    }
  }
  return z;
}

inline std::vector<RngStream> path_streams(const RngStream& base, Eigen::Index first,
                                           Eigen::Index n) {
  std::vector<RngStream> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) out.push_back(base.split(static_cast<std::uint64_t>(first + k)));
  return out;
}

}  // namespace detail

/// n forward paths; path k draws all of its randomness from rng.split(k).
inline PathBatch sample_forward(const SNFModel& model, Eigen::Index n, const RngStream& rng,
                                SampleOptions opt = {}) {
  if (n < 0) throw std::invalid_argument("sample_forward: negative sample count");
  const int d = model.dim();
  PathBatch out;
  out.z.resize(d, n);
  out.x.resize(d, n);
  out.u_z.resize(n);
  out.u_x.resize(n);
  out.sum_delta_s.resize(n);
  out.log_weight.resize(n);
  out.accepted.assign(model.size(), 0);
  out.proposals.assign(model.size(), 0);
  const Eigen::Index chunk = std::max<Eigen::Index>(opt.chunk, 1);
  const auto n_chunks = static_cast<std::size_t>((n + chunk - 1) / chunk);
  std::vector<std::vector<long>> acc(n_chunks, out.accepted), prop(n_chunks, out.proposals);
  parallel_for(n_chunks, opt.workers, [&](std::size_t c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * chunk;
    const Eigen::Index len = std::min(chunk, n - lo);
    auto streams = detail::path_streams(rng, lo, len);
    Matrix z = detail::draw_prior(model.prior_gaussian(), streams);
    Vector sum = Vector::Zero(len);
    Matrix x = detail::run_forward(model, z, streams, sum, nullptr, acc[c], prop[c]);
    for (Eigen::Index k = 0; k < len; ++k) {
      const Eigen::Index j = lo + k;
      out.u_z[j] = model.prior()->value(z.col(k));
      out.u_x[j] = model.target()->value(x.col(k));
      out.sum_delta_s[j] = sum[k];
      out.log_weight[j] = path_log_weight(out.u_x[j], out.u_z[j], sum[k]);
    }
    out.z.middleCols(lo, len) = z;
    out.x.middleCols(lo, len) = x;
  });
  for (std::size_t c = 0; c < n_chunks; ++c) {
    for (std::size_t i = 0; i < model.size(); ++i) {
      out.accepted[i] += acc[c][i];
      out.proposals[i] += prop[c][i];
    }
  }
  return out;
}

/// Runs the flow backward from each data column; column k uses rng.split(k).
inline BackwardPathBatch sample_backward(const SNFModel& model, const Matrix& data,
                                         const RngStream& rng, SampleOptions opt = {}) {
  if (data.rows() != model.dim()) {
    throw std::invalid_argument("sample_backward: data dimension " + std::to_string(data.rows()) +
                                " does not match model dimension " + std::to_string(model.dim()));
  }
  const Eigen::Index n = data.cols();
  BackwardPathBatch out;
  out.x = data;
  out.z.resize(data.rows(), n);
  out.sum_delta_s.resize(n);
  out.ml_term.resize(n);
  out.accepted.assign(model.size(), 0);
  out.proposals.assign(model.size(), 0);
  const Eigen::Index chunk = std::max<Eigen::Index>(opt.chunk, 1);
  const auto n_chunks = static_cast<std::size_t>((n + chunk - 1) / chunk);
  std::vector<std::vector<long>> acc(n_chunks, out.accepted), prop(n_chunks, out.proposals);
  parallel_for(n_chunks, opt.workers, [&](std::size_t c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * chunk;
    const Eigen::Index len = std::min(chunk, n - lo);
    auto streams = detail::path_streams(rng, lo, len);
    Vector sum = Vector::Zero(len);
    Matrix z = detail::run_backward(model, data.middleCols(lo, len), streams, sum, nullptr,
                                    acc[c], prop[c]);
    for (Eigen::Index k = 0; k < len; ++k) {
      out.sum_delta_s[lo + k] = sum[k];
      out.ml_term[lo + k] = model.prior()->value(z.col(k)) - sum[k];
    }
    out.z.middleCols(lo, len) = z;
  });
  for (std::size_t c = 0; c < n_chunks; ++c) {
    for (std::size_t i = 0; i < model.size(); ++i) {
      out.accepted[i] += acc[c][i];
      out.proposals[i] += prop[c][i];
    }
  }
  return out;
}

/// Mean of u_X(x) - sum delta_s.
inline double loss_kl(const PathBatch& paths) {
  if (paths.size() == 0) throw std::invalid_argument("loss_kl: empty batch");
  return (paths.u_x - paths.sum_delta_s).mean();
}

inline double loss_kl(const SNFModel& model, const std::vector<PathSample>& paths) {
  if (paths.empty()) throw std::invalid_argument("loss_kl: empty batch");
  double s = 0.0;
  for (const auto& p : paths) s += model.target()->value(p.x) - p.sum_delta_s;
  return s / static_cast<double>(paths.size());
}

/// Mean of u_Z(y_0) - sum delta_s~ over backward paths.
inline double loss_ml(const BackwardPathBatch& paths) {
  if (paths.size() == 0) throw std::invalid_argument("loss_ml: empty batch");
  return paths.ml_term.mean();
}

// ---------------------------------------------------------------------------
// Gradients and training

struct LossGradient {
  double j_kl = std::numeric_limits<double>::quiet_NaN();
  double j_ml = std::numeric_limits<double>::quiet_NaN();
  double j = std::numeric_limits<double>::quiet_NaN();
  Vector gradient;
};

/// c * J_KL + (1 - c) * J_ML on one minibatch and its gradient in the flat
/// parameters. Forward paths use kl_rng.split(k); backward path k starts at
/// data column batch_index[k] and uses ml_rng.split(k). Either part may be
/// skipped: kl_batch = 0 or an empty index list.
inline LossGradient loss_and_gradient(const SNFModel& model, double c, Eigen::Index kl_batch,
                                      const RngStream& kl_rng, const Matrix* data,
                                      const std::vector<Eigen::Index>& batch_index,
                                      const RngStream& ml_rng) {
  if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("loss mix c must lie in [0, 1]");
  LossGradient out;
  out.gradient = Vector::Zero(model.parameter_count());
  std::vector<long> acc(model.size(), 0), prop(model.size(), 0);
  auto pull = [&](std::size_t i, const detail::LayerTrace& trace, Matrix& cot, const Vector& ds) {
    const FlowBlock& b = model.block(i);
    const Eigen::Index off = model.parameter_offset(i);
    cot = b.pullback(*trace.tapes[i], cot, ds,
                     {out.gradient.data() + off, static_cast<std::size_t>(b.parameter_count())});
  };

  if (kl_batch > 0) {
    const double bsz = static_cast<double>(kl_batch);
    auto streams = detail::path_streams(kl_rng, 0, kl_batch);
    const Matrix z = detail::draw_prior(model.prior_gaussian(), streams);
    Vector sum = Vector::Zero(kl_batch);
    detail::LayerTrace trace;
    const bool grad = c > 0.0;
    const Matrix x = detail::run_forward(model, z, streams, sum, grad ? &trace : nullptr, acc, prop);
    const Vector ux = eval_energies(*model.target(), x);
    out.j_kl = (ux - sum).mean();
    if (grad) {
      Matrix cot = (c / bsz) * eval_gradients(*model.target(), x);
      const Vector ds = Vector::Constant(kl_batch, -c / bsz);
      for (std::size_t i = model.size(); i-- > 0;) pull(i, trace, cot, ds);
    }
  }
  if (data && !batch_index.empty()) {
    const auto n = static_cast<Eigen::Index>(batch_index.size());
    const double bsz = static_cast<double>(n);
    Matrix xb(data->rows(), n);
    for (Eigen::Index k = 0; k < n; ++k) xb.col(k) = data->col(batch_index[static_cast<std::size_t>(k)]);
    if (xb.rows() != model.dim()) throw std::invalid_argument("training data dimension mismatch");
    auto streams = detail::path_streams(ml_rng, 0, n);
    Vector sum = Vector::Zero(n);
    detail::LayerTrace trace;
    const bool grad = c < 1.0;
    const Matrix z = detail::run_backward(model, xb, streams, sum, grad ? &trace : nullptr, acc, prop);
    out.j_ml = (eval_energies(*model.prior(), z) - sum).mean();
    if (grad) {
      Matrix cot = ((1.0 - c) / bsz) * eval_gradients(*model.prior(), z);
      const Vector ds = Vector::Constant(n, -(1.0 - c) / bsz);
      for (std::size_t i = 0; i < model.size(); ++i) pull(i, trace, cot, ds);
    }
  }
  if (c == 1.0) {
    out.j = out.j_kl;
  } else if (c == 0.0) {
    out.j = out.j_ml;
  } else {
    out.j = c * out.j_kl + (1.0 - c) * out.j_ml;
  }
  return out;
}

struct TrainPhase {
  double c = 0.0;  // weight of J_KL; J_ML gets 1 - c
  int iterations = 0;
  int batch_size = 128;
};

struct TrainConfig {
  std::vector<TrainPhase> phases;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

struct TrainRecord {
  int iteration = 0;
  double j_kl = 0.0;
  double j_ml = 0.0;
  double j = 0.0;
};

struct TrainReport {
  std::vector<TrainRecord> records;
  Vector final_parameters;
};

/// Shortest round-trip decimal form; empty for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_train_csv(std::ostream& out, const TrainReport& report) {
  out << "iteration,J_KL,J_ML,J\n";
  for (const auto& r : report.records) {
    out << r.iteration << ',' << format_double(r.j_kl) << ',' << format_double(r.j_ml) << ','
        << format_double(r.j) << '\n';
  }
}

/// Both losses are evaluated every iteration (J_ML only when data is given);
/// only the ones with nonzero weight are differentiated.
inline TrainReport train(SNFModel& model, const TrainConfig& config, const Matrix* data) {
  for (const auto& ph : config.phases) {
    if (!(ph.c >= 0.0 && ph.c <= 1.0)) throw std::invalid_argument("train: c must lie in [0, 1]");
    if (ph.iterations < 0 || ph.batch_size < 1) {
      throw std::invalid_argument("train: iterations >= 0 and batch_size >= 1 required");
    }
    if (ph.c < 1.0 && ph.iterations > 0 && (!data || data->cols() == 0)) {
      throw std::invalid_argument("train: data required when c < 1");
    }
  }
  if (data && data->cols() > 0 && data->rows() != model.dim()) {
    throw std::invalid_argument("train: data dimension does not match the model");
  }
  const RngStream master(config.seed, 0x7472616931ULL);
  Vector params = model.get_parameters();
  AdamState adam(params.size(), config.adam);
  TrainReport report;
  int iteration = 0;
  for (const auto& ph : config.phases) {
    for (int it = 0; it < ph.iterations; ++it, ++iteration) {
      const RngStream step = master.split(static_cast<std::uint64_t>(iteration));
      const RngStream kl_rng = step.split(0);
      const RngStream ml_rng = step.split(1);
      std::vector<Eigen::Index> idx;
      if (data && data->cols() > 0) {
        RngStream pick = step.split(2);
        idx.resize(static_cast<std::size_t>(ph.batch_size));
        for (auto& i : idx) i = static_cast<Eigen::Index>(pick.bounded(static_cast<std::uint64_t>(data->cols())));
      }
      LossGradient lg = loss_and_gradient(model, ph.c, ph.batch_size, kl_rng, data, idx, ml_rng);
      if (!lg.gradient.allFinite()) {
        throw NumericalError("train: non-finite gradient at iteration " + std::to_string(iteration));
      }
      report.records.push_back({iteration, lg.j_kl, lg.j_ml, lg.j});
      adam_step(adam, params, lg.gradient);
      model.set_parameters(params);
    }
  }
  report.final_parameters = params;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json describe_block(const FlowBlock& b) {
  nlohmann::json j;
  j["type"] = std::string(b.kind());
  if (const auto* c = dynamic_cast<const CouplingLayer*>(&b)) {
    j["conditioned"] = c->conditioned();
    j["transformed"] = c->transformed();
    j["scale_clamp"] = c->scale_clamp();
    j["scale_net"] = c->scale_net().layer_dims();
    j["translate_net"] = c->translate_net().layer_dims();
  } else if (const auto* s = dynamic_cast<const SwapLayer*>(&b)) {
    j["permutation"] = s->permutation();
  } else if (dynamic_cast<const ScaleShiftLayer*>(&b)) {
    j["dim"] = b.dim();
  } else if (const auto* m = dynamic_cast<const MetropolisBlock*>(&b)) {
    j["n_steps"] = m->n_steps();
    j["proposal_std"] = m->proposal_std();
  } else if (const auto* o = dynamic_cast<const OverdampedLangevinBlock*>(&b)) {
    j["n_steps"] = o->n_steps();
    j["eps"] = o->step_size();
    j["beta"] = o->beta();
  } else if (const auto* l = dynamic_cast<const LangevinBBKBlock*>(&b)) {
    j["n_steps"] = l->n_steps();
    j["dt"] = l->dt();
    j["gamma"] = l->gamma();
    j["mass"] = l->mass();
    j["beta"] = l->beta();
  } else if (const auto* h = dynamic_cast<const HMCBlock*>(&b)) {
    j["n_steps"] = h->n_steps();
    j["n_leapfrog"] = h->n_leapfrog();
    j["eps"] = h->step_size();
    j["mass"] = std::vector<double>(h->mass().data(), h->mass().data() + h->mass().size());
  }
  j["parameter_count"] = b.parameter_count();
  return j;
}

/// Architecture descriptor stored next to the flat parameter file.
inline nlohmann::json describe_model(const SNFModel& m) {
  nlohmann::json j;
  j["dim"] = m.dim();
  j["prior"] = std::string(m.prior()->kind());
  j["target"] = std::string(m.target()->kind());
  j["lambdas"] = m.lambdas();
  j["parameter_count"] = m.parameter_count();
  j["format"] = "float64-le";
  j["blocks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < m.size(); ++i) j["blocks"].push_back(describe_block(m.block(i)));
  return j;
}

inline void save_checkpoint(const SNFModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "model.bin", std::ios::binary);
  std::ofstream js(dir / "model.json");
  if (!bin || !js) throw std::runtime_error("save_checkpoint: cannot write to " + dir.string());
  const Vector p = m.get_parameters();
  write_f64_le(bin, {p.data(), static_cast<std::size_t>(p.size())});
  js << describe_model(m).dump(2) << "\n";
}

/// Loads parameters into an already built model; the stored descriptor must
/// match the model's architecture.
inline void load_checkpoint(SNFModel& m, const std::filesystem::path& dir) {
  std::ifstream bin(dir / "model.bin", std::ios::binary);
  std::ifstream js(dir / "model.json");
  if (!bin || !js) throw std::runtime_error("load_checkpoint: cannot read " + dir.string());
  const auto stored = nlohmann::json::parse(js);
  const auto expect = describe_model(m);
  if (stored != expect) {
    throw std::invalid_argument("load_checkpoint: architecture in " + (dir / "model.json").string() +
                                " does not match the configured model");
  }
  const std::vector<double> v = read_f64_le(bin);
  if (static_cast<Eigen::Index>(v.size()) != m.parameter_count()) {
    throw std::invalid_argument("load_checkpoint: parameter file length mismatch");
  }
  m.set_parameters(Eigen::Map<const Vector>(v.data(), m.parameter_count()));
}

}  // namespace snf
