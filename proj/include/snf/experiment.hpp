#pragma once

// Config-driven experiments: target, architecture, data, training and
// evaluation described by one JSON document.

#include "snf/estimators.hpp"
#include "snf/image.hpp"
#include "snf/snf.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace snf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Reads members of one JSON object and remembers which keys were consumed so
// leftovers can be reported with their full path.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    if (!j_.contains(key)) return fallback;
    return required<T>(key);
  }

  template <typename T>
  T required(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(child(key) + ": missing required key");
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(child(key) + ": wrong type");
    }
  }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(child(key) + ": missing required key");
    return j_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError(child(item.key()) + ": unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline std::string indexed(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

template <typename T>
void check_positive(T v, const std::string& path) {
  if (!(v > T(0))) throw ConfigError(path + ": must be positive");
}

}  // namespace detail

struct TargetConfig {
  std::string type = "double_well";  // double_well | image | gaussian
  int dim = 2;
  DoubleWellParams double_well;
  std::filesystem::path image;
  double floor = 1e-3;
  DomainBox domain;
  double stddev = 1.0;
};

struct BlockConfig {
  std::string type;  // realnvp | coupling | swap | scale_shift | metropolis | overdamped_langevin | bbk_langevin | hmc
  std::vector<int> hidden;
  double scale_clamp = 3.0;
  int conditioned_parity = 0;  // coupling: "even" conditions on even indices
  int n_steps = 1;
  double proposal_std = 0.1;
  double eps = 0.01;
  double dt = 0.01;
  double gamma = 1.0;
  double mass = 1.0;
  int n_leapfrog = 5;
};

struct DataConfig {
  std::string source = "none";  // none | exact | metropolis
  long n = 0;
  double proposal_std = 1.5;
  long burn_in = 10000;
  long thin = 50;
  std::vector<std::vector<double>> starts;  // one chain per start, n split evenly
};

struct EvalConfig {
  long n_samples = 20000;
  bool profile = false;
  ProfileOptions profile_options;
  int profile_axis = 0;
  bool histogram = false;
  HistogramGrid grid;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  TargetConfig target;
  std::vector<BlockConfig> blocks;
  std::optional<std::vector<double>> lambdas;
  DataConfig data;
  TrainConfig training;
  EvalConfig evaluation;
  std::filesystem::path out_dir = "out";
};

namespace detail {

inline TargetConfig parse_target(const nlohmann::json& j, const std::filesystem::path& base) {
  ObjectReader r(j, "target");
  TargetConfig t;
  t.type = r.required<std::string>("type");
  if (t.type == "double_well") {
    t.dim = r.get<int>("dim", 2);
    t.double_well.a = r.get<double>("a", 1.0);
    t.double_well.b = r.get<double>("b", 6.0);
    t.double_well.c = r.get<double>("c", 1.0);
    t.double_well.d = r.get<double>("d", 1.0);
  } else if (t.type == "image") {
    t.dim = 2;
    t.image = r.required<std::string>("path");
    if (t.image.is_relative()) t.image = base / t.image;
    t.floor = r.get<double>("floor", 1e-3);
    check_positive(t.floor, "target.floor");
    if (r.has("domain")) {
      const auto d = r.required<std::vector<double>>("domain");
      if (d.size() != 2 || !(d[1] > d[0])) throw ConfigError("target.domain: expected [lo, hi] with lo < hi");
      t.domain = {d[0], d[1]};
    }
  } else if (t.type == "gaussian") {
    t.dim = r.get<int>("dim", 2);
    t.stddev = r.get<double>("stddev", 1.0);
    check_positive(t.stddev, "target.stddev");
  } else {
    throw ConfigError("target.type: unknown target '" + t.type + "'");
  }
  check_positive(t.dim, "target.dim");
  r.finish();
  return t;
}

inline BlockConfig parse_block(const nlohmann::json& j, const std::string& path) {
  ObjectReader r(j, path);
  BlockConfig b;
  b.type = r.required<std::string>("type");
  if (b.type == "realnvp" || b.type == "coupling") {
    b.hidden = r.get<std::vector<int>>("hidden", {64, 64});
    for (int h : b.hidden) check_positive(h, path + ".hidden");
    b.scale_clamp = r.get<double>("scale_clamp", 3.0);
    check_positive(b.scale_clamp, path + ".scale_clamp");
    if (b.type == "coupling") {
      const auto mask = r.get<std::string>("mask", "even");
      if (mask != "even" && mask != "odd") throw ConfigError(path + ".mask: expected 'even' or 'odd'");
      b.conditioned_parity = mask == "even" ? 0 : 1;
    }
  } else if (b.type == "swap" || b.type == "scale_shift") {
  } else if (b.type == "metropolis") {
    b.n_steps = r.required<int>("n_steps");
    b.proposal_std = r.required<double>("proposal_std");
    check_positive(b.proposal_std, path + ".proposal_std");
  } else if (b.type == "overdamped_langevin") {
    b.n_steps = r.required<int>("n_steps");
    b.eps = r.required<double>("eps");
    check_positive(b.eps, path + ".eps");
  } else if (b.type == "bbk_langevin") {
    b.n_steps = r.required<int>("n_steps");
    b.dt = r.required<double>("dt");
    b.gamma = r.get<double>("gamma", 1.0);
    b.mass = r.get<double>("mass", 1.0);
    check_positive(b.dt, path + ".dt");
    check_positive(b.gamma, path + ".gamma");
    check_positive(b.mass, path + ".mass");
  } else if (b.type == "hmc") {
    b.n_steps = r.required<int>("n_steps");
    b.n_leapfrog = r.required<int>("n_leapfrog");
    b.eps = r.required<double>("eps");
    check_positive(b.n_leapfrog, path + ".n_leapfrog");
    check_positive(b.eps, path + ".eps");
  } else {
    throw ConfigError(path + ".type: unknown block type '" + b.type + "'");
  }
  if (b.type != "realnvp" && b.type != "coupling" && b.type != "swap" && b.type != "scale_shift") {
    check_positive(b.n_steps, path + ".n_steps");
  }
  r.finish();
  return b;
}

inline DataConfig parse_data(const nlohmann::json& j) {
  ObjectReader r(j, "data");
  DataConfig d;
  d.source = r.required<std::string>("source");
  if (d.source != "none" && d.source != "exact" && d.source != "metropolis") {
    throw ConfigError("data.source: unknown source '" + d.source + "'");
  }
  if (d.source != "none") {
    d.n = r.required<long>("n");
    check_positive(d.n, "data.n");
  }
  if (d.source == "metropolis") {
    d.proposal_std = r.get<double>("proposal_std", 1.5);
    d.burn_in = r.get<long>("burn_in", 10000);
    d.thin = r.get<long>("thin", 50);
    d.starts = r.get<std::vector<std::vector<double>>>("starts", {});
    check_positive(d.proposal_std, "data.proposal_std");
    check_positive(d.thin, "data.thin");
    if (d.burn_in < 0) throw ConfigError("data.burn_in: must be >= 0");
  }
  r.finish();
  return d;
}

inline TrainConfig parse_training(const nlohmann::json& j) {
  ObjectReader r(j, "training");
  TrainConfig t;
  const auto& phases = r.raw("phases");
  if (!phases.is_array()) throw ConfigError("training.phases: expected an array");
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const std::string path = indexed("training.phases", i);
    ObjectReader p(phases[i], path);
    TrainPhase ph;
    ph.c = p.required<double>("c");
    ph.iterations = p.required<int>("iterations");
    ph.batch_size = p.get<int>("batch_size", 128);
    if (!(ph.c >= 0.0 && ph.c <= 1.0)) throw ConfigError(path + ".c: must lie in [0, 1]");
    if (ph.iterations < 0) throw ConfigError(path + ".iterations: must be >= 0");
    check_positive(ph.batch_size, path + ".batch_size");
    p.finish();
    t.phases.push_back(ph);
  }
  t.adam.learning_rate = r.get<double>("learning_rate", 1e-3);
  t.adam.beta1 = r.get<double>("beta1", 0.9);
  t.adam.beta2 = r.get<double>("beta2", 0.999);
  t.adam.epsilon = r.get<double>("adam_epsilon", 1e-8);
  if (!(t.adam.learning_rate >= 0.0)) throw ConfigError("training.learning_rate: must be >= 0");
  r.finish();
  return t;
}

inline EvalConfig parse_evaluation(const nlohmann::json& j) {
  ObjectReader r(j, "evaluation");
  EvalConfig e;
  e.n_samples = r.get<long>("n_samples", 20000);
  check_positive(e.n_samples, "evaluation.n_samples");
  if (r.has("profile")) {
    e.profile = true;
    ObjectReader p(r.raw("profile"), "evaluation.profile");
    e.profile_axis = p.get<int>("axis", 0);
    e.profile_options.bins = p.get<int>("bins", 100);
    e.profile_options.lo = p.get<double>("lo", -2.5);
    e.profile_options.hi = p.get<double>("hi", 2.5);
    e.profile_options.n_bootstrap = p.get<int>("bootstrap", 200);
    check_positive(e.profile_options.bins, "evaluation.profile.bins");
    if (!(e.profile_options.hi > e.profile_options.lo)) {
      throw ConfigError("evaluation.profile: empty range");
    }
    if (e.profile_options.n_bootstrap < 2) throw ConfigError("evaluation.profile.bootstrap: must be >= 2");
    p.finish();
  }
  if (r.has("histogram_kl")) {
    e.histogram = true;
    ObjectReader h(r.raw("histogram_kl"), "evaluation.histogram_kl");
    e.grid.bins = h.get<int>("bins", 100);
    e.grid.lo = h.get<double>("lo", -2.5);
    e.grid.hi = h.get<double>("hi", 2.5);
    if (e.grid.bins < 2) throw ConfigError("evaluation.histogram_kl.bins: must be >= 2");
    if (!(e.grid.hi > e.grid.lo)) throw ConfigError("evaluation.histogram_kl: empty range");
    h.finish();
  }
  r.finish();
  return e;
}

}  // namespace detail

/// `base` resolves relative paths inside the config (the image file).
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base = ".") {
  detail::ObjectReader r(j, "");
  ExperimentConfig c;
  c.seed = r.get<std::uint64_t>("seed", 0);
  c.target = detail::parse_target(r.raw("target"), base);
  const auto& blocks = r.raw("blocks");
  if (!blocks.is_array()) throw ConfigError("blocks: expected an array");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    c.blocks.push_back(detail::parse_block(blocks[i], detail::indexed("blocks", i)));
  }
  if (r.has("lambda_schedule")) c.lambdas = r.required<std::vector<double>>("lambda_schedule");
  if (r.has("data")) c.data = detail::parse_data(r.raw("data"));
  if (r.has("training")) {
    c.training = detail::parse_training(r.raw("training"));
  }
  if (r.has("evaluation")) c.evaluation = detail::parse_evaluation(r.raw("evaluation"));
  c.out_dir = r.get<std::string>("out", "out");
  r.finish();
  if (c.data.source == "exact" && c.target.type == "double_well") {
    throw ConfigError("data.source: no exact sampler for the double well, use 'metropolis'");
  }
  if (c.evaluation.histogram && c.target.dim != 2) {
    throw ConfigError("evaluation.histogram_kl: needs a two-dimensional target");
  }
  if (c.evaluation.profile && (c.evaluation.profile_axis < 0 || c.evaluation.profile_axis >= c.target.dim)) {
    throw ConfigError("evaluation.profile.axis: out of range");
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Building

inline EnergyModel build_target(const TargetConfig& t) {
  if (t.type == "double_well") return std::make_shared<DoubleWell>(t.dim, t.double_well);
  if (t.type == "gaussian") return std::make_shared<IsotropicGaussian>(t.dim, t.stddev);
  GrayImage img;
  try {
    img = read_pgm_file(t.image.string());
  } catch (const std::exception& e) {
    throw ConfigError("target.path: " + std::string(e.what()));
  }
  return load_image_energy(img, t.domain, t.floor);
}

/// Stream ids used under the experiment seed.
enum : std::uint64_t { kInitStream = 1, kDataStream = 2, kEvalStream = 3, kSampleStream = 4 };

inline SNFModel build_model(const ExperimentConfig& c) {
  const int d = c.target.dim;
  SNFModel m(std::make_shared<IsotropicGaussian>(d), build_target(c.target));
  const RngStream init(c.seed, kInitStream);
  for (std::size_t i = 0; i < c.blocks.size(); ++i) {
    const BlockConfig& b = c.blocks[i];
    const std::string where = detail::indexed("blocks", i);
    try {
      if (b.type == "realnvp") {
        if (d < 2) throw ConfigError(where + ": realnvp needs dimension >= 2");
        RngStream rng = init.split(i);
        const auto even = parity_indices(d, 0), odd = parity_indices(d, 1);
        m.add_block(std::make_unique<CouplingLayer>(d, even, odd, b.hidden, rng, b.scale_clamp));
        m.add_block(std::make_unique<CouplingLayer>(d, odd, even, b.hidden, rng, b.scale_clamp));
      } else if (b.type == "coupling") {
        if (d < 2) throw ConfigError(where + ": coupling needs dimension >= 2");
        RngStream rng = init.split(i);
        m.add_block(std::make_unique<CouplingLayer>(d, parity_indices(d, b.conditioned_parity),
                                                    parity_indices(d, 1 - b.conditioned_parity), b.hidden, rng,
                                                    b.scale_clamp));
      } else if (b.type == "swap") {
        m.add_block(std::make_unique<SwapLayer>(d));
      } else if (b.type == "scale_shift") {
        m.add_block(std::make_unique<ScaleShiftLayer>(d));
      } else if (b.type == "metropolis") {
        m.add_block(std::make_unique<MetropolisBlock>(d, b.n_steps, b.proposal_std));
      } else if (b.type == "overdamped_langevin") {
        m.add_block(std::make_unique<OverdampedLangevinBlock>(d, b.n_steps, b.eps));
      } else if (b.type == "bbk_langevin") {
        m.add_block(std::make_unique<LangevinBBKBlock>(d, b.n_steps, b.dt, b.gamma, b.mass));
      } else if (b.type == "hmc") {
        m.add_block(std::make_unique<HMCBlock>(d, b.n_steps, b.n_leapfrog, b.eps));
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  if (c.lambdas) {
    try {
      m.set_lambda_schedule(*c.lambdas);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("lambda_schedule: ") + e.what());
    }
  }
  return m;
}

/// Training data per the config: exact samples (image, gaussian) or thinned
/// Metropolis chains on the target.
inline Matrix make_data(const ExperimentConfig& c, const Energy& target) {
  const DataConfig& dc = c.data;
  const int d = target.dim();
  if (dc.source == "none") return Matrix(d, 0);
  RngStream rng(c.seed, kDataStream);
  if (dc.source == "exact") {
    if (const auto* img = dynamic_cast<const GridImage*>(&target)) return img->sample(dc.n, rng);
    const auto* g = dynamic_cast<const IsotropicGaussian*>(&target);
    if (!g) throw ConfigError("data.source: no exact sampler for this target");
    Matrix out(d, dc.n);
    for (Eigen::Index k = 0; k < out.cols(); ++k) {
      for (int i = 0; i < d; ++i) out(i, k) = g->mean()[i] + g->stddev() * rng.normal();
    }
    return out;
  }
  std::vector<Vector> starts;
  for (const auto& s : dc.starts) {
    if (static_cast<int>(s.size()) != d) throw ConfigError("data.starts: dimension mismatch");
    starts.push_back(Eigen::Map<const Vector>(s.data(), d));
  }
  if (starts.empty()) starts.push_back(Vector::Zero(d));
  const MetropolisBlock kernel(d, static_cast<int>(dc.thin), dc.proposal_std);
  const MetropolisBlock single(d, 1, dc.proposal_std);
  Matrix out(d, dc.n);
  const auto chains = static_cast<long>(starts.size());
  long col = 0;
  for (long ci = 0; ci < chains; ++ci) {
    RngStream r = rng.split(static_cast<std::uint64_t>(ci));
    Vector y = starts[static_cast<std::size_t>(ci)];
    for (long b = 0; b < dc.burn_in; ++b) y = metropolis_step(single, y, target, r).output;
    const long count = dc.n / chains + (ci < dc.n % chains ? 1 : 0);
    for (long k = 0; k < count; ++k) {
      y = metropolis_step(kernel, y, target, r).output;
      out.col(col++) = y;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running

inline TrainReport run_training(const ExperimentConfig& c, SNFModel& model, const Matrix& data) {
  TrainConfig tc = c.training;
  tc.seed = c.seed;
  return train(model, tc, data.cols() > 0 ? &data : nullptr);
}

struct Metric {
  std::string name;
  double value;
};

struct Evaluation {
  PathBatch paths;
  std::vector<Metric> metrics;
  std::optional<FreeEnergyProfile> profile;
  std::optional<HistogramKL> kl;
};

/// Samples evaluation.n_samples forward paths and derives the configured
/// estimates. Deterministic in (model, config seed), independent of workers.
inline Evaluation run_evaluation(const ExperimentConfig& c, const SNFModel& model, int workers) {
  Evaluation ev;
  const RngStream base(c.seed, kEvalStream);
  ev.paths = sample_forward(model, c.evaluation.n_samples, base.split(0), {workers, 1024});
  const PathBatch& p = ev.paths;
  const auto n = static_cast<double>(p.size());
  ev.metrics.push_back({"n_samples", n});
  ev.metrics.push_back({"J_KL", loss_kl(p)});
  ev.metrics.push_back({"mean_log_weight", p.log_weight.mean()});
  ev.metrics.push_back({"max_log_weight", p.log_weight.maxCoeff()});
  ev.metrics.push_back({"ess_fraction", effective_sample_size(p.log_weight) / n});
  for (int i = 0; i < model.dim(); ++i) {
    const Estimate e = importance_expectation(p.log_weight, p.x.row(i).transpose());
    ev.metrics.push_back({"mean_x" + std::to_string(i), e.value});
    ev.metrics.push_back({"mean_x" + std::to_string(i) + "_stderr", e.std_error});
  }
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (p.proposals[i] == 0) continue;
    ev.metrics.push_back({"acceptance_layer" + std::to_string(i),
                          static_cast<double>(p.accepted[i]) / static_cast<double>(p.proposals[i])});
  }
  if (c.evaluation.profile) {
    ProfileOptions po = c.evaluation.profile_options;
    po.workers = workers;
    ev.profile = free_energy_profile(WeightedEnsemble(p.x, p.log_weight), c.evaluation.profile_axis,
                                     base.split(1), po);
    double s = 0.0;
    int m = 0;
    for (Eigen::Index b = 0; b < ev.profile->bins(); ++b) {
      if (!ev.profile->populated[static_cast<std::size_t>(b)]) continue;
      s += ev.profile->std_error[b];
      ++m;
    }
    ev.metrics.push_back({"profile_populated_bins", static_cast<double>(m)});
    ev.metrics.push_back({"profile_mean_stderr", m ? s / m : std::numeric_limits<double>::quiet_NaN()});
  }
  if (c.evaluation.histogram) {
    ev.kl = histogram_kl(p.x, *model.target(), c.evaluation.grid);
    ev.metrics.push_back({"histogram_kl", ev.kl->kl});
  }
  return ev;
}

// ---------------------------------------------------------------------------
// CSV output

inline void write_metrics_csv(std::ostream& out, const std::vector<Metric>& metrics) {
  out << "metric,value\n";
  for (const auto& m : metrics) out << m.name << ',' << format_double(m.value) << '\n';
}

inline void write_profile_csv(std::ostream& out, const FreeEnergyProfile& p) {
  out << "bin_center,free_energy,stderr\n";
  for (Eigen::Index b = 0; b < p.bins(); ++b) {
    out << format_double(p.centers[b]) << ',' << format_double(p.free_energy[b]) << ','
        << format_double(p.std_error[b]) << '\n';
  }
}

inline void write_kl_csv(std::ostream& out, const HistogramKL& kl) {
  out << "grid,n_samples,kl\n";
  out << kl.bins << ',' << kl.n_samples << ',' << format_double(kl.kl) << '\n';
}

inline void write_samples_csv(std::ostream& out, const PathBatch& p, int dim) {
  for (int i = 0; i < dim; ++i) out << 'x' << i << ',';
  out << "log_weight\n";
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    for (int i = 0; i < dim; ++i) out << format_double(p.x(i, k)) << ',';
    out << format_double(p.log_weight[k]) << '\n';
  }
}

}  // namespace snf
