// snf_cli: train, sample and evaluate stochastic normalizing flows from a
// JSON experiment config.

#include "snf/experiment.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace snf;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string out;
  std::string checkpoint;
};

ExperimentConfig load(const Common& o) {
  ExperimentConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.workers < 1) throw ConfigError("--workers: must be >= 1");
  return c;
}

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

// Loads trained parameters; models without trainable parameters need none.
void restore(SNFModel& m, const ExperimentConfig& c, const Common& o) {
  const fs::path dir = o.checkpoint.empty() ? c.out_dir / "checkpoint" : fs::path(o.checkpoint);
  if (!fs::exists(dir / "model.json")) {
    if (m.parameter_count() == 0) return;
    throw ConfigError("no checkpoint in " + dir.string() + " (run train first or pass --checkpoint)");
  }
  try {
    load_checkpoint(m, dir);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

int cmd_train(const Common& o) {
  const ExperimentConfig c = load(o);
  SNFModel m = build_model(c);
  const Matrix data = make_data(c, *m.target());
  const TrainReport r = run_training(c, m, data);
  save_checkpoint(m, c.out_dir / "checkpoint");
  auto csv = open_out(c.out_dir / "train.csv");
  write_train_csv(csv, r);
  std::cout << "trained " << r.records.size() << " iterations, " << m.parameter_count()
            << " parameters -> " << (c.out_dir / "checkpoint").string() << "\n";
  return 0;
}

int cmd_sample(const Common& o, long n) {
  if (n < 0) throw ConfigError("--n: must be >= 0");
  const ExperimentConfig c = load(o);
  SNFModel m = build_model(c);
  restore(m, c, o);
  const PathBatch p = sample_forward(m, n, RngStream(c.seed, kSampleStream), {o.workers, 1024});
  auto csv = open_out(c.out_dir / "samples.csv");
  write_samples_csv(csv, p, m.dim());
  std::cout << "wrote " << n << " samples -> " << (c.out_dir / "samples.csv").string() << "\n";
  return 0;
}

int cmd_evaluate(const Common& o) {
  const ExperimentConfig c = load(o);
  SNFModel m = build_model(c);
  restore(m, c, o);
  const Evaluation ev = run_evaluation(c, m, o.workers);
  auto metrics = open_out(c.out_dir / "metrics.csv");
  write_metrics_csv(metrics, ev.metrics);
  if (ev.profile) {
    auto f = open_out(c.out_dir / "profile.csv");
    write_profile_csv(f, *ev.profile);
  }
  if (ev.kl) {
    auto f = open_out(c.out_dir / "kl.csv");
    write_kl_csv(f, *ev.kl);
  }
  for (const auto& mt : ev.metrics) std::cout << mt.name << " = " << format_double(mt.value) << "\n";
  return 0;
}

// Across-run summary of metrics.csv files: mean and sample std per metric.
int cmd_aggregate(const std::vector<std::string>& runs, const std::string& out) {
  if (runs.empty()) throw ConfigError("--runs: need at least one run directory");
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : runs) {
    std::ifstream in(fs::path(r) / "metrics.csv");
    if (!in) throw ConfigError("cannot read " + (fs::path(r) / "metrics.csv").string());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      const std::string key = line.substr(0, comma), val = line.substr(comma + 1);
      if (val.empty()) continue;
      if (!values.count(key)) order.push_back(key);
      values[key].push_back(std::stod(val));
    }
  }
  auto csv = open_out(fs::path(out) / "aggregate.csv");
  csv << "metric,runs,mean,std\n";
  for (const auto& key : order) {
    const auto& v = values[key];
    const Vector x = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    const double mean = x.mean();
    const double sd = x.size() > 1 ? std::sqrt((x.array() - mean).square().sum() / (x.size() - 1))
                                   : std::numeric_limits<double>::quiet_NaN();
    csv << key << ',' << v.size() << ',' << format_double(mean) << ',' << format_double(sd) << '\n';
  }
  std::cout << "aggregated " << runs.size() << " runs -> " << (fs::path(out) / "aggregate.csv").string()
            << "\n";
  return 0;
}

void add_common(CLI::App* sub, Common& o, bool checkpoint) {
  sub->add_option("--config", o.config, "experiment config (JSON)")->required();
  sub->add_option("--seed", o.seed, "override the config seed");
  sub->add_option("--workers", o.workers, "sampling threads")->default_val(1);
  sub->add_option("--out", o.out, "output directory (overrides config 'out')");
  if (checkpoint) sub->add_option("--checkpoint", o.checkpoint, "checkpoint directory (default OUT/checkpoint)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic normalizing flows: train, sample, evaluate"};
  app.require_subcommand(1);
  Common o;
  long n = 0;
  std::vector<std::string> runs;
  std::string agg_out = ".";

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint and train.csv");
  add_common(train, o, false);
  auto* sample = app.add_subcommand("sample", "write n forward samples with log weights");
  add_common(sample, o, true);
  sample->add_option("--n", n, "number of samples")->required();
  auto* evaluate = app.add_subcommand("evaluate", "write metrics, profile and KL CSVs");
  add_common(evaluate, o, true);
  auto* aggregate = app.add_subcommand("aggregate", "summarize metrics.csv over several runs");
  aggregate->add_option("--runs", runs, "run directories")->required();
  aggregate->add_option("--out", agg_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(o);
    if (*sample) return cmd_sample(o, n);
    if (*evaluate) return cmd_evaluate(o);
    if (*aggregate) return cmd_aggregate(runs, agg_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
