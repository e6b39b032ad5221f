#pragma once

// Small fully connected ReLU networks with a hand-written backward pass.
// Batches are column-major: one sample per column.

#include "snf/energy.hpp"
#include "snf/rng.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace snf {

/// Accumulates d(loss)/d(theta) for one DenseNet, in the net's parameter order.
struct GradientBuffer {
  Vector values;

  GradientBuffer() = default;
  explicit GradientBuffer(Eigen::Index n) : values(Vector::Zero(n)) {}
  void zero() { values.setZero(); }
};

class DenseNet {
 public:
  /// Activations recorded by forward(); inputs[l] is the input of layer l.
  struct Tape {
    std::vector<Matrix> inputs;
  };

  DenseNet() = default;

  /// Zero-initialized network with the given layer widths (input first).
  explicit DenseNet(std::vector<int> layer_dims) : dims_(std::move(layer_dims)) {
    if (dims_.size() < 2) throw std::invalid_argument("DenseNet: need at least two layer dims");
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      if (dims_[l] <= 0 || dims_[l + 1] <= 0) {
        throw std::invalid_argument("DenseNet: layer dims must be positive");
      }
      weight_offsets_.push_back(offset);
      offset += static_cast<Eigen::Index>(dims_[l]) * dims_[l + 1];
      bias_offsets_.push_back(offset);
      offset += dims_[l + 1];
    }
    params_ = Vector::Zero(offset);
  }

  const std::vector<int>& layer_dims() const { return dims_; }
  int num_layers() const { return static_cast<int>(dims_.size()) - 1; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  Eigen::Index parameter_count() const { return params_.size(); }

  Vector& parameters() { return params_; }
  const Vector& parameters() const { return params_; }

  Eigen::Map<Matrix> weight(int l) {
    return {params_.data() + weight_offsets_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<const Matrix> weight(int l) const {
    return {params_.data() + weight_offsets_[l], dims_[l + 1], dims_[l]};
  }
  Eigen::Map<Vector> bias(int l) { return {params_.data() + bias_offsets_[l], dims_[l + 1]}; }
  Eigen::Map<const Vector> bias(int l) const {
    return {params_.data() + bias_offsets_[l], dims_[l + 1]};
  }

  Matrix forward(const Matrix& input, Tape* tape = nullptr) const {
    if (input.rows() != input_dim()) {
      throw std::invalid_argument("DenseNet::forward: expected input dim " +
                                  std::to_string(input_dim()) + ", got " +
                                  std::to_string(input.rows()));
    }
    if (tape) tape->inputs.clear();
    Matrix a = input;
    for (int l = 0; l < num_layers(); ++l) {
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      if (tape) tape->inputs.push_back(std::move(a));
      if (l + 1 < num_layers()) {
        a = z.cwiseMax(0.0);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  /// Vector-Jacobian product. Adds d(<cotangent, output>)/d(theta) to `grads`
  /// and returns the input cotangent.
  Matrix backward(const Tape& tape, const Matrix& output_cotangent, GradientBuffer& grads) const {
    check_tape(tape, output_cotangent);
    if (grads.values.size() != parameter_count()) {
      throw std::invalid_argument("DenseNet::backward: gradient buffer shape mismatch");
    }
    Matrix delta = output_cotangent;
    for (int l = num_layers() - 1; l >= 0; --l) {
      const Matrix& a = tape.inputs[static_cast<std::size_t>(l)];
      Eigen::Map<Matrix> gw(grads.values.data() + weight_offsets_[l], dims_[l + 1], dims_[l]);
      Eigen::Map<Vector> gb(grads.values.data() + bias_offsets_[l], dims_[l + 1]);
      gw.noalias() += delta * a.transpose();
      gb += delta.rowwise().sum();
      Matrix prev = weight(l).transpose() * delta;
      if (l > 0) prev = prev.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
      delta = std::move(prev);
    }
    return delta;
  }

  /// Input cotangent only, without touching any gradient buffer.
  Matrix backward_input(const Tape& tape, const Matrix& output_cotangent) const {
    check_tape(tape, output_cotangent);
    Matrix delta = output_cotangent;
    for (int l = num_layers() - 1; l >= 0; --l) {
      Matrix prev = weight(l).transpose() * delta;
      const Matrix& a = tape.inputs[static_cast<std::size_t>(l)];
      if (l > 0) prev = prev.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
      delta = std::move(prev);
    }
    return delta;
  }

  friend bool operator==(const DenseNet& a, const DenseNet& b) {
    return a.dims_ == b.dims_ && a.params_ == b.params_;
  }

 private:
  void check_tape(const Tape& tape, const Matrix& cot) const {
    if (tape.inputs.size() != static_cast<std::size_t>(num_layers())) {
      throw std::invalid_argument("DenseNet::backward: stale tape (layer count)");
    }
    for (int l = 0; l < num_layers(); ++l) {
      const Matrix& a = tape.inputs[static_cast<std::size_t>(l)];
      if (a.rows() != dims_[l] || a.cols() != cot.cols()) {
        throw std::invalid_argument("DenseNet::backward: stale tape (shape)");
      }
    }
    if (cot.rows() != output_dim()) {
      throw std::invalid_argument("DenseNet::backward: cotangent shape mismatch");
    }
  }

  std::vector<int> dims_;
  std::vector<Eigen::Index> weight_offsets_;
  std::vector<Eigen::Index> bias_offsets_;
  Vector params_;
};

/// Hidden layers: Kaiming-uniform weights in +-sqrt(6 / fan_in) and biases in
/// +-1/sqrt(fan_in). The output layer is all zeros.
inline DenseNet init_coupling_conditioner(const std::vector<int>& dims, RngStream& rng) {
  DenseNet net(dims);
  for (int l = 0; l + 1 < net.num_layers(); ++l) {
    const double fan_in = dims[static_cast<std::size_t>(l)];
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    auto w = net.weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = (2.0 * rng.uniform() - 1.0) * wb;
    }
    auto b = net.bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = (2.0 * rng.uniform() - 1.0) * bb;
  }
  return net;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  long step = 0;
  Vector first_moment;
  Vector second_moment;

  AdamState() = default;
  AdamState(Eigen::Index n, AdamConfig cfg)
      : config(cfg), first_moment(Vector::Zero(n)), second_moment(Vector::Zero(n)) {}
};

/// Bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& state, Eigen::Ref<Vector> params,
                      const Eigen::Ref<const Vector>& grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  state.first_moment = c.beta1 * state.first_moment + (1.0 - c.beta1) * grads;
  state.second_moment =
      c.beta2 * state.second_moment + (1.0 - c.beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double lr = c.learning_rate;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double m_hat = state.first_moment[i] / bc1;
    const double v_hat = state.second_moment[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

// Checkpoints: raw little-endian float64 arrays.

inline void write_f64_le(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    out.write(bytes, 8);
  }
}

inline std::vector<double> read_f64_le(std::istream& in) {
  std::vector<double> out;
  char bytes[8];
  while (in.read(bytes, 8)) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    }
    out.push_back(std::bit_cast<double>(bits));
  }
  if (in.gcount() != 0) throw std::runtime_error("checkpoint: trailing partial value");
  return out;
}

/// Sidecar describing a parameter file, e.g. {"layer_dims": [2, 16, 2], ...}.
inline nlohmann::json dense_net_sidecar(const DenseNet& net) {
  return {{"layer_dims", net.layer_dims()},
          {"parameter_count", net.parameter_count()},
          {"format", "float64-le"}};
}

inline void save_dense_net(const DenseNet& net, const std::string& bin_path,
                           const std::string& json_path) {
  std::ofstream bin(bin_path, std::ios::binary);
  std::ofstream js(json_path);
  if (!bin || !js) throw std::runtime_error("save_dense_net: cannot open output files");
  write_f64_le(bin, {net.parameters().data(), static_cast<std::size_t>(net.parameter_count())});
  js << dense_net_sidecar(net).dump(2) << "\n";
}

inline DenseNet load_dense_net(const std::string& bin_path, const std::string& json_path) {
  std::ifstream bin(bin_path, std::ios::binary);
  std::ifstream js(json_path);
  if (!bin || !js) throw std::runtime_error("load_dense_net: cannot open checkpoint files");
  const auto meta = nlohmann::json::parse(js);
  DenseNet net(meta.at("layer_dims").get<std::vector<int>>());
  const std::vector<double> values = read_f64_le(bin);
  if (static_cast<Eigen::Index>(values.size()) != net.parameter_count()) {
    throw std::runtime_error("load_dense_net: parameter count does not match layer dims");
  }
  net.parameters() = Eigen::Map<const Vector>(values.data(), net.parameter_count());
  return net;
}

}  // namespace snf
