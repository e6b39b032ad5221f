#pragma once

// Deterministic invertible layers: affine coupling (RealNVP), coordinate
// permutation, and an elementwise scale-and-shift.

#include "snf/block.hpp"
#include "snf/nn.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace snf {

namespace detail {

inline Matrix gather_rows(const Matrix& y, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = y.row(rows[i]);
  return out;
}

inline void scatter_rows(Matrix& y, const std::vector<int>& rows, const Matrix& part) {
  for (std::size_t i = 0; i < rows.size(); ++i) y.row(rows[i]) = part.row(static_cast<Eigen::Index>(i));
}

}  // namespace detail

/// Indices of one parity class: {parity, parity + 2, ...} below dim.
inline std::vector<int> parity_indices(int dim, int parity) {
  std::vector<int> out;
  for (int i = parity; i < dim; i += 2) out.push_back(i);
  return out;
}

/// Affine coupling layer: the `conditioned` channel passes through unchanged
/// and parameterizes a scale and shift of the `transformed` channel,
///   y'_b = y_b * exp(s(y_a)) + t(y_a),   s = s_max * tanh(s_raw / s_max).
class CouplingLayer final : public FlowBlock {
 public:
  static constexpr double kDefaultScaleClamp = 3.0;

  /// Conditioners with zero-initialized output layers, so the layer starts as the identity.
  CouplingLayer(int dim, std::vector<int> conditioned, std::vector<int> transformed,
                const std::vector<int>& hidden, RngStream& rng,
                double scale_clamp = kDefaultScaleClamp)
      : dim_(dim), a_(std::move(conditioned)), b_(std::move(transformed)), clamp_(scale_clamp) {
    validate_mask();
    std::vector<int> dims;
    dims.push_back(static_cast<int>(a_.size()));
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(static_cast<int>(b_.size()));
    scale_net_ = init_coupling_conditioner(dims, rng);
    translate_net_ = init_coupling_conditioner(dims, rng);
  }

  /// Layer with explicit conditioner networks.
  CouplingLayer(int dim, std::vector<int> conditioned, std::vector<int> transformed,
                DenseNet scale_net, DenseNet translate_net, double scale_clamp = kDefaultScaleClamp)
      : dim_(dim),
        a_(std::move(conditioned)),
        b_(std::move(transformed)),
        clamp_(scale_clamp),
        scale_net_(std::move(scale_net)),
        translate_net_(std::move(translate_net)) {
    validate_mask();
    for (const DenseNet* net : {&scale_net_, &translate_net_}) {
      if (net->input_dim() != static_cast<int>(a_.size()) ||
          net->output_dim() != static_cast<int>(b_.size())) {
        throw std::invalid_argument("CouplingLayer: conditioner shape does not match mask");
      }
    }
  }

  std::string_view kind() const override { return "coupling"; }
  int dim() const override { return dim_; }
  bool stochastic() const override { return false; }
  std::unique_ptr<FlowBlock> clone() const override {
    return std::make_unique<CouplingLayer>(*this);
  }

  const std::vector<int>& conditioned() const { return a_; }
  const std::vector<int>& transformed() const { return b_; }
  double scale_clamp() const { return clamp_; }
  const DenseNet& scale_net() const { return scale_net_; }
  const DenseNet& translate_net() const { return translate_net_; }
  DenseNet& scale_net() { return scale_net_; }
  DenseNet& translate_net() { return translate_net_; }

  Eigen::Index parameter_count() const override {
    return scale_net_.parameter_count() + translate_net_.parameter_count();
  }
  void get_parameters(std::span<double> out) const override {
    check_span(out.size());
    const Eigen::Index ns = scale_net_.parameter_count();
    Eigen::Map<Vector>(out.data(), ns) = scale_net_.parameters();
    Eigen::Map<Vector>(out.data() + ns, translate_net_.parameter_count()) =
        translate_net_.parameters();
  }
  void set_parameters(std::span<const double> in) override {
    check_span(in.size());
    const Eigen::Index ns = scale_net_.parameter_count();
    scale_net_.parameters() = Eigen::Map<const Vector>(in.data(), ns);
    translate_net_.parameters() =
        Eigen::Map<const Vector>(in.data() + ns, translate_net_.parameter_count());
  }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext& /*ctx*/,
                    bool record) const override {
    check_input(y);
    auto tape = std::make_unique<Tape>();
    tape->direction = dir;
    const Matrix ya = detail::gather_rows(y, a_);
    const Matrix s_raw = scale_net_.forward(ya, &tape->scale);
    const Matrix t = translate_net_.forward(ya, &tape->translate);
    if (!s_raw.allFinite() || !t.allFinite()) {
      throw NumericalError("coupling: non-finite conditioner output");
    }
    const Matrix s = clamp(s_raw);
    BlockResult res;
    res.output = y;
    Matrix yb_out;
    if (dir == Direction::kForward) {
      tape->exp_s = s.array().exp().matrix();
      tape->yb = detail::gather_rows(y, b_);
      yb_out = tape->yb.cwiseProduct(tape->exp_s) + t;
      res.delta_s = s.colwise().sum().transpose();
    } else {
      tape->exp_s = (-s.array()).exp().matrix();
      yb_out = (detail::gather_rows(y, b_) - t).cwiseProduct(tape->exp_s);
      tape->yb = yb_out;
      res.delta_s = -s.colwise().sum().transpose();
    }
    detail::scatter_rows(res.output, b_, yb_out);
    if (record) {
      tape->s = s;
      res.tape = std::move(tape);
    }
    return res;
  }

  Matrix pullback(const BlockTape& base, const Matrix& out_cot, const Vector& ds_cot,
                  std::span<double> param_grad) const override {
    const Tape& tape = tape_cast<Tape>(base, "CouplingLayer::pullback");
    check_span(param_grad.size());
    if (out_cot.rows() != dim_ || out_cot.cols() != tape.s.cols() ||
        ds_cot.size() != tape.s.cols()) {
      throw std::invalid_argument("CouplingLayer::pullback: stale tape");
    }
    const Matrix cot_b = detail::gather_rows(out_cot, b_);
    Matrix in_cot = out_cot;
    Matrix in_cot_b, s_bar, t_bar;
    if (tape.direction == Direction::kForward) {
      in_cot_b = cot_b.cwiseProduct(tape.exp_s);
      s_bar = in_cot_b.cwiseProduct(tape.yb);
      s_bar.rowwise() += ds_cot.transpose();
      t_bar = cot_b;
    } else {
      in_cot_b = cot_b.cwiseProduct(tape.exp_s);
      t_bar = -in_cot_b;
      s_bar = -cot_b.cwiseProduct(tape.yb);
      s_bar.rowwise() -= ds_cot.transpose();
    }
    const Matrix ratio = tape.s / clamp_;
    const Matrix s_raw_bar =
        s_bar.cwiseProduct((1.0 - ratio.array().square()).matrix());
    GradientBuffer gs(scale_net_.parameter_count());
    GradientBuffer gt(translate_net_.parameter_count());
    const Matrix ya_bar = scale_net_.backward(tape.scale, s_raw_bar, gs) +
                          translate_net_.backward(tape.translate, t_bar, gt);
    const Eigen::Index ns = scale_net_.parameter_count();
    Eigen::Map<Vector>(param_grad.data(), ns) += gs.values;
    Eigen::Map<Vector>(param_grad.data() + ns, gt.values.size()) += gt.values;
    detail::scatter_rows(in_cot, b_, in_cot_b);
    for (std::size_t i = 0; i < a_.size(); ++i) {
      in_cot.row(a_[i]) += ya_bar.row(static_cast<Eigen::Index>(i));
    }
    return in_cot;
  }

 private:
  struct Tape final : BlockTape {
    DenseNet::Tape scale;
    DenseNet::Tape translate;
    Matrix s;      // clamped log-scale
    Matrix exp_s;  // exp(s) forward, exp(-s) backward
    Matrix yb;     // transformed channel on the untransformed side
  };

  Matrix clamp(const Matrix& s_raw) const {
    return (clamp_ * (s_raw.array() / clamp_).tanh()).matrix();
  }

  void validate_mask() const {
    if (a_.empty() || b_.empty()) {
      throw std::invalid_argument("CouplingLayer: both channels must be nonempty");
    }
    std::vector<int> all = a_;
    all.insert(all.end(), b_.begin(), b_.end());
    std::sort(all.begin(), all.end());
    std::vector<int> expect(static_cast<std::size_t>(dim_));
    std::iota(expect.begin(), expect.end(), 0);
    if (all != expect) {
      throw std::invalid_argument("CouplingLayer: channels must partition the dimensions");
    }
    if (!(clamp_ > 0.0)) throw std::invalid_argument("CouplingLayer: scale clamp must be > 0");
  }

  void check_span(std::size_t n) const {
    if (static_cast<Eigen::Index>(n) != parameter_count()) {
      throw std::invalid_argument("CouplingLayer: parameter span has wrong length");
    }
  }

  int dim_;
  std::vector<int> a_;
  std::vector<int> b_;
  double clamp_;
  DenseNet scale_net_;
  DenseNet translate_net_;
};

/// Coordinate permutation, output[i] = input[permutation[i]]. Volume preserving.
class SwapLayer final : public FlowBlock {
 public:
  /// Reverses the coordinate order (exchanges the two channels in 2D).
  explicit SwapLayer(int dim) : perm_(static_cast<std::size_t>(dim)) {
    if (dim < 1) throw std::invalid_argument("SwapLayer: dim must be >= 1");
    std::iota(perm_.rbegin(), perm_.rend(), 0);
  }
  explicit SwapLayer(std::vector<int> permutation) : perm_(std::move(permutation)) {
    std::vector<int> sorted = perm_;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != static_cast<int>(i)) {
        throw std::invalid_argument("SwapLayer: not a permutation");
      }
    }
    if (perm_.empty()) throw std::invalid_argument("SwapLayer: empty permutation");
  }

  std::string_view kind() const override { return "swap"; }
  int dim() const override { return static_cast<int>(perm_.size()); }
  bool stochastic() const override { return false; }
  std::unique_ptr<FlowBlock> clone() const override { return std::make_unique<SwapLayer>(*this); }
  const std::vector<int>& permutation() const { return perm_; }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext&,
                    bool record) const override {
    check_input(y);
    BlockResult res;
    res.output = permute(y, dir == Direction::kForward);
    res.delta_s = Vector::Zero(y.cols());
    if (record) {
      res.tape = std::make_unique<BlockTape>();
      res.tape->direction = dir;
    }
    return res;
  }

  Matrix pullback(const BlockTape& tape, const Matrix& out_cot, const Vector&,
                  std::span<double>) const override {
    return permute(out_cot, tape.direction != Direction::kForward);
  }

 private:
  Matrix permute(const Matrix& y, bool forward) const {
    Matrix out(y.rows(), y.cols());
    for (std::size_t i = 0; i < perm_.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      if (forward) {
        out.row(ii) = y.row(perm_[i]);
      } else {
        out.row(perm_[i]) = y.row(ii);
      }
    }
    return out;
  }

  std::vector<int> perm_;
};

/// Elementwise y' = y * exp(log_scale) + shift with trainable vectors.
class ScaleShiftLayer final : public FlowBlock {
 public:
  explicit ScaleShiftLayer(int dim)
      : log_scale_(Vector::Zero(dim < 1 ? 1 : dim)), shift_(Vector::Zero(dim < 1 ? 1 : dim)) {
    if (dim < 1) throw std::invalid_argument("ScaleShiftLayer: dim must be >= 1");
  }
  ScaleShiftLayer(Vector log_scale, Vector shift)
      : log_scale_(std::move(log_scale)), shift_(std::move(shift)) {
    if (log_scale_.size() != shift_.size() || log_scale_.size() < 1) {
      throw std::invalid_argument("ScaleShiftLayer: scale and shift sizes differ");
    }
  }

  std::string_view kind() const override { return "scale_shift"; }
  int dim() const override { return static_cast<int>(log_scale_.size()); }
  bool stochastic() const override { return false; }
  std::unique_ptr<FlowBlock> clone() const override {
    return std::make_unique<ScaleShiftLayer>(*this);
  }
  const Vector& log_scale() const { return log_scale_; }
  const Vector& shift() const { return shift_; }

  Eigen::Index parameter_count() const override { return 2 * log_scale_.size(); }
  void get_parameters(std::span<double> out) const override {
    check_span(out.size());
    Eigen::Map<Vector>(out.data(), dim()) = log_scale_;
    Eigen::Map<Vector>(out.data() + dim(), dim()) = shift_;
  }
  void set_parameters(std::span<const double> in) override {
    check_span(in.size());
    log_scale_ = Eigen::Map<const Vector>(in.data(), dim());
    shift_ = Eigen::Map<const Vector>(in.data() + dim(), dim());
  }

  BlockResult apply(const Matrix& y, Direction dir, const BlockContext&,
                    bool record) const override {
    check_input(y);
    auto tape = std::make_unique<Tape>();
    tape->direction = dir;
    BlockResult res;
    const double total = log_scale_.sum();
    if (dir == Direction::kForward) {
      tape->y_plain = y;
      res.output = (y.array().colwise() * log_scale_.array().exp()).matrix();
      res.output.colwise() += shift_;
      res.delta_s = Vector::Constant(y.cols(), total);
    } else {
      Matrix centered = y;
      centered.colwise() -= shift_;
      res.output = (centered.array().colwise() * (-log_scale_.array()).exp()).matrix();
      tape->y_plain = res.output;
      res.delta_s = Vector::Constant(y.cols(), -total);
    }
    if (record) res.tape = std::move(tape);
    return res;
  }

  Matrix pullback(const BlockTape& base, const Matrix& out_cot, const Vector& ds_cot,
                  std::span<double> param_grad) const override {
    const Tape& tape = tape_cast<Tape>(base, "ScaleShiftLayer::pullback");
    check_span(param_grad.size());
    Eigen::Map<Vector> g_scale(param_grad.data(), dim());
    Eigen::Map<Vector> g_shift(param_grad.data() + dim(), dim());
    const double ds_total = ds_cot.sum();
    if (tape.direction == Direction::kForward) {
      const Matrix in_cot = (out_cot.array().colwise() * log_scale_.array().exp()).matrix();
      g_scale += in_cot.cwiseProduct(tape.y_plain).rowwise().sum();
      g_scale.array() += ds_total;
      g_shift += out_cot.rowwise().sum();
      return in_cot;
    }
    const Matrix in_cot = (out_cot.array().colwise() * (-log_scale_.array()).exp()).matrix();
    g_shift -= in_cot.rowwise().sum();
    g_scale -= out_cot.cwiseProduct(tape.y_plain).rowwise().sum();
    g_scale.array() -= ds_total;
    return in_cot;
  }

 private:
  struct Tape final : BlockTape {
    Matrix y_plain;  // the unscaled side of the map
  };

  void check_span(std::size_t n) const {
    if (static_cast<Eigen::Index>(n) != parameter_count()) {
      throw std::invalid_argument("ScaleShiftLayer: parameter span has wrong length");
    }
  }

  Vector log_scale_;
  Vector shift_;
};

/// Single-point results, for direct use of one layer.
struct DeterministicBlockResult {
  Point output;
  double delta_s = 0.0;
  std::unique_ptr<BlockTape> tape;
};

namespace detail {
inline DeterministicBlockResult single(const FlowBlock& layer, ConstVectorRef y, Direction dir) {
  BlockResult r = layer.apply(Matrix(y), dir, {}, true);
  return {r.output.col(0), r.delta_s[0], std::move(r.tape)};
}
}  // namespace detail

inline DeterministicBlockResult coupling_forward(const CouplingLayer& layer, ConstVectorRef y) {
  return detail::single(layer, y, Direction::kForward);
}
inline DeterministicBlockResult coupling_inverse(const CouplingLayer& layer, ConstVectorRef y) {
  return detail::single(layer, y, Direction::kBackward);
}
inline DeterministicBlockResult swap_apply(const SwapLayer& layer, ConstVectorRef y) {
  return detail::single(layer, y, Direction::kForward);
}

struct CouplingGradient {
  Point input_cotangent;
  Vector parameter_gradient;  // scale-net parameters, then translate-net parameters
};

/// Gradient of <output_cotangent, output> + delta_s_cotangent * delta_s.
inline CouplingGradient coupling_backward_grad(const CouplingLayer& layer, const BlockTape& tape,
                                               ConstVectorRef output_cotangent,
                                               double delta_s_cotangent) {
  CouplingGradient g;
  g.parameter_gradient = Vector::Zero(layer.parameter_count());
  const Matrix in = layer.pullback(tape, Matrix(output_cotangent),
                                   Vector::Constant(1, delta_s_cotangent),
                                   {g.parameter_gradient.data(),
                                    static_cast<std::size_t>(g.parameter_gradient.size())});
  g.input_cotangent = in.col(0);
  return g;
}

}  // namespace snf
