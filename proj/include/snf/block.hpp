#pragma once

// Common interface of SNF layers.
//
// A layer maps a batch y_t -> y_{t+1} (forward) or y_{t+1} -> y_t (backward)
// and reports, per column, the log path-probability ratio of the realized
// transition: Delta S_t in forward mode and Delta S~_t in backward mode.
// With `record` set, the layer keeps what it needs to pull cotangents of
// (output, delta_s) back to its input and parameters.

#include "snf/energy.hpp"
#include "snf/rng.hpp"

#include <memory>
#include <span>
#include <stdexcept>
#include <string_view>

namespace snf {

/// A layer produced a non-finite state or log-ratio.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Direction { kForward, kBackward };

struct BlockContext {
  /// Guiding potential u_lambda; unused by deterministic layers.
  const Energy* potential = nullptr;
  /// One stream per batch column; unused by deterministic layers.
  std::span<RngStream> streams;
};

struct BlockTape {
  virtual ~BlockTape() = default;
  Direction direction = Direction::kForward;
};

struct BlockResult {
  Matrix output;
  Vector delta_s;
  /// Accepted proposals per column (Metropolis and HMC layers), empty otherwise.
  Eigen::VectorXi accepted;
  /// Proposals attempted per column, matching `accepted`.
  int proposals = 0;
  std::unique_ptr<BlockTape> tape;
};

class FlowBlock {
 public:
  virtual ~FlowBlock() = default;

  virtual std::string_view kind() const = 0;
  virtual int dim() const = 0;
  virtual bool stochastic() const = 0;
  virtual std::unique_ptr<FlowBlock> clone() const = 0;

  virtual Eigen::Index parameter_count() const { return 0; }
  virtual void get_parameters(std::span<double> /*out*/) const {}
  virtual void set_parameters(std::span<const double> /*in*/) {}

  virtual BlockResult apply(const Matrix& y, Direction dir, const BlockContext& ctx,
                            bool record) const = 0;

  /// Maps cotangents of (output, delta_s) to the input cotangent and adds
  /// parameter gradients into `param_grad` (length parameter_count()).
  virtual Matrix pullback(const BlockTape& tape, const Matrix& output_cotangent,
                          const Vector& delta_s_cotangent,
                          std::span<double> param_grad) const = 0;

 protected:
  void check_input(const Matrix& y) const;
};

inline void FlowBlock::check_input(const Matrix& y) const {
  if (y.rows() != dim()) {
    throw std::invalid_argument(std::string(kind()) + ": expected dimension " +
                                std::to_string(dim()) + ", got " + std::to_string(y.rows()));
  }
}

template <typename TapeT>
const TapeT& tape_cast(const BlockTape& tape, std::string_view who) {
  const auto* t = dynamic_cast<const TapeT*>(&tape);
  if (!t) throw std::invalid_argument(std::string(who) + ": tape from a different layer type");
  return *t;
}

}  // namespace snf
