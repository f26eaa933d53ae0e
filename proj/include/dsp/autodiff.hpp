#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dsp::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Ordered collection of named float64 tensors. Gradient stores are
/// ParameterSets congruent (same names, order, and shapes) to the parameters.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Matrix& value(std::size_t i) { return values_.at(i); }
  const Matrix& value(std::size_t i) const { return values_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;

  /// Same names and shapes, all zeros.
  ParameterSet zeros_like() const;
  void set_zero();
  bool congruent(const ParameterSet& other) const;
  bool all_finite() const;
  std::size_t scalar_count() const;

  /// this += scale * other (congruent sets only).
  void add_scaled(const ParameterSet& other, double scale);

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// Handle to a node on a Tape.
struct Var {
  std::uint32_t index = 0;
};

/// Reverse-mode differentiation over a fixed set of primitives: affine maps
/// (matmul/add/scale), elementwise tanh/sigmoid/products, concatenation and
/// row lookup, softmax, log-softmax selection, entropy, squared error, and the
/// clipped PPO surrogate. Anything else cannot be expressed, so every graph a
/// Tape accepts is differentiable. Shape mismatches throw std::invalid_argument
/// when the node is created.
class Tape {
 public:
  /// `params` may be null for graphs without parameter leaves.
  explicit Tape(const ParameterSet* params = nullptr);

  Var constant(Matrix value);
  Var scalar(double value);
  /// Leaf bound to params[index]; reused if requested twice.
  Var param(std::size_t index);

  Var matmul(Var a, Var b);
  /// Elementwise sum; b may also be a column vector broadcast over a's columns.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var one_minus(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var transpose(Var a);
  Var vconcat(Var top, Var bottom);
  Var hconcat(std::span<const Var> columns);
  /// Row r of m as a column vector.
  Var row(Var m, Eigen::Index r);
  /// Softmax over all entries.
  Var softmax(Var a);

  /// log p[target] where p = softmax(logits) restricted to `support`
  /// (empty support = all entries). Target must be inside the support.
  Var log_softmax_pick(Var logits, Eigen::Index target, std::span<const std::int32_t> support = {});
  /// Entropy of softmax(logits) restricted to `support`.
  Var entropy(Var logits, std::span<const std::int32_t> support = {});
  /// (pred - target)^2 for a 1x1 pred.
  Var squared_error(Var pred, double target);
  /// -min(rho * A, clip(rho, 1-eps, 1+eps) * A) with rho = exp(new_logp - old_logp).
  Var ppo_clip_surrogate(Var new_logp, double old_logp, double advantage, double eps);
  /// Sum of 1x1 nodes.
  Var sum(std::span<const Var> scalars);

  const Matrix& value(Var v) const;
  double scalar_value(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Accumulates d(seed * loss)/d(param) into `grads`, which must be congruent
  /// with the bound ParameterSet. Can be called once per tape.
  void backward(Var loss, ParameterSet& grads, double seed = 1.0);

 private:
  enum class Op : std::uint8_t {
    kLeaf,
    kParam,
    kMatmul,
    kAdd,
    kAddBroadcast,
    kSub,
    kMul,
    kScale,
    kOneMinus,
    kTanh,
    kSigmoid,
    kTranspose,
    kVConcat,
    kHConcat,
    kRow,
    kSoftmax,
    kLogSoftmaxPick,
    kEntropy,
    kSquaredError,
    kPpoSurrogate,
    kSum,
  };

  struct Node {
    Op op = Op::kLeaf;
    Matrix value;
    const Matrix* ref = nullptr;  // parameter leaves point at the stored tensor
    std::vector<std::uint32_t> inputs;
    std::size_t param_index = 0;
    Eigen::Index aux_index = 0;
    double aux = 0.0;
    std::vector<std::int32_t> support;
    Matrix cache;  // op-specific forward intermediates (e.g. masked probabilities)
  };

  Var push(Node node);
  const Node& node(Var v) const;
  const Matrix& val(std::uint32_t i) const;

  const ParameterSet* params_;
  std::vector<Node> nodes_;
  std::vector<std::int64_t> param_nodes_;
  bool consumed_ = false;
};

}  // namespace dsp::ad
