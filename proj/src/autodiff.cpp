#include "dsp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dsp::ad {

// ---------------------------------------------------------------- ParameterSet

std::size_t ParameterSet::add(std::string name, Matrix value) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (std::size_t i = 0; i < size(); ++i) {
    out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  }
  return out;
}

void ParameterSet::set_zero() {
  for (auto& v : values_) v.setZero();
}

bool ParameterSet::congruent(const ParameterSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (names_[i] != other.names_[i] || values_[i].rows() != other.values_[i].rows() ||
        values_[i].cols() != other.values_[i].cols()) {
      return false;
    }
  }
  return true;
}

bool ParameterSet::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const Matrix& m) { return m.allFinite(); });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

void ParameterSet::add_scaled(const ParameterSet& other, double scale) {
  if (!congruent(other)) throw std::invalid_argument("parameter sets are not congruent");
  for (std::size_t i = 0; i < size(); ++i) values_[i] += scale * other.values_[i];
}

// ---------------------------------------------------------------- Tape

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

// Softmax over `logits` restricted to `support` (all entries when empty).
// Returns a dense vector with zeros outside the support.
Vector masked_softmax(const Matrix& logits, std::span<const std::int32_t> support) {
  const Eigen::Index n = logits.size();
  Vector p = Vector::Zero(n);
  const double* l = logits.data();
  if (support.empty()) {
    const double mx = logits.maxCoeff();
    double z = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      p[i] = std::exp(l[i] - mx);
      z += p[i];
    }
    p /= z;
    return p;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (auto s : support) mx = std::max(mx, l[s]);
  double z = 0.0;
  for (auto s : support) {
    p[s] = std::exp(l[s] - mx);
    z += p[s];
  }
  for (auto s : support) p[s] /= z;
  return p;
}

}  // namespace

Tape::Tape(const ParameterSet* params) : params_(params) {
  nodes_.reserve(256);
  if (params_) param_nodes_.assign(params_->size(), -1);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  require(v.index < nodes_.size(), "variable does not belong to this tape");
  return nodes_[v.index];
}

const Matrix& Tape::val(std::uint32_t i) const {
  const Node& n = nodes_[i];
  return n.ref ? *n.ref : n.value;
}

const Matrix& Tape::value(Var v) const {
  node(v);
  return val(v.index);
}

double Tape::scalar_value(Var v) const {
  const Matrix& m = value(v);
  require(m.size() == 1, "scalar_value on a non-scalar node");
  return m(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::param(std::size_t index) {
  require(params_ != nullptr, "tape has no bound parameters");
  require(index < params_->size(), "parameter index out of range");
  if (param_nodes_[index] >= 0) return Var{static_cast<std::uint32_t>(param_nodes_[index])};
  Node n;
  n.op = Op::kParam;
  n.ref = &params_->value(index);
  n.param_index = index;
  Var v = push(std::move(n));
  param_nodes_[index] = v.index;
  return v;
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  require(A.cols() == B.rows(), "matmul shape mismatch");
  Node n;
  n.op = Op::kMatmul;
  n.value = A * B;
  n.inputs = {a.index, b.index};
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  Node n;
  n.inputs = {a.index, b.index};
  if (A.rows() == B.rows() && A.cols() == B.cols()) {
    n.op = Op::kAdd;
    n.value = A + B;
  } else {
    require(B.cols() == 1 && B.rows() == A.rows(), "add shape mismatch");
    n.op = Op::kAddBroadcast;
    n.value = A.colwise() + B.col(0);
  }
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "sub shape mismatch");
  Node n;
  n.op = Op::kSub;
  n.value = A - B;
  n.inputs = {a.index, b.index};
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "mul shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.value = A.cwiseProduct(B);
  n.inputs = {a.index, b.index};
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  Node n;
  n.op = Op::kScale;
  n.value = factor * value(a);
  n.aux = factor;
  n.inputs = {a.index};
  return push(std::move(n));
}

Var Tape::one_minus(Var a) {
  Node n;
  n.op = Op::kOneMinus;
  n.value = (1.0 - value(a).array()).matrix();
  n.inputs = {a.index};
  return push(std::move(n));
}

Var Tape::tanh(Var a) {
  Node n;
  n.op = Op::kTanh;
  n.value = value(a).array().tanh().matrix();
  n.inputs = {a.index};
  return push(std::move(n));
}

Var Tape::sigmoid(Var a) {
  Node n;
  n.op = Op::kSigmoid;
  n.value = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
  n.inputs = {a.index};
  return push(std::move(n));
}

Var Tape::transpose(Var a) {
  Node n;
  n.op = Op::kTranspose;
  n.value = value(a).transpose();
  n.inputs = {a.index};
  return push(std::move(n));
}

Var Tape::vconcat(Var top, Var bottom) {
  const Matrix& T = value(top);
  const Matrix& B = value(bottom);
  require(T.cols() == B.cols(), "vconcat column mismatch");
  Node n;
  n.op = Op::kVConcat;
  n.value.resize(T.rows() + B.rows(), T.cols());
  n.value << T, B;
  n.inputs = {top.index, bottom.index};
  return push(std::move(n));
}

Var Tape::hconcat(std::span<const Var> columns) {
  require(!columns.empty(), "hconcat of nothing");
  const Eigen::Index rows = value(columns[0]).rows();
  Node n;
  n.op = Op::kHConcat;
  n.value.resize(rows, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t i = 0; i < columns.size(); ++i) {
    const Matrix& c = value(columns[i]);
    require(c.rows() == rows && c.cols() == 1, "hconcat expects equal-height column vectors");
    n.value.col(static_cast<Eigen::Index>(i)) = c.col(0);
    n.inputs.push_back(columns[i].index);
  }
  return push(std::move(n));
}

Var Tape::row(Var m, Eigen::Index r) {
  const Matrix& M = value(m);
  require(r >= 0 && r < M.rows(), "row index out of range");
  Node n;
  n.op = Op::kRow;
  n.value = M.row(r).transpose();
  n.aux_index = r;
  n.inputs = {m.index};
  return push(std::move(n));
}

Var Tape::softmax(Var a) {
  const Matrix& A = value(a);
  Node n;
  n.op = Op::kSoftmax;
  const double mx = A.maxCoeff();
  n.value = (A.array() - mx).exp().matrix();
  n.value /= n.value.sum();
  n.inputs = {a.index};
  return push(std::move(n));
}

Var Tape::log_softmax_pick(Var logits, Eigen::Index target, std::span<const std::int32_t> support) {
  const Matrix& L = value(logits);
  require(L.cols() == 1, "log_softmax_pick expects a column vector");
  require(target >= 0 && target < L.rows(), "target index out of range");
  if (!support.empty()) {
    require(std::find(support.begin(), support.end(), target) != support.end(),
            "target outside the support");
    for (auto s : support) require(s >= 0 && s < L.rows(), "support index out of range");
  }
  Node n;
  n.op = Op::kLogSoftmaxPick;
  n.cache = masked_softmax(L, support);
  n.value = Matrix::Constant(1, 1, std::log(n.cache(target, 0)));
  // Recompute with log-sum-exp for accuracy when p[target] is tiny.
  {
    double mx = -std::numeric_limits<double>::infinity();
    auto visit = [&](auto&& fn) {
      if (support.empty()) {
        for (Eigen::Index i = 0; i < L.rows(); ++i) fn(i);
      } else {
        for (auto s : support) fn(static_cast<Eigen::Index>(s));
      }
    };
    visit([&](Eigen::Index i) { mx = std::max(mx, L(i, 0)); });
    double z = 0.0;
    visit([&](Eigen::Index i) { z += std::exp(L(i, 0) - mx); });
    n.value(0, 0) = L(target, 0) - mx - std::log(z);
  }
  n.aux_index = target;
  n.support.assign(support.begin(), support.end());
  n.inputs = {logits.index};
  return push(std::move(n));
}

Var Tape::entropy(Var logits, std::span<const std::int32_t> support) {
  const Matrix& L = value(logits);
  require(L.cols() == 1, "entropy expects a column vector");
  Node n;
  n.op = Op::kEntropy;
  n.cache = masked_softmax(L, support);
  double h = 0.0;
  for (Eigen::Index i = 0; i < n.cache.rows(); ++i) {
    const double p = n.cache(i, 0);
    if (p > 0.0) h -= p * std::log(p);
  }
  n.value = Matrix::Constant(1, 1, h);
  n.support.assign(support.begin(), support.end());
  n.inputs = {logits.index};
  return push(std::move(n));
}

Var Tape::squared_error(Var pred, double target) {
  const Matrix& P = value(pred);
  require(P.size() == 1, "squared_error expects a scalar prediction");
  Node n;
  n.op = Op::kSquaredError;
  const double diff = P(0, 0) - target;
  n.value = Matrix::Constant(1, 1, diff * diff);
  n.aux = target;
  n.inputs = {pred.index};
  return push(std::move(n));
}

Var Tape::ppo_clip_surrogate(Var new_logp, double old_logp, double advantage, double eps) {
  const Matrix& P = value(new_logp);
  require(P.size() == 1, "ppo_clip_surrogate expects a scalar log-probability");
  const double ratio = std::exp(P(0, 0) - old_logp);
  const double unclipped = ratio * advantage;
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage;
  Node n;
  n.op = Op::kPpoSurrogate;
  n.value = Matrix::Constant(1, 1, -std::min(unclipped, clipped));
  // cache = [d value / d new_logp]
  n.cache = Matrix::Constant(1, 1, unclipped <= clipped ? -unclipped : 0.0);
  n.inputs = {new_logp.index};
  return push(std::move(n));
}

Var Tape::sum(std::span<const Var> scalars) {
  Node n;
  n.op = Op::kSum;
  double total = 0.0;
  for (Var v : scalars) {
    const Matrix& m = value(v);
    require(m.size() == 1, "sum expects scalar nodes");
    total += m(0, 0);
    n.inputs.push_back(v.index);
  }
  n.value = Matrix::Constant(1, 1, total);
  return push(std::move(n));
}

void Tape::backward(Var loss, ParameterSet& grads, double seed) {
  require(!consumed_, "backward already called on this tape");
  require(value(loss).size() == 1, "backward requires a scalar loss");
  if (params_) require(grads.congruent(*params_), "gradient store is not congruent with parameters");
  consumed_ = true;

  std::vector<Matrix> g(nodes_.size());
  std::vector<char> has(nodes_.size(), 0);
  auto accumulate = [&](std::uint32_t i, const auto& delta) {
    if (!has[i]) {
      g[i] = delta;
      has[i] = 1;
    } else {
      g[i] += delta;
    }
  };
  accumulate(loss.index, Matrix::Constant(1, 1, seed));

  for (std::int64_t k = loss.index; k >= 0; --k) {
    const auto i = static_cast<std::uint32_t>(k);
    if (!has[i]) continue;
    const Node& n = nodes_[i];
    const Matrix& G = g[i];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kParam:
        grads.value(n.param_index) += G;
        break;
      case Op::kMatmul: {
        const Matrix& A = val(n.inputs[0]);
        const Matrix& B = val(n.inputs[1]);
        const Node& lhs = nodes_[n.inputs[0]];
        // Parameter operands accumulate in place, skipping a full-size temporary.
        if (lhs.op == Op::kParam) {
          grads.value(lhs.param_index).noalias() += G * B.transpose();
        } else {
          accumulate(n.inputs[0], G * B.transpose());
        }
        accumulate(n.inputs[1], A.transpose() * G);
        break;
      }
      case Op::kAdd:
        accumulate(n.inputs[0], G);
        accumulate(n.inputs[1], G);
        break;
      case Op::kAddBroadcast:
        accumulate(n.inputs[0], G);
        accumulate(n.inputs[1], Matrix(G.rowwise().sum()));
        break;
      case Op::kSub:
        accumulate(n.inputs[0], G);
        accumulate(n.inputs[1], Matrix(-G));
        break;
      case Op::kMul:
        accumulate(n.inputs[0], Matrix(G.cwiseProduct(val(n.inputs[1]))));
        accumulate(n.inputs[1], Matrix(G.cwiseProduct(val(n.inputs[0]))));
        break;
      case Op::kScale:
        accumulate(n.inputs[0], Matrix(n.aux * G));
        break;
      case Op::kOneMinus:
        accumulate(n.inputs[0], Matrix(-G));
        break;
      case Op::kTanh:
        accumulate(n.inputs[0], Matrix(G.array() * (1.0 - n.value.array().square())));
        break;
      case Op::kSigmoid:
        accumulate(n.inputs[0], Matrix(G.array() * n.value.array() * (1.0 - n.value.array())));
        break;
      case Op::kTranspose:
        accumulate(n.inputs[0], Matrix(G.transpose()));
        break;
      case Op::kVConcat: {
        const Eigen::Index top_rows = val(n.inputs[0]).rows();
        accumulate(n.inputs[0], Matrix(G.topRows(top_rows)));
        accumulate(n.inputs[1], Matrix(G.bottomRows(G.rows() - top_rows)));
        break;
      }
      case Op::kHConcat:
        for (std::size_t c = 0; c < n.inputs.size(); ++c) {
          accumulate(n.inputs[c], Matrix(G.col(static_cast<Eigen::Index>(c))));
        }
        break;
      case Op::kRow: {
        const Node& src = nodes_[n.inputs[0]];
        if (src.op == Op::kParam) {
          grads.value(src.param_index).row(n.aux_index) += G.col(0).transpose();
        } else {
          const Matrix& M = val(n.inputs[0]);
          Matrix d = Matrix::Zero(M.rows(), M.cols());
          d.row(n.aux_index) = G.col(0).transpose();
          accumulate(n.inputs[0], d);
        }
        break;
      }
      case Op::kSoftmax: {
        const double dot = (G.array() * n.value.array()).sum();
        accumulate(n.inputs[0], Matrix(n.value.array() * (G.array() - dot)));
        break;
      }
      case Op::kLogSoftmaxPick: {
        // d log p_t / d l_j = [j == t] - p_j on the support.
        Matrix d = -n.cache;
        d(n.aux_index, 0) += 1.0;
        accumulate(n.inputs[0], Matrix(G(0, 0) * d));
        break;
      }
      case Op::kEntropy: {
        // dH/dl_j = -p_j (log p_j + H) on the support.
        const double h = n.value(0, 0);
        Matrix d = Matrix::Zero(n.cache.rows(), 1);
        for (Eigen::Index j = 0; j < n.cache.rows(); ++j) {
          const double p = n.cache(j, 0);
          if (p > 0.0) d(j, 0) = -p * (std::log(p) + h);
        }
        accumulate(n.inputs[0], Matrix(G(0, 0) * d));
        break;
      }
      case Op::kSquaredError: {
        const double diff = val(n.inputs[0])(0, 0) - n.aux;
        accumulate(n.inputs[0], Matrix::Constant(1, 1, G(0, 0) * 2.0 * diff));
        break;
      }
      case Op::kPpoSurrogate:
        accumulate(n.inputs[0], Matrix::Constant(1, 1, G(0, 0) * n.cache(0, 0)));
        break;
      case Op::kSum:
        for (auto in : n.inputs) accumulate(in, G);
        break;
    }
  }
}

}  // namespace dsp::ad
