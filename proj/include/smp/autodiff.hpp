#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices (rank 2; vectors are 1 x n), plus MLPs, Adam and the binary
// checkpoint format.

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "smp/errors.hpp"
#include "smp/rng.hpp"

namespace smp::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::function<void(const Node&)> backward;  // pushes this node's grad into its inputs

  template <class E>
  void accumulate(const E& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = g;
    else if constexpr (std::is_base_of_v<Eigen::ArrayBase<E>, E>) grad.array() += g;
    else grad += g;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor parameter(Matrix value) { return Tensor(std::move(value), true); }
  static Tensor zeros(Eigen::Index rows, Eigen::Index cols) {
    return Tensor(Matrix::Zero(rows, cols));
  }

  bool defined() const { return node_ != nullptr; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  std::vector<Eigen::Index> shape() const { return {rows(), cols()}; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  double item() const { return node_->value(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Matrix::Zero(rows(), cols()); }
  void clear_grad() { node_->grad.resize(0, 0); }

  // Deep copy detached from any tape.
  Tensor clone() const { return Tensor(node_->value, node_->requires_grad); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

// Records primitive operations for one backward pass. In kNoGrad mode values
// are computed but nothing is recorded.
class Tape {
 public:
  enum class Mode { kRecord, kNoGrad };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return mode_ == Mode::kRecord; }

  Tensor constant(Matrix value) const { return Tensor(std::move(value)); }

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
      throw ShapeMismatch("matmul " + shape_str(a) + " x " + shape_str(b));
    Matrix out = a.value() * b.value();
    return record(std::move(out), {a, b}, [a, b](const Node& o) {
      if (a.requires_grad()) a.node()->accumulate(o.grad * b.value().transpose());
      if (b.requires_grad()) b.node()->accumulate(a.value().transpose() * o.grad);
    });
  }

  // x w + b with b a 1 x cols row.
  Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
      throw ShapeMismatch("affine " + shape_str(x) + " x " + shape_str(w) + " + " + shape_str(b));
    Matrix out(x.rows(), w.cols());
    out.noalias() = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    return record(std::move(out), {x, w, b}, [x, w, b](const Node& o) {
      if (x.requires_grad()) x.node()->accumulate(o.grad * w.value().transpose());
      if (w.requires_grad()) w.node()->accumulate(x.value().transpose() * o.grad);
      if (b.requires_grad()) b.node()->accumulate(o.grad.colwise().sum());
    });
  }

  // Elementwise a + b; b may also be a 1 x cols row broadcast over a's rows.
  Tensor add(const Tensor& a, const Tensor& b) { return add_scaled(a, b, 1.0, "add"); }
  Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled(a, b, -1.0, "sub"); }

  // Elementwise product; b may be a broadcast row.
  Tensor mul(const Tensor& a, const Tensor& b) {
    const bool bcast = broadcastable(a, b, "mul");
    Matrix out = bcast ? Matrix(a.value().array().rowwise() * b.value().row(0).array())
                       : Matrix(a.value().array() * b.value().array());
    return record(std::move(out), {a, b}, [a, b, bcast](const Node& o) {
      if (bcast) {
        if (a.requires_grad())
          a.node()->accumulate(o.grad.array().rowwise() * b.value().row(0).array());
        if (b.requires_grad())
          b.node()->accumulate((o.grad.array() * a.value().array()).colwise().sum().matrix());
      } else {
        if (a.requires_grad()) a.node()->accumulate(o.grad.array() * b.value().array());
        if (b.requires_grad()) b.node()->accumulate(o.grad.array() * a.value().array());
      }
    });
  }

  Tensor scalar_mul(const Tensor& a, double c) {
    return record(a.value() * c, {a},
                  [a, c](const Node& o) { a.node()->accumulate(o.grad * c); });
  }

  // axis 0 stacks rows, axis 1 stacks columns.
  Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ShapeMismatch("concat of nothing");
    Eigen::Index rows = 0, cols = 0;
    for (const auto& p : parts) {
      if (axis == 0) {
        if (p.cols() != parts[0].cols()) throw ShapeMismatch("concat rows: column mismatch");
        rows += p.rows();
      } else {
        if (p.rows() != parts[0].rows()) throw ShapeMismatch("concat cols: row mismatch");
        cols += p.cols();
      }
    }
    if (axis == 0) cols = parts[0].cols();
    else rows = parts[0].rows();
    Matrix out(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      if (axis == 0) {
        out.middleRows(off, p.rows()) = p.value();
        off += p.rows();
      } else {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
      }
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return record(std::move(out), inputs, [inputs, axis](const Node& o) {
      Eigen::Index off = 0;
      for (const auto& p : inputs) {
        const Eigen::Index n = axis == 0 ? p.rows() : p.cols();
        if (p.requires_grad())
          p.node()->accumulate(axis == 0 ? Matrix(o.grad.middleRows(off, n))
                                         : Matrix(o.grad.middleCols(off, n)));
        off += n;
      }
    });
  }
  Tensor concat(std::initializer_list<Tensor> parts, int axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
  }

  Tensor slice(const Tensor& a, int axis, Eigen::Index start, Eigen::Index len) {
    const Eigen::Index extent = axis == 0 ? a.rows() : a.cols();
    if (start < 0 || len < 0 || start + len > extent)
      throw ShapeMismatch("slice [" + std::to_string(start) + ", +" + std::to_string(len) +
                          ") of " + shape_str(a));
    Matrix out = axis == 0 ? Matrix(a.value().middleRows(start, len))
                           : Matrix(a.value().middleCols(start, len));
    return record(std::move(out), {a}, [a, axis, start, len](const Node& o) {
      Matrix g = Matrix::Zero(a.rows(), a.cols());
      if (axis == 0) g.middleRows(start, len) = o.grad;
      else g.middleCols(start, len) = o.grad;
      a.node()->accumulate(g);
    });
  }

  Tensor relu(const Tensor& a) {
    Matrix out = a.value().cwiseMax(0.0);
    return record(std::move(out), {a}, [a](const Node& o) {
      a.node()->accumulate((a.value().array() > 0.0).cast<double>() * o.grad.array());
    });
  }

  Tensor tanh(const Tensor& a) {
    Matrix out = a.value().array().tanh().matrix();
    auto y = std::make_shared<Matrix>(out);
    return record(std::move(out), {a}, [a, y](const Node& o) {
      a.node()->accumulate(o.grad.array() * (1.0 - y->array().square()));
    });
  }

  Tensor square(const Tensor& a) {
    return record(a.value().array().square().matrix(), {a}, [a](const Node& o) {
      a.node()->accumulate(2.0 * o.grad.array() * a.value().array());
    });
  }

  Tensor sum(const Tensor& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return record(std::move(out), {a}, [a](const Node& o) {
      a.node()->accumulate(Matrix::Constant(a.rows(), a.cols(), o.grad(0, 0)));
    });
  }

  Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.value().size());
    Matrix out(1, 1);
    out(0, 0) = a.value().sum() / n;
    return record(std::move(out), {a}, [a, n](const Node& o) {
      a.node()->accumulate(Matrix::Constant(a.rows(), a.cols(), o.grad(0, 0) / n));
    });
  }

  // Each row split into consecutive blocks of `block` columns; every block is
  // divided by max(||block||_2, eps).
  Tensor normalize_blocks(const Tensor& a, Eigen::Index block, double eps = 1e-8) {
    if (block <= 0 || a.cols() % block != 0)
      throw ShapeMismatch("normalize_blocks: " + shape_str(a) + " not divisible into blocks of " +
                          std::to_string(block));
    const Eigen::Index nb = a.cols() / block;
    Matrix denom(a.rows(), nb);
    Matrix out(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      for (Eigen::Index k = 0; k < nb; ++k) {
        const auto seg = a.value().row(r).segment(k * block, block);
        denom(r, k) = std::max(seg.norm(), eps);
        out.row(r).segment(k * block, block) = seg / denom(r, k);
      }
    auto y = std::make_shared<Matrix>(out);
    return record(std::move(out), {a}, [a, y, denom, block, nb, eps](const Node& o) {
      Matrix g(a.rows(), a.cols());
      for (Eigen::Index r = 0; r < a.rows(); ++r)
        for (Eigen::Index k = 0; k < nb; ++k) {
          const auto go = o.grad.row(r).segment(k * block, block);
          const auto yo = y->row(r).segment(k * block, block);
          const double d = denom(r, k);
          if (d > eps) g.row(r).segment(k * block, block) = (go - go.dot(yo) * yo) / d;
          else g.row(r).segment(k * block, block) = go / eps;
        }
      a.node()->accumulate(g);
    });
  }

  // Fills gradients of every requires_grad tensor reachable from loss, then
  // clears the tape.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1)
      throw NonScalarLoss("loss must be 1x1, got " + (loss.defined() ? shape_str(loss) : "[]"));
    if (nodes_.empty())
      throw TapeConsumed("nothing recorded; run a forward pass before backward");
    if (!loss.requires_grad()) throw TapeConsumed("loss does not depend on any parameter");
    loss.node()->accumulate(Matrix::Constant(1, 1, 1.0));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.grad.size() != 0 && n.backward) n.backward(n);
    }
    // Intermediate results drop their backward rules so they cannot be replayed.
    for (auto& n : nodes_) n->backward = nullptr;
    nodes_.clear();
  }

 private:
  bool broadcastable(const Tensor& a, const Tensor& b, const char* op) const {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return false;
    if (b.rows() == 1 && b.cols() == a.cols()) return true;
    throw ShapeMismatch(std::string(op) + " " + shape_str(a) + " and " + shape_str(b));
  }

  Tensor add_scaled(const Tensor& a, const Tensor& b, double sign, const char* op) {
    const bool bcast = broadcastable(a, b, op);
    Matrix out = bcast ? Matrix(a.value().rowwise() + sign * b.value().row(0))
                       : Matrix(a.value() + sign * b.value());
    return record(std::move(out), {a, b}, [a, b, bcast, sign](const Node& o) {
      if (a.requires_grad()) a.node()->accumulate(o.grad);
      if (b.requires_grad()) {
        if (bcast) b.node()->accumulate(sign * o.grad.colwise().sum());
        else b.node()->accumulate(sign * o.grad);
      }
    });
  }

  Tensor record(Matrix value, const std::vector<Tensor>& inputs,
                std::function<void(const Node&)> rule) {
    bool needs = false;
    if (mode_ == Mode::kRecord)
      for (const auto& t : inputs) needs = needs || t.requires_grad();
    Tensor out(std::move(value), needs);
    if (needs) {
      out.node()->backward = std::move(rule);
      nodes_.push_back(out.node());
    }
    return out;
  }

  Mode mode_;
  std::vector<std::shared_ptr<Node>> nodes_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step_count = 0;
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState make_adam_state(std::span<const Tensor> params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& p : params) {
    s.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
    s.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return s;
}

inline void adam_step(std::span<Tensor> params, AdamState& s) {
  if (s.first_moment.size() != params.size())
    throw ShapeMismatch("Adam state tracks a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad())
      throw MissingGradient("parameter " + std::to_string(i) + " has no gradient");
  ++s.step_count;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step_count));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i].grad();
    Matrix& m = s.first_moment[i];
    Matrix& v = s.second_moment[i];
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
    params[i].mutable_value().array() -=
        s.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Fully connected network: Linear -> ReLU -> ... -> Linear (raw output).

class Mlp {
 public:
  Mlp() = default;
  // widths = {in, hidden..., out}. Weights and biases ~ U(+-sqrt(1/fan_in));
  // the last layer is additionally scaled by final_scale.
  Mlp(const std::vector<int>& widths, Rng& rng, double final_scale = 1.0) {
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const int in = widths[l];
      const int out = widths[l + 1];
      const double bound = std::sqrt(1.0 / in) * (l + 2 == widths.size() ? final_scale : 1.0);
      Matrix w(in, out), b(1, out);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = rng.uniform(-bound, bound);
      for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = rng.uniform(-bound, bound);
      weights_.push_back(Tensor::parameter(std::move(w)));
      biases_.push_back(Tensor::parameter(std::move(b)));
    }
  }

  bool empty() const { return weights_.empty(); }
  int in_dim() const { return static_cast<int>(weights_.front().rows()); }
  int out_dim() const { return static_cast<int>(weights_.back().cols()); }
  std::size_t layers() const { return weights_.size(); }
  const Tensor& weight(std::size_t l) const { return weights_[l]; }
  const Tensor& bias(std::size_t l) const { return biases_[l]; }

  Tensor forward(Tape& tape, const Tensor& x) const {
    if (x.cols() != in_dim())
      throw ShapeMismatch("mlp expects " + std::to_string(in_dim()) + " inputs, got " +
                          shape_str(x));
    Tensor h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = tape.affine(h, weights_[l], biases_[l]);
      if (l + 1 < weights_.size()) h = tape.relu(h);
    }
    return h;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.push_back(weights_[l]);
      p.push_back(biases_[l]);
    }
    return p;
  }

  Mlp clone() const {
    Mlp m;
    for (const auto& w : weights_) m.weights_.push_back(w.clone());
    for (const auto& b : biases_) m.biases_.push_back(b.clone());
    return m;
  }

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

inline std::size_t parameter_count(std::span<const Tensor> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value().size());
  return n;
}

// target <- (1 - tau) target + tau source, element-wise.
inline void soft_update(std::span<Tensor> target, std::span<const Tensor> source, double tau) {
  if (target.size() != source.size()) throw ShapeMismatch("soft_update parameter lists differ");
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i].mutable_value() = (1.0 - tau) * target[i].value() + tau * source[i].value();
}

inline void copy_values(std::span<Tensor> target, std::span<const Tensor> source) {
  if (target.size() != source.size()) throw ShapeMismatch("copy_values parameter lists differ");
  for (std::size_t i = 0; i < target.size(); ++i) target[i].mutable_value() = source[i].value();
}

// ---------------------------------------------------------------------------
// Checkpoints: "SMP1", then per tensor: u32 name length, name bytes,
// u32 rank, u64 dims[rank], f64 values, all little-endian. Read to EOF.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline bool get_u32(std::istream& is, std::uint32_t& v) {
  v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) return false;
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return true;
}
inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Matrix>>;

inline void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  os.write("SMP1", 4);
  for (const auto& [name, m] : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, 2);
    detail::put_u64(os, static_cast<std::uint64_t>(m.rows()));
    detail::put_u64(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.size(); ++k) detail::put_u64(os, std::bit_cast<std::uint64_t>(m.data()[k]));
  }
  if (!os) throw CheckpointError("write failed");
}

inline NamedTensors read_checkpoint(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != "SMP1") throw CheckpointError("bad magic");
  NamedTensors out;
  std::uint32_t len = 0;
  while (detail::get_u32(is, len)) {
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (static_cast<std::uint32_t>(is.gcount()) != len) throw CheckpointError("truncated name");
    std::uint32_t rank = 0;
    if (!detail::get_u32(is, rank)) throw CheckpointError("truncated rank");
    if (rank > 2) throw CheckpointError("tensor '" + name + "' has rank > 2");
    std::uint64_t dims[2] = {1, 1};
    for (std::uint32_t r = 0; r < rank; ++r) dims[2 - rank + r] = detail::get_u64(is);
    Matrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = std::bit_cast<double>(detail::get_u64(is));
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

}  // namespace smp::ad
