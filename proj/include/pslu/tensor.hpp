#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pslu/rng.hpp"

namespace pslu {

using Shape = std::vector<std::size_t>;

/// 1 marks a padding position (key positions in attention).
using PadMask = std::vector<std::uint8_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename S>
class Tensor;

/// One recorded operation: the parent tensors it read and a closure that
/// scatters the output gradient back into them.
template <typename S>
struct Node {
  const char* op = "";
  std::vector<Tensor<S>> parents;
  std::function<void(Tensor<S>&)> backward;
};

/// N-dimensional row-major array of IEEE-754 values. Copies share storage
/// (value-semantic handle); `S` is float for training and double for
/// gradient verification. Tensors created with requires_grad carry a
/// same-shape gradient buffer that backward passes accumulate into.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad, S(0));
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad, value);
  }

  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    Tensor t(shape, requires_grad, S(0));
    check_arg(values.size() == t.numel(),
              "tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    *t.data_ = std::move(values);
    return t;
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  // 2-D conveniences; rank-1 tensors count as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape_[rank() - 1] : (rank() == 1 ? shape_[0] : 0); }

  std::span<S> values() { return {data_->data(), data_->size()}; }
  std::span<const S> values() const { return {data_->data(), data_->size()}; }

  S& at(std::size_t flat) { return (*data_)[flat]; }
  S at(std::size_t flat) const { return (*data_)[flat]; }
  S& operator()(std::size_t r, std::size_t c) { return (*data_)[r * cols() + c]; }
  S operator()(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

  S item() const {
    check_arg(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  bool requires_grad() const { return static_cast<bool>(grad_); }
  std::span<S> grad() { return {grad_->data(), grad_->size()}; }
  std::span<const S> grad() const { return {grad_->data(), grad_->size()}; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), S(0));
  }

  bool all_finite() const {
    for (S v : values())
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Deep copy with fresh storage; drops graph linkage.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<S>>(*data_);
    if (grad_) t.grad_ = std::make_shared<std::vector<S>>(grad_->size(), S(0));
    return t;
  }

  std::shared_ptr<Node<S>> node;

 private:
  Tensor(Shape shape, bool requires_grad, S fill) : shape_(std::move(shape)) {
    std::size_t n = 1;
    check_arg(!shape_.empty(), "tensor: rank 0 not supported");
    for (std::size_t e : shape_) {
      check_arg(e > 0, "tensor: zero extent in shape " + shape_str(shape_));
      n *= e;
    }
    data_ = std::make_shared<std::vector<S>>(n, fill);
    if (requires_grad) grad_ = std::make_shared<std::vector<S>>(n, S(0));
  }

  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  std::shared_ptr<std::vector<S>> grad_;
};

namespace detail {

template <typename S>
bool any_grad(std::initializer_list<const Tensor<S>*> ts) {
  for (const auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

template <typename S, typename Fn>
void attach(Tensor<S>& out, const char* op, std::vector<Tensor<S>> parents, Fn&& backward) {
  if (!out.requires_grad()) return;
  out.node = std::make_shared<Node<S>>();
  out.node->op = op;
  out.node->parents = std::move(parents);
  out.node->backward = std::forward<Fn>(backward);
}

}  // namespace detail

/// Explicit reverse-mode tape: a topological ordering of the graph below
/// `root`, built once per step and discarded afterwards. backward() seeds
/// the root with ones (gradient of sum) and replays the tape in reverse.
template <typename S>
class GradTape {
 public:
  explicit GradTape(Tensor<S> root) : root_(std::move(root)) {
    if (!root_.node) return;
    std::unordered_set<const Node<S>*> visited;
    // Iterative post-order DFS; recursion would overflow on long LSTM chains.
    std::vector<std::pair<Tensor<S>, std::size_t>> stack;
    visited.insert(root_.node.get());
    stack.emplace_back(root_, 0);
    while (!stack.empty()) {
      auto& [t, next] = stack.back();
      auto& parents = t.node->parents;
      bool descended = false;
      while (next < parents.size()) {
        Tensor<S>& p = parents[next++];
        if (p.node && !visited.count(p.node.get())) {
          visited.insert(p.node.get());
          stack.emplace_back(p, 0);
          descended = true;
          break;
        }
      }
      if (!descended && next >= parents.size()) {
        order_.push_back(t);
        stack.pop_back();
      }
    }
  }

  std::size_t op_count() const { return order_.size(); }

  void backward() {
    if (!root_.defined() || !root_.requires_grad()) return;
    for (S& g : root_.grad()) g = S(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it)
      it->node->backward(*it);
  }

 private:
  Tensor<S> root_;
  std::vector<Tensor<S>> order_;  // parents before children
};

template <typename S>
void backward(const Tensor<S>& loss) {
  GradTape<S>(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_arg(a.shape() == b.shape(),
            "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape(), detail::any_grad<S>({&a, &b}));
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = a.at(i) + b.at(i);
  detail::attach(out, "add", {a, b}, [](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    auto& pb = o.node->parents[1];
    for (std::size_t i = 0; i < o.numel(); ++i) {
      if (pa.requires_grad()) pa.grad()[i] += o.grad()[i];
      if (pb.requires_grad()) pb.grad()[i] += o.grad()[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_arg(a.shape() == b.shape(),
            "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape(), detail::any_grad<S>({&a, &b}));
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = a.at(i) * b.at(i);
  detail::attach(out, "mul", {a, b}, [](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    auto& pb = o.node->parents[1];
    for (std::size_t i = 0; i < o.numel(); ++i) {
      if (pa.requires_grad()) pa.grad()[i] += o.grad()[i] * pb.at(i);
      if (pb.requires_grad()) pb.grad()[i] += o.grad()[i] * pa.at(i);
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Tensor<S> out = Tensor<S>::zeros(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = a.at(i) * factor;
  detail::attach(out, "scale", {a}, [factor](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    if (!pa.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) pa.grad()[i] += o.grad()[i] * factor;
  });
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  Tensor<S> out = Tensor<S>::zeros(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = a.at(i) + value;
  detail::attach(out, "add_scalar", {a}, [](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    if (!pa.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) pa.grad()[i] += o.grad()[i];
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) > S(0) ? x.at(i) : S(0);
  // Subgradient at 0 is 0.
  detail::attach(out, "relu", {x}, [](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i)
      if (px.at(i) > S(0)) px.grad()[i] += o.grad()[i];
  });
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    S v = x.at(i);
    out.at(i) = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                          : std::exp(v) / (S(1) + std::exp(v));
  }
  detail::attach(out, "sigmoid", {x}, [](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) {
      S y = o.at(i);
      px.grad()[i] += o.grad()[i] * y * (S(1) - y);
    }
  });
  return out;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = std::tanh(x.at(i));
  detail::attach(out, "tanh", {x}, [](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) {
      S y = o.at(i);
      px.grad()[i] += o.grad()[i] * (S(1) - y * y);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_arg(a.rank() == 2 && b.rank() == 2,
            "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  check_arg(a.extent(1) == b.extent(0),
            "matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<S> out = Tensor<S>::zeros({m, n}, detail::any_grad<S>({&a, &b}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      S aip = a(i, p);
      if (aip == S(0)) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * b(p, j);
    }
  detail::attach(out, "matmul", {a, b}, [m, k, n](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    auto& pb = o.node->parents[1];
    if (pa.requires_grad()) {
      // dA = dC . B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          S g = o.grad()[i * n + j];
          if (g == S(0)) continue;
          for (std::size_t p = 0; p < k; ++p) pa.grad()[i * k + p] += g * pb.at(p * n + j);
        }
    }
    if (pb.requires_grad()) {
      // dB = A^T . dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          S av = pa.at(i * k + p);
          if (av == S(0)) continue;
          for (std::size_t j = 0; j < n; ++j) pb.grad()[p * n + j] += av * o.grad()[i * n + j];
        }
    }
  });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  check_arg(a.rank() == 2, "transpose: expects rank-2, got " + shape_str(a.shape()));
  const std::size_t r = a.extent(0), c = a.extent(1);
  Tensor<S> out = Tensor<S>::zeros({c, r}, a.requires_grad());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  detail::attach(out, "transpose", {a}, [r, c](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    if (!pa.requires_grad()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pa.grad()[i * c + j] += o.grad()[j * r + i];
  });
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape new_shape) {
  Tensor<S> out = Tensor<S>::zeros(std::move(new_shape), a.requires_grad());
  check_arg(out.numel() == a.numel(),
            "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(out.shape()));
  for (std::size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i);
  detail::attach(out, "reshape", {a}, [](Tensor<S>& o) {
    auto& pa = o.node->parents[0];
    if (!pa.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) pa.grad()[i] += o.grad()[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast over rows (bias-style). x is [R x C], v is [C].
// ---------------------------------------------------------------------------

template <typename S>
void check_rowvec(const Tensor<S>& x, const Tensor<S>& v, const char* op) {
  check_arg(x.rank() == 2 && v.rank() == 1 && v.extent(0) == x.extent(1),
            std::string(op) + ": expects [RxC] and [C], got " + shape_str(x.shape()) + " and " +
                shape_str(v.shape()));
}

template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  check_rowvec(x, v, "add_rowvec");
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), detail::any_grad<S>({&x, &v}));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) + v.at(j);
  detail::attach(out, "add_rowvec", {x, v}, [r, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    auto& pv = o.node->parents[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        S g = o.grad()[i * c + j];
        if (px.requires_grad()) px.grad()[i * c + j] += g;
        if (pv.requires_grad()) pv.grad()[j] += g;
      }
  });
  return out;
}

template <typename S>
Tensor<S> sub_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  check_rowvec(x, v, "sub_rowvec");
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), detail::any_grad<S>({&x, &v}));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) - v.at(j);
  detail::attach(out, "sub_rowvec", {x, v}, [r, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    auto& pv = o.node->parents[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        S g = o.grad()[i * c + j];
        if (px.requires_grad()) px.grad()[i * c + j] += g;
        if (pv.requires_grad()) pv.grad()[j] -= g;
      }
  });
  return out;
}

template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  check_rowvec(x, v, "mul_rowvec");
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), detail::any_grad<S>({&x, &v}));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) * v.at(j);
  detail::attach(out, "mul_rowvec", {x, v}, [r, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    auto& pv = o.node->parents[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        S g = o.grad()[i * c + j];
        if (px.requires_grad()) px.grad()[i * c + j] += g * pv.at(j);
        if (pv.requires_grad()) pv.grad()[j] += g * px.at(i * c + j);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros({1}, x.requires_grad());
  S acc = S(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
  out.at(0) = acc;
  detail::attach(out, "sum_all", {x}, [](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    S g = o.grad()[0];
    for (std::size_t i = 0; i < px.numel(); ++i) px.grad()[i] += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

/// Column means: [R x C] -> [C].
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  check_arg(x.rank() == 2, "mean_rows: expects rank-2, got " + shape_str(x.shape()));
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor<S> out = Tensor<S>::zeros({c}, x.requires_grad());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j) += x(i, j);
  for (std::size_t j = 0; j < c; ++j) out.at(j) /= static_cast<S>(r);
  detail::attach(out, "mean_rows", {x}, [r, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) px.grad()[i * c + j] += o.grad()[j] / static_cast<S>(r);
  });
  return out;
}

template <typename S>
Tensor<S> rsqrt(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = S(1) / std::sqrt(x.at(i));
  detail::attach(out, "rsqrt", {x}, [](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) {
      S y = o.at(i);
      px.grad()[i] += o.grad()[i] * S(-0.5) * y * y * y;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / concat / slice
// ---------------------------------------------------------------------------

/// Row gather: out[k, :] = x[indices[k], :]. Backward scatter-adds, so the
/// same row may be gathered more than once. Also serves as embedding lookup.
template <typename S>
Tensor<S> take_rows(const Tensor<S>& x, const std::vector<std::size_t>& indices) {
  check_arg(x.rank() == 2, "take_rows: expects rank-2, got " + shape_str(x.shape()));
  check_arg(!indices.empty(), "take_rows: empty index list");
  const std::size_t c = x.extent(1);
  for (std::size_t idx : indices)
    check_arg(idx < x.extent(0), "take_rows: index " + std::to_string(idx) + " out of range for " +
                                     shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({indices.size(), c}, x.requires_grad());
  for (std::size_t k = 0; k < indices.size(); ++k)
    for (std::size_t j = 0; j < c; ++j) out(k, j) = x(indices[k], j);
  detail::attach(out, "take_rows", {x}, [indices, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t k = 0; k < indices.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) px.grad()[indices[k] * c + j] += o.grad()[k * c + j];
  });
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& xs) {
  check_arg(!xs.empty(), "concat_cols: no inputs");
  const std::size_t r = xs[0].extent(0);
  std::size_t total = 0;
  bool rg = false;
  for (const auto& x : xs) {
    check_arg(x.rank() == 2 && x.extent(0) == r,
              "concat_cols: row mismatch, first is " + shape_str(xs[0].shape()) + ", got " +
                  shape_str(x.shape()));
    total += x.extent(1);
    rg = rg || x.requires_grad();
  }
  Tensor<S> out = Tensor<S>::zeros({r, total}, rg);
  std::size_t off = 0;
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < x.extent(1); ++j) out(i, off + j) = x(i, j);
    off += x.extent(1);
  }
  detail::attach(out, "concat_cols", xs, [r, total](Tensor<S>& o) {
    std::size_t off2 = 0;
    for (auto& p : o.node->parents) {
      const std::size_t pc = p.extent(1);
      if (p.requires_grad())
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) p.grad()[i * pc + j] += o.grad()[i * total + off2 + j];
      off2 += pc;
    }
  });
  return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& xs) {
  check_arg(!xs.empty(), "concat_rows: no inputs");
  const std::size_t c = xs[0].extent(1);
  std::size_t total = 0;
  bool rg = false;
  for (const auto& x : xs) {
    check_arg(x.rank() == 2 && x.extent(1) == c,
              "concat_rows: column mismatch, first is " + shape_str(xs[0].shape()) + ", got " +
                  shape_str(x.shape()));
    total += x.extent(0);
    rg = rg || x.requires_grad();
  }
  Tensor<S> out = Tensor<S>::zeros({total, c}, rg);
  std::size_t off = 0;
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < x.extent(0); ++i)
      for (std::size_t j = 0; j < c; ++j) out(off + i, j) = x(i, j);
    off += x.extent(0);
  }
  detail::attach(out, "concat_rows", xs, [c](Tensor<S>& o) {
    std::size_t off2 = 0;
    for (auto& p : o.node->parents) {
      const std::size_t pr = p.extent(0);
      if (p.requires_grad())
        for (std::size_t i = 0; i < pr; ++i)
          for (std::size_t j = 0; j < c; ++j) p.grad()[i * c + j] += o.grad()[(off2 + i) * c + j];
      off2 += pr;
    }
  });
  return out;
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::size_t offset, std::size_t len) {
  check_arg(x.rank() == 2, "slice_rows: expects rank-2, got " + shape_str(x.shape()));
  check_arg(len > 0 && offset + len <= x.extent(0),
            "slice_rows: [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                ") out of range for " + shape_str(x.shape()));
  const std::size_t c = x.extent(1);
  Tensor<S> out = Tensor<S>::zeros({len, c}, x.requires_grad());
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(offset + i, j);
  detail::attach(out, "slice_rows", {x}, [offset, len, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < c; ++j) px.grad()[(offset + i) * c + j] += o.grad()[i * c + j];
  });
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t offset, std::size_t len) {
  check_arg(x.rank() == 2, "slice_cols: expects rank-2, got " + shape_str(x.shape()));
  check_arg(len > 0 && offset + len <= x.extent(1),
            "slice_cols: [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                ") out of range for " + shape_str(x.shape()));
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor<S> out = Tensor<S>::zeros({r, len}, x.requires_grad());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) out(i, j) = x(i, offset + j);
  detail::attach(out, "slice_cols", {x}, [offset, len, r, c](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < len; ++j) px.grad()[i * c + offset + j] += o.grad()[i * len + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm / cross entropy
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  check_arg(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " invalid for " +
                                 shape_str(x.shape()));
  const std::size_t n = x.extent(axis);
  check_arg(n > 0, "softmax: empty axis");
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t outer = x.numel() / (n * inner);

  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t s = 0; s < inner; ++s) {
      const std::size_t base = o * n * inner + s;
      // Max-subtraction keeps exp() in range.
      S mx = x.at(base);
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x.at(base + k * inner));
      S total = S(0);
      for (std::size_t k = 0; k < n; ++k) {
        S e = std::exp(x.at(base + k * inner) - mx);
        out.at(base + k * inner) = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out.at(base + k * inner) /= total;
    }
  detail::attach(out, "softmax", {x}, [n, inner, outer](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    // dx_k = y_k (dy_k - sum_j dy_j y_j)
    for (std::size_t ot = 0; ot < outer; ++ot)
      for (std::size_t s = 0; s < inner; ++s) {
        const std::size_t base = ot * n * inner + s;
        S dot = S(0);
        for (std::size_t k = 0; k < n; ++k) dot += o.grad()[base + k * inner] * o.at(base + k * inner);
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          px.grad()[idx] += o.at(idx) * (o.grad()[idx] - dot);
        }
      }
  });
  return out;
}

/// Per-row normalization over the last axis, then affine with gain/bias.
/// Leading axes are treated as rows; rank-1 input is one row.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  const std::size_t c = x.extent(x.rank() - 1);
  check_arg(gain.rank() == 1 && gain.extent(0) == c && bias.rank() == 1 && bias.extent(0) == c,
            "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                " do not match last extent of " + shape_str(x.shape()));
  check_arg(eps > S(0), "layer_norm: eps must be positive");
  const std::size_t r = x.numel() / c;

  Tensor<S> out = Tensor<S>::zeros(x.shape(), detail::any_grad<S>({&x, &gain, &bias}));
  std::vector<S> mean(r), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    S mu = S(0);
    for (std::size_t j = 0; j < c; ++j) mu += x.at(i * c + j);
    mu /= static_cast<S>(c);
    S var = S(0);
    for (std::size_t j = 0; j < c; ++j) {
      S d = x.at(i * c + j) - mu;
      var += d * d;
    }
    var /= static_cast<S>(c);
    mean[i] = mu;
    inv_std[i] = S(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      out.at(i * c + j) = (x.at(i * c + j) - mu) * inv_std[i] * gain.at(j) + bias.at(j);
  }
  detail::attach(out, "layer_norm", {x, gain, bias},
                 [r, c, mean = std::move(mean), inv_std = std::move(inv_std)](Tensor<S>& o) {
                   auto& px = o.node->parents[0];
                   auto& pg = o.node->parents[1];
                   auto& pb = o.node->parents[2];
                   for (std::size_t i = 0; i < r; ++i) {
                     const S is = inv_std[i];
                     S sum_dxh = S(0), sum_dxh_xh = S(0);
                     for (std::size_t j = 0; j < c; ++j) {
                       const std::size_t idx = i * c + j;
                       S xh = (px.at(idx) - mean[i]) * is;
                       S dy = o.grad()[idx];
                       S dxh = dy * pg.at(j);
                       sum_dxh += dxh;
                       sum_dxh_xh += dxh * xh;
                       if (pg.requires_grad()) pg.grad()[j] += dy * xh;
                       if (pb.requires_grad()) pb.grad()[j] += dy;
                     }
                     if (px.requires_grad())
                       for (std::size_t j = 0; j < c; ++j) {
                         const std::size_t idx = i * c + j;
                         S xh = (px.at(idx) - mean[i]) * is;
                         S dxh = o.grad()[idx] * pg.at(j);
                         px.grad()[idx] +=
                             is * (dxh - sum_dxh / static_cast<S>(c) - xh * sum_dxh_xh / static_cast<S>(c));
                       }
                   }
                 });
  return out;
}

/// Mean negative log-softmax probability of the target classes.
/// logits is [B x C] (rank-1 counts as one row); one target id per row.
template <typename S>
Tensor<S> cross_entropy_loss(const Tensor<S>& logits, const std::vector<int>& targets) {
  const std::size_t c = logits.extent(logits.rank() - 1);
  const std::size_t b = logits.numel() / c;
  check_arg(b >= 1, "cross_entropy: empty batch");
  check_arg(targets.size() == b, "cross_entropy: " + std::to_string(targets.size()) +
                                     " targets for batch of " + std::to_string(b));
  for (int t : targets)
    check_arg(t >= 0 && static_cast<std::size_t>(t) < c,
              "cross_entropy: target " + std::to_string(t) + " out of range [0, " + std::to_string(c) + ")");

  Tensor<S> out = Tensor<S>::zeros({1}, logits.requires_grad());
  std::vector<S> probs(b * c);
  S loss = S(0);
  for (std::size_t i = 0; i < b; ++i) {
    S mx = logits.at(i * c);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i * c + j));
    S total = S(0);
    for (std::size_t j = 0; j < c; ++j) {
      S e = std::exp(logits.at(i * c + j) - mx);
      probs[i * c + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= total;
    // -log p(target), computed from the shifted logits for stability
    loss += std::log(total) - (logits.at(i * c + static_cast<std::size_t>(targets[i])) - mx);
  }
  out.at(0) = loss / static_cast<S>(b);
  detail::attach(out, "cross_entropy", {logits},
                 [b, c, targets, probs = std::move(probs)](Tensor<S>& o) {
                   auto& pl = o.node->parents[0];
                   if (!pl.requires_grad()) return;
                   const S g = o.grad()[0] / static_cast<S>(b);
                   // d logits = (softmax - one_hot) / B
                   for (std::size_t i = 0; i < b; ++i)
                     for (std::size_t j = 0; j < c; ++j) {
                       S p = probs[i * c + j];
                       S y = (static_cast<std::size_t>(targets[i]) == j) ? S(1) : S(0);
                       pl.grad()[i * c + j] += g * (p - y);
                     }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Masking and dropout
// ---------------------------------------------------------------------------

/// Additive penalty that zeroes attention weight on padded key positions.
inline constexpr double kMaskPenalty = -1e9;

/// scores is [Tq x Tk]; mask marks key columns to suppress.
template <typename S>
Tensor<S> add_key_mask(const Tensor<S>& scores, const PadMask& key_mask) {
  check_arg(scores.rank() == 2, "add_key_mask: expects rank-2, got " + shape_str(scores.shape()));
  check_arg(key_mask.size() == scores.extent(1),
            "add_key_mask: mask size " + std::to_string(key_mask.size()) + " vs " +
                shape_str(scores.shape()));
  bool any_open = false;
  for (auto m : key_mask) any_open = any_open || !m;
  check_arg(any_open, "add_key_mask: all keys masked");
  const std::size_t r = scores.extent(0), c = scores.extent(1);
  Tensor<S> out = Tensor<S>::zeros(scores.shape(), scores.requires_grad());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out(i, j) = scores(i, j) + (key_mask[j] ? static_cast<S>(kMaskPenalty) : S(0));
  detail::attach(out, "add_key_mask", {scores}, [](Tensor<S>& o) {
    auto& ps = o.node->parents[0];
    if (!ps.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) ps.grad()[i] += o.grad()[i];
  });
  return out;
}

/// Forward-pass switches shared by both models; dropout and batch-norm
/// statistics updates fire only in training mode.
struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
};

/// Inverted dropout: kept entries are scaled by 1/(1-rate) so that eval mode
/// is the identity. rate 0 returns the input untouched.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng) {
  check_arg(rate >= 0.0 && rate < 1.0, "dropout: rate " + std::to_string(rate) + " outside [0, 1)");
  if (rate == 0.0) return x;
  const S keep_scale = S(1.0 / (1.0 - rate));
  std::vector<S> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() >= rate ? keep_scale : S(0);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) * mask[i];
  detail::attach(out, "dropout", {x}, [mask = std::move(mask)](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t i = 0; i < o.numel(); ++i) px.grad()[i] += o.grad()[i] * mask[i];
  });
  return out;
}

/// Zero-padded window unfolding for 1-D convolution over time:
/// x is [T x E], result is [T x K*E] with out[t, k*E+e] = x[t+k-(K-1)/2, e].
template <typename S>
Tensor<S> unfold_1d(const Tensor<S>& x, std::size_t kernel) {
  check_arg(x.rank() == 2, "unfold_1d: expects rank-2, got " + shape_str(x.shape()));
  check_arg(kernel % 2 == 1, "unfold_1d: kernel size " + std::to_string(kernel) + " must be odd");
  const std::size_t t_len = x.extent(0), e = x.extent(1);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(kernel - 1) / 2;
  Tensor<S> out = Tensor<S>::zeros({t_len, kernel * e}, x.requires_grad());
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
      for (std::size_t j = 0; j < e; ++j) out(t, k * e + j) = x(static_cast<std::size_t>(src), j);
    }
  detail::attach(out, "unfold_1d", {x}, [t_len, e, kernel, pad](Tensor<S>& o) {
    auto& px = o.node->parents[0];
    if (!px.requires_grad()) return;
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
        for (std::size_t j = 0; j < e; ++j)
          px.grad()[static_cast<std::size_t>(src) * e + j] += o.grad()[t * kernel * e + k * e + j];
      }
  });
  return out;
}

/// Index of the largest value; ties break toward the lower index.
template <typename S>
std::size_t argmax(const Tensor<S>& v) {
  check_arg(v.numel() > 0, "argmax: empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.numel(); ++i)
    if (v.at(i) > v.at(best)) best = i;
  return best;
}

}  // namespace pslu
