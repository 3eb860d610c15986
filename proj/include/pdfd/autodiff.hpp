#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pdfd/errors.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
};

enum class OpKind {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kRelu,
  kExp,
  kLog,
  kMean,
  kSum,
  kSoftmaxRows,
  kConcat,
  kSlice,
  kBroadcast,
  kSqrt,
  kSquare,
  kBatchnorm,
  kCustom,
};

// Per-input gradients for a user-registered op: (out_grad, inputs, output).
using CustomVjp = std::function<std::vector<Tensor>(
    const Tensor&, const std::vector<Tensor>&, const Tensor&)>;

// Reverse-mode tape. Nodes are recorded in topological order by construction;
// one backward() sweep per recorded forward unless reset() is called.
//
// Registered primitives: matmul, add, sub, mul, scale, relu, exp, log, mean,
// sum, softmax-rows, concat, slice, broadcast, sqrt, square, batchnorm.
class Tape {
 public:
  struct Node {
    OpKind kind;
    Tensor value;
    Tensor grad;  // empty until backward touches the node
    bool requires_grad = false;
    bool grad_live = false;
    std::vector<int> parents;
    // op payload
    double c = 0.0;
    int axis = -1;
    std::size_t begin = 0, end = 0;
    std::vector<double> saved;  // batchnorm: xhat then inv_std
    CustomVjp custom_vjp;
    std::string custom_name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  void reset() {
    nodes_.clear();
    leaf_memo_.clear();
    swept_ = false;
  }

  Var leaf(Tensor value, bool requires_grad) {
    value.check_finite("leaf");
    return push(OpKind::kLeaf, std::move(value), {}, requires_grad);
  }

  Var constant(Tensor value) {
    value.check_finite("constant");
    return push(OpKind::kConstant, std::move(value), {}, false);
  }

  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // Memoized binding for parameter tensors: repeated forwards within one tape
  // share a single leaf so gradients accumulate across uses.
  Var leaf_for(const Tensor* param) {
    auto it = leaf_memo_.find(param);
    if (it != leaf_memo_.end()) return Var{this, it->second};
    const Var v = leaf(*param, true);
    leaf_memo_.emplace(param, v.id);
    return v;
  }

  bool is_bound(const Tensor* param) const { return leaf_memo_.count(param) > 0; }

  // ---- primitives -------------------------------------------------------

  Var matmul(Var a, Var b) {
    check_owned(a, "matmul");
    check_owned(b, "matmul");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
      throw ShapeError("matmul shapes do not conform: " + shape_str(ta.shape()) +
                       " x " + shape_str(tb.shape()));
    }
    const std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out(Shape{m, n});
    matmul_into(ta.data().data(), tb.data().data(), out.data().data(), m, k, n);
    out.check_finite("matmul");
    return push(OpKind::kMatmul, std::move(out), {a.id, b.id});
  }

  Var add(Var a, Var b) { return binary_elementwise(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary_elementwise(OpKind::kSub, a, b); }
  Var mul(Var a, Var b) { return binary_elementwise(OpKind::kMul, a, b); }

  Var scale(Var a, double c) {
    check_owned(a, "scale");
    if (!std::isfinite(c)) throw NumericError("non-finite scale factor");
    Tensor out = val(a);
    for (double& v : out.data()) v *= c;
    out.check_finite("scale");
    Var r = push(OpKind::kScale, std::move(out), {a.id});
    nodes_.back().c = c;
    return r;
  }

  Var relu(Var a) {
    check_owned(a, "relu");
    Tensor out = val(a);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push(OpKind::kRelu, std::move(out), {a.id});
  }

  Var exp(Var a) {
    check_owned(a, "exp");
    Tensor out = val(a);
    for (double& v : out.data()) v = std::exp(v);
    out.check_finite("exp");
    return push(OpKind::kExp, std::move(out), {a.id});
  }

  Var log(Var a) {
    check_owned(a, "log");
    Tensor out = val(a);
    for (double& v : out.data()) {
      if (v <= 0.0) throw DomainError("log of non-positive operand");
      v = std::log(v);
    }
    return push(OpKind::kLog, std::move(out), {a.id});
  }

  Var sqrt(Var a) {
    check_owned(a, "sqrt");
    Tensor out = val(a);
    for (double& v : out.data()) {
      if (v <= 0.0) throw DomainError("sqrt of non-positive operand");
      v = std::sqrt(v);
    }
    return push(OpKind::kSqrt, std::move(out), {a.id});
  }

  Var square(Var a) {
    check_owned(a, "square");
    Tensor out = val(a);
    for (double& v : out.data()) v = v * v;
    out.check_finite("square");
    return push(OpKind::kSquare, std::move(out), {a.id});
  }

  // axis omitted: full reduction to a length-1 tensor. axis 0/1 on a matrix:
  // keepdim reduction to (1,n) / (m,1).
  Var sum(Var a, std::optional<int> axis = std::nullopt) {
    return reduction(OpKind::kSum, a, axis);
  }
  Var mean(Var a, std::optional<int> axis = std::nullopt) {
    return reduction(OpKind::kMean, a, axis);
  }

  Var softmax_rows(Var a) {
    check_owned(a, "softmax-rows");
    const Tensor& ta = val(a);
    if (ta.rank() > 2) throw ShapeError("softmax-rows expects rank <= 2");
    const std::size_t m = ta.rows(), n = ta.cols();
    Tensor out = ta;
    for (std::size_t i = 0; i < m; ++i) {
      double* row = out.data().data() + i * n;
      double mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= s;
    }
    out.check_finite("softmax-rows");
    return push(OpKind::kSoftmaxRows, std::move(out), {a.id});
  }

  Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw UsageError("concat of zero tensors");
    for (const Var& p : parts) check_owned(p, "concat");
    const std::size_t rank = val(parts[0]).rank();
    if (axis < 0 || static_cast<std::size_t>(axis) >= rank) {
      throw ShapeError("concat axis out of range");
    }
    Shape out_shape = val(parts[0]).shape();
    std::size_t total = out_shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Shape& s = val(parts[i]).shape();
      if (s.size() != rank) throw ShapeError("concat rank mismatch");
      for (std::size_t ax = 0; ax < rank; ++ax) {
        if (ax == static_cast<std::size_t>(axis)) continue;
        if (s[ax] != out_shape[ax]) throw ShapeError("concat extent mismatch");
      }
      total += s[static_cast<std::size_t>(axis)];
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    Tensor out(out_shape);
    if (rank == 1 || axis == 0) {
      std::size_t off = 0;
      for (const Var& p : parts) {
        const auto src = val(p).data();
        std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
        off += src.size();
      }
    } else {  // rank 2, axis 1
      const std::size_t m = out_shape[0], n = out_shape[1];
      std::size_t col_off = 0;
      for (const Var& p : parts) {
        const Tensor& tp = val(p);
        const std::size_t pc = tp.dim(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < pc; ++j) {
            out[i * n + col_off + j] = tp[i * pc + j];
          }
        }
        col_off += pc;
      }
    }
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const Var& p : parts) ids.push_back(p.id);
    Var r = push(OpKind::kConcat, std::move(out), std::move(ids));
    nodes_.back().axis = axis;
    return r;
  }

  Var concat(std::initializer_list<Var> parts, int axis) {
    std::vector<Var> v(parts);
    return concat(std::span<const Var>(v), axis);
  }

  Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
    check_owned(a, "slice");
    const Tensor& ta = val(a);
    const std::size_t rank = ta.rank();
    if (axis < 0 || static_cast<std::size_t>(axis) >= rank) {
      throw ShapeError("slice axis out of range");
    }
    const std::size_t extent = ta.dim(static_cast<std::size_t>(axis));
    if (begin >= end || end > extent) throw ShapeError("slice bounds out of range");
    Shape out_shape = ta.shape();
    out_shape[static_cast<std::size_t>(axis)] = end - begin;
    Tensor out(out_shape);
    if (rank == 1 || axis == 0) {
      const std::size_t rw = rank == 2 ? ta.dim(1) : 1;
      std::copy(ta.data().begin() + static_cast<std::ptrdiff_t>(begin * rw),
                ta.data().begin() + static_cast<std::ptrdiff_t>(end * rw),
                out.data().begin());
    } else {  // rank 2, axis 1
      const std::size_t m = ta.dim(0), n = ta.dim(1), w = end - begin;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = ta[i * n + begin + j];
      }
    }
    Var r = push(OpKind::kSlice, std::move(out), {a.id});
    Node& nd = nodes_.back();
    nd.axis = axis;
    nd.begin = begin;
    nd.end = end;
    return r;
  }

  // Expand to `target` by repeating along axes where the (left-padded) input
  // extent is 1.
  Var broadcast_to(Var a, const Shape& target) {
    check_owned(a, "broadcast");
    const Tensor& ta = val(a);
    Shape in = ta.shape();
    if (in.size() > target.size()) throw ShapeError("broadcast to lower rank");
    Shape padded(target.size(), 1);
    std::copy(in.begin(), in.end(), padded.begin() + static_cast<std::ptrdiff_t>(target.size() - in.size()));
    for (std::size_t ax = 0; ax < target.size(); ++ax) {
      if (padded[ax] != target[ax] && padded[ax] != 1) {
        throw ShapeError("broadcast " + shape_str(in) + " to " + shape_str(target));
      }
    }
    Tensor out(target);
    if (target.size() == 1) {
      for (std::size_t i = 0; i < target[0]; ++i) out[i] = ta[padded[0] == 1 ? 0 : i];
    } else if (target.size() == 2) {
      const std::size_t m = target[0], n = target[1];
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t si = padded[0] == 1 ? 0 : i;
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t sj = padded[1] == 1 ? 0 : j;
          out[i * n + j] = ta[si * padded[1] + sj];
        }
      }
    } else {
      throw ShapeError("broadcast supports rank <= 2");
    }
    return push(OpKind::kBroadcast, std::move(out), {a.id});
  }

  // Training-mode batch normalization over the rows of x (per-column batch
  // statistics), y = gamma * (x - mu) / sqrt(var + eps) + beta.
  Var batchnorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    check_owned(x, "batchnorm");
    check_owned(gamma, "batchnorm");
    check_owned(beta, "batchnorm");
    const Tensor& tx = val(x);
    if (tx.rank() != 2 || tx.dim(0) < 2) {
      throw ShapeError("batchnorm expects a (B,F) input with B >= 2");
    }
    const std::size_t b = tx.dim(0), f = tx.dim(1);
    if (val(gamma).numel() != f || val(beta).numel() != f) {
      throw ShapeError("batchnorm gamma/beta must have length F");
    }
    std::vector<double> saved(b * f + f);
    double* xhat = saved.data();
    double* inv_std = saved.data() + b * f;
    Tensor out(Shape{b, f});
    const auto g = val(gamma).data();
    const auto be = val(beta).data();
    for (std::size_t j = 0; j < f; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < b; ++i) mu += tx[i * f + j];
      mu /= static_cast<double>(b);
      double var = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double d = tx[i * f + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(b);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[j] = is;
      for (std::size_t i = 0; i < b; ++i) {
        const double xh = (tx[i * f + j] - mu) * is;
        xhat[i * f + j] = xh;
        out[i * f + j] = g[j] * xh + be[j];
      }
    }
    out.check_finite("batchnorm");
    Var r = push(OpKind::kBatchnorm, std::move(out), {x.id, gamma.id, beta.id});
    nodes_.back().saved = std::move(saved);
    return r;
  }

  // User-registered op with an explicit VJP; used by the self-check harness.
  Var custom(std::string name, std::vector<Var> inputs, Tensor output,
             CustomVjp vjp) {
    for (const Var& v : inputs) check_owned(v, "custom");
    output.check_finite(name);
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) ids.push_back(v.id);
    Var r = push(OpKind::kCustom, std::move(output), std::move(ids));
    Node& nd = nodes_.back();
    nd.custom_vjp = std::move(vjp);
    nd.custom_name = std::move(name);
    return r;
  }

  // ---- backward ----------------------------------------------------------

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse topological
  // order, populating the grad of every requires_grad node on a path to loss.
  void backward(Var loss) {
    check_owned(loss, "backward");
    if (val(loss).numel() != 1) {
      throw UsageError("backward requires a scalar loss");
    }
    if (swept_) {
      throw UsageError("tape already swept; reset() before another backward");
    }
    swept_ = true;
    Node& root = nodes_[static_cast<std::size_t>(loss.id)];
    if (!root.requires_grad) return;  // no differentiable leaves involved
    root.grad = Tensor(root.value.shape(), std::vector<double>{1.0});
    root.grad_live = true;
    for (int u = loss.id; u >= 0; --u) {
      Node& nd = nodes_[static_cast<std::size_t>(u)];
      if (!nd.grad_live || !nd.requires_grad) continue;
      propagate(nd);
    }
  }

  bool has_grad(Var v) const {
    check_owned(v, "grad");
    return node(v.id).grad_live;
  }

  // Gradient of the last backward() w.r.t. v; zeros if v was not reached.
  Tensor grad(Var v) const {
    check_owned(v, "grad");
    const Node& nd = node(v.id);
    if (!nd.grad_live) return Tensor(nd.value.shape());
    return nd.grad;
  }

  static void matmul_into(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = a[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }

 private:
  friend struct Var;

  const Tensor& val(Var v) const { return node(v.id).value; }

  void check_owned(Var v, const char* op) const {
    if (v.tape != this || v.id < 0 ||
        static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw UsageError(std::string(op) + ": tensor is not on this tape");
    }
  }

  Var push(OpKind kind, Tensor value, std::vector<int> parents,
           bool leaf_requires_grad = false) {
    Node nd;
    nd.kind = kind;
    nd.value = std::move(value);
    nd.parents = std::move(parents);
    if (kind == OpKind::kLeaf) {
      nd.requires_grad = leaf_requires_grad;
    } else {
      for (const int p : nd.parents) {
        if (nodes_[static_cast<std::size_t>(p)].requires_grad) {
          nd.requires_grad = true;
          break;
        }
      }
    }
    nodes_.push_back(std::move(nd));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var binary_elementwise(OpKind kind, Var a, Var b) {
    const char* name = kind == OpKind::kAdd ? "add" : kind == OpKind::kSub ? "sub" : "mul";
    check_owned(a, name);
    check_owned(b, name);
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) {
      throw ShapeError(std::string(name) + " shape mismatch: " +
                       shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    }
    Tensor out = ta;
    const auto rb = tb.data();
    auto w = out.data();
    switch (kind) {
      case OpKind::kAdd:
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += rb[i];
        break;
      case OpKind::kSub:
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= rb[i];
        break;
      default:
        for (std::size_t i = 0; i < w.size(); ++i) w[i] *= rb[i];
        break;
    }
    out.check_finite(name);
    return push(kind, std::move(out), {a.id, b.id});
  }

  Var reduction(OpKind kind, Var a, std::optional<int> axis) {
    const char* name = kind == OpKind::kSum ? "sum" : "mean";
    check_owned(a, name);
    const Tensor& ta = val(a);
    Tensor out;
    if (!axis.has_value() || ta.rank() == 1) {
      double s = 0.0;
      for (const double v : ta.data()) s += v;
      if (kind == OpKind::kMean) s /= static_cast<double>(ta.numel());
      out = Tensor::scalar(s);
      axis.reset();
    } else {
      if (ta.rank() != 2 || (*axis != 0 && *axis != 1)) {
        throw ShapeError("axis reduction expects a matrix and axis 0 or 1");
      }
      const std::size_t m = ta.dim(0), n = ta.dim(1);
      if (*axis == 0) {
        out = Tensor(Shape{1, n});
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += ta[i * n + j];
          out[j] = kind == OpKind::kMean ? s / static_cast<double>(m) : s;
        }
      } else {
        out = Tensor(Shape{m, 1});
        for (std::size_t i = 0; i < m; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += ta[i * n + j];
          out[i] = kind == OpKind::kMean ? s / static_cast<double>(n) : s;
        }
      }
    }
    out.check_finite(name);
    Var r = push(kind, std::move(out), {a.id});
    nodes_.back().axis = axis.value_or(-1);
    return r;
  }

  Tensor& grad_buffer(int id) {
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (!nd.grad_live) {
      nd.grad = Tensor(nd.value.shape());
      nd.grad_live = true;
    }
    return nd.grad;
  }

  void add_into(int id, const Tensor& contribution) {
    Tensor& g = grad_buffer(id);
    auto w = g.data();
    const auto r = contribution.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += r[i];
  }

  bool wants_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  void propagate(Node& nd) {
    const Tensor& g = nd.grad;
    switch (nd.kind) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        return;
      case OpKind::kMatmul: {
        const int ai = nd.parents[0], bi = nd.parents[1];
        const Tensor& a = nodes_[static_cast<std::size_t>(ai)].value;
        const Tensor& b = nodes_[static_cast<std::size_t>(bi)].value;
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        if (wants_grad(ai)) {
          // dA[i,p] += sum_j g[i,j] * B[p,j]
          Tensor& da = grad_buffer(ai);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* grow = g.data().data() + i * n;
              const double* brow = b.data().data() + p * n;
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              da[i * k + p] += s;
            }
          }
        }
        if (wants_grad(bi)) {
          // dB[p,j] += sum_i A[i,p] * g[i,j]
          Tensor& db = grad_buffer(bi);
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = g.data().data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = a[i * k + p];
              if (aip == 0.0) continue;
              double* dbrow = db.data().data() + p * n;
              for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
            }
          }
        }
        return;
      }
      case OpKind::kAdd: {
        if (wants_grad(nd.parents[0])) add_into(nd.parents[0], g);
        if (wants_grad(nd.parents[1])) add_into(nd.parents[1], g);
        return;
      }
      case OpKind::kSub: {
        if (wants_grad(nd.parents[0])) add_into(nd.parents[0], g);
        if (wants_grad(nd.parents[1])) {
          Tensor& gb = grad_buffer(nd.parents[1]);
          for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= g[i];
        }
        return;
      }
      case OpKind::kMul: {
        const Tensor& a = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        const Tensor& b = nodes_[static_cast<std::size_t>(nd.parents[1])].value;
        if (wants_grad(nd.parents[0])) {
          Tensor& ga = grad_buffer(nd.parents[0]);
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * b[i];
        }
        if (wants_grad(nd.parents[1])) {
          Tensor& gb = grad_buffer(nd.parents[1]);
          for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[i] * a[i];
        }
        return;
      }
      case OpKind::kScale: {
        if (!wants_grad(nd.parents[0])) return;
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.c * g[i];
        return;
      }
      case OpKind::kRelu: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& x = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) {
          if (x[i] > 0.0) ga[i] += g[i];
        }
        return;
      }
      case OpKind::kExp: {
        if (!wants_grad(nd.parents[0])) return;
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * nd.value[i];
        return;
      }
      case OpKind::kLog: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& x = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] / x[i];
        return;
      }
      case OpKind::kSqrt: {
        if (!wants_grad(nd.parents[0])) return;
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) {
          ga[i] += g[i] * 0.5 / nd.value[i];
        }
        return;
      }
      case OpKind::kSquare: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& x = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * 2.0 * x[i];
        return;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& x = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        Tensor& ga = grad_buffer(nd.parents[0]);
        const bool is_mean = nd.kind == OpKind::kMean;
        if (nd.axis < 0) {
          const double w = is_mean ? g[0] / static_cast<double>(x.numel()) : g[0];
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += w;
        } else {
          const std::size_t m = x.dim(0), n = x.dim(1);
          if (nd.axis == 0) {
            const double d = is_mean ? static_cast<double>(m) : 1.0;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] / d;
            }
          } else {
            const double d = is_mean ? static_cast<double>(n) : 1.0;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i] / d;
            }
          }
        }
        return;
      }
      case OpKind::kSoftmaxRows: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& y = nd.value;
        const std::size_t m = y.rows(), n = y.cols();
        Tensor& ga = grad_buffer(nd.parents[0]);
        for (std::size_t i = 0; i < m; ++i) {
          const double* yr = y.data().data() + i * n;
          const double* gr = g.data().data() + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
          double* gar = ga.data().data() + i * n;
          for (std::size_t j = 0; j < n; ++j) gar[j] += (gr[j] - dot) * yr[j];
        }
        return;
      }
      case OpKind::kConcat: {
        const std::size_t rank = nd.value.rank();
        if (rank == 1 || nd.axis == 0) {
          std::size_t off = 0;
          for (const int pid : nd.parents) {
            const Tensor& p = nodes_[static_cast<std::size_t>(pid)].value;
            if (wants_grad(pid)) {
              Tensor& gp = grad_buffer(pid);
              for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
            }
            off += p.numel();
          }
        } else {
          const std::size_t m = nd.value.dim(0), n = nd.value.dim(1);
          std::size_t col_off = 0;
          for (const int pid : nd.parents) {
            const Tensor& p = nodes_[static_cast<std::size_t>(pid)].value;
            const std::size_t pc = p.dim(1);
            if (wants_grad(pid)) {
              Tensor& gp = grad_buffer(pid);
              for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < pc; ++j) {
                  gp[i * pc + j] += g[i * n + col_off + j];
                }
              }
            }
            col_off += pc;
          }
        }
        return;
      }
      case OpKind::kSlice: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& x = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        Tensor& ga = grad_buffer(nd.parents[0]);
        const std::size_t rank = x.rank();
        if (rank == 1 || nd.axis == 0) {
          const std::size_t rw = rank == 2 ? x.dim(1) : 1;
          for (std::size_t i = 0; i < g.numel(); ++i) ga[nd.begin * rw + i] += g[i];
        } else {
          const std::size_t m = x.dim(0), n = x.dim(1), w = nd.end - nd.begin;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              ga[i * n + nd.begin + j] += g[i * w + j];
            }
          }
        }
        return;
      }
      case OpKind::kBroadcast: {
        if (!wants_grad(nd.parents[0])) return;
        const Tensor& x = nodes_[static_cast<std::size_t>(nd.parents[0])].value;
        Tensor& ga = grad_buffer(nd.parents[0]);
        const Shape& ts = nd.value.shape();
        Shape padded(ts.size(), 1);
        std::copy(x.shape().begin(), x.shape().end(),
                  padded.begin() + static_cast<std::ptrdiff_t>(ts.size() - x.rank()));
        if (ts.size() == 1) {
          for (std::size_t i = 0; i < ts[0]; ++i) ga[padded[0] == 1 ? 0 : i] += g[i];
        } else {
          const std::size_t m = ts[0], n = ts[1];
          for (std::size_t i = 0; i < m; ++i) {
            const std::size_t si = padded[0] == 1 ? 0 : i;
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t sj = padded[1] == 1 ? 0 : j;
              ga[si * padded[1] + sj] += g[i * n + j];
            }
          }
        }
        return;
      }
      case OpKind::kBatchnorm: {
        const int xi = nd.parents[0], gi = nd.parents[1], bi = nd.parents[2];
        const Tensor& x = nodes_[static_cast<std::size_t>(xi)].value;
        const std::size_t b = x.dim(0), f = x.dim(1);
        const double* xhat = nd.saved.data();
        const double* inv_std = nd.saved.data() + b * f;
        const Tensor& gamma = nodes_[static_cast<std::size_t>(gi)].value;
        if (wants_grad(bi)) {
          Tensor& gb = grad_buffer(bi);
          for (std::size_t j = 0; j < f; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < b; ++i) s += g[i * f + j];
            gb[j] += s;
          }
        }
        if (wants_grad(gi)) {
          Tensor& gg = grad_buffer(gi);
          for (std::size_t j = 0; j < f; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < b; ++i) s += g[i * f + j] * xhat[i * f + j];
            gg[j] += s;
          }
        }
        if (wants_grad(xi)) {
          Tensor& gx = grad_buffer(xi);
          const double bn = static_cast<double>(b);
          for (std::size_t j = 0; j < f; ++j) {
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
              const double dxh = g[i * f + j] * gamma[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xhat[i * f + j];
            }
            for (std::size_t i = 0; i < b; ++i) {
              const double dxh = g[i * f + j] * gamma[j];
              gx[i * f + j] += inv_std[j] / bn *
                               (bn * dxh - sum_dxh - xhat[i * f + j] * sum_dxh_xh);
            }
          }
        }
        return;
      }
      case OpKind::kCustom: {
        std::vector<Tensor> inputs;
        inputs.reserve(nd.parents.size());
        for (const int pid : nd.parents) {
          inputs.push_back(nodes_[static_cast<std::size_t>(pid)].value);
        }
        const std::vector<Tensor> pgrads = nd.custom_vjp(g, inputs, nd.value);
        if (pgrads.size() != nd.parents.size()) {
          throw UsageError("custom op '" + nd.custom_name +
                           "' VJP returned wrong input-gradient count");
        }
        for (std::size_t i = 0; i < pgrads.size(); ++i) {
          if (wants_grad(nd.parents[i])) add_into(nd.parents[i], pgrads[i]);
        }
        return;
      }
    }
  }

  // deque so Node references (and value() spans handed to callers) stay valid
  // while later ops are recorded
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, int> leaf_memo_;
  bool swept_ = false;
};

inline const Tensor& Var::value() const {
  if (!valid()) throw UsageError("value() on an unbound tensor handle");
  return tape->node(id).value;
}

// Free-function forms; both operands must live on the same tape.
inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var add(Var a, Var b) { return a.tape->add(a, b); }
inline Var sub(Var a, Var b) { return a.tape->sub(a, b); }
inline Var mul(Var a, Var b) { return a.tape->mul(a, b); }
inline Var scale(Var a, double c) { return a.tape->scale(a, c); }
inline Var relu(Var a) { return a.tape->relu(a); }
inline Var exp(Var a) { return a.tape->exp(a); }
inline Var log(Var a) { return a.tape->log(a); }
inline Var sqrt(Var a) { return a.tape->sqrt(a); }
inline Var square(Var a) { return a.tape->square(a); }
inline Var sum(Var a, std::optional<int> axis = std::nullopt) { return a.tape->sum(a, axis); }
inline Var mean(Var a, std::optional<int> axis = std::nullopt) { return a.tape->mean(a, axis); }
inline Var softmax_rows(Var a) { return a.tape->softmax_rows(a); }
inline Var slice(Var a, int axis, std::size_t b, std::size_t e) { return a.tape->slice(a, axis, b, e); }
inline Var broadcast_to(Var a, const Shape& s) { return a.tape->broadcast_to(a, s); }
inline Var batchnorm(Var x, Var g, Var b, double eps = 1e-5) { return x.tape->batchnorm(x, g, b, eps); }

// Optional arguments for string-dispatched primitive application.
struct PrimitiveArgs {
  double factor = 1.0;                 // scale
  std::optional<int> axis;             // mean/sum/concat/slice
  std::size_t begin = 0, end = 0;      // slice
  Shape target;                        // broadcast
  double eps = 1e-5;                   // batchnorm
};

// String-dispatched entry over the registered primitive set.
inline Var apply_primitive(Tape& tape, std::string_view op,
                           std::span<const Var> inputs,
                           const PrimitiveArgs& args = {}) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw UsageError(std::string(op) + " expects " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  if (op == "matmul") { arity(2); return tape.matmul(inputs[0], inputs[1]); }
  if (op == "add") { arity(2); return tape.add(inputs[0], inputs[1]); }
  if (op == "sub") { arity(2); return tape.sub(inputs[0], inputs[1]); }
  if (op == "mul") { arity(2); return tape.mul(inputs[0], inputs[1]); }
  if (op == "scale") { arity(1); return tape.scale(inputs[0], args.factor); }
  if (op == "relu") { arity(1); return tape.relu(inputs[0]); }
  if (op == "exp") { arity(1); return tape.exp(inputs[0]); }
  if (op == "log") { arity(1); return tape.log(inputs[0]); }
  if (op == "mean") { arity(1); return tape.mean(inputs[0], args.axis); }
  if (op == "sum") { arity(1); return tape.sum(inputs[0], args.axis); }
  if (op == "softmax-rows") { arity(1); return tape.softmax_rows(inputs[0]); }
  if (op == "concat") { return tape.concat(inputs, args.axis.value_or(0)); }
  if (op == "slice") { arity(1); return tape.slice(inputs[0], args.axis.value_or(0), args.begin, args.end); }
  if (op == "broadcast") { arity(1); return tape.broadcast_to(inputs[0], args.target); }
  if (op == "sqrt") { arity(1); return tape.sqrt(inputs[0]); }
  if (op == "square") { arity(1); return tape.square(inputs[0]); }
  if (op == "batchnorm") { arity(3); return tape.batchnorm(inputs[0], inputs[1], inputs[2], args.eps); }
  throw UsageError("unknown primitive '" + std::string(op) + "'");
}

// ---- derived helpers built from the primitive set -------------------------

// max(x, c) composed as relu(x - c) + c; used for log clamping.
inline Var clamp_min(Var x, double c) {
  Tape& t = *x.tape;
  Var cv = t.constant(Tensor(x.shape().empty() ? Shape{1} : x.shape(), c));
  return add(relu(sub(x, cv)), cv);
}

// Numerically stable row-wise log softmax. The row max is subtracted as a
// detached constant; softmax shift invariance keeps the gradient exact.
inline Var log_softmax_rows(Var logits) {
  Tape& t = *logits.tape;
  const Tensor& lv = logits.value();
  const std::size_t m = lv.rows(), n = lv.cols();
  Tensor rowmax(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = lv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
    rowmax[i] = mx;
  }
  const Shape full{m, n};
  Var shifted = sub(logits, t.broadcast_to(t.constant(rowmax), full));
  Var lse = log(sum(exp(shifted), 1));  // (m,1); >= 1 since max term is e^0
  return sub(shifted, t.broadcast_to(lse, full));
}

// Mean cross-entropy of row-softmax(logits) against one-hot targets.
inline Var cross_entropy_with_logits(Var logits, const Tensor& onehot) {
  Tape& t = *logits.tape;
  if (!logits.value().same_shape(onehot)) {
    throw ShapeError("cross-entropy target shape mismatch");
  }
  Var lp = log_softmax_rows(logits);
  Var picked = mul(lp, t.constant(onehot));
  return scale(sum(picked), -1.0 / static_cast<double>(logits.value().rows()));
}

// sigmoid(x) = softmax([x, 0]) restricted to the first column; stable and
// composed purely from registered primitives.
inline Var sigmoid_columns(Var x) {
  Tape& t = *x.tape;
  const std::size_t m = x.value().rows();
  Var zeros = t.constant(Tensor(Shape{m, 1}));
  Var both = t.concat({x, zeros}, 1);
  return slice(softmax_rows(both), 1, 0, 1);
}

// ---- gradient checking -----------------------------------------------------

using ScalarFn = std::function<Var(Tape&, Var)>;

// Named references to every trainable tensor of a model; the optimizer, the
// checkpoint writer and the gradient checker all walk this list.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

// Max over coordinates of |analytic - central| / max(1, |analytic|, |central|)
// with central finite differences at the given eps.
inline double grad_check(const ScalarFn& f, const Tensor& point, double eps) {
  if (!(eps > 0.0) || eps > 1e-2) throw UsageError("grad_check eps must be in (0, 1e-2]");
  Tape tape;
  Var x = tape.leaf(point, true);
  Var y = f(tape, x);
  if (y.value().numel() != 1) throw UsageError("grad_check requires a scalar-valued f");
  tape.backward(y);
  const Tensor analytic = tape.grad(x);

  auto eval = [&](const Tensor& p) {
    Tape t2;
    Var v = f(t2, t2.leaf(p, false));
    if (v.value().numel() != 1) throw UsageError("grad_check requires a scalar-valued f");
    return v.value()[0];
  };

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double central = (up - down) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(central)});
    worst = std::max(worst, std::abs(analytic[i] - central) / denom);
  }
  return worst;
}

struct ParamCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// Gradient check over whole parameter sets. build_loss must bind parameters
// through leaf_for so the analytic pass can find them; the numeric pass
// perturbs the parameter tensors in place and rebuilds the forward.
inline ParamCheckResult param_grad_check(const std::function<Var(Tape&)>& build_loss,
                                         const ParamRefs& params, double eps) {
  if (!(eps > 0.0) || eps > 1e-2) throw UsageError("grad_check eps must be in (0, 1e-2]");
  Tape tape;
  Var loss = build_loss(tape);
  if (loss.value().numel() != 1) throw UsageError("param_grad_check requires a scalar loss");
  tape.backward(loss);

  auto eval = [&]() {
    Tape t2;
    return build_loss(t2).value()[0];
  };

  ParamCheckResult result;
  for (const auto& [name, tensor] : params) {
    Tensor analytic(tensor->shape());
    if (tape.is_bound(tensor)) analytic = tape.grad(tape.leaf_for(tensor));
    for (std::size_t i = 0; i < tensor->numel(); ++i) {
      const double orig = (*tensor)[i];
      (*tensor)[i] = orig + eps;
      const double up = eval();
      (*tensor)[i] = orig - eps;
      const double down = eval();
      (*tensor)[i] = orig;
      const double central = (up - down) / (2.0 * eps);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(central)});
      const double err = std::abs(analytic[i] - central) / denom;
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = name;
      }
    }
  }
  return result;
}

}  // namespace pdfd
