#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flowbridge/tensor.hpp"

namespace flowbridge {

// Define-by-run computation graph, rebuilt per batch. Nodes are stored in
// creation order, which is a valid topological order; one backward pass from
// a scalar seed accumulates d(seed)/d(leaf) into the grad buffer of every
// registered parameter tensor.
class Graph {
 public:
  struct Value {
    int id = -1;
  };

  enum class Op : std::uint8_t {
    Input,
    Param,
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Atan,
    Relu,
    LeakyRelu,
    Square,
    Affine,
    Concat,
    Slice,
    Reshape,
    SumAll,
    RowSum,
    MeanAll,
    Dropout,
    ChannelGather,
    Haar1Fwd,
    Haar1Inv,
    Haar2Fwd,
    Haar2Inv,
  };

  Graph() { nodes_.reserve(256); }

  // ---- leaves ----

  Value input(Tensor t) {
    check_finite(t, "input");
    return push(Op::Input, {}, std::move(t));
  }

  // Differentiable leaf. The tensor must outlive the graph; backward()
  // accumulates into t.grad.
  Value param(Tensor& t) {
    check_finite(t, "param");
    Value v = push(Op::Param, {}, t);
    nodes_[v.id].leaf = &t;
    return v;
  }

  // ---- elementwise / arithmetic ----

  Value add(Value a, Value b) { return binary(Op::Add, a, b); }
  Value sub(Value a, Value b) { return binary(Op::Sub, a, b); }
  Value mul(Value a, Value b) { return binary(Op::Mul, a, b); }

  Value matmul(Value a, Value b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.shape[1] != B.shape[0]) {
      throw std::invalid_argument("matmul: incompatible shapes " +
                                  shape_str(A.shape) + " x " +
                                  shape_str(B.shape));
    }
    Tensor out({A.shape[0], B.shape[1]});
    emat(out).noalias() = cmat(A) * cmat(B);
    return push_checked(Op::MatMul, {a.id, b.id}, std::move(out), "matmul");
  }

  Value exp(Value x) {
    Tensor out = unary_map(x, [](double v) { return std::exp(v); });
    return push_checked(Op::Exp, {x.id}, std::move(out), "exp");
  }

  Value atan(Value x) {
    Tensor out = unary_map(x, [](double v) { return std::atan(v); });
    return push_checked(Op::Atan, {x.id}, std::move(out), "atan");
  }

  Value relu(Value x) {
    Tensor out = unary_map(x, [](double v) { return v > 0.0 ? v : 0.0; });
    return push_checked(Op::Relu, {x.id}, std::move(out), "relu");
  }

  Value leaky_relu(Value x, double slope) {
    Tensor out =
        unary_map(x, [slope](double v) { return v > 0.0 ? v : slope * v; });
    Value r = push_checked(Op::LeakyRelu, {x.id}, std::move(out), "leaky_relu");
    nodes_[r.id].a = slope;
    return r;
  }

  Value square(Value x) {
    Tensor out = unary_map(x, [](double v) { return v * v; });
    return push_checked(Op::Square, {x.id}, std::move(out), "square");
  }

  // a * x + b, scalars
  Value affine(Value x, double a, double b) {
    Tensor out = unary_map(x, [a, b](double v) { return a * v + b; });
    Value r = push_checked(Op::Affine, {x.id}, std::move(out), "affine");
    nodes_[r.id].a = a;
    nodes_[r.id].b = b;
    return r;
  }

  // ---- structure ----

  Value concat(const std::vector<Value>& xs, std::size_t axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = val(xs[0]).shape;
    if (axis >= s0.size()) throw std::invalid_argument("concat: bad axis");
    Shape out_shape = s0;
    std::size_t cat = 0;
    for (Value v : xs) {
      const Shape& s = val(v).shape;
      if (s.size() != s0.size()) {
        throw std::invalid_argument("concat: rank mismatch " + shape_str(s0) +
                                    " vs " + shape_str(s));
      }
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != axis && s[i] != s0[i]) {
          throw std::invalid_argument("concat: shape mismatch " +
                                      shape_str(s0) + " vs " + shape_str(s) +
                                      " on axis " + std::to_string(i));
        }
      }
      cat += s[axis];
    }
    out_shape[axis] = cat;
    Tensor out(out_shape);
    const std::size_t outer = prod_before(out_shape, axis);
    const std::size_t inner = prod_after(out_shape, axis);
    std::size_t off = 0;
    for (Value v : xs) {
      const Tensor& t = val(v);
      const std::size_t len = t.shape[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(t.data.data() + o * len, len,
                    out.data.data() + o * out_shape[axis] * inner + off);
      }
      off += len;
    }
    std::vector<int> in;
    for (Value v : xs) in.push_back(v.id);
    Value r = push(Op::Concat, in, std::move(out));
    nodes_[r.id].axis = axis;
    return r;
  }

  // contiguous range [start, start+len) along `axis`
  Value slice(Value x, std::size_t axis, std::size_t start, std::size_t len) {
    const Tensor& t = val(x);
    if (axis >= t.ndim() || start + len > t.shape[axis] || len == 0) {
      throw std::invalid_argument("slice: range [" + std::to_string(start) +
                                  ", " + std::to_string(start + len) +
                                  ") out of bounds for axis " +
                                  std::to_string(axis) + " of " +
                                  shape_str(t.shape));
    }
    Shape out_shape = t.shape;
    out_shape[axis] = len;
    Tensor out(out_shape);
    const std::size_t outer = prod_before(t.shape, axis);
    const std::size_t inner = prod_after(t.shape, axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.data.data() + (o * t.shape[axis] + start) * inner,
                  len * inner, out.data.data() + o * len * inner);
    }
    Value r = push(Op::Slice, {x.id}, std::move(out));
    nodes_[r.id].axis = axis;
    nodes_[r.id].start = start;
    return r;
  }

  std::vector<Value> split(Value x, std::size_t axis,
                           const std::vector<std::size_t>& sizes) {
    const Tensor& t = val(x);
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (axis >= t.ndim() || total != t.shape[axis]) {
      throw std::invalid_argument("split: sizes do not cover axis " +
                                  std::to_string(axis) + " of " +
                                  shape_str(t.shape));
    }
    std::vector<Value> parts;
    std::size_t off = 0;
    for (std::size_t s : sizes) {
      parts.push_back(slice(x, axis, off, s));
      off += s;
    }
    return parts;
  }

  Value reshape(Value x, Shape s) {
    const Tensor& t = val(x);
    if (numel(s) != t.size()) {
      throw std::invalid_argument("reshape: " + shape_str(t.shape) + " to " +
                                  shape_str(s) + " changes element count");
    }
    Tensor out(std::move(s));
    out.data = t.data;
    return push(Op::Reshape, {x.id}, std::move(out));
  }

  // ---- reductions ----

  Value sum(Value x) {
    const Tensor& t = val(x);
    double acc = 0.0;
    for (double v : t.data) acc += v;
    return push_checked(Op::SumAll, {x.id}, Tensor({1}, {acc}), "sum");
  }

  // per-sample sum over all axes but the first; (B, ...) -> (B)
  Value row_sum(Value x) {
    const Tensor& t = val(x);
    if (t.ndim() < 1) throw std::invalid_argument("row_sum: rank-0 input");
    const std::size_t rows = t.shape[0];
    const std::size_t cols = t.size() / std::max<std::size_t>(rows, 1);
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      const double* p = t.data.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) acc += p[c];
      out.data[r] = acc;
    }
    return push_checked(Op::RowSum, {x.id}, std::move(out), "row_sum");
  }

  Value mean(Value x) {
    const Tensor& t = val(x);
    if (t.size() == 0) throw std::invalid_argument("mean: empty input");
    double acc = 0.0;
    for (double v : t.data) acc += v;
    return push_checked(Op::MeanAll, {x.id},
                        Tensor({1}, {acc / static_cast<double>(t.size())}),
                        "mean");
  }

  // ---- stochastic ----

  // Inverted dropout: kept activations are scaled by 1/(1-p) at train time
  // so inference needs no rescaling. The mask is drawn from `rng` and saved
  // for backward.
  Value dropout(Value x, double p, bool train, RngStream& rng) {
    if (p < 0.0 || p >= 1.0) {
      throw std::invalid_argument("dropout: p must be in [0, 1)");
    }
    const Tensor& t = val(x);
    if (!train || p == 0.0) {
      Tensor out = t;
      Value r = push(Op::Dropout, {x.id}, std::move(out));
      nodes_[r.id].mask.assign(t.size(), 1.0);
      return r;
    }
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(t.size());
    for (double& m : mask) m = rng.next_double() < p ? 0.0 : keep_scale;
    Tensor out(t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      out.data[i] = t.data[i] * mask[i];
    }
    Value r = push_checked(Op::Dropout, {x.id}, std::move(out), "dropout");
    nodes_[r.id].mask = std::move(mask);
    return r;
  }

  // ---- channel ops for (B, C, S) activations ----

  // out[:, i, :] = x[:, perm[i], :]
  Value channel_gather(Value x, const std::vector<std::size_t>& perm) {
    const Tensor& t = val(x);
    if (t.ndim() != 3 || perm.size() != t.shape[1]) {
      throw std::invalid_argument("channel_gather: need (B, C, S) with |perm| == C");
    }
    const std::size_t B = t.shape[0], C = t.shape[1], S = t.shape[2];
    Tensor out(t.shape);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        std::copy_n(t.data.data() + (b * C + perm[c]) * S, S,
                    out.data.data() + (b * C + c) * S);
      }
    }
    Value r = push(Op::ChannelGather, {x.id}, std::move(out));
    nodes_[r.id].perm = perm;
    return r;
  }

  // Orthonormal Haar pair transform: (B, C, S) -> (B, 2C, S/2), averages in
  // the first C output channels, differences in the last C.
  Value haar1_fwd(Value x) {
    const Tensor& t = val(x);
    require_haar1(t, "haar1_fwd");
    Tensor out({t.shape[0], 2 * t.shape[1], t.shape[2] / 2});
    haar1_fwd_raw(t, out);
    return push(Op::Haar1Fwd, {x.id}, std::move(out));
  }

  Value haar1_inv(Value x) {
    const Tensor& t = val(x);
    if (t.ndim() != 3 || t.shape[1] % 2 != 0) {
      throw std::invalid_argument("haar1_inv: need (B, 2C, S)");
    }
    Tensor out({t.shape[0], t.shape[1] / 2, t.shape[2] * 2});
    haar1_inv_raw(t, out);
    return push(Op::Haar1Inv, {x.id}, std::move(out));
  }

  // (B, C, H*W) -> (B, 4C, (H/2)*(W/2)); sub-band channel order LL, LH, HL, HH
  Value haar2_fwd(Value x, std::size_t h, std::size_t w) {
    const Tensor& t = val(x);
    require_haar2(t, h, w, "haar2_fwd");
    Tensor out({t.shape[0], 4 * t.shape[1], (h / 2) * (w / 2)});
    haar2_fwd_raw(t, out, h, w);
    Value r = push(Op::Haar2Fwd, {x.id}, std::move(out));
    nodes_[r.id].alt = {h, w};
    return r;
  }

  // inverse of haar2_fwd; h, w are the dimensions of the reconstructed image
  Value haar2_inv(Value x, std::size_t h, std::size_t w) {
    const Tensor& t = val(x);
    if (t.ndim() != 3 || t.shape[1] % 4 != 0 ||
        t.shape[2] != (h / 2) * (w / 2) || h % 2 != 0 || w % 2 != 0) {
      throw std::invalid_argument("haar2_inv: shape " + shape_str(t.shape) +
                                  " does not invert to " + std::to_string(h) +
                                  "x" + std::to_string(w));
    }
    Tensor out({t.shape[0], t.shape[1] / 4, h * w});
    haar2_inv_raw(t, out, h, w);
    Value r = push(Op::Haar2Inv, {x.id}, std::move(out));
    nodes_[r.id].alt = {h, w};
    return r;
  }

  // ---- access ----

  const Tensor& value(Value v) const { return nodes_.at(v.id).val; }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- backward ----

  void backward(Value seed) {
    const Tensor& s = val(seed);
    if (s.size() != 1) {
      throw NumericError("backward: seed must be scalar, got " +
                         shape_str(s.shape));
    }
    grads_.assign(nodes_.size(), {});
    grads_[seed.id].assign(1, 1.0);
    for (int i = seed.id; i >= 0; --i) {
      if (grads_[i].empty()) continue;
      backprop_node(i);
    }
    grads_.clear();
  }

 private:
  struct Node {
    Op op;
    std::vector<int> in;
    Tensor val;
    double a = 0.0, b = 0.0;      // affine coefficients / leaky slope
    std::size_t axis = 0;         // concat / slice
    std::size_t start = 0;        // slice
    std::vector<std::size_t> alt; // haar2 image dims
    std::vector<std::size_t> perm;
    std::vector<double> mask;     // dropout
    Tensor* leaf = nullptr;       // param target
  };

  using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;

  static Eigen::Map<const EMat> cmat(const Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
            static_cast<Eigen::Index>(t.shape[1])};
  }

  static Eigen::Map<EMat> emat(Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
            static_cast<Eigen::Index>(t.shape[1])};
  }

  static Eigen::Map<EMat> gmat(std::vector<double>& g, const Shape& s) {
    return {g.data(), static_cast<Eigen::Index>(s[0]),
            static_cast<Eigen::Index>(s[1])};
  }

  static Eigen::Map<const EMat> cgmat(const std::vector<double>& g,
                                      const Shape& s) {
    return {g.data(), static_cast<Eigen::Index>(s[0]),
            static_cast<Eigen::Index>(s[1])};
  }

  static std::size_t prod_before(const Shape& s, std::size_t axis) {
    std::size_t p = 1;
    for (std::size_t i = 0; i < axis; ++i) p *= s[i];
    return p;
  }

  static std::size_t prod_after(const Shape& s, std::size_t axis) {
    std::size_t p = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) p *= s[i];
    return p;
  }

  const Tensor& val(Value v) const { return nodes_.at(v.id).val; }

  Value push(Op op, std::vector<int> in, Tensor t) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.val = std::move(t);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  Value push_checked(Op op, std::vector<int> in, Tensor t, const char* what) {
    check_finite(t, what);
    return push(op, std::move(in), std::move(t));
  }

  template <typename F>
  Tensor unary_map(Value x, F f) {
    const Tensor& t = val(x);
    Tensor out(t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = f(t.data[i]);
    return out;
  }

  // Elementwise binary with a restricted broadcast: identical shapes, or b
  // has the trailing shape of a (bias over leading axes).
  Value binary(Op op, Value a, Value b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    bool bcast = false;
    if (A.shape != B.shape) {
      if (A.size() % std::max<std::size_t>(B.size(), 1) != 0 ||
          !is_suffix(B.shape, A.shape)) {
        throw std::invalid_argument(op_name(op) + std::string(": shapes ") +
                                    shape_str(A.shape) + " and " +
                                    shape_str(B.shape) +
                                    " are not broadcastable");
      }
      bcast = true;
    }
    Tensor out(A.shape);
    const std::size_t n = A.size(), m = B.size();
    switch (op) {
      case Op::Add:
        for (std::size_t i = 0; i < n; ++i)
          out.data[i] = A.data[i] + B.data[bcast ? i % m : i];
        break;
      case Op::Sub:
        for (std::size_t i = 0; i < n; ++i)
          out.data[i] = A.data[i] - B.data[bcast ? i % m : i];
        break;
      case Op::Mul:
        for (std::size_t i = 0; i < n; ++i)
          out.data[i] = A.data[i] * B.data[bcast ? i % m : i];
        break;
      default:
        throw std::logic_error("binary: bad op");
    }
    return push_checked(op, {a.id, b.id}, std::move(out), op_name(op));
  }

  static bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i) {
      if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    }
    return true;
  }

  static const char* op_name(Op op) {
    switch (op) {
      case Op::Add: return "add";
      case Op::Sub: return "sub";
      case Op::Mul: return "mul";
      default: return "op";
    }
  }

  std::vector<double>& grad_buf(int id) {
    if (grads_[id].empty()) grads_[id].assign(nodes_[id].val.size(), 0.0);
    return grads_[id];
  }

  void backprop_node(int i) {
    Node& n = nodes_[i];
    const std::vector<double>& g = grads_[i];
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Param: {
        n.leaf->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) n.leaf->grad[k] += g[k];
        break;
      }
      case Op::Add:
      case Op::Sub: {
        const double sign = n.op == Op::Sub ? -1.0 : 1.0;
        auto& ga = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
        auto& gb = grad_buf(n.in[1]);
        const std::size_t m = gb.size();
        for (std::size_t k = 0; k < g.size(); ++k) gb[k % m] += sign * g[k];
        break;
      }
      case Op::Mul: {
        const Tensor& A = nodes_[n.in[0]].val;
        const Tensor& B = nodes_[n.in[1]].val;
        auto& ga = grad_buf(n.in[0]);
        auto& gb = grad_buf(n.in[1]);
        const std::size_t m = B.size();
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k] * B.data[k % m];
          gb[k % m] += g[k] * A.data[k];
        }
        break;
      }
      case Op::MatMul: {
        const Tensor& A = nodes_[n.in[0]].val;
        const Tensor& B = nodes_[n.in[1]].val;
        auto gy = cgmat(g, n.val.shape);
        gmat(grad_buf(n.in[0]), A.shape).noalias() += gy * cmat(B).transpose();
        gmat(grad_buf(n.in[1]), B.shape).noalias() += cmat(A).transpose() * gy;
        break;
      }
      case Op::Exp: {
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * n.val.data[k];
        break;
      }
      case Op::Atan: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) {
          gx[k] += g[k] / (1.0 + X.data[k] * X.data[k]);
        }
        break;
      }
      case Op::Relu: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (X.data[k] > 0.0) gx[k] += g[k];
        }
        break;
      }
      case Op::LeakyRelu: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) {
          gx[k] += g[k] * (X.data[k] > 0.0 ? 1.0 : n.a);
        }
        break;
      }
      case Op::Square: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) {
          gx[k] += 2.0 * X.data[k] * g[k];
        }
        break;
      }
      case Op::Affine: {
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += n.a * g[k];
        break;
      }
      case Op::Concat: {
        const std::size_t inner = prod_after(n.val.shape, n.axis);
        const std::size_t outer = prod_before(n.val.shape, n.axis);
        const std::size_t out_row = n.val.shape[n.axis] * inner;
        std::size_t off = 0;
        for (int src : n.in) {
          const Tensor& t = nodes_[src].val;
          auto& gx = grad_buf(src);
          const std::size_t len = t.shape[n.axis] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            const double* gp = g.data() + o * out_row + off;
            double* xp = gx.data() + o * len;
            for (std::size_t k = 0; k < len; ++k) xp[k] += gp[k];
          }
          off += len;
        }
        break;
      }
      case Op::Slice: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        const std::size_t inner = prod_after(X.shape, n.axis);
        const std::size_t outer = prod_before(X.shape, n.axis);
        const std::size_t len = n.val.shape[n.axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* gp = g.data() + o * len;
          double* xp =
              gx.data() + (o * X.shape[n.axis] + n.start) * inner;
          for (std::size_t k = 0; k < len; ++k) xp[k] += gp[k];
        }
        break;
      }
      case Op::Reshape: {
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
        break;
      }
      case Op::SumAll: {
        auto& gx = grad_buf(n.in[0]);
        for (double& v : gx) v += g[0];
        break;
      }
      case Op::RowSum: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        const std::size_t rows = X.shape[0];
        const std::size_t cols = X.size() / rows;
        for (std::size_t r = 0; r < rows; ++r) {
          double* xp = gx.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) xp[c] += g[r];
        }
        break;
      }
      case Op::MeanAll: {
        auto& gx = grad_buf(n.in[0]);
        const double s = g[0] / static_cast<double>(gx.size());
        for (double& v : gx) v += s;
        break;
      }
      case Op::Dropout: {
        auto& gx = grad_buf(n.in[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * n.mask[k];
        break;
      }
      case Op::ChannelGather: {
        const Tensor& X = nodes_[n.in[0]].val;
        auto& gx = grad_buf(n.in[0]);
        const std::size_t B = X.shape[0], C = X.shape[1], S = X.shape[2];
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (b * C + c) * S;
            double* xp = gx.data() + (b * C + n.perm[c]) * S;
            for (std::size_t k = 0; k < S; ++k) xp[k] += gp[k];
          }
        }
        break;
      }
      // Haar transforms are orthonormal, so J^T = J^{-1}: backward of the
      // forward transform is the inverse transform and vice versa.
      case Op::Haar1Fwd: {
        Tensor gy(n.val.shape);
        gy.data = g;
        const Tensor& X = nodes_[n.in[0]].val;
        Tensor gx_t(X.shape);
        haar1_inv_raw(gy, gx_t);
        accumulate(grad_buf(n.in[0]), gx_t);
        break;
      }
      case Op::Haar1Inv: {
        Tensor gy(n.val.shape);
        gy.data = g;
        const Tensor& X = nodes_[n.in[0]].val;
        Tensor gx_t(X.shape);
        haar1_fwd_raw(gy, gx_t);
        accumulate(grad_buf(n.in[0]), gx_t);
        break;
      }
      case Op::Haar2Fwd: {
        Tensor gy(n.val.shape);
        gy.data = g;
        const Tensor& X = nodes_[n.in[0]].val;
        Tensor gx_t(X.shape);
        haar2_inv_raw(gy, gx_t, n.alt[0], n.alt[1]);
        accumulate(grad_buf(n.in[0]), gx_t);
        break;
      }
      case Op::Haar2Inv: {
        Tensor gy(n.val.shape);
        gy.data = g;
        const Tensor& X = nodes_[n.in[0]].val;
        Tensor gx_t(X.shape);
        haar2_fwd_raw(gy, gx_t, n.alt[0], n.alt[1]);
        accumulate(grad_buf(n.in[0]), gx_t);
        break;
      }
    }
  }

  static void accumulate(std::vector<double>& dst, const Tensor& src) {
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src.data[k];
  }

  static void require_haar1(const Tensor& t, const char* what) {
    if (t.ndim() != 3) {
      throw std::invalid_argument(std::string(what) + ": need (B, C, S), got " +
                                  shape_str(t.shape));
    }
    if (t.shape[2] % 2 != 0) {
      throw std::invalid_argument(
          std::string(what) + ": odd length " + std::to_string(t.shape[2]) +
          "; pad the sequence to even length at dataset construction");
    }
  }

  static void require_haar2(const Tensor& t, std::size_t h, std::size_t w,
                            const char* what) {
    if (t.ndim() != 3 || t.shape[2] != h * w) {
      throw std::invalid_argument(std::string(what) + ": need (B, C, " +
                                  std::to_string(h * w) + "), got " +
                                  shape_str(t.shape));
    }
    if (h % 2 != 0 || w % 2 != 0) {
      throw std::invalid_argument(
          std::string(what) + ": odd image dimension " + std::to_string(h) +
          "x" + std::to_string(w) +
          "; pad the image to even dimensions at dataset construction");
    }
  }

 public:
  // Raw orthonormal Haar kernels, shared with the backward rules. Forward
  // per adjacent pair (a, b): avg = (a+b)/sqrt(2), diff = (a-b)/sqrt(2).
  static void haar1_fwd_raw(const Tensor& x, Tensor& y) {
    const std::size_t B = x.shape[0], C = x.shape[1], S = x.shape[2];
    const std::size_t M = S / 2;
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* in = x.data.data() + (b * C + c) * S;
        double* avg = y.data.data() + (b * 2 * C + c) * M;
        double* dif = y.data.data() + (b * 2 * C + C + c) * M;
        for (std::size_t j = 0; j < M; ++j) {
          avg[j] = (in[2 * j] + in[2 * j + 1]) * inv_sqrt2;
          dif[j] = (in[2 * j] - in[2 * j + 1]) * inv_sqrt2;
        }
      }
    }
  }

  static void haar1_inv_raw(const Tensor& y, Tensor& x) {
    const std::size_t B = x.shape[0], C = x.shape[1], S = x.shape[2];
    const std::size_t M = S / 2;
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* avg = y.data.data() + (b * 2 * C + c) * M;
        const double* dif = y.data.data() + (b * 2 * C + C + c) * M;
        double* out = x.data.data() + (b * C + c) * S;
        for (std::size_t j = 0; j < M; ++j) {
          out[2 * j] = (avg[j] + dif[j]) * inv_sqrt2;
          out[2 * j + 1] = (avg[j] - dif[j]) * inv_sqrt2;
        }
      }
    }
  }

  // Separable 2-D Haar on each 2x2 block [[p, q], [r, s]]:
  //   LL = (p+q+r+s)/2   LH = (p+q-r-s)/2
  //   HL = (p-q+r-s)/2   HH = (p-q-r+s)/2
  // Rows of the 4x4 transform have unit norm, so the map is orthonormal.
  static void haar2_fwd_raw(const Tensor& x, Tensor& y, std::size_t h,
                            std::size_t w) {
    const std::size_t B = x.shape[0], C = x.shape[1];
    const std::size_t h2 = h / 2, w2 = w / 2, S2 = h2 * w2;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* in = x.data.data() + (b * C + c) * h * w;
        double* ll = y.data.data() + (b * 4 * C + c) * S2;
        double* lh = y.data.data() + (b * 4 * C + C + c) * S2;
        double* hl = y.data.data() + (b * 4 * C + 2 * C + c) * S2;
        double* hh = y.data.data() + (b * 4 * C + 3 * C + c) * S2;
        for (std::size_t i = 0; i < h2; ++i) {
          for (std::size_t j = 0; j < w2; ++j) {
            const double p = in[(2 * i) * w + 2 * j];
            const double q = in[(2 * i) * w + 2 * j + 1];
            const double r = in[(2 * i + 1) * w + 2 * j];
            const double s = in[(2 * i + 1) * w + 2 * j + 1];
            ll[i * w2 + j] = 0.5 * (p + q + r + s);
            lh[i * w2 + j] = 0.5 * (p + q - r - s);
            hl[i * w2 + j] = 0.5 * (p - q + r - s);
            hh[i * w2 + j] = 0.5 * (p - q - r + s);
          }
        }
      }
    }
  }

  static void haar2_inv_raw(const Tensor& y, Tensor& x, std::size_t h,
                            std::size_t w) {
    const std::size_t B = x.shape[0], C = x.shape[1];
    const std::size_t h2 = h / 2, w2 = w / 2, S2 = h2 * w2;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const double* ll = y.data.data() + (b * 4 * C + c) * S2;
        const double* lh = y.data.data() + (b * 4 * C + C + c) * S2;
        const double* hl = y.data.data() + (b * 4 * C + 2 * C + c) * S2;
        const double* hh = y.data.data() + (b * 4 * C + 3 * C + c) * S2;
        double* out = x.data.data() + (b * C + c) * h * w;
        for (std::size_t i = 0; i < h2; ++i) {
          for (std::size_t j = 0; j < w2; ++j) {
            const double a = ll[i * w2 + j], d1 = lh[i * w2 + j];
            const double d2 = hl[i * w2 + j], d3 = hh[i * w2 + j];
            out[(2 * i) * w + 2 * j] = 0.5 * (a + d1 + d2 + d3);
            out[(2 * i) * w + 2 * j + 1] = 0.5 * (a + d1 - d2 - d3);
            out[(2 * i + 1) * w + 2 * j] = 0.5 * (a - d1 + d2 - d3);
            out[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (a - d1 - d2 + d3);
          }
        }
      }
    }
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

using Value = Graph::Value;

// Central-difference gradient check. Returns the max over coordinates of
// |analytic - numeric| / max(1, |analytic|). `fn` must be scalar-valued and
// smooth at x; kinks (e.g. relu exactly at 0) are excluded inputs.
inline double grad_check(const std::function<Value(Graph&, Value)>& fn,
                         const Tensor& x, double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw std::invalid_argument("grad_check: eps must be in [1e-7, 1e-3]");
  }
  Tensor xp = x;
  xp.requires_grad = true;
  xp.zero_grad();
  Graph g;
  Value loss = fn(g, g.param(xp));
  if (g.value(loss).size() != 1) {
    throw std::invalid_argument("grad_check: fn must be scalar-valued");
  }
  g.backward(loss);

  auto eval = [&fn](const Tensor& at) {
    Graph h;
    Value l = fn(h, h.input(at));
    return h.value(l).data[0];
  };

  double max_rel = 0.0;
  Tensor xe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xe.data[i];
    xe.data[i] = orig + eps;
    const double fp = eval(xe);
    xe.data[i] = orig - eps;
    const double fm = eval(xe);
    xe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = xp.grad[i];
    const double rel =
        std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace flowbridge
