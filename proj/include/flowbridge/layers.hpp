#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "flowbridge/graph.hpp"

namespace flowbridge {

// Soft scale clamping: alpha * (2/pi) * atan(s / alpha). Odd, monotone,
// bounded to (-alpha, alpha), so per-channel stretch factors stay inside
// (e^-alpha, e^alpha).
inline double clamp_scale(double s, double alpha) {
  return alpha * (2.0 / 3.14159265358979323846) * std::atan(s / alpha);
}

inline Tensor clamp_scale(const Tensor& s, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("clamp_scale: alpha must be > 0");
  Tensor out(s.shape);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.data[i] = clamp_scale(s.data[i], alpha);
  }
  return out;
}

inline Value clamp_scale(Graph& g, Value s, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("clamp_scale: alpha must be > 0");
  return g.affine(g.atan(g.affine(s, 1.0 / alpha, 0.0)),
                  alpha * 2.0 / 3.14159265358979323846, 0.0);
}

// Fully connected stack: `hidden_layers` x (linear + relu) followed by a
// linear output layer. The output layer is zero-initialized so a fresh
// coupling block is the identity map.
struct Subnet {
  std::vector<Tensor> weights;  // weights[i]: (in_i, out_i)
  std::vector<Tensor> biases;   // biases[i]: (out_i)

  static Subnet build(std::size_t in, std::size_t hidden_layers,
                      std::size_t width, std::size_t out, RngStream& rng,
                      bool zero_final = true) {
    Subnet net;
    std::size_t prev = in;
    for (std::size_t l = 0; l < hidden_layers; ++l) {
      net.weights.push_back(he_uniform(prev, width, rng));
      net.biases.push_back(Tensor({width}));
      prev = width;
    }
    if (zero_final) {
      net.weights.push_back(Tensor({prev, out}));
    } else {
      net.weights.push_back(he_uniform(prev, out, rng));
    }
    net.biases.push_back(Tensor({out}));
    for (Tensor& t : net.weights) t.requires_grad = true;
    for (Tensor& t : net.biases) t.requires_grad = true;
    return net;
  }

  std::size_t in_dim() const { return weights.front().shape[0]; }
  std::size_t out_dim() const { return weights.back().shape[1]; }

  // x: (B, in) -> (B, out). Parameters are registered as graph leaves so
  // gradients can reach them.
  Value forward(Graph& g, Value x) {
    Value h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = g.add(g.matmul(h, g.param(weights[l])), g.param(biases[l]));
      if (l + 1 < weights.size()) h = g.relu(h);
    }
    return h;
  }

 private:
  static Tensor he_uniform(std::size_t in, std::size_t out, RngStream& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    return Tensor::uniform({in, out}, -bound, bound, rng);
  }
};

enum class CondSelector { DY, D, None };

inline const char* to_string(CondSelector c) {
  switch (c) {
    case CondSelector::DY: return "DY";
    case CondSelector::D: return "D";
    default: return "None";
  }
}

// Affine conditional coupling block on (B, C, S) activations. The input is
// split along channels into (x1, x2); x2 is transformed by scale/shift
// computed from x1 and the condition:
//   y1 = x1,  y2 = x2 * exp(s_hat) + t,  s_hat = clamp(subnet_s(x1 || cond))
// log|det J| = per-sample sum of s_hat.
struct CouplingBlock {
  std::size_t channels = 0;
  std::size_t split_index = 0;   // channels in the untouched half
  std::size_t cond_channels = 0; // 0 for unconditioned blocks
  std::size_t spatial = 1;
  double clamp_alpha = 1.0;
  Subnet net_s, net_t;

  static CouplingBlock build(std::size_t channels, std::size_t spatial,
                             std::size_t cond_channels, std::size_t hidden_layers,
                             std::size_t width, double clamp_alpha,
                             RngStream& rng) {
    if (channels < 2) {
      throw std::invalid_argument(
          "CouplingBlock: need at least 2 channels to split, got " +
          std::to_string(channels));
    }
    CouplingBlock b;
    b.channels = channels;
    b.split_index = channels / 2;
    b.cond_channels = cond_channels;
    b.spatial = spatial;
    b.clamp_alpha = clamp_alpha;
    const std::size_t in = (b.split_index + cond_channels) * spatial;
    const std::size_t out = (channels - b.split_index) * spatial;
    RngStream rs = rng.substream(1);
    RngStream rt = rng.substream(2);
    b.net_s = Subnet::build(in, hidden_layers, width, out, rs);
    b.net_t = Subnet::build(in, hidden_layers, width, out, rt);
    return b;
  }

  void check_input(const Tensor& x, const std::optional<Value>& cond,
                   const Graph& g) const {
    if (x.ndim() != 3 || x.shape[1] != channels || x.shape[2] != spatial) {
      throw std::invalid_argument("coupling: expected (B, " +
                                  std::to_string(channels) + ", " +
                                  std::to_string(spatial) + "), got " +
                                  shape_str(x.shape));
    }
    const std::size_t cc = cond ? g.value(*cond).shape[1] : 0;
    if (cc != cond_channels) {
      throw std::invalid_argument(
          "coupling: block expects " + std::to_string(cond_channels) +
          " condition channels, got " + std::to_string(cc));
    }
  }

  // returns (y, per-sample logdet of shape (B))
  std::pair<Value, Value> forward(Graph& g, Value x,
                                  std::optional<Value> cond) {
    check_input(g.value(x), cond, g);
    const std::size_t c1 = split_index, c2 = channels - split_index;
    Value x1 = g.slice(x, 1, 0, c1);
    Value x2 = g.slice(x, 1, c1, c2);
    auto [s_hat, t] = scale_shift(g, x1, cond, g.value(x).shape[0], c2);
    Value y2 = g.add(g.mul(x2, g.exp(s_hat)), t);
    Value y = g.concat({x1, y2}, 1);
    Value logdet = g.row_sum(s_hat);
    return {y, logdet};
  }

  // exact inverse; recomputes (s_hat, t) from the untouched half
  Value inverse(Graph& g, Value y, std::optional<Value> cond) {
    check_input(g.value(y), cond, g);
    const std::size_t c1 = split_index, c2 = channels - split_index;
    Value y1 = g.slice(y, 1, 0, c1);
    Value y2 = g.slice(y, 1, c1, c2);
    auto [s_hat, t] = scale_shift(g, y1, cond, g.value(y).shape[0], c2);
    Value x2 = g.mul(g.sub(y2, t), g.exp(g.affine(s_hat, -1.0, 0.0)));
    return g.concat({y1, x2}, 1);
  }

 private:
  std::pair<Value, Value> scale_shift(Graph& g, Value x1,
                                      std::optional<Value> cond,
                                      std::size_t batch, std::size_t c2) {
    Value in = cond ? g.concat({x1, *cond}, 1) : x1;
    Value flat = g.reshape(in, {batch, (split_index + cond_channels) * spatial});
    Value s_raw = net_s.forward(g, flat);
    Value t_raw = net_t.forward(g, flat);
    Value s_hat = clamp_scale(g, g.reshape(s_raw, {batch, c2, spatial}),
                              clamp_alpha);
    Value t = g.reshape(t_raw, {batch, c2, spatial});
    return {s_hat, t};
  }
};

// Fixed random channel permutation; log|det| = 0.
struct PermutationLayer {
  std::vector<std::size_t> perm;
  std::vector<std::size_t> inverse_perm;

  static PermutationLayer random(std::size_t channels, RngStream& rng) {
    PermutationLayer p;
    p.perm.resize(channels);
    for (std::size_t i = 0; i < channels; ++i) p.perm[i] = i;
    rng.shuffle(p.perm);
    // an identity permutation would leave one half untouched across the
    // whole chain; replace it with a rotation
    bool identity = true;
    for (std::size_t i = 0; i < channels; ++i) {
      if (p.perm[i] != i) {
        identity = false;
        break;
      }
    }
    if (identity && channels > 1) {
      for (std::size_t i = 0; i < channels; ++i) {
        p.perm[i] = (i + 1) % channels;
      }
    }
    p.inverse_perm.resize(channels);
    for (std::size_t i = 0; i < channels; ++i) p.inverse_perm[p.perm[i]] = i;
    return p;
  }

  Value forward(Graph& g, Value x) const { return g.channel_gather(x, perm); }
  Value inverse(Graph& g, Value y) const {
    return g.channel_gather(y, inverse_perm);
  }
};

// ---- standalone tensor-level wrappers ----

inline std::pair<Tensor, Tensor> coupling_forward(const Tensor& x,
                                                  const Tensor& cond,
                                                  CouplingBlock& block) {
  Graph g;
  Value vx = g.input(x);
  std::optional<Value> vc;
  if (cond.size() > 0) vc = g.input(cond);
  auto [y, logdet] = block.forward(g, vx, vc);
  return {g.value(y), g.value(logdet)};
}

inline Tensor coupling_inverse(const Tensor& y, const Tensor& cond,
                               CouplingBlock& block) {
  Graph g;
  Value vy = g.input(y);
  std::optional<Value> vc;
  if (cond.size() > 0) vc = g.input(cond);
  return g.value(block.inverse(g, vy, vc));
}

inline Tensor haar_forward_1d(const Tensor& x) {
  Graph g;
  return g.value(g.haar1_fwd(g.input(x)));
}

inline Tensor haar_inverse_1d(const Tensor& y) {
  Graph g;
  return g.value(g.haar1_inv(g.input(y)));
}

inline Tensor haar_forward_2d(const Tensor& x, std::size_t h, std::size_t w) {
  Graph g;
  return g.value(g.haar2_fwd(g.input(x), h, w));
}

inline Tensor haar_inverse_2d(const Tensor& y, std::size_t h, std::size_t w) {
  Graph g;
  return g.value(g.haar2_inv(g.input(y), h, w));
}

}  // namespace flowbridge
