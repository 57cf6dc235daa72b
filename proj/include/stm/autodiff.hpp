#pragma once

// Reverse-mode differentiation with respect to activations. Weights enter
// recorded operations as plain Tensors and are treated as constants.

#include <concepts>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stm/ops.hpp"
#include "stm/tensor.hpp"

namespace stm {

class Tape;

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Given the output gradient, the parent values and the node's own value,
  // return one gradient per parent (an empty Tensor means zero).
  using Backward = std::function<std::vector<Tensor>(const Tensor& grad, std::span<const Tensor* const> parents,
                                                     const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::vector<Var> parents, Backward backward) {
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      check_owned(p);
      ids.push_back(p.id());
    }
    nodes_.push_back(Node{std::move(value), std::move(ids), std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(const Var& v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  // Gradients of <seed, output> with respect to each of `wrt`, accumulated in
  // reverse recording order.
  std::vector<Tensor> vjp(const Var& output, const Tensor& seed, std::span<const Var> wrt) const {
    if (nodes_.empty()) throw TapeError("vjp on an empty tape");
    check_owned(output);
    for (const auto& w : wrt) check_owned(w);
    if (seed.shape() != nodes_[output.id()].value.shape())
      throw ShapeError("vjp seed " + to_string(seed.shape()) + " vs output " +
                       to_string(nodes_[output.id()].value.shape()));
    std::vector<Tensor> grads(output.id() + 1);
    std::vector<bool> keep(output.id() + 1, false);
    for (const auto& w : wrt)
      if (w.id() < keep.size()) keep[w.id()] = true;
    grads[output.id()] = seed;
    std::vector<const Tensor*> parent_values;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      if (grads[i].empty()) continue;
      const Node& node = nodes_[i];
      if (!node.backward) continue;
      parent_values.clear();
      for (auto p : node.parents) parent_values.push_back(&nodes_[p].value);
      auto pg = node.backward(grads[i], parent_values, node.value);
      for (std::size_t j = 0; j < node.parents.size(); ++j) {
        if (j >= pg.size() || pg[j].empty()) continue;
        Tensor& acc = grads[node.parents[j]];
        if (acc.empty()) {
          acc = std::move(pg[j]);
        } else {
          for (std::size_t e = 0; e < acc.numel(); ++e) acc[e] += pg[j][e];
        }
      }
      if (!keep[i]) grads[i] = Tensor();
    }
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      if (w.id() < grads.size() && !grads[w.id()].empty())
        out.push_back(grads[w.id()]);
      else
        out.emplace_back(nodes_[w.id()].value.shape());
    }
    return out;
  }

  Tensor vjp(const Var& output, const Tensor& seed, const Var& wrt) const {
    return vjp(output, seed, std::span<const Var>(&wrt, 1)).front();
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  void check_owned(const Var& v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size())
      throw TapeError("variable is not recorded on this tape");
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw TapeError("use of an unbound variable");
  return tape_->value(*this);
}

// ---------------------------------------------------------------------------
// Recorded overloads. Each mirrors the Tensor kernel of the same name.
// ---------------------------------------------------------------------------

using Grads = std::vector<Tensor>;
using Parents = std::span<const Tensor* const>;

inline Var matmul(const Var& a, const Var& b, bool transpose_b = false) {
  return a.tape().record(matmul(a.value(), b.value(), transpose_b), {a, b},
                         [transpose_b](const Tensor& g, Parents p, const Tensor&) {
                           Grads out(2);
                           matmul_backward(*p[0], *p[1], transpose_b, g, &out[0], &out[1]);
                           return out;
                         });
}

inline Var linear(const Var& x, const Tensor& w, const Tensor& bias) {
  return x.tape().record(linear(x.value(), w, bias), {x},
                         [w](const Tensor& g, Parents, const Tensor&) {
                           return Grads{linear_backward_input(g, w)};
                         });
}

inline Var add(const Var& a, const Var& b) {
  return a.tape().record(add(a.value(), b.value()), {a, b},
                         [](const Tensor& g, Parents, const Tensor&) { return Grads{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
  return a.tape().record(sub(a.value(), b.value()), {a, b},
                         [](const Tensor& g, Parents, const Tensor&) {
                           return Grads{g, scale(g, -1.0f)};
                         });
}

inline Var mul(const Var& a, const Var& b) {
  return a.tape().record(mul(a.value(), b.value()), {a, b},
                         [](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{mul(g, *p[1]), mul(g, *p[0])};
                         });
}

inline Var scale(const Var& x, float s) {
  return x.tape().record(scale(x.value(), s), {x},
                         [s](const Tensor& g, Parents, const Tensor&) { return Grads{scale(g, s)}; });
}

inline Var add_broadcast(const Var& x, const Tensor& c) {
  return x.tape().record(add_broadcast(x.value(), c), {x},
                         [](const Tensor& g, Parents, const Tensor&) { return Grads{g}; });
}

inline Var mul_broadcast(const Var& x, const Tensor& c) {
  return x.tape().record(mul_broadcast(x.value(), c), {x},
                         [c](const Tensor& g, Parents, const Tensor&) {
                           return Grads{mul_broadcast(g, c)};
                         });
}

inline Var softmax(const Var& x, int axis = -1) {
  return x.tape().record(softmax(x.value(), axis), {x},
                         [axis](const Tensor& g, Parents, const Tensor& y) {
                           return Grads{softmax_backward(y, g, axis)};
                         });
}

inline Var layer_norm(const Var& x, const Tensor& gamma, const Tensor& beta,
                      float eps = kLayerNormEps) {
  return x.tape().record(layer_norm(x.value(), gamma, beta, eps), {x},
                         [gamma, eps](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{layer_norm_backward(*p[0], gamma, g, eps)};
                         });
}

inline Var gelu(const Var& x) {
  return x.tape().record(gelu(x.value()), {x}, [](const Tensor& g, Parents p, const Tensor&) {
    return Grads{gelu_backward(*p[0], g)};
  });
}

inline Var conv2d(const Var& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                  std::size_t pad) {
  return x.tape().record(conv2d(x.value(), w, bias, stride, pad), {x},
                         [w, stride, pad](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{conv2d_backward_input(g, w, p[0]->shape(), stride, pad)};
                         });
}

inline Var depthwise_conv2d(const Var& x, const Tensor& kernel, const Tensor& bias,
                            std::size_t stride, std::size_t pad, PadMode mode = PadMode::Zero) {
  return x.tape().record(depthwise_conv2d(x.value(), kernel, bias, stride, pad, mode), {x},
                         [kernel, stride, pad, mode](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{depthwise_conv2d_backward_input(g, kernel, p[0]->shape(),
                                                                        stride, pad, mode)};
                         });
}

// Points are constants: the gradient flows to the sampled map only.
inline Var bilinear_sample(const Var& x, const Tensor& points) {
  return x.tape().record(bilinear_sample(x.value(), points), {x},
                         [points](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{bilinear_sample_backward_input(g, points, p[0]->shape())};
                         });
}

inline Var permute(const Var& x, const std::vector<std::size_t>& perm) {
  return x.tape().record(permute(x.value(), perm), {x},
                         [inv = inverse_permutation(perm)](const Tensor& g, Parents, const Tensor&) {
                           return Grads{permute(g, inv)};
                         });
}

inline Var reshape(const Var& x, Shape shape) {
  return x.tape().record(x.value().reshaped(std::move(shape)), {x},
                         [](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{g.reshaped(p[0]->shape())};
                         });
}

inline Tensor reshape(const Tensor& x, Shape shape) { return x.reshaped(std::move(shape)); }

inline Var gather(const Var& x, const Shape& out_shape, std::shared_ptr<const GatherIndex> index) {
  return x.tape().record(gather(x.value(), out_shape, *index), {x},
                         [index](const Tensor& g, Parents p, const Tensor&) {
                           return Grads{gather_backward(g, p[0]->shape(), *index)};
                         });
}

inline Tensor gather(const Tensor& x, const Shape& out_shape,
                     std::shared_ptr<const GatherIndex> index) {
  return gather(x, out_shape, *index);
}

inline Var mean_last(const Var& x) {
  return x.tape().record(mean_last(x.value()), {x}, [](const Tensor& g, Parents p, const Tensor&) {
    return Grads{mean_last_backward(g, p[0]->shape())};
  });
}

inline Var dcnv3_sample(const Var& value, const Var& offsets, const Var& weights,
                        const DeformGeometry& geo) {
  return value.tape().record(
      dcnv3_sample(value.value(), offsets.value(), weights.value(), geo), {value, offsets, weights},
      [geo](const Tensor& g, Parents p, const Tensor&) {
        auto d = dcnv3_sample_backward(*p[0], *p[1], *p[2], geo, g);
        return Grads{std::move(d.value), std::move(d.offsets), std::move(d.weights)};
      });
}

// ---------------------------------------------------------------------------
// Generic helpers usable with both Tensor and Var.
// ---------------------------------------------------------------------------

template <class T>
concept Value = std::same_as<T, Tensor> || std::same_as<T, Var>;

// (N, C, H, W) -> (N, H, W, C)
template <Value T>
T to_channels_last(const T& x) {
  return permute(x, {0, 2, 3, 1});
}

// (N, H, W, C) -> (N, C, H, W)
template <Value T>
T to_channels_first(const T& x) {
  return permute(x, {0, 3, 1, 2});
}

// LayerNorm over the channel axis of an NCHW map.
template <Value T>
T layer_norm_channels(const T& x, const Tensor& gamma, const Tensor& beta,
                      float eps = kLayerNormEps) {
  return to_channels_first(layer_norm(to_channels_last(x), gamma, beta, eps));
}

// Global average pool of an NCHW map -> (N, C).
template <Value T>
T spatial_mean(const T& x) {
  const auto& s = x.shape();
  return mean_last(reshape(x, {s[0], s[1], s[2] * s[3]}));
}

}  // namespace stm
