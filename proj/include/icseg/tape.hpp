#pragma once

#include "icseg/tensor.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace icseg {

template <typename S>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <typename S>
struct Value {
  Tape<S>* tape = nullptr;
  int32_t idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const Tensor<S>& val() const { return tape->value_at(idx); }
  const Tensor<S>& grad() const { return tape->grad_at(idx); }
  const Shape& shape() const { return val().shape(); }
  int64_t size() const { return val().size(); }
};

// Define-by-run reverse-mode tape. Building an expression evaluates it
// eagerly (that is `evaluate`); `backward` replays the recorded nodes in
// reverse. Every kernel validates shapes and rejects non-finite outputs.
// Single-threaded per instance; independent tapes may run concurrently.
template <typename S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Tensor<S>&)>;

  Value<S> input(Tensor<S> v) { return push(std::move(v), {}, nullptr, false, "input"); }

  Value<S> param(Parameter<S>& p) {
    Value<S> v = push(p.value, {}, nullptr, p.trainable, "param");
    nodes_[static_cast<size_t>(v.idx)].param = &p;
    return v;
  }

  Value<S> constant(S x) { return input(Tensor<S>::scalar(x)); }

  // Low-level node constructor; kernels (and test fixtures) build on this.
  // `back` receives the node's output gradient and must push contributions
  // into the parents via accumulate().
  Value<S> make_node(Tensor<S> value, std::vector<Value<S>> parents, BackFn back,
                     const char* op_name) {
    bool needs = false;
    std::vector<int32_t> pidx;
    pidx.reserve(parents.size());
    for (const Value<S>& p : parents) {
      check(p.tape == this, std::string(op_name) + ": operand from a different tape");
      pidx.push_back(p.idx);
      needs = needs || node(p.idx).needs_grad;
    }
    check(value.all_finite(), std::string(op_name) + ": non-finite value produced");
    Node n;
    n.value = std::move(value);
    n.parents = std::move(pidx);
    n.back = std::move(back);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return Value<S>{this, static_cast<int32_t>(nodes_.size()) - 1};
  }

  const Tensor<S>& value_at(int32_t idx) const { return nodes_[static_cast<size_t>(idx)].value; }
  const Tensor<S>& grad_at(int32_t idx) const {
    const Node& n = nodes_[static_cast<size_t>(idx)];
    check(!n.grad.empty(), "gradient not computed for this node");
    return n.grad;
  }
  bool needs_grad(Value<S> v) const { return node(v.idx).needs_grad; }

  void accumulate(Value<S> target, const Tensor<S>& g) {
    Node& n = node(target.idx);
    if (!n.needs_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      check(n.grad.same_shape(g), "gradient shape mismatch during accumulation");
      n.grad += g;
    }
  }

  // Reverse sweep from a scalar loss. Trainable parameters referenced by the
  // graph receive `+=` into their .grad; frozen parameters are untouched.
  void backward(Value<S> loss) {
    check(loss.tape == this, "backward: loss from a different tape");
    check(value_at(loss.idx).size() == 1, "backward: loss must be a scalar");
    for (Node& n : nodes_) n.grad = Tensor<S>();
    node(loss.idx).grad = Tensor<S>::full(value_at(loss.idx).shape(), S(1));
    for (int32_t i = loss.idx; i >= 0; --i) {
      Node& n = node(i);
      if (n.grad.empty()) continue;
      if (n.param != nullptr && n.param->trainable) n.param->grad += n.grad;
      if (n.back && n.needs_grad) n.back(*this, n.grad);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::vector<int32_t> parents;
    BackFn back;
    Parameter<S>* param = nullptr;
    bool needs_grad = false;
  };

  Node& node(int32_t idx) { return nodes_[static_cast<size_t>(idx)]; }
  const Node& node(int32_t idx) const { return nodes_[static_cast<size_t>(idx)]; }

  Value<S> push(Tensor<S> value, std::vector<Value<S>> parents, BackFn back, bool needs_grad,
                const char* op_name) {
    Value<S> v = make_node(std::move(value), std::move(parents), std::move(back), op_name);
    nodes_[static_cast<size_t>(v.idx)].needs_grad |= needs_grad;
    return v;
  }

  // deque: node references stay valid while the tape grows
  std::deque<Node> nodes_;
};

namespace detail {

// (outer, axis_len, inner) decomposition for axis-wise kernels.
inline void axis_split(const Shape& shape, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  n = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise kernels
// ---------------------------------------------------------------------------

// add: equal shapes, or one operand a 1-element scalar.
template <typename S>
Value<S> add(Value<S> a, Value<S> b) {
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  const bool a_scalar = av.size() == 1;
  const bool b_scalar = bv.size() == 1;
  check(av.same_shape(bv) || a_scalar || b_scalar,
        "add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor<S> out;
  if (av.same_shape(bv)) {
    out = av;
    out.vec() += bv.vec();
  } else if (b_scalar) {
    out = av;
    out.vec() += bv[0];
  } else {
    out = bv;
    out.vec() += av[0];
  }
  return a.tape->make_node(
      std::move(out), {a, b},
      [a, b, a_scalar, b_scalar](Tape<S>& t, const Tensor<S>& g) {
        auto reduce_to = [&](Value<S> v, bool is_scalar) {
          if (is_scalar && g.size() != 1) {
            Tensor<S> gs({1});
            gs[0] = g.vec().sum();
            t.accumulate(v, gs);
          } else {
            t.accumulate(v, g);
          }
        };
        reduce_to(a, a_scalar && b.val().size() != 1);
        reduce_to(b, b_scalar && a.val().size() != 1);
      },
      "add");
}

template <typename S>
Value<S> mul(Value<S> a, Value<S> b) {
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  const bool same = av.same_shape(bv);
  const bool a_scalar = av.size() == 1 && !same;
  const bool b_scalar = bv.size() == 1 && !same;
  check(same || a_scalar || b_scalar,
        "mul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor<S> out = a_scalar ? bv : av;
  if (a_scalar) {
    out.vec() *= av[0];
  } else if (b_scalar) {
    out.vec() *= bv[0];
  } else {
    out.vec() *= bv.vec();
  }
  return a.tape->make_node(
      std::move(out), {a, b},
      [a, b, a_scalar, b_scalar](Tape<S>& t, const Tensor<S>& g) {
        const Tensor<S>& av = a.val();
        const Tensor<S>& bv = b.val();
        if (t.needs_grad(a)) {
          if (a_scalar) {
            Tensor<S> ga({1});
            ga[0] = (g.vec() * bv.vec()).sum();
            t.accumulate(a, ga);
          } else {
            Tensor<S> ga = g;
            if (b_scalar) ga.vec() *= bv[0];
            else ga.vec() *= bv.vec();
            t.accumulate(a, ga);
          }
        }
        if (t.needs_grad(b)) {
          if (b_scalar) {
            Tensor<S> gb({1});
            gb[0] = (g.vec() * av.vec()).sum();
            t.accumulate(b, gb);
          } else {
            Tensor<S> gb = g;
            if (a_scalar) gb.vec() *= av[0];
            else gb.vec() *= av.vec();
            t.accumulate(b, gb);
          }
        }
      },
      "mul");
}

// scale by a compile-time constant (not a graph value).
template <typename S>
Value<S> scale(Value<S> a, S c) {
  Tensor<S> out = a.val();
  out.vec() *= c;
  return a.tape->make_node(
      std::move(out), {a},
      [a, c](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga = g;
        ga.vec() *= c;
        t.accumulate(a, ga);
      },
      "scale");
}

template <typename S>
Value<S> sub(Value<S> a, Value<S> b) {
  return add(a, scale(b, S(-1)));
}

template <typename S>
Value<S> silu(Value<S> a) {
  const Tensor<S>& av = a.val();
  Tensor<S> out(av.shape());
  for (int64_t i = 0; i < av.size(); ++i) {
    const S x = av[i];
    out[i] = x / (S(1) + std::exp(-x));
  }
  return a.tape->make_node(
      std::move(out), {a},
      [a](Tape<S>& t, const Tensor<S>& g) {
        const Tensor<S>& av = a.val();
        Tensor<S> ga(av.shape());
        for (int64_t i = 0; i < av.size(); ++i) {
          const S x = av[i];
          const S s = S(1) / (S(1) + std::exp(-x));
          ga[i] = g[i] * s * (S(1) + x * (S(1) - s));
        }
        t.accumulate(a, ga);
      },
      "silu");
}

template <typename S>
Value<S> gelu(Value<S> a) {
  const Tensor<S>& av = a.val();
  Tensor<S> out(av.shape());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (int64_t i = 0; i < av.size(); ++i) {
    const S x = av[i];
    out[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
  }
  return a.tape->make_node(
      std::move(out), {a},
      [a, inv_sqrt2](Tape<S>& t, const Tensor<S>& g) {
        const Tensor<S>& av = a.val();
        const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
        Tensor<S> ga(av.shape());
        for (int64_t i = 0; i < av.size(); ++i) {
          const S x = av[i];
          const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
          const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
          ga[i] = g[i] * (cdf + x * pdf);
        }
        t.accumulate(a, ga);
      },
      "gelu");
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Value<S> matmul(Value<S> a, Value<S> b) {
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  check(av.rank() == 2 && bv.rank() == 2, "matmul: operands must be rank-2");
  check(av.dim(1) == bv.dim(0), "matmul: inner dimensions differ, " + shape_str(av.shape()) +
                                    " x " + shape_str(bv.shape()));
  const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<S> out({m, n});
  out.mat(m, n).noalias() = av.mat(m, k) * bv.mat(k, n);
  return a.tape->make_node(
      std::move(out), {a, b},
      [a, b, m, k, n](Tape<S>& t, const Tensor<S>& g) {
        auto gm = g.mat(m, n);
        if (t.needs_grad(a)) {
          Tensor<S> ga({m, k});
          ga.mat(m, k).noalias() = gm * b.val().mat(k, n).transpose();
          t.accumulate(a, ga);
        }
        if (t.needs_grad(b)) {
          Tensor<S> gb({k, n});
          gb.mat(k, n).noalias() = a.val().mat(m, k).transpose() * gm;
          t.accumulate(b, gb);
        }
      },
      "matmul");
}

// y = x * W + b, with x [N,din], W [din,dout], b [dout] broadcast per row.
template <typename S>
Value<S> linear(Value<S> x, Value<S> w, Value<S> b) {
  const Tensor<S>& xv = x.val();
  const Tensor<S>& wv = w.val();
  const Tensor<S>& bv = b.val();
  check(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1, "linear: bad operand ranks");
  check(xv.dim(1) == wv.dim(0) && wv.dim(1) == bv.dim(0), "linear: dimension mismatch");
  const int64_t n = xv.dim(0), din = xv.dim(1), dout = wv.dim(1);
  Tensor<S> out({n, dout});
  out.mat(n, dout).noalias() = xv.mat(n, din) * wv.mat(din, dout);
  out.mat(n, dout).rowwise() += bv.mat(1, dout).row(0);
  return x.tape->make_node(
      std::move(out), {x, w, b},
      [x, w, b, n, din, dout](Tape<S>& t, const Tensor<S>& g) {
        auto gm = g.mat(n, dout);
        if (t.needs_grad(x)) {
          Tensor<S> gx({n, din});
          gx.mat(n, din).noalias() = gm * w.val().mat(din, dout).transpose();
          t.accumulate(x, gx);
        }
        if (t.needs_grad(w)) {
          Tensor<S> gw({din, dout});
          gw.mat(din, dout).noalias() = x.val().mat(n, din).transpose() * gm;
          t.accumulate(w, gw);
        }
        if (t.needs_grad(b)) {
          Tensor<S> gb({dout});
          gb.mat(1, dout).row(0) = gm.colwise().sum();
          t.accumulate(b, gb);
        }
      },
      "linear");
}

template <typename S>
Value<S> transpose2d(Value<S> a) {
  const Tensor<S>& av = a.val();
  check(av.rank() == 2, "transpose2d: rank-2 required");
  const int64_t m = av.dim(0), n = av.dim(1);
  Tensor<S> out({n, m});
  out.mat(n, m) = av.mat(m, n).transpose();
  return a.tape->make_node(
      std::move(out), {a},
      [a, m, n](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga({m, n});
        ga.mat(m, n) = g.mat(n, m).transpose();
        t.accumulate(a, ga);
      },
      "transpose2d");
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename S>
Value<S> reshape(Value<S> a, Shape shape) {
  Tensor<S> out = a.val().reshaped(shape);
  return a.tape->make_node(
      std::move(out), {a},
      [a](Tape<S>& t, const Tensor<S>& g) { t.accumulate(a, g.reshaped(a.val().shape())); },
      "reshape");
}

template <typename S>
Value<S> concat(int axis, const std::vector<Value<S>>& parts) {
  check(!parts.empty(), "concat: empty part list");
  Tape<S>* tape = parts[0].tape;
  const Shape& s0 = parts[0].shape();
  check(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: axis out of range");
  int64_t total = 0;
  for (const Value<S>& p : parts) {
    const Shape& s = p.shape();
    check(s.size() == s0.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      check(static_cast<int>(i) == axis || s[i] == s0[i], "concat: shape mismatch off-axis");
    total += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total;
  int64_t outer, n0, inner;
  detail::axis_split(out_shape, axis, outer, n0, inner);
  Tensor<S> out(out_shape);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Value<S>& p : parts) {
    offsets.push_back(off);
    const int64_t len = p.shape()[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o) {
      const S* src = p.val().data() + o * len * inner;
      S* dst = out.data() + (o * total + off) * inner;
      std::copy(src, src + len * inner, dst);
    }
    off += len;
  }
  std::vector<Value<S>> parents(parts.begin(), parts.end());
  return tape->make_node(
      std::move(out), parents,
      [parts, offsets, axis, outer, inner, total](Tape<S>& t, const Tensor<S>& g) {
        for (size_t i = 0; i < parts.size(); ++i) {
          if (!t.needs_grad(parts[i])) continue;
          const int64_t len = parts[i].shape()[static_cast<size_t>(axis)];
          Tensor<S> gp(parts[i].shape());
          for (int64_t o = 0; o < outer; ++o) {
            const S* src = g.data() + (o * total + offsets[i]) * inner;
            std::copy(src, src + len * inner, gp.data() + o * len * inner);
          }
          t.accumulate(parts[i], gp);
        }
      },
      "concat");
}

template <typename S>
Value<S> slice(Value<S> a, int axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  check(axis >= 0 && axis < static_cast<int>(s.size()), "slice: axis out of range");
  check(start >= 0 && len >= 1 && start + len <= s[static_cast<size_t>(axis)],
        "slice: range out of bounds");
  int64_t outer, n, inner;
  detail::axis_split(s, axis, outer, n, inner);
  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor<S> out(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    const S* src = a.val().data() + (o * n + start) * inner;
    std::copy(src, src + len * inner, out.data() + o * len * inner);
  }
  return a.tape->make_node(
      std::move(out), {a},
      [a, axis, start, len, outer, n, inner](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga(a.val().shape());
        for (int64_t o = 0; o < outer; ++o) {
          const S* src = g.data() + o * len * inner;
          std::copy(src, src + len * inner, ga.data() + (o * n + start) * inner);
        }
        t.accumulate(a, ga);
      },
      "slice");
}

// [N, H*dh] -> [H, N, dh]
template <typename S>
Value<S> split_heads(Value<S> a, int64_t heads) {
  const Tensor<S>& av = a.val();
  check(av.rank() == 2 && av.dim(1) % heads == 0, "split_heads: width not divisible by heads");
  const int64_t n = av.dim(0), dh = av.dim(1) / heads;
  Tensor<S> out({heads, n, dh});
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < n; ++i)
      std::copy(av.data() + i * heads * dh + h * dh, av.data() + i * heads * dh + (h + 1) * dh,
                out.data() + (h * n + i) * dh);
  return a.tape->make_node(
      std::move(out), {a},
      [a, heads, n, dh](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga({n, heads * dh});
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t i = 0; i < n; ++i)
            std::copy(g.data() + (h * n + i) * dh, g.data() + (h * n + i + 1) * dh,
                      ga.data() + i * heads * dh + h * dh);
        t.accumulate(a, ga);
      },
      "split_heads");
}

// [H, N, dh] -> [N, H*dh]
template <typename S>
Value<S> merge_heads(Value<S> a) {
  const Tensor<S>& av = a.val();
  check(av.rank() == 3, "merge_heads: rank-3 required");
  const int64_t heads = av.dim(0), n = av.dim(1), dh = av.dim(2);
  Tensor<S> out({n, heads * dh});
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < n; ++i)
      std::copy(av.data() + (h * n + i) * dh, av.data() + (h * n + i + 1) * dh,
                out.data() + i * heads * dh + h * dh);
  return a.tape->make_node(
      std::move(out), {a},
      [a, heads, n, dh](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga({heads, n, dh});
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t i = 0; i < n; ++i)
            std::copy(g.data() + i * heads * dh + h * dh, g.data() + i * heads * dh + (h + 1) * dh,
                      ga.data() + (h * n + i) * dh);
        t.accumulate(a, ga);
      },
      "merge_heads");
}

// [C, H, W] -> [C*f*f, H/f, W/f]; block (i,j) of each channel becomes f*f
// consecutive output channels.
template <typename S>
Value<S> space_to_depth(Value<S> a, int64_t f) {
  const Tensor<S>& av = a.val();
  check(av.rank() == 3, "space_to_depth: rank-3 required");
  const int64_t c = av.dim(0), h = av.dim(1), w = av.dim(2);
  check(h % f == 0 && w % f == 0, "space_to_depth: spatial dims not divisible by factor");
  const int64_t ho = h / f, wo = w / f;
  Tensor<S> out({c * f * f, ho, wo});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t dy = 0; dy < f; ++dy)
      for (int64_t dx = 0; dx < f; ++dx) {
        const int64_t oc = (ch * f + dy) * f + dx;
        for (int64_t y = 0; y < ho; ++y)
          for (int64_t x = 0; x < wo; ++x)
            out[(oc * ho + y) * wo + x] = av[(ch * h + y * f + dy) * w + x * f + dx];
      }
  return a.tape->make_node(
      std::move(out), {a},
      [a, f, c, h, w, ho, wo](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga({c, h, w});
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t dy = 0; dy < f; ++dy)
            for (int64_t dx = 0; dx < f; ++dx) {
              const int64_t oc = (ch * f + dy) * f + dx;
              for (int64_t y = 0; y < ho; ++y)
                for (int64_t x = 0; x < wo; ++x)
                  ga[(ch * h + y * f + dy) * w + x * f + dx] = g[(oc * ho + y) * wo + x];
            }
        t.accumulate(a, ga);
      },
      "space_to_depth");
}

template <typename S>
Value<S> depth_to_space(Value<S> a, int64_t f) {
  const Tensor<S>& av = a.val();
  check(av.rank() == 3, "depth_to_space: rank-3 required");
  const int64_t cz = av.dim(0), ho = av.dim(1), wo = av.dim(2);
  check(cz % (f * f) == 0, "depth_to_space: channels not divisible by factor^2");
  const int64_t c = cz / (f * f), h = ho * f, w = wo * f;
  Tensor<S> out({c, h, w});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t dy = 0; dy < f; ++dy)
      for (int64_t dx = 0; dx < f; ++dx) {
        const int64_t ic = (ch * f + dy) * f + dx;
        for (int64_t y = 0; y < ho; ++y)
          for (int64_t x = 0; x < wo; ++x)
            out[(ch * h + y * f + dy) * w + x * f + dx] = av[(ic * ho + y) * wo + x];
      }
  return a.tape->make_node(
      std::move(out), {a},
      [a, f, c, h, w, ho, wo, cz](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> ga({cz, ho, wo});
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t dy = 0; dy < f; ++dy)
            for (int64_t dx = 0; dx < f; ++dx) {
              const int64_t ic = (ch * f + dy) * f + dx;
              for (int64_t y = 0; y < ho; ++y)
                for (int64_t x = 0; x < wo; ++x)
                  ga[(ic * ho + y) * wo + x] = g[(ch * h + y * f + dy) * w + x * f + dx];
            }
        t.accumulate(a, ga);
      },
      "depth_to_space");
}

// ---------------------------------------------------------------------------
// Convolution / resampling
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void im2col(const S* x, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
            int64_t ho, int64_t wo, S* col /* [c*k*k, ho*wo] col-major */) {
  const int64_t q_rows = c * k * k;
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox) {
      S* dst = col + (oy * wo + ox) * q_rows;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ky = 0; ky < k; ++ky) {
          const int64_t iy = oy * stride + ky - pad;
          for (int64_t kx = 0; kx < k; ++kx) {
            const int64_t ix = ox * stride + kx - pad;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(ch * h + iy) * w + ix] : S(0);
          }
        }
    }
}

template <typename S>
void col2im(const S* col, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride, int64_t pad,
            int64_t ho, int64_t wo, S* x /* accumulated */) {
  const int64_t q_rows = c * k * k;
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox) {
      const S* src = col + (oy * wo + ox) * q_rows;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ky = 0; ky < k; ++ky) {
          const int64_t iy = oy * stride + ky - pad;
          for (int64_t kx = 0; kx < k; ++kx) {
            const int64_t ix = ox * stride + kx - pad;
            const S v = *src++;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) x[(ch * h + iy) * w + ix] += v;
          }
        }
    }
}

}  // namespace detail

// 2-D convolution on [B,C,H,W] with kernel [O,C,k,k], k in {1,3},
// stride in {1,2}, zero padding k/2, bias [O].
template <typename S>
Value<S> conv2d(Value<S> x, Value<S> w, Value<S> b, int64_t stride) {
  const Tensor<S>& xv = x.val();
  const Tensor<S>& wv = w.val();
  const Tensor<S>& bv = b.val();
  check(xv.rank() == 4 && wv.rank() == 4 && bv.rank() == 1, "conv2d: bad operand ranks");
  const int64_t batch = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wi = xv.dim(3);
  const int64_t o = wv.dim(0), k = wv.dim(2);
  check(wv.dim(1) == c, "conv2d: channel mismatch between input and kernel");
  check(wv.dim(3) == k && (k == 1 || k == 3), "conv2d: kernel must be 1x1 or 3x3");
  check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  check(bv.dim(0) == o, "conv2d: bias length mismatch");
  const int64_t pad = k / 2;
  const int64_t ho = (h + 2 * pad - k) / stride + 1;
  const int64_t wo = (wi + 2 * pad - k) / stride + 1;
  const int64_t q = c * k * k, p = ho * wo;

  using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  Tensor<S> out({batch, o, ho, wo});
  ColMat col(q, p);
  for (int64_t bi = 0; bi < batch; ++bi) {
    detail::im2col(xv.data() + bi * c * h * wi, c, h, wi, k, stride, pad, ho, wo, col.data());
    MatrixMap<S> om(out.data() + bi * o * p, o, p);
    om.noalias() = wv.mat(o, q) * col;
    om.colwise() += Eigen::Matrix<S, Eigen::Dynamic, 1>::Map(bv.data(), o);
  }
  return x.tape->make_node(
      std::move(out), {x, w, b},
      [x, w, b, stride, batch, c, h, wi, o, k, pad, ho, wo, q, p](Tape<S>& t, const Tensor<S>& g) {
        ColMat col(q, p);
        Tensor<S> gx;
        Tensor<S> gw;
        if (t.needs_grad(x)) gx = Tensor<S>({batch, c, h, wi});
        if (t.needs_grad(w)) gw = Tensor<S>({o, c, k, k});
        for (int64_t bi = 0; bi < batch; ++bi) {
          ConstMatrixMap<S> gm(g.data() + bi * o * p, o, p);
          if (t.needs_grad(w)) {
            detail::im2col(x.val().data() + bi * c * h * wi, c, h, wi, k, stride, pad, ho, wo,
                           col.data());
            gw.mat(o, q).noalias() += gm * col.transpose();
          }
          if (t.needs_grad(x)) {
            col.noalias() = w.val().mat(o, q).transpose() * gm;
            detail::col2im(col.data(), c, h, wi, k, stride, pad, ho, wo,
                           gx.data() + bi * c * h * wi);
          }
        }
        if (t.needs_grad(x)) t.accumulate(x, gx);
        if (t.needs_grad(w)) t.accumulate(w, gw);
        if (t.needs_grad(b)) {
          Tensor<S> gb({o});
          for (int64_t bi = 0; bi < batch; ++bi)
            for (int64_t oc = 0; oc < o; ++oc)
              gb[oc] += ConstVectorMap<S>(g.data() + (bi * o + oc) * p, p).sum();
          t.accumulate(b, gb);
        }
      },
      "conv2d");
}

template <typename S>
Value<S> upsample_nearest2x(Value<S> x) {
  const Tensor<S>& xv = x.val();
  check(xv.rank() == 4, "upsample_nearest2x: rank-4 required");
  const int64_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<S> out({b, c, h * 2, w * 2});
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const S* src = xv.data() + bc * h * w;
    S* dst = out.data() + bc * h * w * 4;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x2 = 0; x2 < w; ++x2) {
        const S v = src[y * w + x2];
        dst[(2 * y) * 2 * w + 2 * x2] = v;
        dst[(2 * y) * 2 * w + 2 * x2 + 1] = v;
        dst[(2 * y + 1) * 2 * w + 2 * x2] = v;
        dst[(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
      }
  }
  return x.tape->make_node(
      std::move(out), {x},
      [x, b, c, h, w](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> gx({b, c, h, w});
        for (int64_t bc = 0; bc < b * c; ++bc) {
          const S* src = g.data() + bc * h * w * 4;
          S* dst = gx.data() + bc * h * w;
          for (int64_t y = 0; y < h; ++y)
            for (int64_t x2 = 0; x2 < w; ++x2)
              dst[y * w + x2] = src[(2 * y) * 2 * w + 2 * x2] + src[(2 * y) * 2 * w + 2 * x2 + 1] +
                                src[(2 * y + 1) * 2 * w + 2 * x2] +
                                src[(2 * y + 1) * 2 * w + 2 * x2 + 1];
        }
        t.accumulate(x, gx);
      },
      "upsample_nearest2x");
}

// Adds a per-channel bias to [B,C,H,W]; bias is [C] or per-sample [B,C].
template <typename S>
Value<S> add_channel_bias(Value<S> x, Value<S> bias) {
  const Tensor<S>& xv = x.val();
  const Tensor<S>& bv = bias.val();
  check(xv.rank() == 4, "add_channel_bias: rank-4 input required");
  const int64_t b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const bool per_sample = bv.rank() == 2;
  check((per_sample && bv.dim(0) == b && bv.dim(1) == c) || (bv.rank() == 1 && bv.dim(0) == c),
        "add_channel_bias: bias must be [C] or [B,C]");
  Tensor<S> out = xv;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ch = 0; ch < c; ++ch)
      VectorMap<S>(out.data() + (bi * c + ch) * hw, hw) += bv[per_sample ? bi * c + ch : ch];
  return x.tape->make_node(
      std::move(out), {x, bias},
      [x, bias, b, c, hw, per_sample](Tape<S>& t, const Tensor<S>& g) {
        if (t.needs_grad(x)) t.accumulate(x, g);
        if (t.needs_grad(bias)) {
          Tensor<S> gb(bias.val().shape());
          for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ch = 0; ch < c; ++ch)
              gb[per_sample ? bi * c + ch : ch] +=
                  ConstVectorMap<S>(g.data() + (bi * c + ch) * hw, hw).sum();
          t.accumulate(bias, gb);
        }
      },
      "add_channel_bias");
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Group normalization over [B,C,H,W] with per-channel affine parameters.
template <typename S>
Value<S> group_norm(Value<S> x, Value<S> gamma, Value<S> beta, int64_t groups, S eps = S(1e-5)) {
  const Tensor<S>& xv = x.val();
  check(xv.rank() == 4, "group_norm: rank-4 input required");
  const int64_t b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  check(c % groups == 0, "group_norm: channels not divisible by groups");
  check(gamma.val().size() == c && beta.val().size() == c, "group_norm: affine length mismatch");
  const int64_t cg = c / groups, gsize = cg * hw;
  Tensor<S> out(xv.shape());
  auto stats = std::make_shared<std::vector<S>>(static_cast<size_t>(b * groups * 2));
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t gi = 0; gi < groups; ++gi) {
      ConstVectorMap<S> xin(xv.data() + (bi * c + gi * cg) * hw, gsize);
      const S mean = xin.mean();
      const S var = (xin - mean).square().mean();
      const S inv = S(1) / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>((bi * groups + gi) * 2)] = mean;
      (*stats)[static_cast<size_t>((bi * groups + gi) * 2 + 1)] = inv;
      for (int64_t cc = 0; cc < cg; ++cc) {
        const int64_t ch = gi * cg + cc;
        ConstVectorMap<S> xc(xv.data() + (bi * c + ch) * hw, hw);
        VectorMap<S>(out.data() + (bi * c + ch) * hw, hw) =
            (xc - mean) * inv * gamma.val()[ch] + beta.val()[ch];
      }
    }
  return x.tape->make_node(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, b, c, hw, groups, cg, gsize, stats](Tape<S>& t, const Tensor<S>& g) {
        const Tensor<S>& xv = x.val();
        Tensor<S> gx, gg, gb;
        if (t.needs_grad(x)) gx = Tensor<S>(xv.shape());
        if (t.needs_grad(gamma)) gg = Tensor<S>({c});
        if (t.needs_grad(beta)) gb = Tensor<S>({c});
        std::vector<S> xhat(static_cast<size_t>(gsize));
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t gi = 0; gi < groups; ++gi) {
            const S mean = (*stats)[static_cast<size_t>((bi * groups + gi) * 2)];
            const S inv = (*stats)[static_cast<size_t>((bi * groups + gi) * 2 + 1)];
            S sum_dxh = 0, sum_dxh_xh = 0;
            for (int64_t cc = 0; cc < cg; ++cc) {
              const int64_t ch = gi * cg + cc;
              const S* xp = xv.data() + (bi * c + ch) * hw;
              const S* gp = g.data() + (bi * c + ch) * hw;
              S dot_gxh = 0, sum_g = 0;
              for (int64_t i = 0; i < hw; ++i) {
                const S xh = (xp[i] - mean) * inv;
                xhat[static_cast<size_t>(cc * hw + i)] = xh;
                dot_gxh += gp[i] * xh;
                sum_g += gp[i];
                const S dxh = gp[i] * gamma.val()[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
              }
              if (!gg.empty()) gg[ch] += dot_gxh;
              if (!gb.empty()) gb[ch] += sum_g;
            }
            if (!gx.empty()) {
              const S m_dxh = sum_dxh / S(gsize);
              const S m_dxh_xh = sum_dxh_xh / S(gsize);
              for (int64_t cc = 0; cc < cg; ++cc) {
                const int64_t ch = gi * cg + cc;
                const S* gp = g.data() + (bi * c + ch) * hw;
                S* dst = gx.data() + (bi * c + ch) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                  const S xh = xhat[static_cast<size_t>(cc * hw + i)];
                  const S dxh = gp[i] * gamma.val()[ch];
                  dst[i] = inv * (dxh - m_dxh - xh * m_dxh_xh);
                }
              }
            }
          }
        if (!gx.empty()) t.accumulate(x, gx);
        if (!gg.empty()) t.accumulate(gamma, gg);
        if (!gb.empty()) t.accumulate(beta, gb);
      },
      "group_norm");
}

// Layer normalization over the last axis.
template <typename S>
Value<S> layer_norm(Value<S> x, Value<S> gamma, Value<S> beta, S eps = S(1e-5)) {
  const Tensor<S>& xv = x.val();
  check(xv.rank() >= 1, "layer_norm: rank >= 1 required");
  const int64_t d = xv.dim(xv.rank() - 1);
  const int64_t rows = xv.size() / d;
  check(gamma.val().size() == d && beta.val().size() == d, "layer_norm: affine length mismatch");
  Tensor<S> out(xv.shape());
  auto stats = std::make_shared<std::vector<S>>(static_cast<size_t>(rows * 2));
  for (int64_t r = 0; r < rows; ++r) {
    ConstVectorMap<S> xr(xv.data() + r * d, d);
    const S mean = xr.mean();
    const S var = (xr - mean).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(r * 2)] = mean;
    (*stats)[static_cast<size_t>(r * 2 + 1)] = inv;
    VectorMap<S>(out.data() + r * d, d) =
        (xr - mean) * inv * gamma.val().vec() + beta.val().vec();
  }
  return x.tape->make_node(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, d, stats](Tape<S>& t, const Tensor<S>& g) {
        const Tensor<S>& xv = x.val();
        Tensor<S> gx, gg, gb;
        if (t.needs_grad(x)) gx = Tensor<S>(xv.shape());
        if (t.needs_grad(gamma)) gg = Tensor<S>({d});
        if (t.needs_grad(beta)) gb = Tensor<S>({d});
        for (int64_t r = 0; r < rows; ++r) {
          const S mean = (*stats)[static_cast<size_t>(r * 2)];
          const S inv = (*stats)[static_cast<size_t>(r * 2 + 1)];
          const S* xp = xv.data() + r * d;
          const S* gp = g.data() + r * d;
          S sum_dxh = 0, sum_dxh_xh = 0;
          for (int64_t i = 0; i < d; ++i) {
            const S xh = (xp[i] - mean) * inv;
            const S dxh = gp[i] * gamma.val()[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            if (!gg.empty()) gg[i] += gp[i] * xh;
            if (!gb.empty()) gb[i] += gp[i];
          }
          if (!gx.empty()) {
            const S m1 = sum_dxh / S(d), m2 = sum_dxh_xh / S(d);
            S* dst = gx.data() + r * d;
            for (int64_t i = 0; i < d; ++i) {
              const S xh = (xp[i] - mean) * inv;
              const S dxh = gp[i] * gamma.val()[i];
              dst[i] = inv * (dxh - m1 - xh * m2);
            }
          }
        }
        if (!gx.empty()) t.accumulate(x, gx);
        if (!gg.empty()) t.accumulate(gamma, gg);
        if (!gb.empty()) t.accumulate(beta, gb);
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Softmax / attention
// ---------------------------------------------------------------------------

template <typename S>
Value<S> softmax(Value<S> x, int axis) {
  const Tensor<S>& xv = x.val();
  if (axis < 0) axis += xv.rank();
  check(axis >= 0 && axis < xv.rank(), "softmax: axis out of range");
  int64_t outer, n, inner;
  detail::axis_split(xv.shape(), axis, outer, n, inner);
  auto out = std::make_shared<Tensor<S>>(xv.shape());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const S* xp = xv.data() + o * n * inner + in;
      S* op = out->data() + o * n * inner + in;
      S mx = xp[0];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xp[i * inner]);
      S denom = 0;
      for (int64_t i = 0; i < n; ++i) {
        const S e = std::exp(xp[i * inner] - mx);
        op[i * inner] = e;
        denom += e;
      }
      for (int64_t i = 0; i < n; ++i) op[i * inner] /= denom;
    }
  Tensor<S> out_copy = *out;
  return x.tape->make_node(
      std::move(out_copy), {x},
      [x, out, outer, n, inner](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> gx(x.val().shape());
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t in = 0; in < inner; ++in) {
            const S* yp = out->data() + o * n * inner + in;
            const S* gp = g.data() + o * n * inner + in;
            S dot = 0;
            for (int64_t i = 0; i < n; ++i) dot += yp[i * inner] * gp[i * inner];
            S* dst = gx.data() + o * n * inner + in;
            for (int64_t i = 0; i < n; ++i)
              dst[i * inner] = yp[i * inner] * (gp[i * inner] - dot);
          }
        t.accumulate(x, gx);
      },
      "softmax");
}

// Fused scaled dot-product attention with an additive logit bias.
// q [B,N,dk], k [B,M,dk], v [B,M,dv], bias [B,N,M] (pass invalid Value to skip).
template <typename S>
Value<S> attention(Value<S> q, Value<S> k, Value<S> v, Value<S> bias = Value<S>{}) {
  const Tensor<S>& qv = q.val();
  const Tensor<S>& kv = k.val();
  const Tensor<S>& vv = v.val();
  check(qv.rank() == 3 && kv.rank() == 3 && vv.rank() == 3, "attention: rank-3 operands required");
  const int64_t b = qv.dim(0), n = qv.dim(1), dk = qv.dim(2);
  const int64_t m = kv.dim(1), dv = vv.dim(2);
  check(kv.dim(0) == b && vv.dim(0) == b && kv.dim(2) == dk && vv.dim(1) == m,
        "attention: operand shape mismatch");
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Shape& bs = bias.shape();
    check(bs == Shape({b, n, m}), "attention: bias must be [B,N,M]");
  }
  const S scl = S(1) / std::sqrt(S(dk));
  auto weights = std::make_shared<Tensor<S>>(Shape{b, n, m});
  Tensor<S> out({b, n, dv});
  for (int64_t bi = 0; bi < b; ++bi) {
    MatrixMap<S> wm(weights->data() + bi * n * m, n, m);
    wm.noalias() = ConstMatrixMap<S>(qv.data() + bi * n * dk, n, dk) *
                   ConstMatrixMap<S>(kv.data() + bi * m * dk, m, dk).transpose() * scl;
    if (has_bias)
      wm += ConstMatrixMap<S>(bias.val().data() + bi * n * m, n, m);
    for (int64_t r = 0; r < n; ++r) {
      S* row = weights->data() + (bi * n + r) * m;
      S mx = row[0];
      for (int64_t i = 1; i < m; ++i) mx = std::max(mx, row[i]);
      S denom = 0;
      for (int64_t i = 0; i < m; ++i) {
        row[i] = std::exp(row[i] - mx);
        denom += row[i];
      }
      for (int64_t i = 0; i < m; ++i) row[i] /= denom;
    }
    MatrixMap<S>(out.data() + bi * n * dv, n, dv).noalias() =
        wm * ConstMatrixMap<S>(vv.data() + bi * m * dv, m, dv);
  }
  std::vector<Value<S>> parents = {q, k, v};
  if (has_bias) parents.push_back(bias);
  return q.tape->make_node(
      std::move(out), parents,
      [q, k, v, bias, has_bias, weights, b, n, m, dk, dv, scl](Tape<S>& t, const Tensor<S>& g) {
        Tensor<S> gq, gk, gv, gb;
        if (t.needs_grad(q)) gq = Tensor<S>({b, n, dk});
        if (t.needs_grad(k)) gk = Tensor<S>({b, m, dk});
        if (t.needs_grad(v)) gv = Tensor<S>({b, m, dv});
        if (has_bias && t.needs_grad(bias)) gb = Tensor<S>({b, n, m});
        using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        for (int64_t bi = 0; bi < b; ++bi) {
          ConstMatrixMap<S> aw(weights->data() + bi * n * m, n, m);
          ConstMatrixMap<S> go(g.data() + bi * n * dv, n, dv);
          ConstMatrixMap<S> vm(v.val().data() + bi * m * dv, m, dv);
          if (!gv.empty())
            MatrixMap<S>(gv.data() + bi * m * dv, m, dv).noalias() = aw.transpose() * go;
          // dS = A o (dA - rowsum(dA o A))
          Mat da = go * vm.transpose();
          Mat ds = aw.cwiseProduct(da);
          Eigen::Matrix<S, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
          ds = aw.cwiseProduct(da.colwise() - rs);
          if (!gq.empty())
            MatrixMap<S>(gq.data() + bi * n * dk, n, dk).noalias() =
                ds * ConstMatrixMap<S>(k.val().data() + bi * m * dk, m, dk) * scl;
          if (!gk.empty())
            MatrixMap<S>(gk.data() + bi * m * dk, m, dk).noalias() =
                ds.transpose() * ConstMatrixMap<S>(q.val().data() + bi * n * dk, n, dk) * scl;
          if (!gb.empty()) MatrixMap<S>(gb.data() + bi * n * m, n, m) = ds;
        }
        if (!gq.empty()) t.accumulate(q, gq);
        if (!gk.empty()) t.accumulate(k, gk);
        if (!gv.empty()) t.accumulate(v, gv);
        if (!gb.empty()) t.accumulate(bias, gb);
      },
      "attention");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Value<S> sum(Value<S> x) {
  Tensor<S> out({1});
  out[0] = x.val().vec().sum();
  return x.tape->make_node(
      std::move(out), {x},
      [x](Tape<S>& t, const Tensor<S>& g) {
        t.accumulate(x, Tensor<S>::full(x.val().shape(), g[0]));
      },
      "sum");
}

template <typename S>
Value<S> mse(Value<S> a, Value<S> b) {
  const Tensor<S>& av = a.val();
  const Tensor<S>& bv = b.val();
  check(av.same_shape(bv), "mse: shape mismatch");
  const int64_t n = av.size();
  Tensor<S> out({1});
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = double(av[i]) - double(bv[i]);
    acc += d * d;
  }
  out[0] = S(acc / double(n));
  return a.tape->make_node(
      std::move(out), {a, b},
      [a, b, n](Tape<S>& t, const Tensor<S>& g) {
        const Tensor<S>& av = a.val();
        const Tensor<S>& bv = b.val();
        const S c = S(2) * g[0] / S(n);
        if (t.needs_grad(a)) {
          Tensor<S> ga(av.shape());
          for (int64_t i = 0; i < n; ++i) ga[i] = c * (av[i] - bv[i]);
          t.accumulate(a, ga);
        }
        if (t.needs_grad(b)) {
          Tensor<S> gb(av.shape());
          for (int64_t i = 0; i < n; ++i) gb[i] = c * (bv[i] - av[i]);
          t.accumulate(b, gb);
        }
      },
      "mse");
}

// Sinusoidal timestep embedding: sin half then cos half, geometric frequency
// ladder down to 1/10000. Pure function of (t, dim); not differentiated.
template <typename S>
Tensor<S> sinusoidal_embedding(double t, int64_t dim) {
  check(dim >= 2 && dim % 2 == 0, "sinusoidal_embedding: dim must be even and >= 2");
  const int64_t half = dim / 2;
  Tensor<S> out({dim});
  for (int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    out[i] = S(std::sin(t * freq));
    out[half + i] = S(std::cos(t * freq));
  }
  return out;
}

}  // namespace icseg
