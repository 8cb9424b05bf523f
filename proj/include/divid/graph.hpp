#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "divid/tensor.hpp"

namespace divid {
namespace ag {

// Define-by-run reverse-mode autodiff. A Var is a node in the tape; ops
// allocate new nodes and capture whatever the backward pass needs.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily in backward()
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

inline Var make_leaf(Tensor value, bool requires_grad = true) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

inline Var make_const(Tensor value) { return make_leaf(std::move(value), false); }

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(bwd);
  return n;
}

// Backprop from a scalar root. Leaf gradients accumulate across calls
// until zeroed by the optimizer.
inline void backward(const Var& root) {
  if (root->value.size() != 1) throw std::logic_error("backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx == 0 && seen.count(n)) {
      stack.pop_back();
      continue;
    }
    if (idx < n->parents.size()) {
      Node* p = stack.back().first->parents[idx].get();
      ++stack.back().second;
      if (!seen.count(p) && p->requires_grad) stack.push_back({p, 0});
    } else {
      seen.insert(n);
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

inline void accum(const Var& p, const Tensor& contribution) {
  if (!p->requires_grad) return;
  p->ensure_grad().add_(contribution);
}

// ---- elementwise ----

template <typename Fwd, typename Dfdx>
Var unary_ew(const Var& x, Fwd f, Dfdx dfdx) {
  Tensor y(x->value.shape());
  const float* xs = x->value.data();
  float* ys = y.data();
  for (size_t i = 0; i < y.size(); ++i) ys[i] = f(xs[i]);
  Var xc = x;
  Tensor yc = y;
  return make_op(y, {x}, [xc, yc, dfdx](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* xs = xc->value.data();
    const float* ys = yc.data();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (size_t i = 0; i < g.size(); ++i) gi[i] += go[i] * dfdx(xs[i], ys[i]);
  });
}

inline Var relu(const Var& x) {
  return unary_ew(
      x, [](float v) { return v > 0 ? v : 0.0f; },
      [](float v, float) { return v > 0 ? 1.0f : 0.0f; });
}

inline Var sigmoid(const Var& x) {
  return unary_ew(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](float, float y) { return y * (1.0f - y); });
}

inline Var tanh_(const Var& x) {
  return unary_ew(
      x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

inline Var silu(const Var& x) {
  return unary_ew(
      x, [](float v) { return v / (1.0f + std::exp(-v)); },
      [](float v, float) {
        float s = 1.0f / (1.0f + std::exp(-v));
        return s * (1.0f + v * (1.0f - s));
      });
}

inline Var square(const Var& x) {
  return unary_ew(
      x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                " vs " + b->value.shape_str());
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor y = a->value.clone();
  y.add_(b->value);
  Var ac = a, bc = b;
  return make_op(y, {a, b}, [ac, bc](Node& n) {
    accum(ac, n.grad);
    accum(bc, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor y = a->value.clone();
  {
    float* ys = y.data();
    const float* bs = b->value.data();
    for (size_t i = 0; i < y.size(); ++i) ys[i] -= bs[i];
  }
  Var ac = a, bc = b;
  return make_op(y, {a, b}, [ac, bc](Node& n) {
    accum(ac, n.grad);
    if (bc->requires_grad) {
      Tensor& g = bc->ensure_grad();
      const float* go = n.grad.data();
      float* gi = g.data();
      for (size_t i = 0; i < g.size(); ++i) gi[i] -= go[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor y(a->value.shape());
  {
    float* ys = y.data();
    const float* as = a->value.data();
    const float* bs = b->value.data();
    for (size_t i = 0; i < y.size(); ++i) ys[i] = as[i] * bs[i];
  }
  Var ac = a, bc = b;
  return make_op(y, {a, b}, [ac, bc](Node& n) {
    const float* go = n.grad.data();
    if (ac->requires_grad) {
      Tensor& g = ac->ensure_grad();
      const float* bs = bc->value.data();
      float* gi = g.data();
      for (size_t i = 0; i < g.size(); ++i) gi[i] += go[i] * bs[i];
    }
    if (bc->requires_grad) {
      Tensor& g = bc->ensure_grad();
      const float* as = ac->value.data();
      float* gi = g.data();
      for (size_t i = 0; i < g.size(); ++i) gi[i] += go[i] * as[i];
    }
  });
}

inline Var scale(const Var& x, float s) {
  Tensor y = x->value.clone();
  y.scale_(s);
  Var xc = x;
  return make_op(y, {x}, [xc, s](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (size_t i = 0; i < g.size(); ++i) gi[i] += go[i] * s;
  });
}

inline Var add_scalar(const Var& x, float s) {
  return unary_ew(
      x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

// Aliasing reshape; gradient flows straight through.
inline Var reshape(const Var& x, std::vector<int64_t> shape) {
  Tensor y = x->value.reshaped(std::move(shape));
  Var xc = x;
  return make_op(y, {x}, [xc](Node& n) {
    if (!xc->requires_grad) return;
    xc->ensure_grad().add_(n.grad.reshaped(xc->value.shape()));
  });
}

// ---- broadcast adds ----

// x: [N, C, spatial...] + b: [C]
inline Var add_channel_bias(const Var& x, const Var& b) {
  const int64_t N = x->value.dim(0);
  const int64_t C = x->value.dim(1);
  const int64_t S = static_cast<int64_t>(x->value.size()) / (N * C);
  if (b->value.size() != static_cast<size_t>(C))
    throw std::invalid_argument("add_channel_bias: bias size mismatch");
  Tensor y = x->value.clone();
  {
    float* ys = y.data();
    const float* bs = b->value.data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        float bv = bs[c];
        float* row = ys + (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) row[i] += bv;
      }
  }
  Var xc = x, bc = b;
  return make_op(y, {x, b}, [xc, bc, N, C, S](Node& n) {
    accum(xc, n.grad);
    if (bc->requires_grad) {
      Tensor& g = bc->ensure_grad();
      const float* go = n.grad.data();
      for (int64_t b0 = 0; b0 < N; ++b0)
        for (int64_t c = 0; c < C; ++c) {
          const float* row = go + (b0 * C + c) * S;
          float acc = 0.0f;
          for (int64_t i = 0; i < S; ++i) acc += row[i];
          g[static_cast<size_t>(c)] += acc;
        }
    }
  });
}

// x: [..., D] + b: [D]
inline Var add_row_bias(const Var& x, const Var& b) {
  const int64_t D = x->value.dim(x->value.ndim() - 1);
  if (b->value.size() != static_cast<size_t>(D))
    throw std::invalid_argument("add_row_bias: bias size mismatch");
  const int64_t R = static_cast<int64_t>(x->value.size()) / D;
  Tensor y = x->value.clone();
  {
    float* ys = y.data();
    const float* bs = b->value.data();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t d = 0; d < D; ++d) ys[r * D + d] += bs[d];
  }
  Var xc = x, bc = b;
  return make_op(y, {x, b}, [xc, bc, R, D](Node& n) {
    accum(xc, n.grad);
    if (bc->requires_grad) {
      Tensor& g = bc->ensure_grad();
      const float* go = n.grad.data();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t d = 0; d < D; ++d) g[static_cast<size_t>(d)] += go[r * D + d];
    }
  });
}

// FiLM: y[n,c,*] = x[n,c,*] * (1 + scale[n,c]) + shift[n,c]
inline Var film(const Var& x, const Var& scale_nc, const Var& shift_nc) {
  const int64_t N = x->value.dim(0);
  const int64_t C = x->value.dim(1);
  const int64_t S = static_cast<int64_t>(x->value.size()) / (N * C);
  if (scale_nc->value.size() != static_cast<size_t>(N * C) ||
      shift_nc->value.size() != static_cast<size_t>(N * C))
    throw std::invalid_argument("film: conditioning shape mismatch");
  Tensor y(x->value.shape());
  {
    float* ys = y.data();
    const float* xs = x->value.data();
    const float* sc = scale_nc->value.data();
    const float* sh = shift_nc->value.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      float a = 1.0f + sc[nc], b = sh[nc];
      const float* xr = xs + nc * S;
      float* yr = ys + nc * S;
      for (int64_t i = 0; i < S; ++i) yr[i] = xr[i] * a + b;
    }
  }
  Var xc = x, scc = scale_nc, shc = shift_nc;
  return make_op(y, {x, scale_nc, shift_nc}, [xc, scc, shc, N, C, S](Node& n) {
    const float* go = n.grad.data();
    const float* xs = xc->value.data();
    const float* sc = scc->value.data();
    if (xc->requires_grad) {
      Tensor& g = xc->ensure_grad();
      float* gi = g.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        float a = 1.0f + sc[nc];
        const float* gr = go + nc * S;
        float* xr = gi + nc * S;
        for (int64_t i = 0; i < S; ++i) xr[i] += gr[i] * a;
      }
    }
    if (scc->requires_grad) {
      Tensor& g = scc->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* gr = go + nc * S;
        const float* xr = xs + nc * S;
        float acc = 0.0f;
        for (int64_t i = 0; i < S; ++i) acc += gr[i] * xr[i];
        g[static_cast<size_t>(nc)] += acc;
      }
    }
    if (shc->requires_grad) {
      Tensor& g = shc->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* gr = go + nc * S;
        float acc = 0.0f;
        for (int64_t i = 0; i < S; ++i) acc += gr[i];
        g[static_cast<size_t>(nc)] += acc;
      }
    }
  });
}

// ---- reductions ----

inline Var sum_all(const Var& x) {
  double acc = 0.0;
  const float* xs = x->value.data();
  for (size_t i = 0; i < x->value.size(); ++i) acc += xs[i];
  Var xc = x;
  return make_op(Tensor::scalar(static_cast<float>(acc)), {x}, [xc](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    float go = n.grad[0];
    float* gi = g.data();
    for (size_t i = 0; i < g.size(); ++i) gi[i] += go;
  });
}

inline Var mean_all(const Var& x) {
  return scale(sum_all(x), 1.0f / static_cast<float>(x->value.size()));
}

inline Var mean_abs(const Var& x) {
  double acc = 0.0;
  const float* xs = x->value.data();
  const size_t sz = x->value.size();
  for (size_t i = 0; i < sz; ++i) acc += std::abs(xs[i]);
  Var xc = x;
  float inv = 1.0f / static_cast<float>(sz);
  return make_op(Tensor::scalar(static_cast<float>(acc / sz)), {x}, [xc, inv](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* xs = xc->value.data();
    float go = n.grad[0] * inv;
    float* gi = g.data();
    for (size_t i = 0; i < g.size(); ++i) gi[i] += go * (xs[i] > 0 ? 1.0f : (xs[i] < 0 ? -1.0f : 0.0f));
  });
}

// mean over axis 1 of [N, L, D] -> [N, D]
inline Var mean_axis1(const Var& x) {
  if (x->value.ndim() != 3) throw std::invalid_argument("mean_axis1: expects rank-3 input");
  const int64_t N = x->value.dim(0), L = x->value.dim(1), D = x->value.dim(2);
  Tensor y({N, D});
  const float* xs = x->value.data();
  float* ys = y.data();
  const float inv = 1.0f / static_cast<float>(L);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t d = 0; d < D; ++d) ys[n * D + d] += xs[(n * L + l) * D + d] * inv;
  Var xc = x;
  return make_op(y, {x}, [xc, N, L, D, inv](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (int64_t b = 0; b < N; ++b)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t d = 0; d < D; ++d) gi[(b * L + l) * D + d] += go[b * D + d] * inv;
  });
}

// ---- structural ----

// Concatenate along axis 0 (works for any rank; shapes must agree elsewhere).
inline Var concat0(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat0: empty input");
  std::vector<int64_t> shape = xs[0]->value.shape();
  int64_t total0 = 0;
  for (const auto& x : xs) total0 += x->value.dim(0);
  shape[0] = total0;
  Tensor y(shape);
  size_t off = 0;
  for (const auto& x : xs) {
    std::memcpy(y.data() + off, x->value.data(), x->value.size() * sizeof(float));
    off += x->value.size();
  }
  std::vector<Var> parents = xs;
  return make_op(y, parents, [parents](Node& n) {
    size_t off = 0;
    for (const auto& x : parents) {
      if (x->requires_grad) {
        Tensor& g = x->ensure_grad();
        const float* go = n.grad.data() + off;
        float* gi = g.data();
        for (size_t i = 0; i < g.size(); ++i) gi[i] += go[i];
      }
      off += x->value.size();
    }
  });
}

// Concatenate along the last axis.
inline Var concat_last(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_last: empty input");
  const int nd = xs[0]->value.ndim();
  std::vector<int64_t> shape = xs[0]->value.shape();
  int64_t rows = 1;
  for (int i = 0; i < nd - 1; ++i) rows *= shape[static_cast<size_t>(i)];
  int64_t total = 0;
  std::vector<int64_t> widths;
  for (const auto& x : xs) {
    widths.push_back(x->value.dim(nd - 1));
    total += widths.back();
  }
  shape[static_cast<size_t>(nd - 1)] = total;
  Tensor y(shape);
  for (int64_t r = 0; r < rows; ++r) {
    int64_t off = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
      std::memcpy(y.data() + r * total + off, xs[k]->value.data() + r * widths[k],
                  static_cast<size_t>(widths[k]) * sizeof(float));
      off += widths[k];
    }
  }
  std::vector<Var> parents = xs;
  return make_op(y, parents, [parents, rows, total, widths](Node& n) {
    int64_t off = 0;
    for (size_t k = 0; k < parents.size(); ++k) {
      const auto& x = parents[k];
      if (x->requires_grad) {
        Tensor& g = x->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const float* go = n.grad.data() + r * total + off;
          float* gi = g.data() + r * widths[k];
          for (int64_t i = 0; i < widths[k]; ++i) gi[i] += go[i];
        }
      }
      off += widths[k];
    }
  });
}

// Slice along axis 0: rows [start, start+len).
inline Var slice0(const Var& x, int64_t start, int64_t len) {
  std::vector<int64_t> shape = x->value.shape();
  if (start < 0 || start + len > shape[0]) throw std::out_of_range("slice0: bad range");
  int64_t inner = static_cast<int64_t>(x->value.size()) / shape[0];
  shape[0] = len;
  Tensor y(shape);
  std::memcpy(y.data(), x->value.data() + start * inner,
              static_cast<size_t>(len * inner) * sizeof(float));
  Var xc = x;
  return make_op(y, {x}, [xc, start, inner, len](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data() + start * inner;
    for (int64_t i = 0; i < len * inner; ++i) gi[i] += go[i];
  });
}

// Slice along the last axis: columns [start, start+len).
inline Var slice_last(const Var& x, int64_t start, int64_t len) {
  const int nd = x->value.ndim();
  std::vector<int64_t> shape = x->value.shape();
  const int64_t D = shape[static_cast<size_t>(nd - 1)];
  if (start < 0 || start + len > D) throw std::out_of_range("slice_last: bad range");
  const int64_t rows = static_cast<int64_t>(x->value.size()) / D;
  shape[static_cast<size_t>(nd - 1)] = len;
  Tensor y(shape);
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(y.data() + r * len, x->value.data() + r * D + start,
                static_cast<size_t>(len) * sizeof(float));
  Var xc = x;
  return make_op(y, {x}, [xc, rows, D, start, len](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < len; ++i) gi[r * D + start + i] += go[r * len + i];
  });
}

// Select index t along axis 1 of a rank-3 tensor: [N, L, D] -> [N, 1, D].
inline Var slice_axis1(const Var& x, int64_t t) {
  if (x->value.ndim() != 3) throw std::invalid_argument("slice_axis1: expects rank-3 input");
  const int64_t N = x->value.dim(0), L = x->value.dim(1), D = x->value.dim(2);
  if (t < 0 || t >= L) throw std::out_of_range("slice_axis1: index out of range");
  Tensor y({N, 1, D});
  for (int64_t n0 = 0; n0 < N; ++n0)
    std::memcpy(y.data() + n0 * D, x->value.data() + (n0 * L + t) * D,
                static_cast<size_t>(D) * sizeof(float));
  Var xc = x;
  return make_op(y, {x}, [xc, N, L, D, t](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (int64_t n0 = 0; n0 < N; ++n0)
      for (int64_t d = 0; d < D; ++d) gi[(n0 * L + t) * D + d] += go[n0 * D + d];
  });
}

// Generic permutation of axes (copies). perm[i] = source axis of output axis i.
inline Var permute(const Var& x, const std::vector<int>& perm) {
  const int nd = x->value.ndim();
  if (static_cast<int>(perm.size()) != nd) throw std::invalid_argument("permute: rank mismatch");
  const auto& in_shape = x->value.shape();
  std::vector<int64_t> out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1), out_strides(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * in_shape[static_cast<size_t>(i + 1)];
    out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
  }
  Tensor y(out_shape);
  const int64_t total = static_cast<int64_t>(y.size());
  // Input stride of each output axis; trailing axes that stay contiguous in
  // the input are copied as one run instead of element by element.
  std::vector<int64_t> step(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i)
    step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  int loops = nd;
  int64_t inner = 1;
  while (loops > 0 && step[static_cast<size_t>(loops - 1)] == inner) {
    inner *= out_shape[static_cast<size_t>(loops - 1)];
    --loops;
  }
  // walk: visit(out_offset, in_offset) over all runs via an odometer, no div/mod
  auto walk = [nd, total, inner, loops](const std::vector<int64_t>& step,
                                        const std::vector<int64_t>& out_shape, auto&& visit) {
    std::vector<int64_t> cnt(static_cast<size_t>(std::max(loops, 1)), 0);
    int64_t src = 0;
    const int64_t runs = total / inner;
    for (int64_t o = 0; o < runs; ++o) {
      visit(o * inner, src);
      for (int i = loops - 1; i >= 0; --i) {
        src += step[static_cast<size_t>(i)];
        if (++cnt[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
        cnt[static_cast<size_t>(i)] = 0;
        src -= step[static_cast<size_t>(i)] * out_shape[static_cast<size_t>(i)];
      }
    }
    (void)nd;
  };
  const float* xs = x->value.data();
  float* ys = y.data();
  walk(step, out_shape, [xs, ys, inner](int64_t o, int64_t src) {
    std::memcpy(ys + o, xs + src, static_cast<size_t>(inner) * sizeof(float));
  });
  Var xc = x;
  return make_op(y, {x}, [xc, step, out_shape, walk, inner](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    walk(step, out_shape, [go, gi, inner](int64_t o, int64_t src) {
      for (int64_t j = 0; j < inner; ++j) gi[src + j] += go[o + j];
    });
  });
}

// Repeat a [1, ...] tensor N times along axis 0.
inline Var broadcast0(const Var& x, int64_t n_rep) {
  std::vector<int64_t> shape = x->value.shape();
  if (shape[0] != 1) throw std::invalid_argument("broadcast0: leading dim must be 1");
  shape[0] = n_rep;
  Tensor y(shape);
  const size_t inner = x->value.size();
  for (int64_t r = 0; r < n_rep; ++r)
    std::memcpy(y.data() + static_cast<size_t>(r) * inner, x->value.data(), inner * sizeof(float));
  Var xc = x;
  return make_op(y, {x}, [xc, n_rep, inner](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (int64_t r = 0; r < n_rep; ++r)
      for (size_t i = 0; i < inner; ++i) gi[i] += go[static_cast<size_t>(r) * inner + i];
  });
}

}  // namespace ag
}  // namespace divid
