#pragma once

#include <Eigen/Dense>

#include "divid/graph.hpp"

namespace divid {
namespace ag {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// ---- matrix products ----

// a: [M,K], b: [K,N] -> [M,N]
inline Var matmul(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + a->value.shape_str() + " x " +
                                b->value.shape_str());
  const int64_t M = a->value.dim(0), K = a->value.dim(1), N = b->value.dim(1);
  Tensor y({M, N});
  EMap(y.data(), M, N).noalias() =
      ECMap(a->value.data(), M, K) * ECMap(b->value.data(), K, N);
  Var ac = a, bc = b;
  return make_op(y, {a, b}, [ac, bc, M, K, N](Node& n) {
    ECMap go(n.grad.data(), M, N);
    if (ac->requires_grad) {
      Tensor& g = ac->ensure_grad();
      EMap(g.data(), M, K).noalias() += go * ECMap(bc->value.data(), K, N).transpose();
    }
    if (bc->requires_grad) {
      Tensor& g = bc->ensure_grad();
      EMap(g.data(), K, N).noalias() += ECMap(ac->value.data(), M, K).transpose() * go;
    }
  });
}

// a: [B,M,K], b: [B,K,N] -> [B,M,N]
inline Var bmm(const Var& a, const Var& b) {
  if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0) ||
      a->value.dim(2) != b->value.dim(1))
    throw std::invalid_argument("bmm: bad shapes " + a->value.shape_str() + " x " +
                                b->value.shape_str());
  const int64_t B = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2), N = b->value.dim(2);
  Tensor y({B, M, N});
  for (int64_t i = 0; i < B; ++i)
    EMap(y.data() + i * M * N, M, N).noalias() =
        ECMap(a->value.data() + i * M * K, M, K) * ECMap(b->value.data() + i * K * N, K, N);
  Var ac = a, bc = b;
  return make_op(y, {a, b}, [ac, bc, B, M, K, N](Node& n) {
    for (int64_t i = 0; i < B; ++i) {
      ECMap go(n.grad.data() + i * M * N, M, N);
      if (ac->requires_grad)
        EMap(ac->ensure_grad().data() + i * M * K, M, K).noalias() +=
            go * ECMap(bc->value.data() + i * K * N, K, N).transpose();
      if (bc->requires_grad)
        EMap(bc->ensure_grad().data() + i * K * N, K, N).noalias() +=
            ECMap(ac->value.data() + i * M * K, M, K).transpose() * go;
    }
  });
}

// ---- softmax / losses ----

inline Var softmax_last(const Var& x) {
  const int64_t D = x->value.dim(x->value.ndim() - 1);
  const int64_t R = static_cast<int64_t>(x->value.size()) / D;
  Tensor y(x->value.shape());
  const float* xs = x->value.data();
  float* ys = y.data();
  for (int64_t r = 0; r < R; ++r) {
    const float* xr = xs + r * D;
    float* yr = ys + r * D;
    float mx = xr[0];
    for (int64_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
    float sum = 0.0f;
    for (int64_t d = 0; d < D; ++d) {
      yr[d] = std::exp(xr[d] - mx);
      sum += yr[d];
    }
    const float inv = 1.0f / sum;
    for (int64_t d = 0; d < D; ++d) yr[d] *= inv;
  }
  Var xc = x;
  Tensor yc = y;
  return make_op(y, {x}, [xc, yc, R, D](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    const float* ys = yc.data();
    float* gi = g.data();
    for (int64_t r = 0; r < R; ++r) {
      const float* gr = go + r * D;
      const float* yr = ys + r * D;
      float dot = 0.0f;
      for (int64_t d = 0; d < D; ++d) dot += gr[d] * yr[d];
      float* gir = gi + r * D;
      for (int64_t d = 0; d < D; ++d) gir[d] += yr[d] * (gr[d] - dot);
    }
  });
}

// Mean negative log-likelihood over a batch of logits [N, C].
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const int64_t N = logits->value.dim(0), C = logits->value.dim(1);
  if (static_cast<int64_t>(labels.size()) != N)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  Tensor probs({N, C});
  double loss = 0.0;
  const float* xs = logits->value.data();
  float* ps = probs.data();
  for (int64_t r = 0; r < N; ++r) {
    const float* xr = xs + r * C;
    float mx = xr[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(xr[c] - mx));
    double lse = mx + std::log(sum);
    loss += lse - xr[labels[static_cast<size_t>(r)]];
    for (int64_t c = 0; c < C; ++c)
      ps[r * C + c] = static_cast<float>(std::exp(static_cast<double>(xr[c]) - lse));
  }
  Var lc = logits;
  Tensor pc = probs;
  auto labs = labels;
  return make_op(Tensor::scalar(static_cast<float>(loss / static_cast<double>(N))), {logits},
                 [lc, pc, labs, N, C](Node& n) {
                   if (!lc->requires_grad) return;
                   Tensor& g = lc->ensure_grad();
                   const float scale = n.grad[0] / static_cast<float>(N);
                   const float* ps = pc.data();
                   float* gi = g.data();
                   for (int64_t r = 0; r < N; ++r) {
                     for (int64_t c = 0; c < C; ++c) gi[r * C + c] += scale * ps[r * C + c];
                     gi[r * C + labs[static_cast<size_t>(r)]] -= scale;
                   }
                 });
}

// ---- normalization ----

// GroupNorm over [N,C,...]; per-sample, per-group statistics.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      float eps = 1e-5f) {
  const int64_t N = x->value.dim(0), C = x->value.dim(1);
  const int64_t S = static_cast<int64_t>(x->value.size()) / (N * C);
  if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
  const int64_t G = groups, CG = C / G, M = CG * S;
  Tensor xhat(x->value.shape());
  Tensor inv_std({N, G});
  {
    const float* xs = x->value.data();
    float* hs = xhat.data();
    for (int64_t n0 = 0; n0 < N; ++n0)
      for (int64_t g0 = 0; g0 < G; ++g0) {
        const float* base = xs + (n0 * C + g0 * CG) * S;
        double mean = 0.0;
        for (int64_t i = 0; i < M; ++i) mean += base[i];
        mean /= static_cast<double>(M);
        double var = 0.0;
        for (int64_t i = 0; i < M; ++i) {
          double d = base[i] - mean;
          var += d * d;
        }
        var /= static_cast<double>(M);
        float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[static_cast<size_t>(n0 * G + g0)] = is;
        float* hb = hs + (n0 * C + g0 * CG) * S;
        float mu = static_cast<float>(mean);
        for (int64_t i = 0; i < M; ++i) hb[i] = (base[i] - mu) * is;
      }
  }
  Tensor y(x->value.shape());
  {
    const float* hs = xhat.data();
    const float* gm = gamma->value.data();
    const float* bt = beta->value.data();
    float* ys = y.data();
    for (int64_t n0 = 0; n0 < N; ++n0)
      for (int64_t c = 0; c < C; ++c) {
        const float a = gm[c], b = bt[c];
        const float* hr = hs + (n0 * C + c) * S;
        float* yr = ys + (n0 * C + c) * S;
        for (int64_t i = 0; i < S; ++i) yr[i] = hr[i] * a + b;
      }
  }
  Var xc = x, gc = gamma, bc = beta;
  Tensor xh = xhat, istd = inv_std;
  return make_op(y, {x, gamma, beta}, [xc, gc, bc, xh, istd, N, C, S, G, CG, M](Node& n) {
    const float* go = n.grad.data();
    const float* hs = xh.data();
    const float* gm = gc->value.data();
    if (gc->requires_grad || bc->requires_grad) {
      float* dgm = gc->requires_grad ? gc->ensure_grad().data() : nullptr;
      float* dbt = bc->requires_grad ? bc->ensure_grad().data() : nullptr;
      for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t c = 0; c < C; ++c) {
          const float* gr = go + (n0 * C + c) * S;
          const float* hr = hs + (n0 * C + c) * S;
          float ag = 0.0f, ab = 0.0f;
          for (int64_t i = 0; i < S; ++i) {
            ag += gr[i] * hr[i];
            ab += gr[i];
          }
          if (dgm) dgm[c] += ag;
          if (dbt) dbt[c] += ab;
        }
    }
    if (xc->requires_grad) {
      Tensor& g = xc->ensure_grad();
      float* gi = g.data();
      const float invM = 1.0f / static_cast<float>(M);
      for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t g0 = 0; g0 < G; ++g0) {
          // dxhat = go * gamma; dx = istd/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
          double s1 = 0.0, s2 = 0.0;
          for (int64_t cg = 0; cg < CG; ++cg) {
            const int64_t c = g0 * CG + cg;
            const float* gr = go + (n0 * C + c) * S;
            const float* hr = hs + (n0 * C + c) * S;
            for (int64_t i = 0; i < S; ++i) {
              float dxh = gr[i] * gm[c];
              s1 += dxh;
              s2 += dxh * hr[i];
            }
          }
          const float is = istd[static_cast<size_t>(n0 * G + g0)];
          const float f1 = static_cast<float>(s1) * invM, f2 = static_cast<float>(s2) * invM;
          for (int64_t cg = 0; cg < CG; ++cg) {
            const int64_t c = g0 * CG + cg;
            const float* gr = go + (n0 * C + c) * S;
            const float* hr = hs + (n0 * C + c) * S;
            float* gir = gi + (n0 * C + c) * S;
            for (int64_t i = 0; i < S; ++i)
              gir[i] += is * (gr[i] * gm[c] - f1 - hr[i] * f2);
          }
        }
    }
  });
}

// LayerNorm over the last axis; gamma/beta have that axis's length.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f) {
  const int64_t D = x->value.dim(x->value.ndim() - 1);
  const int64_t R = static_cast<int64_t>(x->value.size()) / D;
  Tensor xhat(x->value.shape());
  Tensor inv_std({R});
  {
    const float* xs = x->value.data();
    float* hs = xhat.data();
    for (int64_t r = 0; r < R; ++r) {
      const float* xr = xs + r * D;
      double mean = 0.0;
      for (int64_t d = 0; d < D; ++d) mean += xr[d];
      mean /= static_cast<double>(D);
      double var = 0.0;
      for (int64_t d = 0; d < D; ++d) {
        double dd = xr[d] - mean;
        var += dd * dd;
      }
      var /= static_cast<double>(D);
      float is = static_cast<float>(1.0 / std::sqrt(var + eps));
      inv_std[static_cast<size_t>(r)] = is;
      float mu = static_cast<float>(mean);
      float* hr = hs + r * D;
      for (int64_t d = 0; d < D; ++d) hr[d] = (xr[d] - mu) * is;
    }
  }
  Tensor y(x->value.shape());
  {
    const float* hs = xhat.data();
    const float* gm = gamma->value.data();
    const float* bt = beta->value.data();
    float* ys = y.data();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t d = 0; d < D; ++d) ys[r * D + d] = hs[r * D + d] * gm[d] + bt[d];
  }
  Var xc = x, gc = gamma, bc = beta;
  Tensor xh = xhat, istd = inv_std;
  return make_op(y, {x, gamma, beta}, [xc, gc, bc, xh, istd, R, D](Node& n) {
    const float* go = n.grad.data();
    const float* hs = xh.data();
    const float* gm = gc->value.data();
    if (gc->requires_grad || bc->requires_grad) {
      float* dgm = gc->requires_grad ? gc->ensure_grad().data() : nullptr;
      float* dbt = bc->requires_grad ? bc->ensure_grad().data() : nullptr;
      for (int64_t r = 0; r < R; ++r)
        for (int64_t d = 0; d < D; ++d) {
          if (dgm) dgm[d] += go[r * D + d] * hs[r * D + d];
          if (dbt) dbt[d] += go[r * D + d];
        }
    }
    if (xc->requires_grad) {
      Tensor& g = xc->ensure_grad();
      float* gi = g.data();
      const float invD = 1.0f / static_cast<float>(D);
      for (int64_t r = 0; r < R; ++r) {
        const float* gr = go + r * D;
        const float* hr = hs + r * D;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t d = 0; d < D; ++d) {
          float dxh = gr[d] * gm[d];
          s1 += dxh;
          s2 += dxh * hr[d];
        }
        const float is = istd[static_cast<size_t>(r)];
        const float f1 = static_cast<float>(s1) * invD, f2 = static_cast<float>(s2) * invD;
        float* gir = gi + r * D;
        for (int64_t d = 0; d < D; ++d) gir[d] += is * (gr[d] * gm[d] - f1 - hr[d] * f2);
      }
    }
  });
}

// ---- convolution ----

namespace detail {

inline void im2col(const float* x, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
                   int64_t stride, int64_t pad, int64_t OH, int64_t OW, float* col) {
  // col layout: [C*KH*KW, OH*OW]; rows are contiguous in ow so stride-1
  // kernels turn into straight memcpy of row segments.
  const int64_t R = OH * OW;
  float* dst = col;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t kh = 0; kh < KH; ++kh)
      for (int64_t kw = 0; kw < KW; ++kw) {
        for (int64_t oh = 0; oh < OH; ++oh, dst += OW) {
          const int64_t ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + OW, 0.0f);
            continue;
          }
          const float* src = x + (c * H + ih) * W;
          if (stride == 1) {
            const int64_t lo = std::max<int64_t>(0, pad - kw);
            const int64_t hi = std::min<int64_t>(OW, W - kw + pad);
            if (lo > 0) std::fill(dst, dst + lo, 0.0f);
            if (hi > lo) std::memcpy(dst + lo, src + lo + kw - pad, (hi - lo) * sizeof(float));
            if (hi < OW) std::fill(dst + std::max<int64_t>(lo, hi), dst + OW, 0.0f);
          } else {
            for (int64_t ow = 0; ow < OW; ++ow) {
              const int64_t iw = ow * stride + kw - pad;
              dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0f;
            }
          }
        }
      }
  (void)R;
}

inline void col2im_accum(const float* col, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
                         int64_t stride, int64_t pad, int64_t OH, int64_t OW, float* x) {
  // col layout matches im2col: [C*KH*KW, OH*OW].
  const float* src = col;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t kh = 0; kh < KH; ++kh)
      for (int64_t kw = 0; kw < KW; ++kw) {
        for (int64_t oh = 0; oh < OH; ++oh, src += OW) {
          const int64_t ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) continue;
          float* dst = x + (c * H + ih) * W;
          if (stride == 1) {
            const int64_t lo = std::max<int64_t>(0, pad - kw);
            const int64_t hi = std::min<int64_t>(OW, W - kw + pad);
            const float* s = src + lo;
            float* d = dst + lo + kw - pad;
            for (int64_t i = 0; i < hi - lo; ++i) d[i] += s[i];
          } else {
            for (int64_t ow = 0; ow < OW; ++ow) {
              const int64_t iw = ow * stride + kw - pad;
              if (iw >= 0 && iw < W) dst[iw] += src[ow];
            }
          }
        }
      }
}

}  // namespace detail

// x: [N,C,H,W], w: [O,C,KH,KW], b: [O] (optional, pass nullptr Var for none)
inline Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t O = w->value.dim(0), KH = w->value.dim(2), KW = w->value.dim(3);
  if (w->value.dim(1) != C)
    throw std::invalid_argument("conv2d: channel mismatch " + x->value.shape_str() + " vs " +
                                w->value.shape_str());
  const int64_t OH = (H + 2 * pad - KH) / stride + 1;
  const int64_t OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: output collapsed to zero size");
  const int64_t K = C * KH * KW, R = OH * OW;
  // 1x1 stride-1 convolutions are plain channel mixes; skip im2col entirely.
  const bool pointwise = (KH == 1 && KW == 1 && stride == 1 && pad == 0);
  Tensor y({N, O, OH, OW});
  std::vector<float> col(pointwise ? 0 : static_cast<size_t>(R * K));
  ECMap wm(w->value.data(), O, K);
  for (int64_t n0 = 0; n0 < N; ++n0) {
    const float* cp = x->value.data() + n0 * C * H * W;
    if (!pointwise) {
      detail::im2col(cp, C, H, W, KH, KW, stride, pad, OH, OW, col.data());
      cp = col.data();
    }
    // y_n [O, R] = w [O,K] * col [K,R]
    EMap(y.data() + n0 * O * R, O, R).noalias() = wm * ECMap(cp, K, R);
  }
  if (b && b->value.defined()) {
    float* ys = y.data();
    const float* bs = b->value.data();
    for (int64_t n0 = 0; n0 < N; ++n0)
      for (int64_t o = 0; o < O; ++o) {
        float bv = bs[o];
        float* row = ys + (n0 * O + o) * R;
        for (int64_t i = 0; i < R; ++i) row[i] += bv;
      }
  }
  Var xc = x, wc = w, bcv = b;
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  return make_op(y, parents, [xc, wc, bcv, N, C, H, W, O, KH, KW, stride, pad, OH, OW, K, R,
                              pointwise](Node& n) {
    std::vector<float> col(pointwise ? 0 : static_cast<size_t>(R * K));
    std::vector<float> dcol(pointwise ? 0 : static_cast<size_t>(R * K));
    ECMap wm(wc->value.data(), O, K);
    float* dwp = wc->requires_grad ? wc->ensure_grad().data() : nullptr;
    float* dxp = xc->requires_grad ? xc->ensure_grad().data() : nullptr;
    for (int64_t n0 = 0; n0 < N; ++n0) {
      ECMap go(n.grad.data() + n0 * O * R, O, R);
      const float* cp = xc->value.data() + n0 * C * H * W;
      if (!pointwise && (dwp || dxp)) {
        detail::im2col(cp, C, H, W, KH, KW, stride, pad, OH, OW, col.data());
        cp = col.data();
      }
      if (dwp) EMap(dwp, O, K).noalias() += go * ECMap(cp, K, R).transpose();
      if (dxp) {
        if (pointwise) {
          EMap(dxp + n0 * C * H * W, K, R).noalias() += wm.transpose() * go;
        } else {
          EMap(dcol.data(), K, R).noalias() = wm.transpose() * go;
          detail::col2im_accum(dcol.data(), C, H, W, KH, KW, stride, pad, OH, OW,
                               dxp + n0 * C * H * W);
        }
      }
    }
    if (bcv && bcv->requires_grad) {
      Tensor& g = bcv->ensure_grad();
      const float* go = n.grad.data();
      for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t o = 0; o < O; ++o) {
          const float* row = go + (n0 * O + o) * R;
          float acc = 0.0f;
          for (int64_t i = 0; i < R; ++i) acc += row[i];
          g[static_cast<size_t>(o)] += acc;
        }
    }
  });
}

// Nearest-neighbor 2x upsampling of [N,C,H,W].
inline Var upsample_nearest2x(const Var& x) {
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor y({N, C, 2 * H, 2 * W});
  const float* xs = x->value.data();
  float* ys = y.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xp = xs + nc * H * W;
    float* yp = ys + nc * 4 * H * W;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w0 = 0; w0 < W; ++w0) {
        const float v = xp[h * W + w0];
        float* q = yp + (2 * h) * 2 * W + 2 * w0;
        q[0] = v;
        q[1] = v;
        q[2 * W] = v;
        q[2 * W + 1] = v;
      }
  }
  Var xc = x;
  return make_op(y, {x}, [xc, N, C, H, W](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float* gp = go + nc * 4 * H * W;
      float* xp = gi + nc * H * W;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w0 = 0; w0 < W; ++w0) {
          const float* q = gp + (2 * h) * 2 * W + 2 * w0;
          xp[h * W + w0] += q[0] + q[1] + q[2 * W] + q[2 * W + 1];
        }
    }
  });
}

// Global average over spatial dims: [N,C,H,W] -> [N,C]
inline Var mean_spatial(const Var& x) {
  const int64_t N = x->value.dim(0), C = x->value.dim(1);
  const int64_t S = static_cast<int64_t>(x->value.size()) / (N * C);
  Tensor y({N, C});
  const float* xs = x->value.data();
  float* ys = y.data();
  const float inv = 1.0f / static_cast<float>(S);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* row = xs + nc * S;
    float acc = 0.0f;
    for (int64_t i = 0; i < S; ++i) acc += row[i];
    ys[nc] = acc * inv;
  }
  Var xc = x;
  return make_op(y, {x}, [xc, N, C, S, inv](Node& n) {
    if (!xc->requires_grad) return;
    Tensor& g = xc->ensure_grad();
    const float* go = n.grad.data();
    float* gi = g.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const float gv = go[nc] * inv;
      float* row = gi + nc * S;
      for (int64_t i = 0; i < S; ++i) row[i] += gv;
    }
  });
}

}  // namespace ag
}  // namespace divid
