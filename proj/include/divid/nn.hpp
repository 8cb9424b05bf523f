#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "divid/ops.hpp"
#include "divid/rng.hpp"

namespace divid {
namespace nn {

using ag::Var;

// Named parameter registry shared by all modules of one model. Registration
// order is stable and defines optimizer-state order.
class ParamStore {
 public:
  explicit ParamStore(uint64_t init_seed = 0) : rng_(init_seed) {}

  Var add(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw std::logic_error("ParamStore: duplicate parameter " + name);
    Var v = ag::make_leaf(std::move(init), true);
    by_name_[name] = v;
    order_.push_back(name);
    return v;
  }

  Var kaiming_uniform(const std::string& name, std::vector<int64_t> shape, int64_t fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
    return add(name, rng_.uniform_tensor(std::move(shape), -bound, bound));
  }

  Var zeros(const std::string& name, std::vector<int64_t> shape) {
    return add(name, Tensor::zeros(std::move(shape)));
  }

  Var ones(const std::string& name, std::vector<int64_t> shape) {
    return add(name, Tensor::full(std::move(shape), 1.0f));
  }

  Var get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t count() const { return order_.size(); }

  size_t total_elements() const {
    size_t n = 0;
    for (const auto& nm : order_) n += by_name_.at(nm)->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& nm : order_) {
      Var& v = by_name_[nm];
      if (v->grad.defined()) v->grad.fill(0.0f);
    }
  }

  Rng& init_rng() { return rng_; }

 private:
  std::map<std::string, Var> by_name_;
  std::vector<std::string> order_;
  Rng rng_;
};

// y = x @ W^T + b for x: [..., in]. W stored as [out, in].
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, bool bias = true,
         bool zero_init = false)
      : in_(in), out_(out) {
    w_ = zero_init ? ps.zeros(name + ".w", {out, in})
                   : ps.kaiming_uniform(name + ".w", {out, in}, in);
    if (bias) b_ = zero_init ? ps.zeros(name + ".b", {out}) : ps.kaiming_uniform(name + ".b", {out}, in);
  }

  Var operator()(const Var& x) const {
    const auto& shape = x->value.shape();
    const int64_t rows = static_cast<int64_t>(x->value.size()) / in_;
    Var flat = ag::reshape(x, {rows, in_});
    Var wt = ag::permute(w_, {1, 0});
    Var y = ag::matmul(flat, wt);
    if (b_) y = ag::add_row_bias(y, b_);
    std::vector<int64_t> out_shape(shape.begin(), shape.end() - 1);
    out_shape.push_back(out_);
    return ag::reshape(y, out_shape);
  }

  Var weight() const { return w_; }
  Var bias() const { return b_; }

 private:
  int64_t in_ = 0, out_ = 0;
  Var w_, b_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int64_t in_ch, int64_t out_ch, int64_t ksize,
         int64_t stride = 1, int64_t pad = -1, bool zero_init = false)
      : stride_(stride), pad_(pad < 0 ? ksize / 2 : pad) {
    const int64_t fan_in = in_ch * ksize * ksize;
    w_ = zero_init ? ps.zeros(name + ".w", {out_ch, in_ch, ksize, ksize})
                   : ps.kaiming_uniform(name + ".w", {out_ch, in_ch, ksize, ksize}, fan_in);
    b_ = zero_init ? ps.zeros(name + ".b", {out_ch}) : ps.kaiming_uniform(name + ".b", {out_ch}, fan_in);
  }

  Var operator()(const Var& x) const { return ag::conv2d(x, w_, b_, stride_, pad_); }

 private:
  int64_t stride_ = 1, pad_ = 0;
  Var w_, b_;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& name, int64_t channels, int groups = 8)
      : groups_(std::min<int>(groups, static_cast<int>(channels))) {
    while (channels % groups_ != 0) --groups_;
    gamma_ = ps.ones(name + ".gamma", {channels});
    beta_ = ps.zeros(name + ".beta", {channels});
  }

  Var operator()(const Var& x) const { return ag::group_norm(x, gamma_, beta_, groups_); }

 private:
  int groups_ = 1;
  Var gamma_, beta_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int64_t dim) {
    gamma_ = ps.ones(name + ".gamma", {dim});
    beta_ = ps.zeros(name + ".beta", {dim});
  }

  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma_, beta_); }

 private:
  Var gamma_, beta_;
};

// Multi-head attention over [N, Lq, D] queries and [N, Lkv, D] keys/values.
// Pass the same tensor for q and kv to get self-attention.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, int64_t dim, int heads)
      : dim_(dim), heads_(heads), head_dim_(dim / heads) {
    if (dim % heads != 0) throw std::invalid_argument("MultiHeadAttention: dim % heads != 0");
    q_ = Linear(ps, name + ".q", dim, dim, false);
    k_ = Linear(ps, name + ".k", dim, dim, false);
    v_ = Linear(ps, name + ".v", dim, dim, false);
    out_ = Linear(ps, name + ".out", dim, dim, true);
  }

  Var operator()(const Var& q_in, const Var& kv_in) const {
    const int64_t N = q_in->value.dim(0), Lq = q_in->value.dim(1), Lk = kv_in->value.dim(1);
    Var q = split_heads(q_(q_in), N, Lq);   // [N*H, Lq, hd]
    Var k = split_heads(k_(kv_in), N, Lk);  // [N*H, Lk, hd]
    Var v = split_heads(v_(kv_in), N, Lk);
    Var kt = ag::permute(k, {0, 2, 1});  // [N*H, hd, Lk]
    Var att = ag::scale(ag::bmm(q, kt), 1.0f / std::sqrt(static_cast<float>(head_dim_)));
    att = ag::softmax_last(att);            // [N*H, Lq, Lk]
    Var ctx = ag::bmm(att, v);              // [N*H, Lq, hd]
    Var merged = merge_heads(ctx, N, Lq);   // [N, Lq, D]
    return out_(merged);
  }

 private:
  Var split_heads(const Var& x, int64_t N, int64_t L) const {
    Var r = ag::reshape(x, {N, L, heads_, head_dim_});
    Var p = ag::permute(r, {0, 2, 1, 3});  // [N, H, L, hd]
    return ag::reshape(p, {N * heads_, L, head_dim_});
  }

  Var merge_heads(const Var& x, int64_t N, int64_t L) const {
    Var r = ag::reshape(x, {N, heads_, L, head_dim_});
    Var p = ag::permute(r, {0, 2, 1, 3});  // [N, L, H, hd]
    return ag::reshape(p, {N, L, dim_});
  }

  int64_t dim_ = 0;
  int heads_ = 1;
  int64_t head_dim_ = 0;
  Linear q_, k_, v_, out_;
};

// Single-direction LSTM; input [N, L, in], returns hidden states [N, L, hidden].
class LSTM {
 public:
  LSTM() = default;
  LSTM(ParamStore& ps, const std::string& name, int64_t in, int64_t hidden, bool reverse = false)
      : in_(in), hidden_(hidden), reverse_(reverse) {
    wx_ = Linear(ps, name + ".wx", in, 4 * hidden, true);
    wh_ = Linear(ps, name + ".wh", hidden, 4 * hidden, false);
  }

  Var operator()(const Var& x) const {
    const int64_t N = x->value.dim(0), L = x->value.dim(1);
    Var h = ag::make_const(Tensor::zeros({N, hidden_}));
    Var c = ag::make_const(Tensor::zeros({N, hidden_}));
    std::vector<Var> outs(static_cast<size_t>(L));
    for (int64_t step = 0; step < L; ++step) {
      const int64_t t = reverse_ ? L - 1 - step : step;
      Var xt = ag::reshape(ag::slice_axis1(x, t), {N, in_});
      Var gates = ag::add(wx_(xt), wh_(h));  // [N, 4*hidden]
      Var i = ag::sigmoid(ag::slice_last(gates, 0, hidden_));
      Var f = ag::sigmoid(ag::slice_last(gates, hidden_, hidden_));
      Var g = ag::tanh_(ag::slice_last(gates, 2 * hidden_, hidden_));
      Var o = ag::sigmoid(ag::slice_last(gates, 3 * hidden_, hidden_));
      c = ag::add(ag::mul(f, c), ag::mul(i, g));
      h = ag::mul(o, ag::tanh_(c));
      outs[static_cast<size_t>(t)] = ag::reshape(h, {N, 1, hidden_});
    }
    return concat_axis1(outs, N, L);
  }

  static Var concat_axis1(const std::vector<Var>& steps, int64_t N, int64_t L) {
    // steps[t]: [N, 1, D] -> [N, L, D]
    const int64_t D = steps[0]->value.dim(2);
    std::vector<Var> rows;
    rows.reserve(static_cast<size_t>(N * L));
    // permute trick: concat along axis0 as [L, N, D] then permute
    std::vector<Var> l_major;
    for (const auto& s : steps) l_major.push_back(ag::permute(s, {1, 0, 2}));  // [1, N, D]
    Var stacked = ag::concat0(l_major);                                        // [L, N, D]
    return ag::permute(stacked, {1, 0, 2});                                    // [N, L, D]
  }

 private:
  int64_t in_ = 0, hidden_ = 0;
  bool reverse_ = false;
  Linear wx_, wh_;
};

class BiLSTM {
 public:
  BiLSTM() = default;
  BiLSTM(ParamStore& ps, const std::string& name, int64_t in, int64_t hidden)
      : fwd_(ps, name + ".fwd", in, hidden, false), bwd_(ps, name + ".bwd", in, hidden, true) {}

  // [N, L, in] -> [N, L, 2*hidden]
  Var operator()(const Var& x) const { return ag::concat_last({fwd_(x), bwd_(x)}); }

 private:
  LSTM fwd_, bwd_;
};

// Adam with bias correction; state order follows the ParamStore.
class Adam {
 public:
  struct Slot {
    Tensor m, v;
  };

  Adam() = default;
  explicit Adam(ParamStore& ps, float lr = 1e-4f, float beta1 = 0.9f, float beta2 = 0.999f,
                float eps = 1e-8f)
      : ps_(&ps), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& name : ps.names()) {
      const auto& shape = ps.get(name)->value.shape();
      slots_.push_back({Tensor::zeros(shape), Tensor::zeros(shape)});
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), t_);
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), t_);
    const auto& names = ps_->names();
    for (size_t i = 0; i < names.size(); ++i) {
      Var p = ps_->get(names[i]);
      if (!p->grad.defined()) continue;
      float* w = p->value.data();
      const float* g = p->grad.data();
      float* m = slots_[i].m.data();
      float* v = slots_[i].v.data();
      for (size_t j = 0; j < p->value.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
        const float mh = static_cast<float>(m[j] / bc1);
        const float vh = static_cast<float>(v[j] / bc2);
        w[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::vector<Slot>& slots() { return slots_; }
  float lr() const { return lr_; }

 private:
  ParamStore* ps_ = nullptr;
  float lr_ = 1e-4f, beta1_ = 0.9f, beta2_ = 0.999f, eps_ = 1e-8f;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace nn
}  // namespace divid
