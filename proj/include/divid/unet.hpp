#pragma once

#include "divid/config.hpp"
#include "divid/encoder.hpp"
#include "divid/schedule.hpp"

namespace divid {

// Cross-attention variant of MultiHeadAttention where keys/values come from
// a context of different width than the queries.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(nn::ParamStore& ps, const std::string& name, int64_t q_dim, int64_t kv_dim,
                 int heads)
      : dim_(q_dim), heads_(heads), head_dim_(q_dim / heads) {
    if (q_dim % heads != 0) throw std::invalid_argument("CrossAttention: q_dim % heads != 0");
    q_ = nn::Linear(ps, name + ".q", q_dim, q_dim, false);
    k_ = nn::Linear(ps, name + ".k", kv_dim, q_dim, false);
    v_ = nn::Linear(ps, name + ".v", kv_dim, q_dim, false);
    out_ = nn::Linear(ps, name + ".out", q_dim, q_dim, true);
  }

  Var operator()(const Var& q_in, const Var& ctx) const {
    const int64_t N = q_in->value.dim(0), Lq = q_in->value.dim(1), Lk = ctx->value.dim(1);
    Var q = split(q_(q_in), N, Lq);
    Var k = split(k_(ctx), N, Lk);
    Var v = split(v_(ctx), N, Lk);
    Var att = ag::scale(ag::bmm(q, ag::permute(k, {0, 2, 1})),
                        1.0f / std::sqrt(static_cast<float>(head_dim_)));
    Var ctx_out = ag::bmm(ag::softmax_last(att), v);
    return out_(merge(ctx_out, N, Lq));
  }

 private:
  Var split(const Var& x, int64_t N, int64_t L) const {
    return ag::reshape(ag::permute(ag::reshape(x, {N, L, heads_, head_dim_}), {0, 2, 1, 3}),
                       {N * heads_, L, head_dim_});
  }
  Var merge(const Var& x, int64_t N, int64_t L) const {
    return ag::reshape(ag::permute(ag::reshape(x, {N, heads_, L, head_dim_}), {0, 2, 1, 3}),
                       {N, L, dim_});
  }

  int64_t dim_ = 0;
  int heads_ = 1;
  int64_t head_dim_ = 0;
  nn::Linear q_, k_, v_, out_;
};

// Spatial transformer: self-attention over pixels, cross-attention on the
// per-frame [s, d_i] context, then a pointwise feed-forward, all pre-norm.
class SpatialTransformer {
 public:
  SpatialTransformer() = default;
  SpatialTransformer(nn::ParamStore& ps, const std::string& name, int64_t channels,
                     int64_t context_dim, int heads)
      : channels_(channels) {
    norm_in_ = nn::GroupNorm(ps, name + ".norm_in", channels);
    proj_in_ = nn::Conv2d(ps, name + ".proj_in", channels, channels, 1);
    ln1_ = nn::LayerNorm(ps, name + ".ln1", channels);
    self_ = nn::MultiHeadAttention(ps, name + ".self", channels, heads);
    ln2_ = nn::LayerNorm(ps, name + ".ln2", channels);
    cross_ = CrossAttention(ps, name + ".cross", channels, context_dim, heads);
    ln3_ = nn::LayerNorm(ps, name + ".ln3", channels);
    ff1_ = nn::Linear(ps, name + ".ff1", channels, 4 * channels);
    ff2_ = nn::Linear(ps, name + ".ff2", 4 * channels, channels);
    proj_out_ = nn::Conv2d(ps, name + ".proj_out", channels, channels, 1);
  }

  Var operator()(const Var& x, const Var& context) const {
    const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                  W = x->value.dim(3);
    Var h = proj_in_(norm_in_(x));
    // [N,C,H,W] -> [N, HW, C]
    Var seq = ag::permute(ag::reshape(h, {N, C, H * W}), {0, 2, 1});
    seq = ag::add(seq, self_(ln1_(seq), ln1_(seq)));
    seq = ag::add(seq, cross_(ln2_(seq), context));
    seq = ag::add(seq, ff2_(ag::silu(ff1_(ln3_(seq)))));
    Var back = ag::reshape(ag::permute(seq, {0, 2, 1}), {N, C, H, W});
    return ag::add(x, proj_out_(back));
  }

 private:
  int64_t channels_ = 0;
  nn::GroupNorm norm_in_;
  nn::Conv2d proj_in_, proj_out_;
  nn::LayerNorm ln1_, ln2_, ln3_;
  nn::MultiHeadAttention self_;
  CrossAttention cross_;
  nn::Linear ff1_, ff2_;
};

inline Tensor sinusoidal_embedding(const std::vector<int64_t>& timesteps, int64_t dim) {
  const int64_t N = static_cast<int64_t>(timesteps.size());
  Tensor emb({N, dim});
  const int64_t half = dim / 2;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                   static_cast<double>(std::max<int64_t>(half - 1, 1)));
      const double a = static_cast<double>(timesteps[static_cast<size_t>(n)]) * freq;
      emb[static_cast<size_t>(n * dim + i)] = static_cast<float>(std::sin(a));
      emb[static_cast<size_t>(n * dim + half + i)] = static_cast<float>(std::cos(a));
    }
  return emb;
}

// Conditional UNet epsilon-predictor. Four resolution levels, FiLM time
// conditioning in residual blocks, spatial transformers at the configured
// attention resolutions.
class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(nn::ParamStore& ps, const DenoiserConfig& cfg, int64_t H, int64_t W)
      : cfg_(cfg), H_(H), W_(W) {
    if (H % 8 != 0 || W % 8 != 0)
      throw std::invalid_argument("DenoiserModel: spatial dims must be divisible by 8");
    const auto att_res = cfg.resolved_attention(std::min(H, W));
    auto wants_attn = [&](int64_t res) {
      return std::find(att_res.begin(), att_res.end(), res) != att_res.end();
    };
    const std::string p = "denoiser";
    const int64_t base = cfg.base_channels;
    temb_dim_ = base * 4;
    temb1_ = nn::Linear(ps, p + ".temb1", base, temb_dim_);
    temb2_ = nn::Linear(ps, p + ".temb2", temb_dim_, temb_dim_);

    conv_in_ = nn::Conv2d(ps, p + ".conv_in", 3, base, 3);
    int64_t ch = base;
    int64_t res = std::min(H, W);
    std::vector<int64_t> skip_channels{ch};
    const size_t levels = cfg.channel_mult.size();
    for (size_t l = 0; l < levels; ++l) {
      const int64_t out_ch = base * cfg.channel_mult[l];
      DownLevel dl;
      for (int b = 0; b < cfg.res_blocks; ++b) {
        dl.blocks.emplace_back(ps, p + ".down" + std::to_string(l) + ".res" + std::to_string(b),
                               ch, out_ch, temb_dim_);
        ch = out_ch;
        if (wants_attn(res))
          dl.attn.emplace_back(ps, p + ".down" + std::to_string(l) + ".attn" + std::to_string(b),
                               ch, cfg.context_dim, cfg.attn_heads);
        skip_channels.push_back(ch);
      }
      if (l + 1 < levels) {
        dl.downsample =
            nn::Conv2d(ps, p + ".down" + std::to_string(l) + ".downsample", ch, ch, 3, 2);
        dl.has_down = true;
        skip_channels.push_back(ch);
        res /= 2;
      }
      down_.push_back(std::move(dl));
    }
    mid_res1_ = ResBlock(ps, p + ".mid.res1", ch, ch, temb_dim_);
    mid_attn_ = SpatialTransformer(ps, p + ".mid.attn", ch, cfg.context_dim, cfg.attn_heads);
    mid_res2_ = ResBlock(ps, p + ".mid.res2", ch, ch, temb_dim_);

    for (int l = static_cast<int>(levels) - 1; l >= 0; --l) {
      const int64_t out_ch = base * cfg.channel_mult[static_cast<size_t>(l)];
      UpLevel ul;
      for (int b = 0; b <= cfg.res_blocks; ++b) {
        const int64_t skip_ch = skip_channels.back();
        skip_channels.pop_back();
        ul.blocks.emplace_back(ps, p + ".up" + std::to_string(l) + ".res" + std::to_string(b),
                               ch + skip_ch, out_ch, temb_dim_);
        ch = out_ch;
        if (wants_attn(res))
          ul.attn.emplace_back(ps, p + ".up" + std::to_string(l) + ".attn" + std::to_string(b),
                               ch, cfg.context_dim, cfg.attn_heads);
      }
      if (l > 0) {
        ul.upsample = nn::Conv2d(ps, p + ".up" + std::to_string(l) + ".upsample", ch, ch, 3);
        ul.has_up = true;
        res *= 2;
      }
      up_.push_back(std::move(ul));
    }
    out_norm_ = nn::GroupNorm(ps, p + ".out_norm", ch);
    conv_out_ = nn::Conv2d(ps, p + ".conv_out", ch, 3, 3);
  }

  // x: [N,3,H,W] noisy frames; timesteps: per-sample t; context: [N,2,ctx].
  // Output has the input frame shape.
  Var predict_noise(const Var& x, const std::vector<int64_t>& timesteps,
                    const Var& context) const {
    const int64_t N = x->value.dim(0);
    if (static_cast<int64_t>(timesteps.size()) != N)
      throw std::invalid_argument("predict_noise: timestep count mismatch");
    if (context->value.ndim() != 3 || context->value.dim(0) != N ||
        context->value.dim(2) != cfg_.context_dim)
      throw std::invalid_argument("predict_noise: context must be [N,k,context_dim]");
    Var temb = ag::make_const(sinusoidal_embedding(timesteps, cfg_.base_channels));
    temb = temb2_(ag::silu(temb1_(temb)));

    Var h = conv_in_(x);
    std::vector<Var> skips{h};
    for (const auto& dl : down_) {
      for (size_t b = 0; b < dl.blocks.size(); ++b) {
        h = dl.blocks[b](h, temb);
        if (!dl.attn.empty()) h = dl.attn[b](h, context);
        skips.push_back(h);
      }
      if (dl.has_down) {
        h = dl.downsample(h);
        skips.push_back(h);
      }
    }
    h = mid_res1_(h, temb);
    h = mid_attn_(h, context);
    h = mid_res2_(h, temb);
    for (const auto& ul : up_) {
      for (size_t b = 0; b < ul.blocks.size(); ++b) {
        Var skip = skips.back();
        skips.pop_back();
        h = ul.blocks[b](concat_channels(h, skip), temb);
        if (!ul.attn.empty()) h = ul.attn[b](h, context);
      }
      if (ul.has_up) h = ul.upsample(ag::upsample_nearest2x(h));
    }
    return conv_out_(ag::silu(out_norm_(h)));
  }

  const DenoiserConfig& config() const { return cfg_; }

 private:
  static Var concat_channels(const Var& a, const Var& b) {
    // [N,C1,H,W] + [N,C2,H,W] -> [N,C1+C2,H,W] via axis-0 concat on permuted views
    Var ap = ag::permute(a, {1, 0, 2, 3});
    Var bp = ag::permute(b, {1, 0, 2, 3});
    return ag::permute(ag::concat0({ap, bp}), {1, 0, 2, 3});
  }

  struct DownLevel {
    std::vector<ResBlock> blocks;
    std::vector<SpatialTransformer> attn;
    nn::Conv2d downsample;
    bool has_down = false;
  };
  struct UpLevel {
    std::vector<ResBlock> blocks;
    std::vector<SpatialTransformer> attn;
    nn::Conv2d upsample;
    bool has_up = false;
  };

  DenoiserConfig cfg_;
  int64_t H_ = 0, W_ = 0, temb_dim_ = 0;
  nn::Linear temb1_, temb2_;
  nn::Conv2d conv_in_, conv_out_;
  std::vector<DownLevel> down_;
  std::vector<UpLevel> up_;
  ResBlock mid_res1_, mid_res2_;
  SpatialTransformer mid_attn_;
  nn::GroupNorm out_norm_;
};

// Projections building the per-frame cross-attention context [s_row; d_i_row].
// Each projected row is layer-normalized so the context keeps a healthy scale
// regardless of the encoder's token magnitudes.
class ContextBuilder {
 public:
  ContextBuilder() = default;
  ContextBuilder(nn::ParamStore& ps, int64_t token_dim, int64_t context_dim) {
    proj_s_ = nn::Linear(ps, "context.proj_s", token_dim, context_dim);
    proj_d_ = nn::Linear(ps, "context.proj_d", token_dim, context_dim);
    norm_s_ = nn::LayerNorm(ps, "context.norm_s", context_dim);
    norm_d_ = nn::LayerNorm(ps, "context.norm_d", context_dim);
  }

  // s: [B, token_dim], d: [B, nu, token_dim] -> [B*nu, 2, context_dim];
  // row 0 is the shared static token, row 1 the frame's own dynamic token.
  Var operator()(const Var& s, const Var& d) const {
    const int64_t B = d->value.dim(0), nu = d->value.dim(1);
    Var sp = norm_s_(proj_s_(s));                              // [B, ctx]
    const int64_t ctx = sp->value.dim(1);
    Var dp = norm_d_(proj_d_(d));                              // [B, nu, ctx]
    // tile s across frames: [B, ctx] -> [B, nu, ctx]
    Var s3 = ag::reshape(sp, {B, 1, ctx});
    std::vector<Var> reps(static_cast<size_t>(nu), ag::permute(s3, {1, 0, 2}));
    Var st = ag::permute(ag::concat0(reps), {1, 0, 2});        // [B, nu, ctx]
    Var srow = ag::reshape(st, {B * nu, 1, ctx});
    Var drow = ag::reshape(dp, {B * nu, 1, ctx});
    // [B*nu, 2, ctx]
    Var stacked = ag::concat0({ag::permute(srow, {1, 0, 2}), ag::permute(drow, {1, 0, 2})});
    return ag::permute(stacked, {1, 0, 2});
  }

 private:
  nn::Linear proj_s_, proj_d_;
  nn::LayerNorm norm_s_, norm_d_;
};

// ---- reverse process (no-grad tensor math around predict_noise) ----

struct DiffusionModel {
  std::shared_ptr<nn::ParamStore> params;
  SequenceEncoder encoder;
  DenoiserModel denoiser;
  ContextBuilder context;
  int64_t H = 0, W = 0;
};

inline DiffusionModel build_model(const EncoderConfig& enc_cfg, const DenoiserConfig& den_cfg,
                                  int64_t H, int64_t W, uint64_t init_seed) {
  DiffusionModel m;
  m.params = std::make_shared<nn::ParamStore>(init_seed);
  m.encoder = SequenceEncoder(*m.params, enc_cfg, H, W);
  m.denoiser = DenoiserModel(*m.params, den_cfg, H, W);
  m.context = ContextBuilder(*m.params, enc_cfg.token_dim, den_cfg.context_dim);
  m.H = H;
  m.W = W;
  return m;
}

// One ancestral step x_t -> x_{t-1} for a whole clip at once, given the
// epsilon prediction; z must be shared across frames (one frame-shaped draw)
// and zero at t = 1. sigma_t^2 = beta_t.
inline Tensor denoise_step_from_eps(const Tensor& x_t, int64_t t, const Tensor& eps_hat,
                                    const NoiseSchedule& schedule, const Tensor* z) {
  const double a_t = schedule.alpha(t);
  const double abar_t = schedule.alpha_bar(t);
  const double b_t = schedule.beta(t);
  const float c0 = static_cast<float>(1.0 / std::sqrt(a_t));
  const float c1 = static_cast<float>(b_t / std::sqrt(1.0 - abar_t));
  const float sigma = t > 1 ? static_cast<float>(std::sqrt(b_t)) : 0.0f;
  Tensor out(x_t.shape());
  const int64_t nu = x_t.dim(0);
  const int64_t per_frame = static_cast<int64_t>(x_t.size()) / nu;
  const float* xs = x_t.data();
  const float* es = eps_hat.data();
  const float* zs = (z && t > 1) ? z->data() : nullptr;
  float* ys = out.data();
  for (int64_t i = 0; i < nu; ++i)
    for (int64_t j = 0; j < per_frame; ++j) {
      const int64_t k = i * per_frame + j;
      ys[k] = c0 * (xs[k] - c1 * es[k]) + (zs ? sigma * zs[j] : 0.0f);
    }
  return out;
}

// One reverse step for a whole clip given tokens: predicts epsilon per frame
// and applies the posterior-mean update with one shared z (zero at t = 1).
inline Tensor denoise_step(const DiffusionModel& model, const Tensor& x_t, int64_t t,
                           const Tensor& s_tokens, const Tensor& d_tokens,
                           const NoiseSchedule& schedule, Rng& rng) {
  const int64_t nu = x_t.dim(0);
  Var s = ag::make_const(s_tokens.reshaped({1, s_tokens.dim(0)}).clone());
  Var d = ag::make_const(d_tokens.reshaped({1, nu, d_tokens.dim(1)}).clone());
  Var ctx = model.context(s, d);
  std::vector<int64_t> tvec(static_cast<size_t>(nu), t);
  Var eps_hat = model.denoiser.predict_noise(ag::make_const(x_t.clone()), tvec, ctx);
  Tensor z = rng.normal_tensor({x_t.dim(1), x_t.dim(2), x_t.dim(3)});
  return denoise_step_from_eps(x_t, t, eps_hat->value, schedule, &z);
}

// Ancestral sampling of a clip from tokens. Every frame starts from one
// shared standard-normal draw and every reverse step injects one shared z.
// Uses the strided timestep subset when sample_steps < T; strided steps
// reuse the same update rule with the schedule entries at the visited t.
inline Tensor sample_sequence(const DiffusionModel& model, const Tensor& s_tokens,
                              const Tensor& d_tokens, const NoiseSchedule& schedule,
                              int64_t sample_steps, Rng& rng) {
  const int64_t nu = d_tokens.dim(0);
  const int64_t H = model.H, W = model.W;
  Tensor x({nu, 3, H, W});
  {
    Tensor init = rng.normal_tensor({3, H, W});
    for (int64_t i = 0; i < nu; ++i)
      std::memcpy(x.data() + i * init.size(), init.data(), init.size() * sizeof(float));
  }
  Var s = ag::make_const(s_tokens.reshaped({1, s_tokens.dim(0)}).clone());
  Var d = ag::make_const(d_tokens.reshaped({1, nu, d_tokens.dim(1)}).clone());
  Var ctx = model.context(s, d);  // [nu, 2, ctx]

  const auto ts = schedule.strided_timesteps(sample_steps);
  for (size_t i = 0; i < ts.size(); ++i) {
    const int64_t t = ts[i];
    const int64_t t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
    std::vector<int64_t> tvec(static_cast<size_t>(nu), t);
    Var eps_hat = model.denoiser.predict_noise(ag::make_const(x.clone()), tvec, ctx);
    Tensor z = rng.normal_tensor({3, H, W});
    // Effective one-jump schedule t -> t_next: alpha_eff = abar_t / abar_{t_next}.
    const double abar_t = schedule.alpha_bar(t);
    const double abar_n = t_next >= 1 ? schedule.alpha_bar(t_next) : 1.0;
    const double alpha_eff = abar_t / abar_n;
    const double beta_eff = 1.0 - alpha_eff;
    const float c0 = static_cast<float>(1.0 / std::sqrt(alpha_eff));
    const float c1 = static_cast<float>(beta_eff / std::sqrt(1.0 - abar_t));
    const float sigma = t_next >= 1 ? static_cast<float>(std::sqrt(beta_eff)) : 0.0f;
    Tensor next(x.shape());
    const int64_t per_frame = 3 * H * W;
    const float* xs = x.data();
    const float* es = eps_hat->value.data();
    const float* zs = z.data();
    float* ys = next.data();
    for (int64_t f = 0; f < nu; ++f)
      for (int64_t j = 0; j < per_frame; ++j) {
        const int64_t k = f * per_frame + j;
        ys[k] = c0 * (xs[k] - c1 * es[k]) + sigma * zs[j];
      }
    x = next;
  }
  return x;
}

}  // namespace divid
