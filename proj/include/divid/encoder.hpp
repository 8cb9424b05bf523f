#pragma once

#include "divid/config.hpp"
#include "divid/nn.hpp"

namespace divid {

using ag::Var;

// Residual conv block; time conditioning is optional (the frame encoder
// uses none, the denoiser passes FiLM scale/shift).
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(nn::ParamStore& ps, const std::string& name, int64_t in_ch, int64_t out_ch,
           int64_t temb_dim = 0)
      : has_temb_(temb_dim > 0), needs_skip_(in_ch != out_ch) {
    norm1_ = nn::GroupNorm(ps, name + ".norm1", in_ch);
    conv1_ = nn::Conv2d(ps, name + ".conv1", in_ch, out_ch, 3);
    norm2_ = nn::GroupNorm(ps, name + ".norm2", out_ch);
    conv2_ = nn::Conv2d(ps, name + ".conv2", out_ch, out_ch, 3);
    if (has_temb_) emb_ = nn::Linear(ps, name + ".emb", temb_dim, 2 * out_ch);
    if (needs_skip_) skip_ = nn::Conv2d(ps, name + ".skip", in_ch, out_ch, 1);
    out_ch_ = out_ch;
  }

  Var operator()(const Var& x, const Var& temb = nullptr) const {
    Var h = conv1_(ag::silu(norm1_(x)));
    h = norm2_(h);
    if (has_temb_) {
      if (!temb) throw std::logic_error("ResBlock: missing time embedding");
      Var ss = emb_(ag::silu(temb));  // [N, 2*out_ch]
      Var sc = ag::slice_last(ss, 0, out_ch_);
      Var sh = ag::slice_last(ss, out_ch_, out_ch_);
      h = ag::film(h, sc, sh);
    }
    h = conv2_(ag::silu(h));
    return ag::add(h, needs_skip_ ? skip_(x) : x);
  }

 private:
  bool has_temb_ = false, needs_skip_ = false;
  int64_t out_ch_ = 0;
  nn::GroupNorm norm1_, norm2_;
  nn::Conv2d conv1_, conv2_, skip_;
  nn::Linear emb_;
};

struct LatentFactors {
  Var static_token;    // [B, token_dim]
  Var dynamic_tokens;  // [B, nu, token_dim]
};

// Sequence encoder: per-frame conv features, first-frame static MLP, and
// residual-driven dynamic tokens via a bidirectional LSTM + self-attention.
class SequenceEncoder {
 public:
  SequenceEncoder() = default;
  SequenceEncoder(nn::ParamStore& ps, const EncoderConfig& cfg, int64_t H, int64_t W)
      : cfg_(cfg), H_(H), W_(W) {
    if (H % 4 != 0 || W % 4 != 0)
      throw std::invalid_argument("SequenceEncoder: H and W must be divisible by 4");
    if (cfg.channel_mult.size() != 3)
      throw std::invalid_argument("SequenceEncoder: expects three resolution levels");
    const std::string p = "encoder";
    conv_in_ = nn::Conv2d(ps, p + ".conv_in", 3, cfg.base_channels, 3);
    int64_t ch = cfg.base_channels;
    const size_t levels = cfg.channel_mult.size();
    for (size_t l = 0; l < levels; ++l) {
      const int64_t out_ch = cfg.base_channels * cfg.channel_mult[l];
      for (int b = 0; b < cfg.res_blocks; ++b) {
        blocks_.emplace_back(ps, p + ".down" + std::to_string(l) + ".res" + std::to_string(b), ch,
                             out_ch);
        ch = out_ch;
      }
      if (l + 1 < levels)
        downs_.emplace_back(ps, p + ".down" + std::to_string(l) + ".downsample", ch, ch, 3, 2);
    }
    out_norm_ = nn::GroupNorm(ps, p + ".out_norm", ch);
    proj_ = nn::Conv2d(ps, p + ".proj", ch, cfg.embed_channels, 1);

    feat_dim_ = cfg.embed_channels * (H / 4) * (W / 4);
    mlp1_ = nn::Linear(ps, p + ".static.mlp1", feat_dim_, cfg.mlp_hidden);
    mlp2_ = nn::Linear(ps, p + ".static.mlp2", cfg.mlp_hidden, cfg.mlp_hidden);
    mlp_out_ = nn::Linear(ps, p + ".static.proj", cfg.mlp_hidden, cfg.token_dim);

    lstm_ = nn::BiLSTM(ps, p + ".dynamic.lstm", feat_dim_, cfg.lstm_hidden);
    lstm_proj_ = nn::Linear(ps, p + ".dynamic.lstm_proj", 2 * cfg.lstm_hidden, cfg.token_dim);
    pos_emb_ = ps.add(p + ".dynamic.pos_emb",
                      ps.init_rng().normal_tensor({cfg.max_frames, cfg.token_dim}, 0.02));
    attn_ = nn::MultiHeadAttention(ps, p + ".dynamic.attn", cfg.token_dim, cfg.attn_heads);
    attn_norm_ = nn::LayerNorm(ps, p + ".dynamic.attn_norm", cfg.token_dim);
    dyn_out_ = nn::Linear(ps, p + ".dynamic.proj", cfg.token_dim, cfg.token_dim);
  }

  // frames: [N, 3, H, W] (frames of one or more clips, flattened) ->
  // per-frame features [N, c_e, H/4, W/4]; each frame independent.
  Var encode_frames(const Var& frames) const {
    if (frames->value.dim(2) % 4 != 0 || frames->value.dim(3) % 4 != 0)
      throw std::invalid_argument("encode_frames: spatial dims must be divisible by 4");
    Var h = conv_in_(frames);
    size_t bi = 0, di = 0;
    const size_t levels = cfg_.channel_mult.size();
    for (size_t l = 0; l < levels; ++l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) h = blocks_[bi++](h);
      if (l + 1 < levels) h = downs_[di++](h);
    }
    return proj_(ag::silu(out_norm_(h)));
  }

  // f: [B, nu, c_e, h_e, w_e] -> residuals with r_1 = 0, r_i = f_i - f_1.
  static Var compute_residuals(const Var& f) {
    const int64_t B = f->value.dim(0), nu = f->value.dim(1);
    Var f1 = ag::slice_axis1(flatten_feat(f), 0);  // [B, 1, D]
    Var f1b = f1;
    if (nu > 1) {
      std::vector<Var> reps(static_cast<size_t>(nu), f1);
      // broadcast along frame axis via concat of the same node
      Var tiled = concat_frames(reps);  // [B, nu, D]
      return ag::sub(flatten_feat(f), tiled);
    }
    return ag::sub(flatten_feat(f), f1b);
  }

  // [B, c_e*h_e*w_e] first-frame features -> [B, token_dim]
  Var static_token(const Var& f1_flat) const {
    Var h = ag::relu(mlp1_(f1_flat));
    h = ag::relu(mlp2_(h));
    return mlp_out_(h);
  }

  // residuals [B, nu, feat_dim] -> [B, nu, token_dim]
  Var dynamic_tokens(const Var& residuals) const {
    const int64_t B = residuals->value.dim(0), nu = residuals->value.dim(1);
    if (nu > cfg_.max_frames)
      throw std::invalid_argument("dynamic_tokens: clip longer than max_frames");
    Var h = lstm_(residuals);     // [B, nu, 2*hidden]
    h = lstm_proj_(h);            // [B, nu, token_dim]
    Var pos = ag::slice0(pos_emb_, 0, nu);                       // [nu, token_dim]
    Var posb = ag::broadcast0(ag::reshape(pos, {1, nu, cfg_.token_dim}), B);
    h = ag::add(h, posb);
    Var a = attn_(h, h);          // self-attention
    h = attn_norm_(ag::add(h, a));
    return dyn_out_(h);
  }

  // clip frames [B, nu, 3, H, W] -> (s [B, token_dim], d [B, nu, token_dim])
  LatentFactors encode_sequence(const Var& clips) const {
    const int64_t B = clips->value.dim(0), nu = clips->value.dim(1);
    Var flat = ag::reshape(clips, {B * nu, 3, H_, W_});
    Var feats = encode_frames(flat);  // [B*nu, c_e, h/4, w/4]
    Var f = ag::reshape(feats, {B, nu, feat_dim_});
    Var f1 = ag::reshape(ag::slice_axis1(f, 0), {B, feat_dim_});
    Var residuals = compute_residuals(ag::reshape(f, {B, nu, cfg_.embed_channels, H_ / 4, W_ / 4}));
    return {static_token(f1), dynamic_tokens(residuals)};
  }

  int64_t feat_dim() const { return feat_dim_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  static Var flatten_feat(const Var& f) {
    const auto& s = f->value.shape();
    if (s.size() == 3) return f;
    int64_t d = 1;
    for (size_t i = 2; i < s.size(); ++i) d *= s[i];
    return ag::reshape(f, {s[0], s[1], d});
  }

  static Var concat_frames(const std::vector<Var>& per_frame) {
    // each [B, 1, D] -> [B, nu, D]
    std::vector<Var> l_major;
    for (const auto& p : per_frame) l_major.push_back(ag::permute(p, {1, 0, 2}));
    return ag::permute(ag::concat0(l_major), {1, 0, 2});
  }

  EncoderConfig cfg_;
  int64_t H_ = 0, W_ = 0, feat_dim_ = 0;
  nn::Conv2d conv_in_, proj_;
  std::vector<ResBlock> blocks_;
  std::vector<nn::Conv2d> downs_;
  nn::GroupNorm out_norm_;
  nn::Linear mlp1_, mlp2_, mlp_out_;
  nn::BiLSTM lstm_;
  nn::Linear lstm_proj_, dyn_out_;
  Var pos_emb_;
  nn::MultiHeadAttention attn_;
  nn::LayerNorm attn_norm_;
};

}  // namespace divid
