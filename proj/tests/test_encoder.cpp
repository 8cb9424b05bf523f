#include <gtest/gtest.h>

#include "divid/encoder.hpp"

using namespace divid;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig c;
  c.base_channels = 8;
  c.channel_mult = {1, 1, 2};
  c.res_blocks = 1;
  c.embed_channels = 2;
  c.token_dim = 16;
  c.mlp_hidden = 32;
  c.lstm_hidden = 16;
  c.attn_heads = 4;
  c.max_frames = 8;
  return c;
}

}  // namespace

TEST(Encoder, TokenShapes) {
  nn::ParamStore ps(1);
  SequenceEncoder enc(ps, small_cfg(), 16, 16);
  Rng rng(3);
  Var clips = ag::make_const(rng.normal_tensor({2, 4, 3, 16, 16}));
  LatentFactors lat = enc.encode_sequence(clips);
  ASSERT_EQ(lat.static_token->value.ndim(), 2);
  EXPECT_EQ(lat.static_token->value.dim(0), 2);
  EXPECT_EQ(lat.static_token->value.dim(1), 16);
  ASSERT_EQ(lat.dynamic_tokens->value.ndim(), 3);
  EXPECT_EQ(lat.dynamic_tokens->value.dim(0), 2);
  EXPECT_EQ(lat.dynamic_tokens->value.dim(1), 4);
  EXPECT_EQ(lat.dynamic_tokens->value.dim(2), 16);
}

TEST(Encoder, StaticTokenDependsOnlyOnFirstFrame) {
  nn::ParamStore ps(1);
  SequenceEncoder enc(ps, small_cfg(), 16, 16);
  Rng rng(5);
  Tensor base = rng.normal_tensor({1, 4, 3, 16, 16});
  Tensor later = base.clone();
  // overwrite frames 2..4 with fresh noise
  Tensor noise = rng.normal_tensor({3, 3, 16, 16});
  std::memcpy(later.data() + 3 * 16 * 16, noise.data(), noise.size() * sizeof(float));
  Tensor s0 = enc.encode_sequence(ag::make_const(base.clone())).static_token->value;
  Tensor s1 = enc.encode_sequence(ag::make_const(later)).static_token->value;
  EXPECT_EQ(max_abs_diff(s0, s1), 0.0f);

  Tensor first = base.clone();
  first[0] += 0.5f;
  Tensor s2 = enc.encode_sequence(ag::make_const(first)).static_token->value;
  EXPECT_GT(max_abs_diff(s0, s2), 0.0f);
}

TEST(Encoder, ResidualsAnchorFirstFrame) {
  Rng rng(7);
  Tensor f = rng.normal_tensor({2, 5, 2, 4, 4});
  Var r = SequenceEncoder::compute_residuals(ag::make_const(f.clone()));
  ASSERT_EQ(r->value.ndim(), 3);
  const int64_t D = 2 * 4 * 4;
  EXPECT_EQ(r->value.dim(2), D);
  for (int64_t b = 0; b < 2; ++b) {
    // r_1 is exactly zero
    for (int64_t k = 0; k < D; ++k)
      EXPECT_FLOAT_EQ(r->value[static_cast<size_t>(b * 5 * D + k)], 0.0f);
    // r_i = f_i - f_1 elementwise
    for (int64_t i = 1; i < 5; ++i)
      for (int64_t k = 0; k < D; ++k) {
        const size_t off = static_cast<size_t>(b * 5 * D + i * D + k);
        const size_t f1off = static_cast<size_t>(b * 5 * D + k);
        EXPECT_FLOAT_EQ(r->value[off], f[off] - f[f1off]);
      }
  }
}

TEST(Encoder, ResidualsInvariantToCommonOffset) {
  Rng rng(9);
  Tensor f = rng.normal_tensor({1, 4, 2, 4, 4});
  Tensor offset = rng.normal_tensor({2, 4, 4});
  Tensor shifted = f.clone();
  for (int64_t i = 0; i < 4; ++i)
    for (size_t k = 0; k < offset.size(); ++k)
      shifted[static_cast<size_t>(i) * offset.size() + k] += offset[k];
  Var r0 = SequenceEncoder::compute_residuals(ag::make_const(f.clone()));
  Var r1 = SequenceEncoder::compute_residuals(ag::make_const(shifted));
  EXPECT_LT(max_abs_diff(r0->value, r1->value), 1e-5f);
}

TEST(Encoder, DynamicTokensAreOrderSensitive) {
  nn::ParamStore ps(11);
  SequenceEncoder enc(ps, small_cfg(), 16, 16);
  Rng rng(13);
  Tensor clip = rng.normal_tensor({1, 4, 3, 16, 16});
  Tensor swapped = clip.clone();
  // swap frames 2 and 3 (first frame untouched)
  const int64_t fsz = 3 * 16 * 16;
  std::vector<float> tmp(static_cast<size_t>(fsz));
  std::memcpy(tmp.data(), swapped.data() + 2 * fsz, tmp.size() * sizeof(float));
  std::memcpy(swapped.data() + 2 * fsz, swapped.data() + 3 * fsz, tmp.size() * sizeof(float));
  std::memcpy(swapped.data() + 3 * fsz, tmp.data(), tmp.size() * sizeof(float));
  Tensor d0 = enc.encode_sequence(ag::make_const(clip.clone())).dynamic_tokens->value;
  Tensor d1 = enc.encode_sequence(ag::make_const(swapped)).dynamic_tokens->value;
  EXPECT_GT(max_abs_diff(d0, d1), 1e-6f);
}

TEST(Encoder, GradientsReachConvStem) {
  nn::ParamStore ps(17);
  SequenceEncoder enc(ps, small_cfg(), 16, 16);
  Rng rng(19);
  Var clips = ag::make_const(rng.normal_tensor({1, 3, 3, 16, 16}));
  ps.zero_grad();
  LatentFactors lat = enc.encode_sequence(clips);
  Var loss = ag::add(ag::mean_all(ag::square(lat.static_token)),
                     ag::mean_all(ag::square(lat.dynamic_tokens)));
  ag::backward(loss);
  float g = 0.0f;
  const Tensor& grad = ps.get("encoder.conv_in.w")->grad;
  for (size_t k = 0; k < grad.size(); ++k) g = std::max(g, std::abs(grad[k]));
  EXPECT_GT(g, 0.0f);
}

TEST(Encoder, RejectsBadGeometry) {
  nn::ParamStore ps(1);
  EXPECT_THROW(SequenceEncoder(ps, small_cfg(), 15, 16), std::invalid_argument);
  EncoderConfig two_levels = small_cfg();
  two_levels.channel_mult = {1, 2};
  nn::ParamStore ps2(1);
  EXPECT_THROW(SequenceEncoder(ps2, two_levels, 16, 16), std::invalid_argument);
}

TEST(Encoder, RejectsTooManyFrames) {
  nn::ParamStore ps(1);
  EncoderConfig cfg = small_cfg();
  cfg.max_frames = 2;
  SequenceEncoder enc(ps, cfg, 16, 16);
  Rng rng(23);
  Var clips = ag::make_const(rng.normal_tensor({1, 3, 3, 16, 16}));
  EXPECT_THROW(enc.encode_sequence(clips), std::invalid_argument);
}
