#include <gtest/gtest.h>

#include "divid/schedule.hpp"

using namespace divid;

TEST(Schedule, LinearBetasEndpoints) {
  NoiseSchedule s = NoiseSchedule::make(1000, 1e-4f, 0.02f, "linear");
  EXPECT_NEAR(s.beta(1), 1e-4, 1e-9);
  EXPECT_NEAR(s.beta(1000), 0.02, 1e-9);
  // betas strictly increasing
  for (int64_t t = 2; t <= 1000; ++t) EXPECT_GT(s.beta(t), s.beta(t - 1));
}

TEST(Schedule, AlphaBarSmallExample) {
  // T=2 with betas (0.1, 0.2): alpha_bar = (0.9, 0.72)
  NoiseSchedule s = NoiseSchedule::make(2, 0.1f, 0.2f, "linear");
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-6);
  EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-6);
}

TEST(Schedule, AlphaBarTerminalValue) {
  NoiseSchedule s = NoiseSchedule::make(1000, 1e-4f, 0.02f, "linear");
  // product form computed in double as an independent cross-check
  double prod = 1.0;
  for (int64_t t = 1; t <= 1000; ++t) {
    double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    prod *= 1.0 - beta;
  }
  EXPECT_NEAR(s.alpha_bar(1000), prod, 1e-8);
  EXPECT_NEAR(s.alpha_bar(1000), 4.04e-5, 1e-6);
}

TEST(Schedule, RejectsBadDomain) {
  EXPECT_THROW(NoiseSchedule::make(0, 1e-4f, 0.02f, "linear"), std::domain_error);
  EXPECT_THROW(NoiseSchedule::make(10, 0.0f, 0.02f, "linear"), std::domain_error);
  EXPECT_THROW(NoiseSchedule::make(10, 0.02f, 1e-4f, "linear"), std::domain_error);
  EXPECT_THROW(NoiseSchedule::make(10, 1e-4f, 1.0f, "linear"), std::domain_error);
  EXPECT_THROW(NoiseSchedule::make(10, 1e-4f, 0.02f, "cosine"), std::domain_error);
}

TEST(Schedule, ForwardDiffuseScalarCase) {
  // alpha_bar = 0.25: x_t = 0.5*x + sqrt(0.75)*eps; x=2, eps=1 -> 1.8660
  NoiseSchedule s = NoiseSchedule::make(1, 0.75f, 0.75f, "linear");
  ASSERT_NEAR(s.alpha_bar(1), 0.25, 1e-9);
  Tensor clean({1, 1, 1, 1});
  clean[0] = 2.0f;
  Tensor eps({1, 1, 1});
  eps[0] = 1.0f;
  NoisySequence ns = forward_diffuse(clean, 1, eps, s);
  EXPECT_NEAR(ns.frames[0], 0.5 * 2.0 + std::sqrt(0.75), 1e-4);
}

TEST(Schedule, ForwardDiffuseSharedNoiseAcrossFrames) {
  NoiseSchedule s = NoiseSchedule::make(100, 1e-4f, 0.02f, "linear");
  Rng rng(7);
  const int64_t nu = 4;
  Tensor clean = rng.normal_tensor({nu, 3, 8, 8});
  Tensor eps = rng.normal_tensor({3, 8, 8});
  NoisySequence ns = forward_diffuse(clean, 50, eps, s);
  const float sab = std::sqrt(s.alpha_bar(50));
  const float somab = std::sqrt(1.0f - s.alpha_bar(50));
  // every frame uses the same eps
  for (int64_t f = 0; f < nu; ++f)
    for (size_t k = 0; k < eps.size(); ++k) {
      const size_t off = static_cast<size_t>(f) * eps.size() + k;
      EXPECT_NEAR(ns.frames[off], sab * clean[off] + somab * eps[k], 1e-5);
    }
}

TEST(Schedule, ForwardDiffuseShapeErrors) {
  NoiseSchedule s = NoiseSchedule::make(10, 1e-4f, 0.02f, "linear");
  Tensor clean({2, 3, 4, 4});
  Tensor eps_bad({3, 4, 5});
  EXPECT_THROW(forward_diffuse(clean, 1, eps_bad, s), std::invalid_argument);
  Tensor eps({3, 4, 4});
  EXPECT_THROW(forward_diffuse(clean, 0, eps, s), std::domain_error);
  EXPECT_THROW(forward_diffuse(clean, 11, eps, s), std::domain_error);
}

TEST(Schedule, StridedTimestepsCoverEndpoints) {
  NoiseSchedule s = NoiseSchedule::make(1000, 1e-4f, 0.02f, "linear");
  auto ts = s.strided_timesteps(50);
  EXPECT_EQ(ts.front(), 1000);
  EXPECT_EQ(ts.back(), 1);
  EXPECT_EQ(static_cast<int64_t>(ts.size()), 50);
  for (size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
  // full-length stride visits every step
  auto full = s.strided_timesteps(1000);
  EXPECT_EQ(static_cast<int64_t>(full.size()), 1000);
  for (size_t i = 0; i < full.size(); ++i) EXPECT_EQ(full[i], 1000 - static_cast<int64_t>(i));
}
