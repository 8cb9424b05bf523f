#include <gtest/gtest.h>

#include "divid/training.hpp"

using namespace divid;

namespace {

RunConfig small_run_cfg() {
  RunConfig cfg;
  cfg.encoder.base_channels = 8;
  cfg.encoder.channel_mult = {1, 1, 2};
  cfg.encoder.res_blocks = 1;
  cfg.encoder.embed_channels = 2;
  cfg.encoder.token_dim = 16;
  cfg.encoder.mlp_hidden = 32;
  cfg.encoder.lstm_hidden = 16;
  cfg.encoder.attn_heads = 4;
  cfg.encoder.max_frames = 8;
  cfg.denoiser.base_channels = 8;
  cfg.denoiser.channel_mult = {1, 1, 2, 2};
  cfg.denoiser.res_blocks = 1;
  cfg.denoiser.context_dim = 16;
  cfg.denoiser.attn_heads = 4;
  cfg.schedule.T = 50;
  cfg.train.batch_size = 2;
  cfg.train.lr = 2e-3;
  cfg.train.steps = 10;
  cfg.train.seed = 7;
  cfg.train.checkpoint_interval = 5;
  cfg.train.log_interval = 5;
  return cfg;
}

std::vector<VideoClip> synthetic_clips(int n, int64_t nu, uint64_t seed) {
  SpriteFactorSpec spec = SpriteFactorSpec::defaults();
  spec.height = 16;
  spec.width = 16;
  spec.sprite_size = 7.0;
  spec.num_frames = nu;
  std::vector<VideoClip> clips;
  for (int i = 0; i < n; ++i)
    clips.push_back(generate_sprite_clip(i % 6, (i + 1) % 6, spec, seed + static_cast<uint64_t>(i)));
  return clips;
}

std::vector<const VideoClip*> ptrs(const std::vector<VideoClip>& clips) {
  std::vector<const VideoClip*> p;
  for (const auto& c : clips) p.push_back(&c);
  return p;
}

}  // namespace

TEST(Training, LossOrthHandValue) {
  // s = (1,2), d = (3,4): (1*3 + 2*4)^2 = 121
  Tensor s({1, 2});
  s[0] = 1.0f;
  s[1] = 2.0f;
  Tensor d({1, 1, 2});
  d[0] = 3.0f;
  d[1] = 4.0f;
  Var l = loss_orth(ag::make_const(s), ag::make_const(d));
  EXPECT_NEAR(l->value.item(), 121.0, 1e-4);
}

TEST(Training, LossOrthBatchMeanAndFrameSum) {
  // independently computed in double: mean over batch of sum_i (s.d_i)^2
  Rng rng(17);
  const int64_t B = 3, nu = 4, D = 5;
  Tensor s = rng.normal_tensor({B, D});
  Tensor d = rng.normal_tensor({B, nu, D});
  double want = 0.0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < nu; ++i) {
      double dot = 0.0;
      for (int64_t k = 0; k < D; ++k)
        dot += static_cast<double>(s[static_cast<size_t>(b * D + k)]) *
               static_cast<double>(d[static_cast<size_t>(b * nu * D + i * D + k)]);
      want += dot * dot;
    }
  want /= static_cast<double>(B);
  Var l = loss_orth(ag::make_const(s), ag::make_const(d));
  EXPECT_NEAR(l->value.item(), want, 1e-4 * std::abs(want));
}

TEST(Training, LossOrthGradientFiniteDifference) {
  Rng rng(19);
  Tensor s0 = rng.normal_tensor({2, 3});
  Tensor d0 = rng.normal_tensor({2, 2, 3});
  Var s = ag::make_leaf(s0.clone());
  Var d = ag::make_leaf(d0.clone());
  Var l = loss_orth(s, d);
  ag::backward(l);
  auto eval = [&](const Tensor& sv, const Tensor& dv) {
    return loss_orth(ag::make_const(sv), ag::make_const(dv))->value.item();
  };
  const float eps = 1e-3f;
  for (size_t k = 0; k < s0.size(); ++k) {
    Tensor sp = s0.clone(), sm = s0.clone();
    sp[k] += eps;
    sm[k] -= eps;
    const double fd = (eval(sp, d0) - eval(sm, d0)) / (2.0 * eps);
    EXPECT_NEAR(s->grad[k], fd, 5e-2 * std::max(1.0, std::abs(fd)));
  }
  for (size_t k = 0; k < d0.size(); ++k) {
    Tensor dp = d0.clone(), dm = d0.clone();
    dp[k] += eps;
    dm[k] -= eps;
    const double fd = (eval(s0, dp) - eval(s0, dm)) / (2.0 * eps);
    EXPECT_NEAR(d->grad[k], fd, 5e-2 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Training, LossOrthShapeMismatch) {
  Rng rng(23);
  Var s = ag::make_const(rng.normal_tensor({2, 4}));
  Var d = ag::make_const(rng.normal_tensor({2, 3, 5}));
  EXPECT_THROW(loss_orth(s, d), std::invalid_argument);
}

TEST(Training, SharedNoiseOneDrawPerClip) {
  RunConfig cfg = small_run_cfg();
  DiffusionModel model = build_model(cfg.encoder, cfg.denoiser, 16, 16, 1);
  NoiseSchedule sched = NoiseSchedule::make(50, 1e-4f, 0.02f, "linear");
  auto clips = synthetic_clips(3, 3, 100);
  Rng base(3);
  CountingNoiseSource noise(base);
  Rng t_rng(5);
  auto batch = ptrs(clips);
  total_loss(model, batch, sched, 0.1, noise, t_rng);
  EXPECT_EQ(noise.draws(), 3);  // exactly one eps per clip, shared by frames
}

TEST(Training, OracleDenoiserRecoversZeroLoss) {
  // eps_hat == eps reconstructed from x_t makes L_simple vanish
  RunConfig cfg = small_run_cfg();
  DiffusionModel model = build_model(cfg.encoder, cfg.denoiser, 16, 16, 2);
  NoiseSchedule sched = NoiseSchedule::make(50, 1e-4f, 0.02f, "linear");
  auto clips = synthetic_clips(2, 3, 200);
  auto batch = ptrs(clips);
  const int64_t nu = 3, H = 16, W = 16;
  PredictFn oracle = [&](const Var& noisy, const std::vector<int64_t>& tvec, const Var&) {
    Tensor out(noisy->value.shape());
    const int64_t per = 3 * H * W;
    for (size_t n = 0; n < tvec.size(); ++n) {
      const double abar = sched.alpha_bar(tvec[n]);
      const float* clean =
          batch[n / static_cast<size_t>(nu)]->frames.data() + (n % static_cast<size_t>(nu)) * per;
      for (int64_t k = 0; k < per; ++k)
        out[n * static_cast<size_t>(per) + static_cast<size_t>(k)] = static_cast<float>(
            (noisy->value[n * static_cast<size_t>(per) + static_cast<size_t>(k)] -
             std::sqrt(abar) * clean[k]) /
            std::sqrt(1.0 - abar));
    }
    return ag::make_const(out);
  };
  Rng base(7);
  CountingNoiseSource noise(base);
  Rng t_rng(9);
  auto [loss, bd] = total_loss(model, batch, sched, 0.0, noise, t_rng, false, oracle);
  EXPECT_LT(bd.simple, 1e-5);
}

TEST(Training, ZeroDenoiserGivesMeanAbsNoise) {
  // eps_hat == 0 -> L_simple = mean |eps| ~ sqrt(2/pi) = 0.7979
  RunConfig cfg = small_run_cfg();
  DiffusionModel model = build_model(cfg.encoder, cfg.denoiser, 16, 16, 3);
  NoiseSchedule sched = NoiseSchedule::make(50, 1e-4f, 0.02f, "linear");
  auto clips = synthetic_clips(4, 3, 300);
  auto batch = ptrs(clips);
  PredictFn zero = [](const Var& noisy, const std::vector<int64_t>&, const Var&) {
    return ag::make_const(Tensor::zeros(noisy->value.shape()));
  };
  Rng base(11);
  CountingNoiseSource noise(base);
  Rng t_rng(13);
  auto [loss, bd] = total_loss(model, batch, sched, 0.0, noise, t_rng, false, zero);
  EXPECT_NEAR(bd.simple, std::sqrt(2.0 / M_PI), 0.06);
}

TEST(Training, LambdaScalesOrthTermLinearly) {
  RunConfig cfg = small_run_cfg();
  DiffusionModel model = build_model(cfg.encoder, cfg.denoiser, 16, 16, 4);
  NoiseSchedule sched = NoiseSchedule::make(50, 1e-4f, 0.02f, "linear");
  auto clips = synthetic_clips(2, 3, 400);
  auto batch = ptrs(clips);
  auto run = [&](double lambda) {
    Rng base(17);
    CountingNoiseSource noise(base);
    Rng t_rng(19);
    auto [loss, bd] = total_loss(model, batch, sched, lambda, noise, t_rng);
    return bd;
  };
  LossBreakdown b0 = run(0.0);
  LossBreakdown b1 = run(0.5);
  EXPECT_NEAR(b0.simple, b1.simple, 1e-7);
  EXPECT_NEAR(b0.orth, b1.orth, 1e-7);
  EXPECT_NEAR(b0.total, b0.simple, 1e-9);
  EXPECT_NEAR(b1.total, b1.simple + 0.5 * b1.orth, 1e-6);
}

TEST(Training, StepsReduceLossOnTinyProblem) {
  RunConfig cfg = small_run_cfg();
  cfg.train.steps = 30;
  auto clips = synthetic_clips(4, 3, 500);
  TrainState st = init_train_state(cfg, 16, 16);
  std::vector<double> losses;
  for (int i = 0; i < 30; ++i) losses.push_back(train_step(st, clips).total);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) head += losses[static_cast<size_t>(i)];
  for (int i = 20; i < 30; ++i) tail += losses[static_cast<size_t>(i)];
  EXPECT_LT(tail, head);
  EXPECT_EQ(st.step, 30);
}

TEST(Training, CheckpointRoundTripIsByteIdentical) {
  auto dir = fs::temp_directory_path() / "divid_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunConfig cfg = small_run_cfg();
  auto clips = synthetic_clips(4, 3, 600);
  TrainState st = init_train_state(cfg, 16, 16);
  for (int i = 0; i < 3; ++i) train_step(st, clips);
  const std::string p1 = (dir / "a.ckpt").string();
  const std::string p2 = (dir / "b.ckpt").string();
  save_checkpoint(st, p1);
  TrainState st2 = load_checkpoint(p1);
  save_checkpoint(st2, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  ASSERT_FALSE(s1.empty());
  EXPECT_EQ(s1, s2);
  fs::remove_all(dir);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  auto dir = fs::temp_directory_path() / "divid_test_resume";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunConfig cfg = small_run_cfg();
  auto clips = synthetic_clips(4, 3, 700);

  TrainState a = init_train_state(cfg, 16, 16);
  std::vector<double> full;
  for (int i = 0; i < 10; ++i) full.push_back(train_step(a, clips).total);

  TrainState b = init_train_state(cfg, 16, 16);
  for (int i = 0; i < 5; ++i) train_step(b, clips);
  const std::string p = (dir / "mid.ckpt").string();
  save_checkpoint(b, p);
  TrainState c = load_checkpoint(p);
  EXPECT_EQ(c.step, 5);
  for (int i = 5; i < 10; ++i) {
    const double got = train_step(c, clips).total;
    EXPECT_NEAR(got, full[static_cast<size_t>(i)], 1e-6) << "step " << i;
  }
  fs::remove_all(dir);
}

TEST(Training, LoadRejectsMismatchedModel) {
  auto dir = fs::temp_directory_path() / "divid_test_mismatch";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunConfig cfg = small_run_cfg();
  TrainState st = init_train_state(cfg, 16, 16);
  const std::string p = (dir / "m.ckpt").string();
  save_checkpoint(st, p);
  CheckpointData ck = read_checkpoint_file(p);
  RunConfig other = cfg;
  other.encoder.token_dim = 32;  // different parameter shapes
  DiffusionModel m2 = build_model(other.encoder, other.denoiser, 16, 16, 1);
  EXPECT_THROW(apply_params(ck, *m2.params), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Training, TrainRunWritesArtifactsAndMetrics) {
  auto dir = fs::temp_directory_path() / "divid_test_trainrun";
  fs::remove_all(dir);
  // build a small on-disk dataset
  SpriteFactorSpec spec = SpriteFactorSpec::defaults();
  spec.height = 16;
  spec.width = 16;
  spec.sprite_size = 7.0;
  spec.num_frames = 3;
  generate_split(spec, (dir / "data").string(), "train", 6, 42);
  RunConfig cfg = small_run_cfg();
  cfg.data.dir = (dir / "data").string();
  cfg.train.steps = 6;
  cfg.train.checkpoint_interval = 3;
  cfg.train.log_interval = 2;
  std::vector<LossBreakdown> curve;
  const std::string ckpt = train(cfg, (dir / "run").string(), &curve);
  EXPECT_TRUE(fs::exists(ckpt));
  EXPECT_EQ(curve.size(), 6u);
  std::ifstream log((dir / "run" / "metrics.ndjson").string());
  ASSERT_TRUE(log.good());
  int lines = 0;
  std::string line;
  while (std::getline(log, line)) {
    json j = json::parse(line);
    EXPECT_TRUE(j.contains("loss_simple"));
    EXPECT_TRUE(j.contains("loss_orth"));
    ++lines;
  }
  EXPECT_EQ(lines, 3);  // steps 2, 4, 6
  // checkpoint reloads into a usable model
  auto [model, loaded_cfg] = load_model(ckpt);
  EXPECT_EQ(loaded_cfg.train.steps, 6);
  fs::remove_all(dir);
}
