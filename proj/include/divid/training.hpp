#pragma once

#include <chrono>
#include <fstream>

#include "divid/dataset.hpp"
#include "divid/serialize.hpp"
#include "divid/unet.hpp"

namespace divid {

// ---- losses ----

struct LossBreakdown {
  double total = 0.0;
  double simple = 0.0;
  double orth = 0.0;
};

// L_orth = mean over batch of sum_i (s . d_i)^2 on raw (unnormalized) tokens.
inline Var loss_orth(const Var& s, const Var& d, bool normalize_tokens = false) {
  const int64_t B = d->value.dim(0), nu = d->value.dim(1), D = d->value.dim(2);
  if (s->value.dim(0) != B || s->value.dim(1) != D)
    throw std::invalid_argument("loss_orth: token shape mismatch " + s->value.shape_str() +
                                " vs " + d->value.shape_str());
  Var sv = s, dv = d;
  if (normalize_tokens) {
    auto norm_rows = [](const Var& x, int64_t rows, int64_t dim) {
      Var flat = ag::reshape(x, {rows, dim});
      Var sq = ag::square(flat);
      // row-wise inverse norm via mean over last axis
      Var ssum = ag::scale(ag::mean_axis1(ag::reshape(sq, {rows, dim, 1})), static_cast<float>(dim));
      Tensor inv({rows, 1});
      for (int64_t r = 0; r < rows; ++r)
        inv[static_cast<size_t>(r)] = 1.0f / std::sqrt(ssum->value[static_cast<size_t>(r)] + 1e-8f);
      // treat the normalizer as a constant scale (stop-gradient through the norm)
      Tensor scaler({rows, dim});
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < dim; ++c) scaler[static_cast<size_t>(r * dim + c)] = inv[static_cast<size_t>(r)];
      return ag::mul(flat, ag::make_const(scaler));
    };
    sv = norm_rows(s, B, D);
    dv = ag::reshape(norm_rows(ag::reshape(d, {B * nu, D}), B * nu, D), {B, nu, D});
  }
  Var s3 = ag::reshape(sv, {B, D, 1});
  Var dots = ag::bmm(dv->value.ndim() == 3 ? dv : ag::reshape(dv, {B, nu, D}), s3);  // [B, nu, 1]
  return ag::scale(ag::sum_all(ag::square(dots)), 1.0f / static_cast<float>(B));
}

// Pluggable epsilon-predictor: (noisy frames, per-frame t, context) -> eps_hat.
// Tests substitute oracle predictors here; training uses the model's UNet.
using PredictFn = std::function<Var(const Var&, const std::vector<int64_t>&, const Var&)>;

// L_simple for one batch of clips. Per clip: t ~ U{1..T}, one shared eps;
// all frames diffused with that (t, eps); mean |eps_hat - eps| over
// frames, channels, pixels and clips. When injected_eps is given it receives
// the per-frame noise targets [B*nu, 3, H, W] actually used by the loss.
inline Var loss_simple(const DiffusionModel& model, const std::vector<const VideoClip*>& batch,
                       const Var& s, const Var& d, const NoiseSchedule& schedule,
                       CountingNoiseSource& noise, Rng& t_rng,
                       const PredictFn& predict_override = nullptr,
                       Tensor* injected_eps = nullptr) {
  const int64_t B = static_cast<int64_t>(batch.size());
  const int64_t nu = batch[0]->frames.dim(0);
  const int64_t H = model.H, W = model.W;
  Tensor noisy({B * nu, 3, H, W});
  Tensor eps_all({B * nu, 3, H, W});
  std::vector<int64_t> tvec(static_cast<size_t>(B * nu));
  for (int64_t b = 0; b < B; ++b) {
    const int64_t t = t_rng.uniform_int(1, schedule.steps());
    Tensor eps = noise.draw({3, H, W});  // exactly one draw per clip
    NoisySequence ns = forward_diffuse(batch[static_cast<size_t>(b)]->frames, t, eps, schedule);
    std::memcpy(noisy.data() + b * nu * 3 * H * W, ns.frames.data(),
                ns.frames.size() * sizeof(float));
    for (int64_t f = 0; f < nu; ++f) {
      std::memcpy(eps_all.data() + (b * nu + f) * 3 * H * W, eps.data(), eps.size() * sizeof(float));
      tvec[static_cast<size_t>(b * nu + f)] = t;
    }
  }
  if (injected_eps) *injected_eps = eps_all.clone();
  Var ctx = model.context(s, d);  // [B*nu, 2, ctx]
  Var noisy_in = ag::make_const(noisy);
  Var eps_hat = predict_override ? predict_override(noisy_in, tvec, ctx)
                                 : model.denoiser.predict_noise(noisy_in, tvec, ctx);
  return ag::mean_abs(ag::sub(eps_hat, ag::make_const(eps_all)));
}

// L = L_simple + lambda * L_orth; returns the scalar Var plus a breakdown.
inline std::pair<Var, LossBreakdown> total_loss(const DiffusionModel& model,
                                                const std::vector<const VideoClip*>& batch,
                                                const NoiseSchedule& schedule, double lambda,
                                                CountingNoiseSource& noise, Rng& t_rng,
                                                bool normalize_tokens = false,
                                                const PredictFn& predict_override = nullptr) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  const int64_t B = static_cast<int64_t>(batch.size());
  const int64_t nu = batch[0]->frames.dim(0);
  Tensor clips({B, nu, 3, model.H, model.W});
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(clips.data() + b * nu * 3 * model.H * model.W,
                batch[static_cast<size_t>(b)]->frames.data(),
                batch[static_cast<size_t>(b)]->frames.size() * sizeof(float));
  LatentFactors lat = model.encoder.encode_sequence(ag::make_const(clips));
  Var simple = loss_simple(model, batch, lat.static_token, lat.dynamic_tokens, schedule, noise,
                           t_rng, predict_override);
  Var orth = loss_orth(lat.static_token, lat.dynamic_tokens, normalize_tokens);
  Var total = ag::add(simple, ag::scale(orth, static_cast<float>(lambda)));
  LossBreakdown bd{total->value.item(), simple->value.item(), orth->value.item()};
  return {total, bd};
}

// ---- training loop ----

struct TrainState {
  DiffusionModel model;
  nn::Adam optimizer;
  NoiseSchedule schedule;
  RunConfig config;
  int64_t step = 0;
  Rng rng;  // drives t, eps, and batch sampling
};

inline TrainState init_train_state(const RunConfig& cfg, int64_t H, int64_t W) {
  TrainState st;
  st.config = cfg;
  st.model = build_model(cfg.encoder, cfg.denoiser, H, W, hash_combine(cfg.train.seed, 0x111));
  st.optimizer = nn::Adam(*st.model.params, static_cast<float>(cfg.train.lr));
  st.schedule = NoiseSchedule::make(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
                                    cfg.schedule.kind);
  st.rng = Rng(hash_combine(cfg.train.seed, 0x222));
  return st;
}

// One optimization step over a sampled batch; returns the loss breakdown.
inline LossBreakdown train_step(TrainState& st, const std::vector<VideoClip>& train_clips) {
  const int64_t B = std::min<int64_t>(st.config.train.batch_size,
                                      static_cast<int64_t>(train_clips.size()));
  std::vector<const VideoClip*> batch;
  for (int64_t i = 0; i < B; ++i)
    batch.push_back(
        &train_clips[static_cast<size_t>(st.rng.uniform_int(0, static_cast<int64_t>(train_clips.size()) - 1))]);
  CountingNoiseSource noise(st.rng);
  st.model.params->zero_grad();
  auto [loss, bd] = total_loss(st.model, batch, st.schedule, st.config.train.lambda_orth, noise,
                               st.rng, st.config.train.normalize_tokens_in_orth);
  if (!std::isfinite(bd.total))
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(st.step) +
                             " (simple=" + std::to_string(bd.simple) +
                             ", orth=" + std::to_string(bd.orth) + ")");
  ag::backward(loss);
  st.optimizer.step();
  ++st.step;
  return bd;
}

struct MetricLogger {
  std::ofstream out;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  explicit MetricLogger(const std::string& path) : out(path, std::ios::app) {
    if (!out) throw std::runtime_error("cannot open metric log: " + path);
  }

  void log(int64_t step, const LossBreakdown& bd) {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json j = {{"step", step},
              {"loss", bd.total},
              {"loss_simple", bd.simple},
              {"loss_orth", bd.orth},
              {"wallclock", wall}};
    out << j.dump() << "\n";
    out.flush();
  }
};

inline void save_checkpoint(TrainState& st, const std::string& path) {
  CheckpointData ck;
  ck.config = st.config.to_json();
  ck.height = st.model.H;
  ck.width = st.model.W;
  ck.step = st.step;
  ck.rng_state = st.rng.state();
  for (const auto& name : st.model.params->names())
    ck.params.emplace_back(name, st.model.params->get(name)->value.clone());
  for (auto& slot : st.optimizer.slots()) ck.adam_slots.emplace_back(slot.m.clone(), slot.v.clone());
  ck.adam_step = st.optimizer.step_count();
  write_checkpoint_file(ck, path);
}

inline TrainState load_checkpoint(const std::string& path) {
  CheckpointData ck = read_checkpoint_file(path);
  RunConfig cfg = RunConfig::from_json(ck.config);
  TrainState st = init_train_state(cfg, ck.height, ck.width);
  apply_params(ck, *st.model.params);
  apply_adam(ck, st.optimizer);
  st.step = ck.step;
  st.rng.set_state(ck.rng_state);
  return st;
}

// Load a model (without optimizer state) from a checkpoint for inference.
inline std::pair<DiffusionModel, RunConfig> load_model(const std::string& path) {
  CheckpointData ck = read_checkpoint_file(path);
  RunConfig cfg = RunConfig::from_json(ck.config);
  DiffusionModel model = build_model(cfg.encoder, cfg.denoiser, ck.height, ck.width,
                                     hash_combine(cfg.train.seed, 0x111));
  apply_params(ck, *model.params);
  return {std::move(model), cfg};
}

// Full training run; checkpoints periodically under out_dir and returns the
// final checkpoint path.
inline std::string train(const RunConfig& cfg, const std::string& out_dir,
                         std::vector<LossBreakdown>* curve = nullptr) {
  auto train_clips = load_split(cfg.data.dir, cfg.data.train_split);
  if (train_clips.empty()) throw std::runtime_error("train: empty training split");
  const int64_t H = train_clips[0].frames.dim(2), W = train_clips[0].frames.dim(3);
  TrainState st = init_train_state(cfg, H, W);
  fs::create_directories(out_dir);
  MetricLogger logger(out_dir + "/metrics.ndjson");
  const std::string last = out_dir + "/last.ckpt";
  while (st.step < cfg.train.steps) {
    LossBreakdown bd = train_step(st, train_clips);
    if (curve) curve->push_back(bd);
    if (st.step % cfg.train.log_interval == 0 || st.step == cfg.train.steps) logger.log(st.step, bd);
    if (st.step % cfg.train.checkpoint_interval == 0 || st.step == cfg.train.steps)
      save_checkpoint(st, last);
  }
  return last;
}

}  // namespace divid
