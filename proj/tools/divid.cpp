#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "divid/eval.hpp"
#include "divid/training.hpp"

namespace {

using namespace divid;

// --seed flag > DIVID_SEED env > config/default value.
uint64_t resolve_seed(const std::optional<uint64_t>& flag, uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("DIVID_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw std::invalid_argument("DIVID_SEED is not an unsigned integer: " + std::string(env));
    return static_cast<uint64_t>(v);
  }
  return fallback;
}

// Applies dotted-key overrides ("train.lr=3e-4") onto a config json tree.
void apply_overrides(json& root, const std::vector<std::string>& overrides) {
  for (const auto& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must be key=value: " + ov);
    const std::string key = ov.substr(0, eq);
    const std::string val = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(val);
    } catch (const json::parse_error&) {
      parsed = val;  // bare strings stay strings
    }
    json* node = &root;
    size_t pos = 0;
    while (true) {
      const size_t dot = key.find('.', pos);
      const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
      if (part.empty()) throw std::invalid_argument("bad override key: " + key);
      if (dot == std::string::npos) {
        (*node)[part] = parsed;
        break;
      }
      node = &(*node)[part];
      pos = dot + 1;
    }
  }
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    in >> j;
  }
  apply_overrides(j, overrides);
  return RunConfig::from_json(j);
}

// Every subcommand drops a snapshot of its fully resolved inputs beside its
// outputs so a run can be reproduced from the artifact directory alone.
void write_snapshot(const std::string& out_dir, const std::string& subcommand, const json& body) {
  fs::create_directories(out_dir);
  json j = body;
  j["subcommand"] = subcommand;
  std::ofstream out(out_dir + "/resolved_config.json");
  if (!out) throw std::runtime_error("cannot write resolved config snapshot in " + out_dir);
  out << j.dump(2) << "\n";
}

VideoClip clip_from_directory(const std::string& dir, int64_t H, int64_t W) {
  auto frames = load_frame_directory(dir, H, W);
  VideoClip clip;
  clip.clip_id = fs::path(dir).filename().string();
  clip.frames = Tensor({static_cast<int64_t>(frames.size()), 3, H, W});
  for (size_t f = 0; f < frames.size(); ++f)
    std::memcpy(clip.frames.data() + f * frames[f].size(), frames[f].data(),
                frames[f].size() * sizeof(float));
  return clip;
}

// rows of clips (equal frame counts) -> one PNG, one clip per row
void render_rows(const std::vector<const Tensor*>& rows, const std::string& path) {
  if (rows.empty()) throw std::invalid_argument("render_rows: nothing to draw");
  const int64_t nu = rows[0]->dim(0), H = rows[0]->dim(2), W = rows[0]->dim(3);
  const int64_t margin = 2;
  const int64_t R = static_cast<int64_t>(rows.size());
  cv::Mat img(static_cast<int>(R * H + (R + 1) * margin),
              static_cast<int>(nu * W + (nu + 1) * margin), CV_8UC3, cv::Scalar(40, 40, 40));
  for (int64_t r = 0; r < R; ++r) {
    if (rows[static_cast<size_t>(r)]->dim(0) != nu)
      throw std::invalid_argument("render_rows: frame counts differ");
    for (int64_t f = 0; f < nu; ++f) {
      const float* fr = rows[static_cast<size_t>(r)]->data() + f * 3 * H * W;
      const int64_t y0 = margin + r * (H + margin);
      const int64_t x0 = margin + f * (W + margin);
      for (int64_t y = 0; y < H; ++y) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y0 + y));
        for (int64_t x = 0; x < W; ++x)
          for (int c = 0; c < 3; ++c) {
            const float v = (fr[c * H * W + y * W + x] + 1.0f) / 2.0f * 255.0f;
            row[x0 + x][2 - c] =
                static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 255.0f)));
          }
      }
    }
  }
  if (!fs::path(path).parent_path().empty()) fs::create_directories(fs::path(path).parent_path());
  if (!cv::imwrite(path, img)) throw std::runtime_error("failed to write image: " + path);
}

JudgeClassifier obtain_judge(const std::string& judge_path, const std::string& data_dir,
                             uint64_t seed, int64_t steps, const std::string& out_dir) {
  if (!judge_path.empty() && fs::exists(judge_path)) {
    auto [judge, rep] = load_judge(judge_path);
    std::cerr << "loaded judge (identity " << rep.identity_acc << "%, motion " << rep.motion_acc
              << "%)\n";
    return judge;
  }
  auto train_clips = load_split(data_dir, "train");
  auto val_clips = load_split(data_dir, "val");
  std::cerr << "training judge on " << train_clips.size() << " clips...\n";
  auto [judge, rep] = train_judge(train_clips, val_clips, seed, steps);
  std::cerr << "judge held-out accuracy: identity " << rep.identity_acc << "%, motion "
            << rep.motion_acc << "%\n";
  const std::string save_path = judge_path.empty() ? out_dir + "/judge.ckpt" : judge_path;
  save_judge(judge, rep, save_path);
  return judge;
}

int run(int argc, char** argv) {
  CLI::App app{"static/dynamic video disentanglement: data, training, and evaluation"};
  app.require_subcommand(1);

  std::optional<uint64_t> seed_flag;
  std::vector<std::string> overrides;
  std::string config_path, out_dir, data_dir, ckpt_path;

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write a labeled synthetic sprite dataset");
  int64_t num_clips = 180, val_clips = 72, test_clips = 72, frames = 8;
  std::vector<int64_t> resolution = {32, 32};
  gen->add_option("--out", out_dir, "dataset root directory")->required();
  gen->add_option("--num-clips", num_clips, "clips in the train split");
  gen->add_option("--val-clips", val_clips, "clips in the val split");
  gen->add_option("--test-clips", test_clips, "clips in the test split");
  gen->add_option("--seed", seed_flag, "global seed");
  gen->add_option("--frames", frames, "frames per clip");
  gen->add_option("--resolution", resolution, "frame height and width")->expected(2);

  // train
  auto* tr = app.add_subcommand("train", "train the diffusion model");
  tr->add_option("--config", config_path, "run config json");
  tr->add_option("--out", out_dir, "run output directory")->required();
  tr->add_option("--data", data_dir, "dataset root (overrides config data.dir)");
  tr->add_option("--seed", seed_flag, "training seed (overrides config train.seed)");
  tr->add_option("--set", overrides, "dotted-key config override, e.g. train.lr=3e-4");
  std::string resume_path;
  tr->add_option("--resume", resume_path, "checkpoint to resume from");

  // sample
  auto* sa = app.add_subcommand("sample", "reconstruct a dataset clip through the model");
  std::string split = "test";
  int64_t clip_index = 0, sample_steps = 0;
  std::string out_png;
  sa->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  sa->add_option("--data", data_dir, "dataset root")->required();
  sa->add_option("--split", split, "dataset split");
  sa->add_option("--index", clip_index, "clip index within the split");
  sa->add_option("--steps", sample_steps, "sampling steps (default: config)");
  sa->add_option("--seed", seed_flag, "sampling seed");
  sa->add_option("--out", out_dir, "output directory")->required();

  // swap
  auto* sw = app.add_subcommand("swap", "decode target motion with source appearance");
  std::string src_dir, tgt_dir;
  sw->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  sw->add_option("--src", src_dir, "source clip directory (appearance provider)")->required();
  sw->add_option("--tgt", tgt_dir, "target clip directory (motion provider)")->required();
  sw->add_option("--steps", sample_steps, "sampling steps (default: config)");
  sw->add_option("--seed", seed_flag, "sampling seed");
  sw->add_option("--out", out_png, "output grid image path")->required();

  // eval-swap
  auto* es = app.add_subcommand("eval-swap", "swap-based disentanglement scores");
  int64_t max_pairs = 50;
  std::string judge_path;
  int64_t judge_steps = 2000;
  es->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  es->add_option("--data", data_dir, "dataset root")->required();
  es->add_option("--split", split, "evaluation split");
  es->add_option("--pairs", max_pairs, "max clip pairs (both directions each)");
  es->add_option("--steps", sample_steps, "sampling steps (default: config)");
  es->add_option("--judge", judge_path, "judge checkpoint (trained if missing)");
  es->add_option("--judge-steps", judge_steps, "judge training steps if training");
  es->add_option("--seed", seed_flag, "evaluation seed");
  es->add_option("--out", out_dir, "report directory")->required();

  // eval-leakage
  auto* el = app.add_subcommand("eval-leakage", "cross-factor probe accuracies");
  bool random_encoder = false, shuffled_labels = false;
  el->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  el->add_option("--data", data_dir, "dataset root")->required();
  el->add_option("--split", split, "evaluation split");
  el->add_flag("--random-encoder", random_encoder,
               "probe a freshly initialized encoder instead of the trained one");
  el->add_flag("--shuffled-labels", shuffled_labels, "shuffled-label chance baseline");
  el->add_option("--seed", seed_flag, "evaluation seed");
  el->add_option("--out", out_dir, "report directory")->required();

  // plot-grid
  auto* pg = app.add_subcommand("plot-grid", "render clip frame grids to a PNG");
  std::vector<std::string> clip_dirs;
  pg->add_option("--clips", clip_dirs, "clip directories, one grid row each")->required();
  std::vector<int64_t> pg_res = {32, 32};
  pg->add_option("--resolution", pg_res, "frame height and width")->expected(2);
  pg->add_option("--out", out_png, "output image path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the usage diagnostic
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    const uint64_t seed = resolve_seed(seed_flag, 0);
    SpriteFactorSpec spec = SpriteFactorSpec::defaults();
    spec.num_frames = frames;
    spec.height = resolution[0];
    spec.width = resolution[1];
    generate_split(spec, out_dir, "train", num_clips, seed);
    generate_split(spec, out_dir, "val", val_clips, seed);
    generate_split(spec, out_dir, "test", test_clips, seed);
    write_snapshot(out_dir, "generate-data",
                   {{"seed", seed},
                    {"num_clips", num_clips},
                    {"val_clips", val_clips},
                    {"test_clips", test_clips},
                    {"factor_spec", spec.to_json()}});
    std::cout << "wrote dataset to " << out_dir << "\n";
    return 0;
  }

  if (tr->parsed()) {
    if (!resume_path.empty()) {
      TrainState st = load_checkpoint(resume_path);
      auto clips = load_split(st.config.data.dir, st.config.data.train_split);
      fs::create_directories(out_dir);
      MetricLogger logger(out_dir + "/metrics.ndjson");
      write_snapshot(out_dir, "train",
                     {{"config", st.config.to_json()}, {"resumed_from", resume_path}});
      const std::string last = out_dir + "/last.ckpt";
      while (st.step < st.config.train.steps) {
        LossBreakdown bd = train_step(st, clips);
        if (st.step % st.config.train.log_interval == 0 || st.step == st.config.train.steps)
          logger.log(st.step, bd);
        if (st.step % st.config.train.checkpoint_interval == 0 ||
            st.step == st.config.train.steps)
          save_checkpoint(st, last);
      }
      std::cout << "checkpoint: " << last << "\n";
      return 0;
    }
    RunConfig cfg = load_config(config_path, overrides);
    if (!data_dir.empty()) cfg.data.dir = data_dir;
    cfg.train.seed = resolve_seed(seed_flag, cfg.train.seed);
    if (cfg.data.dir.empty()) throw std::invalid_argument("train: data.dir is not set");
    write_snapshot(out_dir, "train", {{"config", cfg.to_json()}});
    const std::string ckpt = train(cfg, out_dir);
    std::cout << "checkpoint: " << ckpt << "\n";
    return 0;
  }

  if (sa->parsed()) {
    auto [model, cfg] = load_model(ckpt_path);
    const uint64_t seed = resolve_seed(seed_flag, cfg.train.seed);
    auto clips = load_split(data_dir, split);
    if (clip_index < 0 || clip_index >= static_cast<int64_t>(clips.size()))
      throw std::out_of_range("sample: clip index out of range");
    const VideoClip& clip = clips[static_cast<size_t>(clip_index)];
    NoiseSchedule sched = NoiseSchedule::make(cfg.schedule.T, cfg.schedule.beta_start,
                                              cfg.schedule.beta_end, cfg.schedule.kind);
    const int64_t steps = sample_steps > 0 ? sample_steps : cfg.schedule.sample_steps;
    Tensor in = clip.frames.reshaped({1, clip.frames.dim(0), 3, model.H, model.W});
    LatentFactors lat = model.encoder.encode_sequence(ag::make_const(in.clone()));
    Tensor s = lat.static_token->value.reshaped({lat.static_token->value.dim(1)});
    Tensor d = lat.dynamic_tokens->value.reshaped(
        {clip.frames.dim(0), lat.dynamic_tokens->value.dim(2)});
    Rng rng(hash_combine(seed, hash_string(clip.clip_id)));
    Tensor sampled = sample_sequence(model, s, d, sched, steps, rng);
    render_rows({&clip.frames, &sampled}, out_dir + "/sample_" + clip.clip_id + ".png");
    write_snapshot(out_dir, "sample",
                   {{"seed", seed}, {"ckpt", ckpt_path}, {"clip", clip.clip_id},
                    {"steps", steps}});
    std::cout << "wrote " << out_dir << "/sample_" << clip.clip_id << ".png\n";
    return 0;
  }

  if (sw->parsed()) {
    auto [model, cfg] = load_model(ckpt_path);
    const uint64_t seed = resolve_seed(seed_flag, cfg.train.seed);
    VideoClip src = clip_from_directory(src_dir, model.H, model.W);
    VideoClip tgt = clip_from_directory(tgt_dir, model.H, model.W);
    NoiseSchedule sched = NoiseSchedule::make(cfg.schedule.T, cfg.schedule.beta_start,
                                              cfg.schedule.beta_end, cfg.schedule.kind);
    const int64_t steps = sample_steps > 0 ? sample_steps : cfg.schedule.sample_steps;
    Rng rng(hash_combine(seed, 0x51a));
    Tensor swapped = swap_decode(model, src, tgt, sched, steps, rng);
    render_swap_grid(src.frames, tgt.frames, swapped, out_png);
    std::cout << "wrote " << out_png << "\n";
    return 0;
  }

  if (es->parsed()) {
    auto [model, cfg] = load_model(ckpt_path);
    const uint64_t seed = resolve_seed(seed_flag, cfg.train.seed);
    fs::create_directories(out_dir);
    JudgeClassifier judge =
        obtain_judge(judge_path, data_dir, hash_combine(seed, 0xde), judge_steps, out_dir);
    auto clips = load_split(data_dir, split);
    auto pairs = select_swap_pairs(clips, static_cast<size_t>(max_pairs), seed);
    NoiseSchedule sched = NoiseSchedule::make(cfg.schedule.T, cfg.schedule.beta_start,
                                              cfg.schedule.beta_end, cfg.schedule.kind);
    const int64_t steps = sample_steps > 0 ? sample_steps : cfg.schedule.sample_steps;
    Rng rng(hash_combine(seed, 0x3b));
    SwapReport rep = eval_swap(model, judge, clips, pairs, sched, steps, rng);
    json j = rep.to_json();
    j["split"] = split;
    j["sample_steps"] = steps;
    std::ofstream out(out_dir + "/swap_report.json");
    out << j.dump(2) << "\n";
    write_snapshot(out_dir, "eval-swap",
                   {{"seed", seed}, {"ckpt", ckpt_path}, {"split", split}, {"pairs", max_pairs},
                    {"steps", steps}});
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (el->parsed()) {
    auto [model, cfg] = load_model(ckpt_path);
    const uint64_t seed = resolve_seed(seed_flag, cfg.train.seed);
    fs::create_directories(out_dir);
    if (random_encoder) {
      // same architecture, fresh parameters: the leakage baseline
      model = build_model(cfg.encoder, cfg.denoiser, model.H, model.W,
                          hash_combine(seed, 0xba5e));
    }
    auto clips = load_split(data_dir, split);
    LeakageReport rep = eval_leakage(model, clips, seed, shuffled_labels);
    json j = rep.to_json();
    j["split"] = split;
    j["random_encoder"] = random_encoder;
    j["shuffled_labels"] = shuffled_labels;
    std::ofstream out(out_dir + "/leakage_report.json");
    out << j.dump(2) << "\n";
    write_snapshot(out_dir, "eval-leakage",
                   {{"seed", seed}, {"ckpt", ckpt_path}, {"split", split},
                    {"random_encoder", random_encoder}, {"shuffled_labels", shuffled_labels}});
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (pg->parsed()) {
    std::vector<VideoClip> clips;
    std::vector<const Tensor*> rows;
    for (const auto& dir : clip_dirs) clips.push_back(clip_from_directory(dir, pg_res[0], pg_res[1]));
    for (const auto& c : clips) rows.push_back(&c.frames);
    render_rows(rows, out_png);
    std::cout << "wrote " << out_png << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
