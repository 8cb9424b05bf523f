#pragma once

#include "divid/training.hpp"

namespace divid {

// ---- judge classifier ----
// Small frozen video classifier with two heads: identity from temporally
// mean-pooled per-frame conv features, motion from the recurrence over
// temporal feature differences.

struct JudgeConfig {
  int64_t base_channels = 16;
  int64_t lstm_hidden = 64;
  int num_identity = 0;
  int num_motion = 0;

  json to_json() const {
    return {{"base_channels", base_channels},
            {"lstm_hidden", lstm_hidden},
            {"num_identity", num_identity},
            {"num_motion", num_motion}};
  }
  static JudgeConfig from_json(const json& j) {
    JudgeConfig c;
    c.base_channels = j.at("base_channels").get<int64_t>();
    c.lstm_hidden = j.at("lstm_hidden").get<int64_t>();
    c.num_identity = j.at("num_identity").get<int>();
    c.num_motion = j.at("num_motion").get<int>();
    return c;
  }
};

class JudgeClassifier {
 public:
  JudgeClassifier() = default;
  JudgeClassifier(std::shared_ptr<nn::ParamStore> ps, const JudgeConfig& cfg) : params(ps), cfg_(cfg) {
    const std::string p = "judge";
    const int64_t c = cfg.base_channels;
    conv1_ = nn::Conv2d(*ps, p + ".conv1", 3, c, 3, 2);
    conv2_ = nn::Conv2d(*ps, p + ".conv2", c, 2 * c, 3, 2);
    conv3_ = nn::Conv2d(*ps, p + ".conv3", 2 * c, 4 * c, 3, 2);
    feat_dim_ = 4 * c;
    id_head_ = nn::Linear(*ps, p + ".id_head", feat_dim_, cfg.num_identity);
    motion_lstm_ = nn::LSTM(*ps, p + ".motion_lstm", feat_dim_, cfg.lstm_hidden);
    motion_head_ = nn::Linear(*ps, p + ".motion_head", cfg.lstm_hidden, cfg.num_motion);
  }

  // frames: [B, nu, 3, H, W] -> per-frame features [B, nu, feat_dim]
  Var frame_features(const Var& clips) const {
    const int64_t B = clips->value.dim(0), nu = clips->value.dim(1);
    const int64_t H = clips->value.dim(3), W = clips->value.dim(4);
    Var flat = ag::reshape(clips, {B * nu, 3, H, W});
    Var h = ag::silu(conv1_(flat));
    h = ag::silu(conv2_(h));
    h = ag::silu(conv3_(h));
    Var pooled = ag::mean_spatial(h);  // [B*nu, feat]
    return ag::reshape(pooled, {B, nu, feat_dim_});
  }

  // -> (identity logits [B, n_id], motion logits [B, n_mo])
  std::pair<Var, Var> logits(const Var& clips) const {
    const int64_t B = clips->value.dim(0), nu = clips->value.dim(1);
    Var f = frame_features(clips);
    Var id_logits = id_head_(ag::mean_axis1(f));
    // temporal differences f_{i+1} - f_i (zero-length-safe for nu == 1)
    Var diffs;
    if (nu > 1) {
      Var head = ag::reshape(ag::slice0(ag::permute(f, {1, 0, 2}), 0, nu - 1), {nu - 1, B, feat_dim_});
      Var tail = ag::reshape(ag::slice0(ag::permute(f, {1, 0, 2}), 1, nu - 1), {nu - 1, B, feat_dim_});
      diffs = ag::permute(ag::sub(tail, head), {1, 0, 2});  // [B, nu-1, feat]
    } else {
      diffs = ag::make_const(Tensor::zeros({B, 1, feat_dim_}));
    }
    Var seq = motion_lstm_(diffs);  // [B, L, hidden]
    Var last = ag::reshape(ag::slice_axis1(seq, seq->value.dim(1) - 1), {B, cfg_.lstm_hidden});
    Var mo_logits = motion_head_(last);
    return {id_logits, mo_logits};
  }

  std::pair<int, int> predict(const VideoClip& clip) const {
    Tensor in = clip.frames.reshaped({1, clip.frames.dim(0), 3, clip.frames.dim(2),
                                      clip.frames.dim(3)});
    auto [idl, mol] = logits(ag::make_const(in.clone()));
    return {argmax_row(idl->value, 0), argmax_row(mol->value, 0)};
  }

  static int argmax_row(const Tensor& t, int64_t row) {
    const int64_t C = t.dim(t.ndim() - 1);
    int best = 0;
    for (int64_t c = 1; c < C; ++c)
      if (t[static_cast<size_t>(row * C + c)] > t[static_cast<size_t>(row * C + best)])
        best = static_cast<int>(c);
    return best;
  }

  std::shared_ptr<nn::ParamStore> params;
  JudgeConfig config() const { return cfg_; }

 private:
  JudgeConfig cfg_;
  int64_t feat_dim_ = 0;
  nn::Conv2d conv1_, conv2_, conv3_;
  nn::Linear id_head_;
  nn::LSTM motion_lstm_;
  nn::Linear motion_head_;
};

struct JudgeReport {
  double identity_acc = 0.0;
  double motion_acc = 0.0;
};

inline std::pair<double, double> judge_accuracy(const JudgeClassifier& judge,
                                                const std::vector<VideoClip>& clips) {
  int id_ok = 0, mo_ok = 0;
  for (const auto& c : clips) {
    auto [ip, mp] = judge.predict(c);
    id_ok += (ip == c.static_label);
    mo_ok += (mp == c.dynamic_label);
  }
  const double n = static_cast<double>(clips.size());
  return {100.0 * id_ok / n, 100.0 * mo_ok / n};
}

// Trains the judge on labeled clips; the returned classifier is frozen by
// convention (evaluation never backprops into it).
inline std::pair<JudgeClassifier, JudgeReport> train_judge(const std::vector<VideoClip>& train,
                                                           const std::vector<VideoClip>& heldout,
                                                           uint64_t seed, int64_t steps = 600,
                                                           int64_t batch_size = 16) {
  if (train.empty()) throw std::domain_error("train_judge: empty dataset");
  int n_id = 0, n_mo = 0;
  for (const auto& c : train) {
    n_id = std::max(n_id, c.static_label + 1);
    n_mo = std::max(n_mo, c.dynamic_label + 1);
  }
  if (n_id < 2 || n_mo < 2)
    throw std::domain_error("train_judge: dataset must contain >= 2 classes per factor");
  JudgeConfig cfg;
  cfg.num_identity = n_id;
  cfg.num_motion = n_mo;
  auto ps = std::make_shared<nn::ParamStore>(hash_combine(seed, 0x6a));
  JudgeClassifier judge(ps, cfg);
  nn::Adam opt(*ps, 3e-3f);
  Rng rng(hash_combine(seed, 0x77));
  const int64_t nu = train[0].frames.dim(0);
  const int64_t H = train[0].frames.dim(2), W = train[0].frames.dim(3);
  for (int64_t step = 0; step < steps; ++step) {
    const int64_t B = std::min<int64_t>(batch_size, static_cast<int64_t>(train.size()));
    Tensor batch({B, nu, 3, H, W});
    std::vector<int> id_labels, mo_labels;
    for (int64_t b = 0; b < B; ++b) {
      const auto& c = train[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(train.size()) - 1))];
      std::memcpy(batch.data() + b * nu * 3 * H * W, c.frames.data(),
                  c.frames.size() * sizeof(float));
      id_labels.push_back(c.static_label);
      mo_labels.push_back(c.dynamic_label);
    }
    ps->zero_grad();
    auto [idl, mol] = judge.logits(ag::make_const(batch));
    Var loss = ag::add(ag::cross_entropy(idl, id_labels), ag::cross_entropy(mol, mo_labels));
    ag::backward(loss);
    opt.step();
  }
  auto [id_acc, mo_acc] = judge_accuracy(judge, heldout.empty() ? train : heldout);
  return {judge, JudgeReport{id_acc, mo_acc}};
}

inline void save_judge(const JudgeClassifier& judge, const JudgeReport& report,
                       const std::string& path) {
  CheckpointData ck;
  ck.config = {{"judge", judge.config().to_json()},
               {"identity_acc", report.identity_acc},
               {"motion_acc", report.motion_acc}};
  for (const auto& name : judge.params->names())
    ck.params.emplace_back(name, judge.params->get(name)->value.clone());
  write_checkpoint_file(ck, path);
}

inline std::pair<JudgeClassifier, JudgeReport> load_judge(const std::string& path) {
  CheckpointData ck = read_checkpoint_file(path);
  JudgeConfig cfg = JudgeConfig::from_json(ck.config.at("judge"));
  auto ps = std::make_shared<nn::ParamStore>(0);
  JudgeClassifier judge(ps, cfg);
  apply_params(ck, *ps);
  JudgeReport rep{ck.config.at("identity_acc").get<double>(),
                  ck.config.at("motion_acc").get<double>()};
  return {judge, rep};
}

// ---- swap evaluation ----

// Decode({d_i^tgt}, s^src): source appearance driven by target motion.
inline Tensor swap_decode(const DiffusionModel& model, const VideoClip& src, const VideoClip& tgt,
                          const NoiseSchedule& schedule, int64_t sample_steps, Rng& rng) {
  if (src.frames.dim(0) != tgt.frames.dim(0))
    throw std::length_error("swap_decode: clips have different frame counts");
  const int64_t nu = src.frames.dim(0);
  auto encode = [&](const VideoClip& c) {
    Tensor in = c.frames.reshaped({1, nu, 3, model.H, model.W});
    return model.encoder.encode_sequence(ag::make_const(in.clone()));
  };
  LatentFactors src_lat = encode(src);
  LatentFactors tgt_lat = encode(tgt);
  Tensor s = src_lat.static_token->value.reshaped({src_lat.static_token->value.dim(1)});
  Tensor d = tgt_lat.dynamic_tokens->value.reshaped(
      {nu, tgt_lat.dynamic_tokens->value.dim(2)});
  return sample_sequence(model, s, d, schedule, sample_steps, rng);
}

struct SwapPairRecord {
  std::string src_id, tgt_id;
  int pred_identity = 0, pred_motion = 0;
  int want_identity = 0, want_motion = 0;
};

struct SwapReport {
  double static_only_acc = 0.0;
  double dynamic_only_acc = 0.0;
  double joint_acc = 0.0;
  int64_t num_pairs = 0;
  std::vector<SwapPairRecord> records;

  json to_json() const {
    return {{"static_only_acc", static_only_acc},
            {"dynamic_only_acc", dynamic_only_acc},
            {"joint_acc", joint_acc},
            {"num_pairs", num_pairs}};
  }
};

// All ordered pairs with differing identity AND motion, seeded subsample cap.
inline std::vector<std::pair<size_t, size_t>> select_swap_pairs(
    const std::vector<VideoClip>& clips, size_t cap, uint64_t seed) {
  std::vector<std::pair<size_t, size_t>> pairs;
  for (size_t i = 0; i < clips.size(); ++i)
    for (size_t j = 0; j < clips.size(); ++j)
      if (i != j && clips[i].static_label != clips[j].static_label &&
          clips[i].dynamic_label != clips[j].dynamic_label)
        pairs.emplace_back(i, j);
  if (pairs.size() > cap) {
    Rng rng(hash_combine(seed, 0x5a));
    rng.shuffle(pairs);
    pairs.resize(cap);
  }
  return pairs;
}

// Evaluates both swap directions per unordered pair occurrence: Decode(d^tgt,
// s^src) should show src identity under tgt motion.
inline SwapReport eval_swap(const DiffusionModel& model, const JudgeClassifier& judge,
                            const std::vector<VideoClip>& clips,
                            const std::vector<std::pair<size_t, size_t>>& pairs,
                            const NoiseSchedule& schedule, int64_t sample_steps, Rng& rng) {
  if (pairs.empty()) throw std::domain_error("eval_swap: empty pair list");
  SwapReport rep;
  int s_ok = 0, d_ok = 0, j_ok = 0;
  int total = 0;
  for (const auto& [a, b] : pairs) {
    for (const auto& [si, di] : {std::pair<size_t, size_t>{a, b}, {b, a}}) {
      const VideoClip& src = clips[si];
      const VideoClip& tgt = clips[di];
      Tensor synth = swap_decode(model, src, tgt, schedule, sample_steps, rng);
      VideoClip vc;
      vc.frames = synth;
      auto [pid, pmo] = judge.predict(vc);
      const bool sm = (pid == src.static_label);
      const bool dm = (pmo == tgt.dynamic_label);
      s_ok += sm;
      d_ok += dm;
      j_ok += (sm && dm);
      ++total;
      rep.records.push_back({src.clip_id, tgt.clip_id, pid, pmo, src.static_label,
                             tgt.dynamic_label});
    }
  }
  rep.num_pairs = total;
  rep.static_only_acc = 100.0 * s_ok / total;
  rep.dynamic_only_acc = 100.0 * d_ok / total;
  rep.joint_acc = 100.0 * j_ok / total;
  return rep;
}

// ---- cross-leakage probes ----

// Both probes share one architecture and budget: 2-layer MLP, hidden 256.
struct ProbeResult {
  double heldout_acc = 0.0;  // percent
  double chance = 0.0;       // percent, 100/num_classes
};

inline ProbeResult train_probe(const std::vector<Tensor>& features,
                               const std::vector<int>& labels, int num_classes, uint64_t seed,
                               int64_t steps = 800, int64_t hidden = 256) {
  if (features.empty() || features.size() != labels.size())
    throw std::domain_error("train_probe: bad inputs");
  if (num_classes < 2) throw std::domain_error("train_probe: degenerate labels");
  const int64_t N = static_cast<int64_t>(features.size());
  const int64_t D = static_cast<int64_t>(features[0].size());
  // deterministic shuffled split: 75% train / 25% held out
  std::vector<size_t> idx(static_cast<size_t>(N));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng split_rng(hash_combine(seed, 0xfeed));
  split_rng.shuffle(idx);
  const int64_t n_train = std::max<int64_t>(1, (3 * N) / 4);
  nn::ParamStore ps(hash_combine(seed, 0xab));
  nn::Linear l1(ps, "probe.l1", D, hidden);
  nn::Linear l2(ps, "probe.l2", hidden, num_classes);
  auto forward = [&](const Tensor& batch) { return l2(ag::relu(l1(ag::make_const(batch)))); };
  nn::Adam opt(ps, 3e-3f);
  Rng rng(hash_combine(seed, 0xcd));
  const int64_t B = std::min<int64_t>(32, n_train);
  for (int64_t step = 0; step < steps; ++step) {
    Tensor batch({B, D});
    std::vector<int> lab;
    for (int64_t b = 0; b < B; ++b) {
      const size_t k = idx[static_cast<size_t>(rng.uniform_int(0, n_train - 1))];
      std::memcpy(batch.data() + b * D, features[k].data(), static_cast<size_t>(D) * sizeof(float));
      lab.push_back(labels[k]);
    }
    ps.zero_grad();
    Var loss = ag::cross_entropy(forward(batch), lab);
    ag::backward(loss);
    opt.step();
  }
  int ok = 0;
  int64_t n_test = N - n_train;
  for (int64_t i = n_train; i < N; ++i) {
    const size_t k = idx[static_cast<size_t>(i)];
    Tensor one = features[k].reshaped({1, D}).clone();
    Var logits = forward(one);
    ok += (JudgeClassifier::argmax_row(logits->value, 0) == labels[k]);
  }
  ProbeResult r;
  r.heldout_acc = 100.0 * ok / static_cast<double>(std::max<int64_t>(n_test, 1));
  r.chance = 100.0 / num_classes;
  return r;
}

struct LeakageReport {
  double acc_s_to_d = 0.0;      // motion predicted from s
  double acc_d_to_s = 0.0;      // identity predicted from mean-pooled d
  double average_leakage = 0.0; // exactly the arithmetic mean of the two
  double chance_s_to_d = 0.0;
  double chance_d_to_s = 0.0;

  json to_json() const {
    return {{"acc_s_to_d", acc_s_to_d},
            {"acc_d_to_s", acc_d_to_s},
            {"average_leakage", average_leakage},
            {"chance_s_to_d", chance_s_to_d},
            {"chance_d_to_s", chance_d_to_s}};
  }
};

// Freezes the encoder, extracts (s, mean d) per clip, and trains the two
// cross-factor probes.
inline LeakageReport eval_leakage(const DiffusionModel& model,
                                  const std::vector<VideoClip>& clips, uint64_t seed,
                                  bool shuffle_labels = false) {
  if (clips.empty()) throw std::domain_error("eval_leakage: empty dataset");
  int n_id = 0, n_mo = 0;
  std::vector<Tensor> s_feats, d_feats;
  std::vector<int> id_labels, mo_labels;
  const int64_t nu = clips[0].frames.dim(0);
  for (const auto& c : clips) {
    Tensor in = c.frames.reshaped({1, nu, 3, model.H, model.W});
    LatentFactors lat = model.encoder.encode_sequence(ag::make_const(in.clone()));
    s_feats.push_back(lat.static_token->value.reshaped({lat.static_token->value.dim(1)}).clone());
    Var dm = ag::mean_axis1(lat.dynamic_tokens);
    d_feats.push_back(dm->value.reshaped({dm->value.dim(1)}).clone());
    id_labels.push_back(c.static_label);
    mo_labels.push_back(c.dynamic_label);
    n_id = std::max(n_id, c.static_label + 1);
    n_mo = std::max(n_mo, c.dynamic_label + 1);
  }
  if (n_id < 2 || n_mo < 2) throw std::domain_error("eval_leakage: degenerate labels");
  if (shuffle_labels) {
    Rng rng(hash_combine(seed, 0x5c));
    rng.shuffle(id_labels);
    rng.shuffle(mo_labels);
  }
  ProbeResult s2d = train_probe(s_feats, mo_labels, n_mo, hash_combine(seed, 1));
  ProbeResult d2s = train_probe(d_feats, id_labels, n_id, hash_combine(seed, 2));
  LeakageReport rep;
  rep.acc_s_to_d = s2d.heldout_acc;
  rep.acc_d_to_s = d2s.heldout_acc;
  rep.average_leakage = (rep.acc_s_to_d + rep.acc_d_to_s) / 2.0;
  rep.chance_s_to_d = s2d.chance;
  rep.chance_d_to_s = d2s.chance;
  return rep;
}

// ---- qualitative grid ----

// Rows: source clip, target clip, swapped output; one column per frame.
inline void render_swap_grid(const Tensor& src, const Tensor& tgt, const Tensor& out,
                             const std::string& path) {
  if (src.dim(0) != tgt.dim(0) || src.dim(0) != out.dim(0))
    throw std::invalid_argument("render_swap_grid: frame counts differ");
  const int64_t nu = src.dim(0), H = src.dim(2), W = src.dim(3);
  const int64_t margin = 2;
  const int64_t grid_h = 3 * H + 4 * margin;
  const int64_t grid_w = nu * W + (nu + 1) * margin;
  cv::Mat img(static_cast<int>(grid_h), static_cast<int>(grid_w), CV_8UC3,
              cv::Scalar(40, 40, 40));
  const Tensor* rows[3] = {&src, &tgt, &out};
  for (int r = 0; r < 3; ++r)
    for (int64_t f = 0; f < nu; ++f) {
      const float* fr = rows[r]->data() + f * 3 * H * W;
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
  fs::create_directories(fs::path(path).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(path).parent_path());
  if (!cv::imwrite(path, img)) throw std::runtime_error("failed to write grid image: " + path);
}

}  // namespace divid
