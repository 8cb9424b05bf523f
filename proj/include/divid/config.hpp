#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace divid {

using json = nlohmann::json;

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

struct EncoderConfig {
  int64_t base_channels = 128;
  std::vector<int64_t> channel_mult = {1, 2, 4};
  int res_blocks = 2;
  int64_t embed_channels = 3;  // 1x1 projection output
  int64_t token_dim = 256;
  int64_t mlp_hidden = 1024;
  int64_t lstm_hidden = 128;
  int attn_heads = 8;
  int64_t max_frames = 32;  // learned positional table length

  static EncoderConfig from_json(const json& j) {
    reject_unknown_keys(j,
                        {"base_channels", "channel_mult", "res_blocks", "embed_channels",
                         "token_dim", "mlp_hidden", "lstm_hidden", "attn_heads", "max_frames"},
                        "encoder");
    EncoderConfig c;
    maybe(j, "base_channels", c.base_channels);
    maybe(j, "channel_mult", c.channel_mult);
    maybe(j, "res_blocks", c.res_blocks);
    maybe(j, "embed_channels", c.embed_channels);
    maybe(j, "token_dim", c.token_dim);
    maybe(j, "mlp_hidden", c.mlp_hidden);
    maybe(j, "lstm_hidden", c.lstm_hidden);
    maybe(j, "attn_heads", c.attn_heads);
    maybe(j, "max_frames", c.max_frames);
    c.validate();
    return c;
  }

  json to_json() const {
    return {{"base_channels", base_channels}, {"channel_mult", channel_mult},
            {"res_blocks", res_blocks},       {"embed_channels", embed_channels},
            {"token_dim", token_dim},         {"mlp_hidden", mlp_hidden},
            {"lstm_hidden", lstm_hidden},     {"attn_heads", attn_heads},
            {"max_frames", max_frames}};
  }

  void validate() const {
    if (base_channels < 1 || res_blocks < 1 || embed_channels < 1 || token_dim < 1 ||
        mlp_hidden < 1 || lstm_hidden < 1 || attn_heads < 1 || max_frames < 1)
      throw std::invalid_argument("encoder config: all sizes must be positive");
    if (channel_mult.empty()) throw std::invalid_argument("encoder config: channel_mult empty");
    if (token_dim % attn_heads != 0)
      throw std::invalid_argument("encoder config: token_dim must be divisible by attn_heads");
  }
};

struct DenoiserConfig {
  int64_t base_channels = 128;
  std::vector<int64_t> channel_mult = {1, 2, 4, 4};
  int res_blocks = 2;
  std::vector<int64_t> attention_resolutions = {32, 16, 8};
  int64_t context_dim = 256;
  int attn_heads = 4;

  static DenoiserConfig from_json(const json& j) {
    reject_unknown_keys(j,
                        {"base_channels", "channel_mult", "res_blocks", "attention_resolutions",
                         "context_dim", "attn_heads"},
                        "denoiser");
    DenoiserConfig c;
    maybe(j, "base_channels", c.base_channels);
    maybe(j, "channel_mult", c.channel_mult);
    maybe(j, "res_blocks", c.res_blocks);
    maybe(j, "attention_resolutions", c.attention_resolutions);
    maybe(j, "context_dim", c.context_dim);
    maybe(j, "attn_heads", c.attn_heads);
    c.validate();
    return c;
  }

  json to_json() const {
    return {{"base_channels", base_channels},
            {"channel_mult", channel_mult},
            {"res_blocks", res_blocks},
            {"attention_resolutions", attention_resolutions},
            {"context_dim", context_dim},
            {"attn_heads", attn_heads}};
  }

  void validate() const {
    if (channel_mult.size() != 4)
      throw std::invalid_argument("denoiser config: channel_mult must have 4 levels");
    if (base_channels < 1 || res_blocks < 1 || context_dim < 1 || attn_heads < 1)
      throw std::invalid_argument("denoiser config: all sizes must be positive");
  }

  // The reference attention set {32,16,8} assumes 128x128 inputs; smaller
  // inputs attend at the three deepest level resolutions instead.
  std::vector<int64_t> resolved_attention(int64_t input_res) const {
    std::vector<int64_t> levels;
    for (size_t l = 0; l < channel_mult.size(); ++l) levels.push_back(input_res >> l);
    bool all_present = true;
    for (int64_t r : attention_resolutions)
      if (std::find(levels.begin(), levels.end(), r) == levels.end()) all_present = false;
    if (all_present) return attention_resolutions;
    return {levels[1], levels[2], levels[3]};
  }
};

struct ScheduleConfig {
  int64_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string kind = "linear";
  int64_t sample_steps = 50;

  static ScheduleConfig from_json(const json& j) {
    reject_unknown_keys(j, {"T", "beta_start", "beta_end", "kind", "sample_steps"}, "schedule");
    ScheduleConfig c;
    maybe(j, "T", c.T);
    maybe(j, "beta_start", c.beta_start);
    maybe(j, "beta_end", c.beta_end);
    maybe(j, "kind", c.kind);
    maybe(j, "sample_steps", c.sample_steps);
    return c;
  }

  json to_json() const {
    return {{"T", T},
            {"beta_start", beta_start},
            {"beta_end", beta_end},
            {"kind", kind},
            {"sample_steps", sample_steps}};
  }
};

struct DataConfig {
  std::string dir;
  std::string train_split = "train";
  std::string val_split = "val";

  static DataConfig from_json(const json& j) {
    reject_unknown_keys(j, {"dir", "train_split", "val_split"}, "data");
    DataConfig c;
    maybe(j, "dir", c.dir);
    maybe(j, "train_split", c.train_split);
    maybe(j, "val_split", c.val_split);
    return c;
  }

  json to_json() const {
    return {{"dir", dir}, {"train_split", train_split}, {"val_split", val_split}};
  }
};

struct TrainConfig {
  double lambda_orth = 0.1;
  bool normalize_tokens_in_orth = false;
  int64_t batch_size = 4;
  double lr = 1e-4;
  std::string optimizer = "adam";
  int64_t steps = 1000;
  uint64_t seed = 0;
  int64_t checkpoint_interval = 500;
  int64_t log_interval = 50;

  static TrainConfig from_json(const json& j) {
    reject_unknown_keys(j,
                        {"lambda_orth", "normalize_tokens_in_orth", "batch_size", "lr",
                         "optimizer", "steps", "seed", "checkpoint_interval", "log_interval"},
                        "train");
    TrainConfig c;
    maybe(j, "lambda_orth", c.lambda_orth);
    maybe(j, "normalize_tokens_in_orth", c.normalize_tokens_in_orth);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "lr", c.lr);
    maybe(j, "optimizer", c.optimizer);
    maybe(j, "steps", c.steps);
    maybe(j, "seed", c.seed);
    maybe(j, "checkpoint_interval", c.checkpoint_interval);
    maybe(j, "log_interval", c.log_interval);
    c.validate();
    return c;
  }

  json to_json() const {
    return {{"lambda_orth", lambda_orth},
            {"normalize_tokens_in_orth", normalize_tokens_in_orth},
            {"batch_size", batch_size},
            {"lr", lr},
            {"optimizer", optimizer},
            {"steps", steps},
            {"seed", seed},
            {"checkpoint_interval", checkpoint_interval},
            {"log_interval", log_interval}};
  }

  void validate() const {
    if (lambda_orth < 0.0) throw std::invalid_argument("train config: lambda_orth must be >= 0");
    if (batch_size < 1 || steps < 1 || lr <= 0.0)
      throw std::invalid_argument("train config: batch/steps/lr must be positive");
    if (optimizer != "adam") throw std::invalid_argument("train config: unknown optimizer");
  }
};

// Full run configuration: sections data, encoder, denoiser, schedule, train.
struct RunConfig {
  DataConfig data;
  EncoderConfig encoder;
  DenoiserConfig denoiser;
  ScheduleConfig schedule;
  TrainConfig train;

  static RunConfig from_json(const json& j) {
    reject_unknown_keys(j, {"data", "encoder", "denoiser", "schedule", "train"}, "config root");
    RunConfig c;
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
    if (j.contains("denoiser")) c.denoiser = DenoiserConfig::from_json(j.at("denoiser"));
    if (j.contains("schedule")) c.schedule = ScheduleConfig::from_json(j.at("schedule"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    json j;
    in >> j;
    return from_json(j);
  }

  json to_json() const {
    return {{"data", data.to_json()},
            {"encoder", encoder.to_json()},
            {"denoiser", denoiser.to_json()},
            {"schedule", schedule.to_json()},
            {"train", train.to_json()}};
  }
};

}  // namespace divid
