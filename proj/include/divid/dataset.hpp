#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "divid/config.hpp"
#include "divid/rng.hpp"
#include "divid/tensor.hpp"

namespace divid {

namespace fs = std::filesystem;

struct IdentityClass {
  std::string shape;  // square | disk | diamond
  std::array<float, 3> color;
};

struct SpriteFactorSpec {
  std::vector<IdentityClass> identity_classes;
  std::vector<std::string> motion_classes;
  int64_t num_frames = 8;
  int64_t height = 32;
  int64_t width = 32;
  double sprite_size = 12.0;

  static SpriteFactorSpec defaults() {
    SpriteFactorSpec s;
    const std::array<float, 3> red = {1.0f, 0.25f, 0.2f};
    const std::array<float, 3> blue = {0.25f, 0.55f, 1.0f};
    for (const char* shape : {"square", "disk", "diamond"}) {
      s.identity_classes.push_back({shape, red});
      s.identity_classes.push_back({shape, blue});
    }
    s.motion_classes = {"hold", "h-bounce", "v-bounce", "diagonal", "circle", "zoom"};
    return s;
  }

  void validate() const {
    if (identity_classes.size() < 2 || motion_classes.size() < 2)
      throw std::domain_error("SpriteFactorSpec: need >= 2 identity and >= 2 motion classes");
    if (num_frames < 1 || height < 8 || width < 8 || sprite_size < 2.0)
      throw std::domain_error("SpriteFactorSpec: degenerate geometry");
  }

  json to_json() const {
    json ids = json::array();
    for (const auto& id : identity_classes)
      ids.push_back({{"shape", id.shape}, {"color", id.color}});
    return {{"identity_classes", ids}, {"motion_classes", motion_classes},
            {"num_frames", num_frames}, {"height", height},
            {"width", width},           {"sprite_size", sprite_size}};
  }

  static SpriteFactorSpec from_json(const json& j) {
    SpriteFactorSpec s;
    for (const auto& e : j.at("identity_classes"))
      s.identity_classes.push_back(
          {e.at("shape").get<std::string>(), e.at("color").get<std::array<float, 3>>()});
    s.motion_classes = j.at("motion_classes").get<std::vector<std::string>>();
    s.num_frames = j.at("num_frames").get<int64_t>();
    s.height = j.at("height").get<int64_t>();
    s.width = j.at("width").get<int64_t>();
    s.sprite_size = j.at("sprite_size").get<double>();
    return s;
  }
};

struct VideoClip {
  Tensor frames;  // [nu, 3, H, W] in [-1, 1]
  int static_label = 0;
  int dynamic_label = 0;
  std::string clip_id;
  uint64_t seed = 0;
};

// ---- trajectories ----
// Pure functions of (motion class, frame index, seed); identity never enters.

namespace sprites {

inline double frac(double p) { return p - std::floor(p); }

// Triangle wave with period 1 in [0,1], peak at phase 0.5.
inline double tri(double p) { return 1.0 - std::abs(2.0 * frac(p) - 1.0); }

struct TrajectoryPoint {
  double cx, cy;
  double size_scale;  // multiplies sprite_size (zoom motion only)
};

// Trajectory parameters are derived from the seed alone so that two clips
// with equal (motion, seed) share a pixel-exact centroid path.
inline TrajectoryPoint trajectory(const std::string& motion, int64_t frame, uint64_t seed,
                                  const SpriteFactorSpec& spec) {
  const double W = static_cast<double>(spec.width);
  const double H = static_cast<double>(spec.height);
  const double margin = spec.sprite_size / 2.0 + 2.0;
  auto u = [&](uint64_t k) {  // deterministic uniforms in [0,1)
    return static_cast<double>(mix64(hash_combine(seed, k)) >> 11) * 0x1.0p-53;
  };
  const double lo_x = margin, hi_x = W - margin;
  const double lo_y = margin, hi_y = H - margin;
  const double phase = u(1);
  const double freq = 0.08 + 0.08 * u(2);  // cycles per frame
  const double p = phase + freq * static_cast<double>(frame);

  TrajectoryPoint out{0.0, 0.0, 1.0};
  if (motion == "hold") {
    out.cx = lo_x + u(3) * (hi_x - lo_x);
    out.cy = lo_y + u(4) * (hi_y - lo_y);
  } else if (motion == "h-bounce") {
    out.cx = lo_x + (hi_x - lo_x) * tri(p);
    out.cy = lo_y + u(4) * (hi_y - lo_y);
  } else if (motion == "v-bounce") {
    out.cx = lo_x + u(3) * (hi_x - lo_x);
    out.cy = lo_y + (hi_y - lo_y) * tri(p);
  } else if (motion == "diagonal") {
    out.cx = lo_x + (hi_x - lo_x) * tri(p);
    out.cy = lo_y + (hi_y - lo_y) * tri(p);
  } else if (motion == "circle") {
    const double r = (0.6 + 0.4 * u(3)) * (std::min(W, H) / 2.0 - margin);
    const double ang = 2.0 * M_PI * p;
    out.cx = W / 2.0 + r * std::cos(ang);
    out.cy = H / 2.0 + r * std::sin(ang);
  } else if (motion == "zoom") {
    out.cx = W / 2.0;
    out.cy = H / 2.0;
    out.size_scale = 0.55 + 0.45 * tri(p);
  } else {
    throw std::domain_error("unknown motion class: " + motion);
  }
  return out;
}

inline double shape_sdf(const std::string& shape, double dx, double dy, double r) {
  if (shape == "square") return std::max(std::abs(dx), std::abs(dy)) - r;
  if (shape == "disk") return std::sqrt(dx * dx + dy * dy) - r;
  if (shape == "diamond") return (std::abs(dx) + std::abs(dy)) - r * 1.2;
  throw std::domain_error("unknown shape class: " + shape);
}

}  // namespace sprites

inline VideoClip generate_sprite_clip(int identity, int motion, const SpriteFactorSpec& spec,
                                      uint64_t seed) {
  spec.validate();
  if (identity < 0 || identity >= static_cast<int>(spec.identity_classes.size()))
    throw std::domain_error("generate_sprite_clip: identity index out of range");
  if (motion < 0 || motion >= static_cast<int>(spec.motion_classes.size()))
    throw std::domain_error("generate_sprite_clip: motion index out of range");

  const auto& id = spec.identity_classes[static_cast<size_t>(identity)];
  const std::string& mo = spec.motion_classes[static_cast<size_t>(motion)];
  const int64_t nu = spec.num_frames, H = spec.height, W = spec.width;

  VideoClip clip;
  clip.frames = Tensor({nu, 3, H, W}, -1.0f);
  clip.static_label = identity;
  clip.dynamic_label = motion;
  clip.seed = seed;

  for (int64_t f = 0; f < nu; ++f) {
    const auto tp = sprites::trajectory(mo, f, seed, spec);
    const double r = spec.sprite_size * tp.size_scale / 2.0;
    float* frame = clip.frames.data() + f * 3 * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const double sdf =
            sprites::shape_sdf(id.shape, static_cast<double>(x) + 0.5 - tp.cx,
                               static_cast<double>(y) + 0.5 - tp.cy, r);
        const double cov = std::clamp(0.5 - sdf, 0.0, 1.0);  // 1px antialias band
        if (cov <= 0.0) continue;
        for (int c = 0; c < 3; ++c)
          frame[c * H * W + y * W + x] =
              static_cast<float>(-1.0 + 2.0 * id.color[static_cast<size_t>(c)] * cov);
      }
  }
  return clip;
}

// Pixel-mass centroid of one frame; used by trajectory oracles.
inline std::pair<double, double> frame_centroid(const Tensor& frames, int64_t frame_idx) {
  const int64_t H = frames.dim(2), W = frames.dim(3);
  const float* f = frames.data() + frame_idx * 3 * H * W;
  double mass = 0.0, mx = 0.0, my = 0.0;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double m = 0.0;
      for (int c = 0; c < 3; ++c) m += (f[c * H * W + y * W + x] + 1.0) / 2.0;
      mass += m;
      mx += m * (static_cast<double>(x) + 0.5);
      my += m * (static_cast<double>(y) + 0.5);
    }
  if (mass <= 0.0) return {0.0, 0.0};
  return {mx / mass, my / mass};
}

// ---- clip windows and frame directories ----

inline std::vector<Tensor> sample_clip_window(const std::vector<Tensor>& frames, int64_t length,
                                              Rng& rng) {
  if (static_cast<int64_t>(frames.size()) < length)
    throw std::length_error("sample_clip_window: source shorter than requested window");
  const int64_t max_start = static_cast<int64_t>(frames.size()) - length;
  const int64_t start = max_start == 0 ? 0 : rng.uniform_int(0, max_start);
  return {frames.begin() + start, frames.begin() + start + length};
}

inline Tensor decode_image_file(const std::string& path, int64_t H, int64_t W) {
  cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);  // promotes grayscale to 3ch BGR
  if (img.empty()) throw std::runtime_error("undecodable image file: " + path);
  cv::Mat resized;
  cv::resize(img, resized, cv::Size(static_cast<int>(W), static_cast<int>(H)), 0, 0,
             cv::INTER_AREA);
  Tensor t({3, H, W});
  for (int64_t y = 0; y < H; ++y) {
    const cv::Vec3b* row = resized.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < W; ++x) {
      // BGR -> RGB, [0,255] -> [-1,1]
      for (int c = 0; c < 3; ++c)
        t[static_cast<size_t>(c * H * W + y * W + x)] =
            static_cast<float>(row[x][2 - c]) / 255.0f * 2.0f - 1.0f;
    }
  }
  return t;
}

inline std::vector<Tensor> load_frame_directory(const std::string& path, int64_t H, int64_t W) {
  if (!fs::is_directory(path)) throw std::runtime_error("missing frame directory: " + path);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("frame directory is empty: " + path);
  std::vector<Tensor> frames;
  for (const auto& f : files) frames.push_back(decode_image_file(f, H, W));
  return frames;
}

inline void write_frame_png(const Tensor& frames, int64_t frame_idx, const std::string& path) {
  const int64_t H = frames.dim(2), W = frames.dim(3);
  const float* f = frames.data() + frame_idx * 3 * H * W;
  cv::Mat img(static_cast<int>(H), static_cast<int>(W), CV_8UC3);
  for (int64_t y = 0; y < H; ++y) {
    cv::Vec3b* row = img.ptr<cv::Vec3b>(static_cast<int>(y));
    for (int64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = (f[c * H * W + y * W + x] + 1.0f) / 2.0f * 255.0f;
        row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 255.0f)));
      }
  }
  if (!cv::imwrite(path, img)) throw std::runtime_error("failed to write image: " + path);
}

// ---- manifests ----

constexpr int kManifestFormatVersion = 1;

struct ClipRecord {
  std::string clip_id;
  std::string path;  // clip directory, relative to the manifest
  int static_label = 0;
  int dynamic_label = 0;
  uint64_t seed = 0;
};

struct DatasetManifest {
  std::string split;
  std::vector<ClipRecord> clips;
  SpriteFactorSpec spec;
  int format_version = kManifestFormatVersion;

  void validate() const {
    std::map<std::string, int> seen;
    for (const auto& c : clips) {
      if (++seen[c.clip_id] > 1)
        throw std::invalid_argument("manifest: duplicate clip_id " + c.clip_id);
      if (c.static_label < 0 ||
          c.static_label >= static_cast<int>(spec.identity_classes.size()) ||
          c.dynamic_label < 0 || c.dynamic_label >= static_cast<int>(spec.motion_classes.size()))
        throw std::invalid_argument("manifest: label out of range for clip " + c.clip_id);
    }
  }
};

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  m.validate();
  json clips = json::array();
  for (const auto& c : m.clips)
    clips.push_back({{"clip_id", c.clip_id},
                     {"path", c.path},
                     {"static_label", c.static_label},
                     {"dynamic_label", c.dynamic_label},
                     {"seed", c.seed}});
  json j = {{"format_version", m.format_version},
            {"split", m.split},
            {"factor_spec", m.spec.to_json()},
            {"clips", clips}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  json j;
  in >> j;
  const int ver = j.at("format_version").get<int>();
  if (ver != kManifestFormatVersion)
    throw std::runtime_error("manifest format_version " + std::to_string(ver) +
                             " is incompatible with supported version " +
                             std::to_string(kManifestFormatVersion));
  DatasetManifest m;
  m.format_version = ver;
  m.split = j.at("split").get<std::string>();
  m.spec = SpriteFactorSpec::from_json(j.at("factor_spec"));
  for (const auto& e : j.at("clips"))
    m.clips.push_back({e.at("clip_id").get<std::string>(), e.at("path").get<std::string>(),
                       e.at("static_label").get<int>(), e.at("dynamic_label").get<int>(),
                       e.at("seed").get<uint64_t>()});
  m.validate();
  return m;
}

// ---- on-disk dataset ----

inline void write_clip_frames(const VideoClip& clip, const std::string& dir) {
  fs::create_directories(dir);
  char name[32];
  for (int64_t f = 0; f < clip.frames.dim(0); ++f) {
    std::snprintf(name, sizeof(name), "frame_%03d.png", static_cast<int>(f));
    write_frame_png(clip.frames, f, dir + "/" + name);
  }
}

inline VideoClip load_clip(const DatasetManifest& m, size_t idx, const std::string& split_dir) {
  const auto& rec = m.clips.at(idx);
  auto frames = load_frame_directory(split_dir + "/" + rec.path, m.spec.height, m.spec.width);
  VideoClip clip;
  clip.clip_id = rec.clip_id;
  clip.static_label = rec.static_label;
  clip.dynamic_label = rec.dynamic_label;
  clip.seed = rec.seed;
  clip.frames = Tensor({static_cast<int64_t>(frames.size()), 3, m.spec.height, m.spec.width});
  for (size_t f = 0; f < frames.size(); ++f)
    std::memcpy(clip.frames.data() + f * frames[f].size(), frames[f].data(),
                frames[f].size() * sizeof(float));
  return clip;
}

inline std::vector<VideoClip> load_split(const std::string& root, const std::string& split) {
  const std::string dir = root + "/" + split;
  DatasetManifest m = read_manifest(dir + "/manifest.json");
  std::vector<VideoClip> clips;
  for (size_t i = 0; i < m.clips.size(); ++i) clips.push_back(load_clip(m, i, dir));
  return clips;
}

// Generates one split: clips round-robin over all (identity, motion) pairs so
// every pair occurs at least once when count >= #pairs. Clip seeds derive
// from (global seed, clip_id), making generation reentrant per clip.
inline DatasetManifest generate_split(const SpriteFactorSpec& spec, const std::string& root,
                                      const std::string& split, int64_t count,
                                      uint64_t global_seed) {
  spec.validate();
  const int64_t n_id = static_cast<int64_t>(spec.identity_classes.size());
  const int64_t n_mo = static_cast<int64_t>(spec.motion_classes.size());
  DatasetManifest m;
  m.split = split;
  m.spec = spec;
  const std::string split_dir = root + "/" + split;
  fs::create_directories(split_dir);
  for (int64_t i = 0; i < count; ++i) {
    const int identity = static_cast<int>(i % n_id);
    const int motion = static_cast<int>((i / n_id) % n_mo);
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "%s_%05d", split.c_str(), static_cast<int>(i));
    const std::string clip_id = idbuf;
    const uint64_t seed = hash_combine(hash_combine(global_seed, hash_string(split)),
                                       hash_string(clip_id));
    VideoClip clip = generate_sprite_clip(identity, motion, spec, seed);
    clip.clip_id = clip_id;
    write_clip_frames(clip, split_dir + "/" + clip_id);
    m.clips.push_back({clip_id, clip_id, identity, motion, seed});
  }
  write_manifest(m, split_dir + "/manifest.json");
  return m;
}

}  // namespace divid
