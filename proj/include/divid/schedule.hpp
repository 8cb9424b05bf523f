#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "divid/rng.hpp"
#include "divid/tensor.hpp"

namespace divid {

// DDPM noise schedule: beta_t per step, alpha_t = 1 - beta_t,
// alpha_bar_t = prod_{u<=t} alpha_u. Timesteps are 1-based.
class NoiseSchedule {
 public:
  static NoiseSchedule make(int64_t T, double beta_start, double beta_end,
                            const std::string& kind = "linear") {
    if (T < 1) throw std::domain_error("NoiseSchedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
      throw std::domain_error("NoiseSchedule: need 0 < beta_start <= beta_end < 1");
    if (kind != "linear") throw std::domain_error("NoiseSchedule: unknown kind " + kind);
    NoiseSchedule s;
    s.beta_.resize(static_cast<size_t>(T));
    s.alpha_.resize(static_cast<size_t>(T));
    s.alpha_bar_.resize(static_cast<size_t>(T));
    double cum = 1.0;
    for (int64_t i = 0; i < T; ++i) {
      const double b =
          T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
      s.beta_[static_cast<size_t>(i)] = b;
      s.alpha_[static_cast<size_t>(i)] = 1.0 - b;
      cum *= 1.0 - b;
      s.alpha_bar_[static_cast<size_t>(i)] = cum;
    }
    return s;
  }

  int64_t steps() const { return static_cast<int64_t>(beta_.size()); }

  double beta(int64_t t) const { return beta_.at(check(t)); }
  double alpha(int64_t t) const { return alpha_.at(check(t)); }
  double alpha_bar(int64_t t) const { return alpha_bar_.at(check(t)); }

  // Evenly strided subset of timesteps for sampling, descending from T.
  std::vector<int64_t> strided_timesteps(int64_t num) const {
    const int64_t T = steps();
    if (num < 1) throw std::domain_error("strided_timesteps: num must be >= 1");
    num = std::min(num, T);
    std::vector<int64_t> ts;
    if (num == 1) return {T};
    for (int64_t i = 0; i < num; ++i) {
      // exact endpoints: i=0 -> T, i=num-1 -> 1
      int64_t t = T - (i * (T - 1)) / (num - 1);
      if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    return ts;
  }

 private:
  size_t check(int64_t t) const {
    if (t < 1 || t > steps()) throw std::domain_error("NoiseSchedule: timestep out of range");
    return static_cast<size_t>(t - 1);
  }

  std::vector<double> beta_, alpha_, alpha_bar_;
};

// Eq.-style closed-form corruption with one shared epsilon per clip:
// x_t_i = sqrt(abar_t) x_i + sqrt(1 - abar_t) eps, same eps for every frame i.
struct NoisySequence {
  Tensor frames;  // [nu, C, H, W]
  int64_t t = 0;
  Tensor eps;  // [C, H, W], the single shared realization
};

inline NoisySequence forward_diffuse(const Tensor& clean_frames, int64_t t, const Tensor& eps,
                                     const NoiseSchedule& schedule) {
  if (clean_frames.ndim() != 4) throw std::invalid_argument("forward_diffuse: frames must be [nu,C,H,W]");
  const int64_t per_frame = static_cast<int64_t>(clean_frames.size()) / clean_frames.dim(0);
  if (static_cast<int64_t>(eps.size()) != per_frame)
    throw std::invalid_argument("forward_diffuse: eps must be frame-shaped");
  const double abar = schedule.alpha_bar(t);
  const float a = static_cast<float>(std::sqrt(abar));
  const float b = static_cast<float>(std::sqrt(1.0 - abar));
  NoisySequence out;
  out.t = t;
  out.eps = eps;
  out.frames = Tensor(clean_frames.shape());
  const int64_t nu = clean_frames.dim(0);
  const float* xs = clean_frames.data();
  const float* es = eps.data();
  float* ys = out.frames.data();
  for (int64_t i = 0; i < nu; ++i)
    for (int64_t j = 0; j < per_frame; ++j)
      ys[i * per_frame + j] = a * xs[i * per_frame + j] + b * es[j];
  return out;
}

}  // namespace divid
