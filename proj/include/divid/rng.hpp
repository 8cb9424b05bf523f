#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "divid/tensor.hpp"

namespace divid {

// splitmix64; used to derive independent streams from (seed, tag) pairs.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

inline uint64_t hash_string(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Seeded RNG with stream-serializable state (for checkpoint round trips).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  Tensor normal_tensor(std::vector<int64_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, stddev);
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(d(gen_));
    return t;
  }

  Tensor uniform_tensor(std::vector<int64_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(d(gen_));
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw std::runtime_error("Rng::set_state: malformed state string");
  }

 private:
  std::mt19937_64 gen_;
};

// Rng wrapper that counts frame-shaped noise draws; the training loss is
// required to draw exactly one shared epsilon per clip.
class CountingNoiseSource {
 public:
  explicit CountingNoiseSource(Rng& rng) : rng_(rng) {}

  Tensor draw(std::vector<int64_t> shape) {
    ++draws_;
    return rng_.normal_tensor(std::move(shape));
  }

  int64_t draws() const { return draws_; }
  void reset() { draws_ = 0; }

 private:
  Rng& rng_;
  int64_t draws_ = 0;
};

}  // namespace divid
