#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "divid/config.hpp"
#include "divid/nn.hpp"

namespace divid {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'D', 'V', 'C', 'K'};

namespace io {

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
  const uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) write_u64(os, static_cast<uint64_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
}
inline Tensor read_tensor(std::istream& is) {
  const uint32_t nd = read_u32(is);
  std::vector<int64_t> shape(nd);
  for (uint32_t i = 0; i < nd; ++i) shape[i] = static_cast<int64_t>(read_u64(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  return t;
}

}  // namespace io

struct CheckpointData {
  json config;
  int64_t height = 0, width = 0;
  int64_t step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor>> params;  // in registration order
  std::vector<std::pair<Tensor, Tensor>> adam_slots;   // (m, v) aligned to params
  int64_t adam_step = 0;
};

inline void write_checkpoint_file(const CheckpointData& ck, const std::string& path) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + tmp);
    os.write(kCheckpointMagic, 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_string(os, ck.config.dump());
    io::write_u64(os, static_cast<uint64_t>(ck.height));
    io::write_u64(os, static_cast<uint64_t>(ck.width));
    io::write_u64(os, static_cast<uint64_t>(ck.step));
    io::write_string(os, ck.rng_state);
    io::write_u64(os, ck.params.size());
    for (const auto& [name, t] : ck.params) {
      io::write_string(os, name);
      io::write_tensor(os, t);
    }
    io::write_u64(os, static_cast<uint64_t>(ck.adam_step));
    io::write_u64(os, ck.adam_slots.size());
    for (const auto& [m, v] : ck.adam_slots) {
      io::write_tensor(os, m);
      io::write_tensor(os, v);
    }
    if (!os) throw std::runtime_error("short write to checkpoint: " + tmp);
  }
  fs::rename(tmp, path);
}

inline CheckpointData read_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const uint32_t ver = io::read_u32(is);
  if (ver != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(ver) +
                             " is incompatible with supported version " +
                             std::to_string(kCheckpointVersion));
  CheckpointData ck;
  ck.config = json::parse(io::read_string(is));
  ck.height = static_cast<int64_t>(io::read_u64(is));
  ck.width = static_cast<int64_t>(io::read_u64(is));
  ck.step = static_cast<int64_t>(io::read_u64(is));
  ck.rng_state = io::read_string(is);
  const uint64_t np = io::read_u64(is);
  for (uint64_t i = 0; i < np; ++i) {
    std::string name = io::read_string(is);
    ck.params.emplace_back(std::move(name), io::read_tensor(is));
  }
  ck.adam_step = static_cast<int64_t>(io::read_u64(is));
  const uint64_t ns = io::read_u64(is);
  for (uint64_t i = 0; i < ns; ++i) {
    Tensor m = io::read_tensor(is);
    Tensor v = io::read_tensor(is);
    ck.adam_slots.emplace_back(std::move(m), std::move(v));
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return ck;
}

// Copies checkpointed parameters into a live store; name set and shapes
// must match exactly, otherwise the model config differs from the snapshot.
inline void apply_params(const CheckpointData& ck, nn::ParamStore& ps) {
  if (ck.params.size() != ps.count())
    throw std::runtime_error("checkpoint/model mismatch: parameter count differs");
  for (const auto& [name, t] : ck.params) {
    if (!ps.has(name))
      throw std::runtime_error("checkpoint/model mismatch: no parameter named " + name);
    ag::Var p = ps.get(name);
    if (p->value.shape() != t.shape())
      throw std::runtime_error("checkpoint/model mismatch: shape differs for " + name);
    std::memcpy(p->value.data(), t.data(), t.size() * sizeof(float));
  }
}

inline void apply_adam(const CheckpointData& ck, nn::Adam& opt) {
  auto& slots = opt.slots();
  if (ck.adam_slots.size() != slots.size())
    throw std::runtime_error("checkpoint/model mismatch: optimizer slot count differs");
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].m.shape() != ck.adam_slots[i].first.shape())
      throw std::runtime_error("checkpoint/model mismatch: optimizer slot shape differs");
    std::memcpy(slots[i].m.data(), ck.adam_slots[i].first.data(),
                slots[i].m.size() * sizeof(float));
    std::memcpy(slots[i].v.data(), ck.adam_slots[i].second.data(),
                slots[i].v.size() * sizeof(float));
  }
  opt.set_step_count(ck.adam_step);
}

}  // namespace divid
