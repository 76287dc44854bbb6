#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "trajmae/model.hpp"
#include "trajmae/params.hpp"
#include "trajmae/rng.hpp"

namespace trajmae {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RngState {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  static RngState of(const RngStream& r) { return {r.key(), r.counter()}; }
  RngStream stream() const { return RngStream::from_state(key, counter); }
  bool operator==(const RngState&) const = default;
};

struct Checkpoint {
  ModelConfig model;
  ParamStore params;
  std::map<std::string, std::uint64_t> counters;
  std::map<std::string, RngState> rng;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian layout:
//   "TMAE" | u32 version | u64 len + config JSON
//   | u32 count, per tensor: u32 len + name, u32 rank, u64 dims, f64 value/m/v
//   | u32 count, per counter: u32 len + name, u64 value   (includes "adam_step")
//   | u32 count, per stream: u32 len + name, u64 key, u64 counter
std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also rejects a file whose model configuration differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace trajmae
