#include "trajmae/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace trajmae {

namespace {

constexpr std::string_view kMagic = "TMAE";
constexpr const char* kAdamCounter = "adam_step";

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::string_view s) { out_.append(s); }
  void name(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::string take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string name(const char* what) { return std::string(bytes(u32(what), what)); }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  if (ck.counters.count(kAdamCounter) != 0) throw CheckpointError("checkpoint counter name 'adam_step' is reserved");
  Writer w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  const std::string cfg = ck.model.to_json().dump();
  w.u64(cfg.size());
  w.bytes(cfg);

  w.u32(static_cast<std::uint32_t>(ck.params.entries().size()));
  for (const auto& [name, e] : ck.params.entries()) {
    w.name(name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.u64(d);
    for (double x : e.value.storage()) w.f64(x);
    for (double x : e.m) w.f64(x);
    for (double x : e.v) w.f64(x);
  }

  std::map<std::string, std::uint64_t> counters = ck.counters;
  counters[kAdamCounter] = ck.params.step_count();
  w.u32(static_cast<std::uint32_t>(counters.size()));
  for (const auto& [name, v] : counters) {
    w.name(name);
    w.u64(v);
  }

  w.u32(static_cast<std::uint32_t>(ck.rng.size()));
  for (const auto& [name, s] : ck.rng) {
    w.name(name);
    w.u64(s.key);
    w.u64(s.counter);
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(kMagic.size(), "magic") != kMagic) throw CheckpointError("checkpoint has bad magic (expected TMAE)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const std::uint64_t cfg_len = r.u64("config length");
  const std::string_view cfg = r.bytes(cfg_len, "config");
  try {
    ck.model = ModelConfig::from_json(nlohmann::json::parse(cfg));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint config block is invalid: ") + e.what());
  }

  const std::uint32_t n_tensors = r.u32("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.name("tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64("tensor dims");
    const std::size_t n = shape_numel(shape);
    if (n > bytes.size()) throw CheckpointError("checkpoint tensor '" + name + "' has implausible extent");
    std::vector<double> value(n), m(n), v(n);
    for (double& x : value) x = r.f64("tensor values");
    for (double& x : m) x = r.f64("tensor first moments");
    for (double& x : v) x = r.f64("tensor second moments");
    if (ck.params.contains(name)) throw CheckpointError("checkpoint repeats tensor '" + name + "'");
    ck.params.add(name, Tensor(std::move(shape), std::move(value)));
    ParamEntry& e = ck.params.entry(name);
    e.m = std::move(m);
    e.v = std::move(v);
  }

  const std::uint32_t n_counters = r.u32("counter count");
  for (std::uint32_t i = 0; i < n_counters; ++i) {
    std::string name = r.name("counter name");
    ck.counters[name] = r.u64("counter value");
  }
  auto adam = ck.counters.find(kAdamCounter);
  if (adam == ck.counters.end()) throw CheckpointError("checkpoint lacks the adam_step counter");
  ck.params.set_step_count(adam->second);
  ck.counters.erase(adam);

  const std::uint32_t n_rng = r.u32("rng count");
  for (std::uint32_t i = 0; i < n_rng; ++i) {
    std::string name = r.name("rng name");
    RngState s;
    s.key = r.u64("rng key");
    s.counter = r.u64("rng counter");
    ck.rng[name] = s;
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes at " + std::to_string(r.pos()));
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_checkpoint(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.model == expected)) {
    throw CheckpointError(path.string() + ": model configuration " + ck.model.to_json().dump() +
                          " does not match expected " + expected.to_json().dump());
  }
  return ck;
}

}  // namespace trajmae
