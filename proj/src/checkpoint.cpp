#include "kvla/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kvla {

namespace {

constexpr char kMagic[8] = {'K', 'V', 'L', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

double read_f64(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& config,
                     const Model& model, const AdamW& optimizer,
                     std::size_t epoch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kMagic, 8);
  write_u32(out, kVersion);
  const std::string config_text = config_to_json(config);
  write_u64(out, config.fingerprint());
  write_string(out, config_text);
  write_u32(out, static_cast<std::uint32_t>(epoch));

  const auto& entries = model.params.entries();
  write_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    write_string(out, name);
    write_u32(out, static_cast<std::uint32_t>(tensor.shape().size()));
    for (std::size_t e : tensor.shape()) write_u64(out, e);
    for (double v : tensor.values()) write_f64(out, v);
  }

  write_u64(out, optimizer.step_count());
  for (const auto& m : optimizer.first_moments()) {
    for (double v : m) write_f64(out, v);
  }
  for (const auto& v : optimizer.second_moments()) {
    for (double x : v) write_f64(out, x);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const RunConfig* expected_config,
                                 bool allow_mismatch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const std::uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::uint64_t fingerprint = read_u64(in);
  const std::string config_text = read_string(in);

  LoadedCheckpoint loaded;
  loaded.config = config_from_json(config_text, desk_config());
  if (loaded.config.fingerprint() != fingerprint) {
    throw std::runtime_error("checkpoint fingerprint does not match its own "
                             "config block");
  }
  if (expected_config != nullptr &&
      expected_config->fingerprint() != fingerprint && !allow_mismatch) {
    throw std::invalid_argument(
        "checkpoint was produced under a different config; pass the override "
        "flag to load it anyway");
  }
  loaded.epoch = read_u32(in);

  loaded.model = Model::init(loaded.config.model, loaded.config.seed);
  auto& entries = loaded.model.params.entries();
  const std::uint32_t count = read_u32(in);
  if (count != entries.size()) {
    throw std::runtime_error("checkpoint parameter count mismatch");
  }
  for (auto& [name, tensor] : entries) {
    const std::string stored_name = read_string(in);
    if (stored_name != name) {
      throw std::runtime_error("checkpoint block order mismatch: expected " +
                               name + ", found " + stored_name);
    }
    const std::uint32_t ndim = read_u32(in);
    Shape shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = read_u64(in);
    if (shape != tensor.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    auto values = tensor.values_mut();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_f64(in);
  }

  loaded.optimizer_steps = read_u64(in);
  loaded.optimizer_m.resize(entries.size());
  loaded.optimizer_v.resize(entries.size());
  for (std::size_t p = 0; p < entries.size(); ++p) {
    loaded.optimizer_m[p].resize(entries[p].second.size());
    for (double& v : loaded.optimizer_m[p]) v = read_f64(in);
  }
  for (std::size_t p = 0; p < entries.size(); ++p) {
    loaded.optimizer_v[p].resize(entries[p].second.size());
    for (double& v : loaded.optimizer_v[p]) v = read_f64(in);
  }
  return loaded;
}

}  // namespace kvla
