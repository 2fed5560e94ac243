#include "contextflow/train/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "contextflow/core/error.hpp"

namespace contextflow {

namespace {

constexpr char kMagic[8] = {'C', 'F', 'L', 'O', 'W', 'C', 'K', 'P'};

struct Header {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::uint8_t phase = 0;
  std::uint64_t gen_fingerprint = 0;
};

template <typename T>
void put(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& off, const std::string& path) {
  if (off + sizeof(T) > in.size()) {
    throw CheckpointError("'" + path + "' truncated at offset " + std::to_string(off));
  }
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

struct Parsed {
  Header header;
  std::map<std::string, NdArray> records;
};

Parsed parse(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t off = 0;
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  }
  off = sizeof(kMagic);
  Parsed out;
  out.header.version = take<std::uint32_t>(bytes, off, path);
  if (out.header.version != kCheckpointVersion) {
    throw CheckpointError("'" + path + "' has format_version " +
                          std::to_string(out.header.version) + "; this build reads version " +
                          std::to_string(kCheckpointVersion));
  }
  out.header.config_digest = take<std::uint64_t>(bytes, off, path);
  out.header.phase = take<std::uint8_t>(bytes, off, path);
  if (out.header.phase > 1) throw CheckpointError("'" + path + "' has an invalid phase byte");
  out.header.gen_fingerprint = take<std::uint64_t>(bytes, off, path);
  const std::uint64_t n_records = take<std::uint64_t>(bytes, off, path);
  for (std::uint64_t r = 0; r < n_records; ++r) {
    const std::uint32_t name_len = take<std::uint32_t>(bytes, off, path);
    if (off + name_len > bytes.size()) {
      throw CheckpointError("'" + path + "' truncated inside record name");
    }
    std::string name(bytes.data() + off, name_len);
    off += name_len;
    const std::uint8_t rank = take<std::uint8_t>(bytes, off, path);
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape[d] = std::size_t(take<std::uint64_t>(bytes, off, path));
      numel *= shape[d];
    }
    NdArray value(shape);
    if (off + numel * sizeof(double) > bytes.size()) {
      throw CheckpointError("'" + path + "' truncated inside record '" + name + "'");
    }
    std::memcpy(value.data(), bytes.data() + off, numel * sizeof(double));
    off += numel * sizeof(double);
    if (!out.records.emplace(std::move(name), std::move(value)).second) {
      throw CheckpointError("'" + path + "' has a duplicate record");
    }
  }
  if (off != bytes.size()) {
    throw CheckpointError("'" + path + "' has " + std::to_string(bytes.size() - off) +
                          " trailing bytes");
  }
  return out;
}

void restore(FlowModel& model, const std::map<std::string, NdArray>& records,
             const std::string& ns, const std::string& path) {
  for (const auto& [name, value] : records) {
    if (name.rfind(ns, 0) != 0) continue;
    if (!model.store().has(name)) {
      throw CheckpointError("'" + path + "' record '" + name +
                            "' does not exist in a model built from this config");
    }
    model.store().set(name, value);
  }
  // strict completeness: everything the model allocates must be present
  for (const std::string& name : model.store().names(ns)) {
    if (!records.count(name)) {
      throw CheckpointError("'" + path + "' is missing record '" + name + "'");
    }
  }
}

}  // namespace

void save_checkpoint(const FlowModel& model, const std::string& path) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  put(out, model.config().digest());
  put(out, std::uint8_t(model.phase() == Phase::kSpecialist ? 1 : 0));
  put(out, model.store().fingerprint("generalist"));
  const std::vector<std::string> names = model.store().names();
  put(out, std::uint64_t(names.size()));
  for (const std::string& name : names) {
    const NdArray& value = model.store().get(name).value();
    put(out, std::uint32_t(name.size()));
    out.append(name);
    put(out, std::uint8_t(value.rank()));
    for (std::size_t d : value.shape()) put(out, std::uint64_t(d));
    out.append(reinterpret_cast<const char*>(value.data()), value.numel() * sizeof(double));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw CheckpointError("short write to '" + path + "'");
}

std::unique_ptr<FlowModel> load_checkpoint(const FlowConfig& cfg, const std::string& path,
                                           std::uint64_t seed) {
  Parsed p = parse(path);
  if (p.header.config_digest != cfg.digest()) {
    throw CheckpointError("'" + path + "' was written for a different config (digest " +
                          std::to_string(p.header.config_digest) + ", this config " +
                          std::to_string(cfg.digest()) + ")");
  }
  auto model = std::make_unique<FlowModel>(cfg, seed);
  restore(*model, p.records, "generalist", path);
  if (p.header.phase == 1) {
    Rng rng = Rng(seed).split("attach");
    model->attach_specialist(rng);
    if (model->generalist_fingerprint() != p.header.gen_fingerprint) {
      throw CheckpointError("FingerprintMismatch: '" + path +
                            "' embeds generalist fingerprint " +
                            std::to_string(p.header.gen_fingerprint) + " but the restored " +
                            "generalist hashes to " +
                            std::to_string(model->generalist_fingerprint()));
    }
    restore(*model, p.records, "specialist", path);
  } else {
    for (const auto& [name, value] : p.records) {
      (void)value;
      if (name.rfind("specialist", 0) == 0) {
        throw CheckpointError("'" + path + "' carries specialist records but claims the " +
                              "generalist phase");
      }
    }
  }
  return model;
}

void load_specialist_onto(FlowModel& model, const std::string& path, std::uint64_t seed) {
  Parsed p = parse(path);
  if (p.header.config_digest != model.config().digest()) {
    throw CheckpointError("'" + path + "' was written for a different config");
  }
  if (p.header.phase != 1) {
    throw CheckpointError("'" + path + "' is not a specialist checkpoint");
  }
  if (model.phase() == Phase::kGeneralist) {
    Rng rng = Rng(seed).split("attach");
    model.attach_specialist(rng);
  }
  if (model.generalist_fingerprint() != p.header.gen_fingerprint) {
    throw CheckpointError(
        "FingerprintMismatch: specialist checkpoint '" + path +
        "' was trained against generalist fingerprint " +
        std::to_string(p.header.gen_fingerprint) + ", the loaded generalist hashes to " +
        std::to_string(model.generalist_fingerprint()));
  }
  restore(model, p.records, "specialist", path);
}

}  // namespace contextflow
