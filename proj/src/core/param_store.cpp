#include "contextflow/core/param_store.hpp"

#include <cstring>

#include "contextflow/core/error.hpp"

namespace contextflow {

namespace {

bool has_prefix(const std::string& name, const std::string& prefix) {
  return name.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<std::uint64_t>(p[i]);
    h *= kFnvPrime;
  }
  return h;
}

Tensor ParamStore::create(const std::string& name, NdArray init, bool trainable) {
  if (name.empty()) throw ConfigError("param name must not be empty");
  if (entries_.count(name)) throw ConfigError("duplicate param name '" + name + "'");
  Entry e;
  e.tensor = Tensor::leaf(std::move(init), trainable, name);
  e.trainable = trainable;
  entries_.emplace(name, e);
  return entries_.at(name).tensor;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown param '" + name + "'");
  return it->second.tensor;
}

bool ParamStore::has(const std::string& name) const { return entries_.count(name) != 0; }

void ParamStore::set(const std::string& name, NdArray value) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown param '" + name + "'");
  if (!it->second.tensor.value().same_shape(value)) {
    throw ConfigError("shape mismatch setting '" + name + "': have " +
                      shape_str(it->second.tensor.shape()) + ", got " + shape_str(value.shape()));
  }
  it->second.tensor.set_value(std::move(value));
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (has_prefix(name, prefix)) out.push_back(name);
  }
  return out;  // std::map iteration is already sorted
}

std::vector<Tensor> ParamStore::trainable(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, e] : entries_) {
    if (has_prefix(name, prefix) && e.trainable && !e.frozen) out.push_back(e.tensor);
  }
  return out;
}

std::vector<Tensor> ParamStore::all(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, e] : entries_) {
    if (has_prefix(name, prefix)) out.push_back(e.tensor);
  }
  return out;
}

bool ParamStore::is_trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown param '" + name + "'");
  return it->second.trainable && !it->second.frozen;
}

void ParamStore::freeze(const std::string& prefix) {
  for (auto& [name, e] : entries_) {
    if (!has_prefix(name, prefix)) continue;
    e.frozen = true;
    if (e.trainable) e.tensor.node()->requires_grad = false;
  }
}

bool ParamStore::is_frozen(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown param '" + name + "'");
  return it->second.frozen;
}

std::size_t ParamStore::param_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) {
    if (has_prefix(name, prefix) && e.trainable) n += e.tensor.numel();
  }
  return n;
}

std::uint64_t ParamStore::fingerprint(const std::string& prefix) const {
  static_assert(sizeof(double) == 8, "64-bit IEEE doubles required");
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, e] : entries_) {
    if (!has_prefix(name, prefix)) continue;
    h = fnv1a(name.data(), name.size(), h);
    const unsigned char zero = 0;
    h = fnv1a(&zero, 1, h);
    const Shape& sh = e.tensor.shape();
    std::uint64_t rank = sh.size();
    h = fnv1a(&rank, sizeof(rank), h);
    for (std::size_t d : sh) {
      std::uint64_t dim = d;
      h = fnv1a(&dim, sizeof(dim), h);
    }
    h = fnv1a(e.tensor.value().data(), e.tensor.numel() * sizeof(double), h);
  }
  return h;
}

}  // namespace contextflow
