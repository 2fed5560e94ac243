#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/tensor.hpp"

namespace contextflow {

// Named registry of leaf tensors. Two kinds of entry: parameters (trainable
// unless their namespace is frozen) and buffers (persistent state that is
// saved/restored but never optimized, e.g. data-dependent init flags).
// Namespaces are path prefixes: "generalist/...", "specialist/...".
class ParamStore {
 public:
  Tensor create(const std::string& name, NdArray init, bool trainable = true);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const;
  void set(const std::string& name, NdArray value);  // overwrite in place

  // Sorted names under a prefix ("" = everything).
  std::vector<std::string> names(const std::string& prefix = "") const;
  // Trainable-and-unfrozen tensors under a prefix, sorted by name.
  std::vector<Tensor> trainable(const std::string& prefix = "") const;
  // All tensors under a prefix (params and buffers), sorted by name.
  std::vector<Tensor> all(const std::string& prefix = "") const;

  bool is_trainable(const std::string& name) const;  // entry kind && not frozen

  // Marks every parameter under the prefix non-differentiable. Buffers are
  // unaffected (they never train). Irreversible by design: the generalist
  // namespace stays frozen for the life of the specialist phase.
  void freeze(const std::string& prefix);
  bool is_frozen(const std::string& name) const;

  // Number of scalar parameters (buffers excluded) under the prefix.
  std::size_t param_count(const std::string& prefix = "") const;

  // FNV-1a over sorted entries (name, shape, raw little-endian values) under
  // the prefix. Any bit flip in any value changes the digest.
  std::uint64_t fingerprint(const std::string& prefix = "") const;

 private:
  struct Entry {
    Tensor tensor;
    bool trainable = true;
    bool frozen = false;
  };
  std::map<std::string, Entry> entries_;
};

// FNV-1a primitives shared with checkpointing.
constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = kFnvOffset);

}  // namespace contextflow
