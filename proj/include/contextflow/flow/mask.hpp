#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"

namespace contextflow {

enum class MaskKind { kChannelHalf, kCheckerboard, kAlternating };

MaskKind mask_from_name(const std::string& s);
const char* mask_name(MaskKind k);

struct MaskSpec {
  MaskKind kind = MaskKind::kChannelHalf;
  int parity = 0;  // 0 or 1; odd parity swaps the transformed/passthrough roles
};

// Concrete index plan for one coupling layer over a sample of shape
// (C, pos...). The partition lives on `axis` of the batched tensor
// (1 = channel/feature, 2 = flattened position). a = transformed half,
// b = passthrough half feeding the coupling net; for checkerboard masks
// b is ordered so b[i] is the spatial partner of a[i]. inverse_perm
// restores the original axis order after concat([a-order, b-order]).
struct MaskPlan {
  std::size_t axis = 1;
  std::vector<std::size_t> a_idx;
  std::vector<std::size_t> b_idx;
  std::vector<std::size_t> inverse_perm;
};

// sample_shape excludes the batch axis: (C), (C,T) or (C,H,W).
// Throws ConfigError when the partition is impossible (C < 2 for feature
// masks, odd extents for checkerboard).
MaskPlan plan_mask(const MaskSpec& spec, const Shape& sample_shape);

}  // namespace contextflow
