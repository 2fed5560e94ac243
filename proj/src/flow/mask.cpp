#include "contextflow/flow/mask.hpp"

#include "contextflow/core/error.hpp"

namespace contextflow {

MaskKind mask_from_name(const std::string& s) {
  if (s == "channel-half") return MaskKind::kChannelHalf;
  if (s == "checkerboard") return MaskKind::kCheckerboard;
  if (s == "alternating-feature") return MaskKind::kAlternating;
  throw ConfigError("unknown mask kind '" + s +
                    "' (want channel-half | checkerboard | alternating-feature)");
}

const char* mask_name(MaskKind k) {
  switch (k) {
    case MaskKind::kChannelHalf: return "channel-half";
    case MaskKind::kCheckerboard: return "checkerboard";
    case MaskKind::kAlternating: return "alternating-feature";
  }
  return "?";
}

namespace {

void finish_plan(MaskPlan& plan, std::size_t extent) {
  plan.inverse_perm.assign(extent, 0);
  for (std::size_t i = 0; i < plan.a_idx.size(); ++i) plan.inverse_perm[plan.a_idx[i]] = i;
  for (std::size_t i = 0; i < plan.b_idx.size(); ++i) {
    plan.inverse_perm[plan.b_idx[i]] = plan.a_idx.size() + i;
  }
}

}  // namespace

MaskPlan plan_mask(const MaskSpec& spec, const Shape& sample_shape) {
  if (sample_shape.empty()) throw ConfigError("plan_mask: empty sample shape");
  const std::size_t c = sample_shape[0];
  MaskPlan plan;
  if (spec.parity != 0 && spec.parity != 1) throw ConfigError("plan_mask: parity must be 0 or 1");

  switch (spec.kind) {
    case MaskKind::kChannelHalf: {
      if (c < 2) throw ConfigError("channel-half mask needs >= 2 channels, got " +
                                   std::to_string(c));
      plan.axis = 1;
      const std::size_t ca = c / 2;
      std::vector<std::size_t> lo, hi;
      for (std::size_t i = 0; i < ca; ++i) lo.push_back(i);
      for (std::size_t i = ca; i < c; ++i) hi.push_back(i);
      plan.a_idx = spec.parity == 0 ? lo : hi;
      plan.b_idx = spec.parity == 0 ? hi : lo;
      finish_plan(plan, c);
      break;
    }
    case MaskKind::kAlternating: {
      if (c < 2) throw ConfigError("alternating-feature mask needs >= 2 features, got " +
                                   std::to_string(c));
      plan.axis = 1;
      for (std::size_t i = 0; i < c; ++i) {
        ((i % 2 == std::size_t(spec.parity)) ? plan.a_idx : plan.b_idx).push_back(i);
      }
      finish_plan(plan, c);
      break;
    }
    case MaskKind::kCheckerboard: {
      plan.axis = 2;
      if (sample_shape.size() == 2) {
        const std::size_t t = sample_shape[1];
        if (t % 2 != 0) throw ConfigError("checkerboard mask needs even length, got " +
                                          std::to_string(t));
        for (std::size_t i = 0; i < t; ++i) {
          if (i % 2 == std::size_t(spec.parity)) {
            plan.a_idx.push_back(i);
            plan.b_idx.push_back(i ^ 1);  // temporal partner
          }
        }
        finish_plan(plan, t);
      } else if (sample_shape.size() == 3) {
        const std::size_t h = sample_shape[1], w = sample_shape[2];
        if (w % 2 != 0) throw ConfigError("checkerboard mask needs even width, got " +
                                          std::to_string(w));
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            if ((y + x) % 2 == std::size_t(spec.parity)) {
              plan.a_idx.push_back(y * w + x);
              plan.b_idx.push_back(y * w + (x ^ 1));  // horizontal partner
            }
          }
        }
        finish_plan(plan, h * w);
      } else {
        throw ConfigError("checkerboard mask needs a spatial/temporal axis");
      }
      break;
    }
  }
  return plan;
}

}  // namespace contextflow
