#pragma once

#include <optional>
#include <string>

#include "corl/policy.hpp"

namespace corl {

enum class MergeStrategy { average, gaussian };

const char* merge_strategy_name(MergeStrategy s);
std::optional<MergeStrategy> merge_strategy_from_name(const std::string& name);

// Combines two same-shaped parameter vectors.
//
// average: element-wise midpoint.
//
// gaussian: per-parameter convex combination weighted by how typical each
// model's deviation from the anchor is for that model. With delta_x the
// parameter's deviation of model x from the anchor and sigma_x the standard
// deviation of all of model x's deviations, the unnormalized weight is
// exp(-delta_x^2 / (2 sigma_x^2)), renormalized per parameter. Parameters a
// model barely moved keep its value; wild outliers defer to the other model.
// Requires the anchor (the shared initialization both models trained from).
PolicyParams merge_weights(const PolicyParams& a, const PolicyParams& b, MergeStrategy strategy,
                           const PolicyParams* anchor = nullptr);

} // namespace corl
