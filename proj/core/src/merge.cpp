#include "corl/merge.hpp"

#include <cmath>
#include <vector>

#include "corl/errors.hpp"

namespace corl {

const char* merge_strategy_name(MergeStrategy s) {
  return s == MergeStrategy::average ? "average" : "gaussian";
}

std::optional<MergeStrategy> merge_strategy_from_name(const std::string& name) {
  if (name == "average") return MergeStrategy::average;
  if (name == "gaussian") return MergeStrategy::gaussian;
  return std::nullopt;
}

namespace {

// population std of (params - anchor)
double deviation_spread(const PolicyParams& params, const PolicyParams& anchor) {
  const size_t n = params.values.size();
  double mean = 0.0;
  for (size_t i = 0; i < n; ++i) mean += params.values[i] - anchor.values[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = params.values[i] - anchor.values[i] - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<double>(n));
}

// exp(-delta^2 / 2 sigma^2) with the zero-spread limit pinned: a model that
// never moved has delta == 0 everywhere, weight 1. Exponents are floored so
// the weight never underflows to an exact zero.
double gaussian_weight(double delta, double sigma) {
  if (delta == 0.0) return 1.0;
  if (sigma == 0.0) return std::exp(-700.0);
  const double expo = -(delta * delta) / (2.0 * sigma * sigma);
  return std::exp(std::max(expo, -700.0));
}

} // namespace

PolicyParams merge_weights(const PolicyParams& a, const PolicyParams& b, MergeStrategy strategy,
                           const PolicyParams* anchor) {
  if (!a.same_shape(b)) fail(Errc::shape_mismatch, "merge: parameter shapes differ");
  PolicyParams out = a;
  const size_t n = a.values.size();

  if (strategy == MergeStrategy::average) {
    for (size_t i = 0; i < n; ++i) out.values[i] = 0.5 * a.values[i] + 0.5 * b.values[i];
    return out;
  }

  if (anchor == nullptr)
    fail(Errc::bad_argument, "gaussian merge requires the shared initialization as anchor");
  if (!a.same_shape(*anchor)) fail(Errc::shape_mismatch, "merge: anchor shape differs");

  const double sigma_a = deviation_spread(a, *anchor);
  const double sigma_b = deviation_spread(b, *anchor);
  for (size_t i = 0; i < n; ++i) {
    const double da = a.values[i] - anchor->values[i];
    const double db = b.values[i] - anchor->values[i];
    const double wa = gaussian_weight(da, sigma_a);
    const double wb = gaussian_weight(db, sigma_b);
    const double norm = wa + wb;
    out.values[i] = (wa / norm) * a.values[i] + (wb / norm) * b.values[i];
  }
  return out;
}

} // namespace corl
