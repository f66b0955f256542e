#include "corl/merge.hpp"

#include <cmath>
#include <vector>

#include "corl/errors.hpp"
#include "corl/rng.hpp"
#include "corl/world.hpp"
#include "doctest.h"

using namespace corl;

namespace {

Policy tiny_policy() {
  static World w(WorldConfig{1, 1, 2, 2, 4, 3});
  PolicyConfig pc;
  pc.hidden = 3;
  pc.cond_embed_dim = 2;
  pc.max_text_len = 2;
  return Policy(w, pc);
}

PolicyParams jittered(const Policy& pi, uint64_t seed, double scale) {
  PolicyParams p = pi.init_params(7);
  Rng rng = Rng(seed).fork("jitter");
  for (double& v : p.values) v += scale * rng.normal();
  return p;
}

// independent restatement of the typicality weighting for the oracle checks
double oracle_weight(double delta, double sigma) {
  if (delta == 0.0) return 1.0;
  if (sigma == 0.0) return std::exp(-700.0);
  return std::exp(std::max(-(delta * delta) / (2.0 * sigma * sigma), -700.0));
}

double population_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

} // namespace

TEST_CASE("strategy names round-trip") {
  CHECK(merge_strategy_name(MergeStrategy::average) == std::string("average"));
  CHECK(merge_strategy_name(MergeStrategy::gaussian) == std::string("gaussian"));
  CHECK(merge_strategy_from_name("average") == MergeStrategy::average);
  CHECK(merge_strategy_from_name("gaussian") == MergeStrategy::gaussian);
  CHECK(!merge_strategy_from_name("midpoint").has_value());
}

TEST_CASE("average merge is the element-wise midpoint") {
  Policy pi = tiny_policy();
  PolicyParams a = pi.init_params(1);
  PolicyParams b = a;
  for (size_t i = 0; i < b.values.size(); ++i) b.values[i] += 0.25 * static_cast<double>(i % 7);

  const PolicyParams m = merge_weights(a, b, MergeStrategy::average);
  REQUIRE(m.values.size() == a.values.size());
  for (size_t i = 0; i < m.values.size(); ++i)
    CHECK(m.values[i] == 0.5 * a.values[i] + 0.5 * b.values[i]);
}

TEST_CASE("merging a model with itself returns it bit-exactly") {
  Policy pi = tiny_policy();
  const PolicyParams anchor = pi.init_params(2);
  const PolicyParams a = jittered(pi, 11, 0.3);

  const PolicyParams avg = merge_weights(a, a, MergeStrategy::average);
  const PolicyParams gau = merge_weights(a, a, MergeStrategy::gaussian, &anchor);
  for (size_t i = 0; i < a.values.size(); ++i) {
    CHECK(avg.values[i] == a.values[i]);
    CHECK(gau.values[i] == a.values[i]);
  }
}

TEST_CASE("merge is symmetric bitwise") {
  Policy pi = tiny_policy();
  const PolicyParams anchor = pi.init_params(3);
  const PolicyParams a = jittered(pi, 21, 0.2);
  const PolicyParams b = jittered(pi, 22, 0.4);

  const PolicyParams ab_avg = merge_weights(a, b, MergeStrategy::average);
  const PolicyParams ba_avg = merge_weights(b, a, MergeStrategy::average);
  const PolicyParams ab_gau = merge_weights(a, b, MergeStrategy::gaussian, &anchor);
  const PolicyParams ba_gau = merge_weights(b, a, MergeStrategy::gaussian, &anchor);
  for (size_t i = 0; i < a.values.size(); ++i) {
    CHECK(ab_avg.values[i] == ba_avg.values[i]);
    CHECK(ab_gau.values[i] == ba_gau.values[i]);
  }
}

TEST_CASE("gaussian merge stays inside the interval spanned by its inputs") {
  Policy pi = tiny_policy();
  const PolicyParams anchor = pi.init_params(4);
  const PolicyParams a = jittered(pi, 31, 0.5);
  const PolicyParams b = jittered(pi, 32, 0.1);

  const PolicyParams m = merge_weights(a, b, MergeStrategy::gaussian, &anchor);
  for (size_t i = 0; i < m.values.size(); ++i) {
    const double lo = std::min(a.values[i], b.values[i]);
    const double hi = std::max(a.values[i], b.values[i]);
    CHECK(m.values[i] >= lo - 1e-15);
    CHECK(m.values[i] <= hi + 1e-15);
  }
}

TEST_CASE("gaussian merge matches a hand-rolled oracle") {
  Policy pi = tiny_policy();
  const PolicyParams anchor = pi.init_params(5);
  const PolicyParams a = jittered(pi, 41, 0.25);
  const PolicyParams b = jittered(pi, 42, 0.35);
  const size_t n = a.values.size();

  std::vector<double> da(n), db(n);
  for (size_t i = 0; i < n; ++i) {
    da[i] = a.values[i] - anchor.values[i];
    db[i] = b.values[i] - anchor.values[i];
  }
  const double sigma_a = population_std(da);
  const double sigma_b = population_std(db);

  const PolicyParams m = merge_weights(a, b, MergeStrategy::gaussian, &anchor);
  for (size_t i = 0; i < n; ++i) {
    const double wa = oracle_weight(da[i], sigma_a);
    const double wb = oracle_weight(db[i], sigma_b);
    const double want = (wa * a.values[i] + wb * b.values[i]) / (wa + wb);
    CHECK(m.values[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("typical deviations win over outliers") {
  Policy pi = tiny_policy();
  const PolicyParams anchor = pi.init_params(6);
  const size_t n = anchor.values.size();
  REQUIRE(n >= 8);

  // a: small uniform drift everywhere except one wild outlier coordinate.
  // b: moderate uniform drift. At the outlier, a's deviation is far outside
  // its own spread, so the merge should side with b there; elsewhere a's
  // drift is perfectly typical for a and the merge stays near the midpoint.
  PolicyParams a = anchor;
  PolicyParams b = anchor;
  const size_t outlier = 3;
  Rng rng = Rng(99).fork("drift");
  for (size_t i = 0; i < n; ++i) {
    a.values[i] += 0.01 * rng.normal();
    b.values[i] += 0.02 * rng.normal();
  }
  a.values[outlier] = anchor.values[outlier] + 5.0;

  const PolicyParams m = merge_weights(a, b, MergeStrategy::gaussian, &anchor);
  CHECK(std::abs(m.values[outlier] - b.values[outlier]) < 1e-6);
  CHECK(std::abs(m.values[outlier] - a.values[outlier]) > 4.9);
}

TEST_CASE("a model that never moved keeps full weight against zero spread") {
  Policy pi = tiny_policy();
  const PolicyParams anchor = pi.init_params(8);
  const PolicyParams a = anchor; // sigma_a == 0 and every delta == 0
  const PolicyParams b = jittered(pi, 51, 0.2);

  const PolicyParams m = merge_weights(a, b, MergeStrategy::gaussian, &anchor);
  for (size_t i = 0; i < m.values.size(); ++i) {
    const double wb = oracle_weight(b.values[i] - anchor.values[i],
                                    population_std([&] {
                                      std::vector<double> d(m.values.size());
                                      for (size_t k = 0; k < d.size(); ++k)
                                        d[k] = b.values[k] - anchor.values[k];
                                      return d;
                                    }()));
    const double want = (1.0 * a.values[i] + wb * b.values[i]) / (1.0 + wb);
    CHECK(m.values[i] == doctest::Approx(want).epsilon(1e-12));
  }

  // both at the anchor: every weight is exactly 1, merge returns the anchor
  const PolicyParams both = merge_weights(anchor, anchor, MergeStrategy::gaussian, &anchor);
  for (size_t i = 0; i < both.values.size(); ++i) CHECK(both.values[i] == anchor.values[i]);
}

TEST_CASE("merge rejects bad inputs") {
  Policy pi = tiny_policy();
  const PolicyParams a = pi.init_params(1);
  const PolicyParams b = pi.init_params(2);

  try {
    (void)merge_weights(a, b, MergeStrategy::gaussian, nullptr);
    FAIL("gaussian merge without an anchor must throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::bad_argument);
  }

  PolicyParams short_b = b;
  short_b.values.pop_back();
  CHECK_THROWS_AS((void)merge_weights(a, short_b, MergeStrategy::average), Error);

  PolicyParams short_anchor = a;
  short_anchor.values.pop_back();
  CHECK_THROWS_AS((void)merge_weights(a, b, MergeStrategy::gaussian, &short_anchor), Error);
}
