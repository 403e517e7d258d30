#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "nbmlss/errors.hpp"
#include "nbmlss/eval.hpp"

using namespace nbmlss;
using namespace nbmlss::eval;

namespace {

QuantileVector normal_quantiles(double mu, double sigma) {
  QuantileVector q;
  for (std::size_t k = 0; k < kPercentiles; ++k) q[k] = dists::quantile(percentile_level(k), dists::NormalParams{mu, sigma});
  return q;
}

double normal_crps(double y, double mu, double sigma) {
  const double z = (y - mu) / sigma;
  const double phi = std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI);
  const double Phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
  return sigma * (z * (2 * Phi - 1) + 2 * phi - 1 / std::sqrt(M_PI));
}

// Likelihood ratio from the raw products in extended precision.
long double kupiec_oracle(long double x, long double n, long double p) {
  const long double phat = x / n;
  const long double l0 = std::pow(1 - p, n - x) * std::pow(p, x);
  const long double l1 = std::pow(1 - phat, n - x) * std::pow(phat, x);
  return -2 * std::log(l0) + 2 * std::log(l1);
}

QuantilePanel perfect_panel(std::size_t days, std::uint64_t seed) {
  QuantilePanel panel;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto q = normal_quantiles(0.0, 1.0);
  for (std::size_t d = 0; d < days; ++d) {
    panel.days.push_back(static_cast<std::int64_t>(d));
    for (std::size_t h = 0; h < 24; ++h) {
      panel.y.push_back(n(rng));
      panel.q.push_back(q);
    }
  }
  return panel;
}

}  // namespace

TEST_CASE("pinball examples") {
  CHECK(pinball(10, 8, 0.9) == doctest::Approx(1.8));
  CHECK(pinball(8, 10, 0.9) == doctest::Approx(0.2));
  CHECK(pinball(3, 3, 0.3) == 0.0);
  const auto q = normal_quantiles(0, 1);
  double loop = 0.0;
  for (std::size_t k = 0; k < 99; ++k) loop += pinball(0.7, q[k], percentile_level(k));
  CHECK(crps_from_quantiles(0.7, q) == doctest::Approx(loop / 99).epsilon(1e-14));
}

TEST_CASE("mean pinball tracks half the closed-form CRPS") {
  // Mean pinball over alpha approximates integral_0^1 pinball = CRPS / 2.
  for (double sigma : {0.5, 1.0, 5.0}) {
    const auto q = normal_quantiles(0.0, sigma);
    double worst = 0.0;
    for (double y = -4 * sigma; y <= 4 * sigma; y += sigma / 8) {
      const double ref = normal_crps(y, 0.0, sigma);
      worst = std::max(worst, std::abs(2 * crps_from_quantiles(y, q) - ref) / ref);
    }
    CHECK(worst < 0.02);
  }
  // Refining to 999 levels converges towards the exact integral; the 99-level
  // grid carries an intrinsic ~0.9% discretization bias.
  for (double y : {-1.3, 0.0, 0.4, 2.2}) {
    double fine = 0.0;
    for (int k = 1; k <= 999; ++k) {
      const double a = k / 1000.0;
      fine += pinball(y, dists::quantile(a, dists::NormalParams{0, 1}), a);
    }
    fine /= 999;
    const double coarse = crps_from_quantiles(y, normal_quantiles(0, 1));
    const double exact = normal_crps(y, 0, 1) / 2;
    CHECK(std::abs(coarse - fine) / fine < 0.01);
    CHECK(std::abs(fine - exact) < std::abs(coarse - exact));
  }
}

TEST_CASE("quantile extraction") {
  EnsembleSpec spec;
  spec.members = 1;
  spec.n_samples = 10000;
  spec.seed = 3;
  ForecastDistribution fc{100, 5, {dists::NormalParams{0, 1}}, {}};
  const auto q = extract_quantiles(fc, spec);
  CHECK(std::abs(q[49]) < 0.05);
  CHECK(std::is_sorted(q.begin(), q.end()));
  auto resorted = q;
  std::sort(resorted.begin(), resorted.end());
  CHECK(resorted == q);
  CHECK(extract_quantiles(fc, spec) == q);

  // Identical members: the modes agree within noise, v exact in closed form.
  ForecastDistribution twin{100, 5, {dists::JsuParams{1, 2, 1.5, 0.4}, dists::JsuParams{1, 2, 1.5, 0.4}}, {}};
  spec.members = 2;
  spec.mode = Aggregation::p;
  const auto qp = extract_quantiles(twin, spec);
  spec.mode = Aggregation::v;
  const auto qv = extract_quantiles(twin, spec);
  for (std::size_t k = 4; k < 95; k += 10) CHECK(std::abs(qp[k] - qv[k]) < 0.15);
  spec.closed_form = true;
  const auto qc = extract_quantiles(twin, spec);
  for (std::size_t k = 0; k < 99; ++k) CHECK(qc[k] == dists::quantile(percentile_level(k), twin.members[0]));

  ForecastDistribution apart{0, 0, {dists::NormalParams{0, 1}, dists::NormalParams{10, 1}}, {}};
  CHECK(extract_quantiles(apart, spec)[49] == doctest::Approx(5.0).epsilon(1e-12));
  spec.mode = Aggregation::p;
  const auto mix = extract_quantiles(apart, spec);
  CHECK(mixture_cdf(apart.members, mix[24]) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(aggregation_from_string("v") == Aggregation::v);
  CHECK_THROWS_AS(aggregation_from_string("x"), ConfigError);
}

TEST_CASE("pooled draws follow the mixture CDF") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-3, 3), s(0.5, 2.0);
  EnsembleSpec spec;
  spec.members = 4;
  spec.n_samples = 10000;
  for (int trial = 0; trial < 3; ++trial) {
    ForecastDistribution fc;
    for (int m = 0; m < 4; ++m) fc.members.push_back(dists::JsuParams{u(rng), s(rng), s(rng), u(rng) / 3});
    spec.seed = static_cast<std::uint64_t>(trial);
    const auto q = extract_quantiles(fc, spec);
    double ks = 0.0;
    for (std::size_t k = 0; k < 99; ++k) ks = std::max(ks, std::abs(mixture_cdf(fc.members, q[k]) - percentile_level(k)));
    CHECK(ks < 0.02);
  }
}

TEST_CASE("empirical quantile is type 7") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(empirical_quantile(v, 0.0) == 1.0);
  CHECK(empirical_quantile(v, 1.0) == 4.0);
  CHECK(empirical_quantile(v, 0.5) == 2.5);
  CHECK(empirical_quantile(v, 0.1) == doctest::Approx(1.3));
}

TEST_CASE("PICP and intervals") {
  CHECK(central_interval(0.9) == std::make_pair<std::size_t, std::size_t>(4, 94));
  CHECK(central_interval(0.5) == std::make_pair<std::size_t, std::size_t>(24, 74));
  CHECK(central_interval(0.98) == std::make_pair<std::size_t, std::size_t>(0, 98));
  CHECK_THROWS_AS(central_interval(0.995), ConfigError);
  CHECK_THROWS_AS(central_interval(0.333), ConfigError);

  QuantilePanel p = perfect_panel(2, 1);
  for (auto& y : p.y) y = 0.0;
  CHECK(picp(p, 0.5) == 1.0);
  for (auto& y : p.y) y = -100.0;
  CHECK(picp(p, 0.98) == 0.0);

  const QuantilePanel big = perfect_panel(417, 2);  // 10008 observations
  CHECK(std::abs(picp(big, 0.9) - 0.9) < 0.01);
}

TEST_CASE("Kupiec") {
  auto r = kupiec(50, 100, 0.5);
  CHECK(r.lr == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.pass);
  r = kupiec(365, 365, 0.9);
  CHECK_FALSE(r.pass);
  CHECK(r.lr == doctest::Approx(static_cast<double>(-2 * 365 * std::log(0.9L))).epsilon(1e-12));
  r = kupiec(200, 365, 0.5);
  const long double ref = kupiec_oracle(200, 365, 0.5);
  CHECK(r.lr == doctest::Approx(static_cast<double>(ref)).epsilon(1e-10));
  CHECK(r.pass == (ref < 3.841459L));
  CHECK(kupiec(0, 0, 0.5).pass);

  for (std::size_t x = 3; x < 247; x += 7) {
    CHECK(kupiec(x, 250, 0.9).lr == doctest::Approx(static_cast<double>(kupiec_oracle(x, 250, 0.9))).epsilon(1e-9));
  }
  // Monotone in |x/n - p|.
  for (double p : {0.5, 0.9, 0.98}) {
    const auto center = static_cast<std::size_t>(std::lround(p * 500));
    double prev = kupiec(center, 500, p).lr;
    for (std::size_t x = center + 1; x <= 500; ++x) {
      const double lr = kupiec(x, 500, p).lr;
      CHECK(lr >= prev - 1e-12);
      prev = lr;
    }
    prev = kupiec(center, 500, p).lr;
    for (std::size_t x = center; x-- > 0;) {
      const double lr = kupiec(x, 500, p).lr;
      CHECK(lr >= prev - 1e-12);
      prev = lr;
    }
  }
}

TEST_CASE("Kupiec hour panel") {
  QuantilePanel p = perfect_panel(100, 3);
  // Exact 50% coverage in every hour: alternate inside and outside.
  for (std::size_t d = 0; d < 100; ++d) {
    for (std::size_t h = 0; h < 24; ++h) p.y[d * 24 + h] = d % 2 == 0 ? 0.0 : 5.0;
  }
  CHECK(kupiec_hour_panel(p, 0.5) == 24);
  for (std::size_t d = 0; d < 100; ++d) p.y[d * 24] = 5.0;
  CHECK(kupiec_hour_panel(p, 0.5) == 23);

  // Panel miscalibrated by 5 points: per-hour loop oracle.
  QuantilePanel m = perfect_panel(200, 4);
  for (auto& q : m.q) {
    for (auto& v : q) v *= 0.85;
  }
  std::size_t oracle = 0;
  for (std::size_t h = 0; h < 24; ++h) {
    std::size_t hits = 0;
    for (std::size_t d = 0; d < 200; ++d) {
      const double y = m.y[d * 24 + h];
      const auto& q = m.q[d * 24 + h];
      hits += (q[4] <= y && y <= q[94]) ? 1 : 0;
    }
    CHECK(interval_hits(m, 0.9, h) == hits);
    oracle += kupiec_oracle(hits, 200, 0.9) < 3.841459L ? 1 : 0;
  }
  CHECK(kupiec_hour_panel(m, 0.9) == oracle);
}

TEST_CASE("MAE") {
  QuantilePanel p = perfect_panel(3, 5);
  for (std::size_t i = 0; i < p.size(); ++i) p.y[i] = p.q[i][49];
  CHECK(mae(p) == 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) p.y[i] = p.q[i][49] + 1.0;
  CHECK(mae(p) == doctest::Approx(1.0));
  QuantilePanel r = perfect_panel(5, 6);
  double loop = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) loop += std::abs(r.y[i] - r.q[i][49]);
  CHECK(std::abs(mae(r) - loop / static_cast<double>(r.size())) < 1e-12);
  double c = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) c += crps_from_quantiles(r.y[i], r.q[i]);
  CHECK(std::abs(crps(r) - c / static_cast<double>(r.size())) < 1e-12);
  const auto m = evaluate(r);
  CHECK(m.mae == mae(r));
  CHECK(m.picp90 == picp(r, 0.9));
  CHECK(m.to_json().contains("kupiec98"));
}

TEST_CASE("Diebold-Mariano") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> a(365, std::vector<double>(24)), b = a;
  for (std::size_t d = 0; d < 365; ++d) {
    for (std::size_t h = 0; h < 24; ++h) {
      b[d][h] = 2.0 + 0.3 * n(rng);
      a[d][h] = b[d][h] - 0.05 + 0.3 * n(rng);
    }
  }
  const auto ab = dm_test(a, b);
  CHECK(ab.p_value < 0.05);
  CHECK(ab.mean_diff < 0.0);
  const auto ba = dm_test(b, a);
  CHECK(ba.statistic == doctest::Approx(-ab.statistic).epsilon(1e-12));
  CHECK(ba.p_value > 0.95);

  // Independent recomputation of the statistic.
  std::vector<double> delta(365);
  for (std::size_t d = 0; d < 365; ++d) {
    double sa = 0, sb = 0;
    for (std::size_t h = 0; h < 24; ++h) {
      sa += std::abs(a[d][h]);
      sb += std::abs(b[d][h]);
    }
    delta[d] = sa - sb;
  }
  double mean = 0;
  for (double v : delta) mean += v;
  mean /= 365;
  double var = 0;
  for (double v : delta) var += (v - mean) * (v - mean);
  var /= 364;
  CHECK(ab.statistic == doctest::Approx(std::sqrt(365.0) * mean / std::sqrt(var)).epsilon(1e-10));
  CHECK(ab.p_value == doctest::Approx(0.5 * std::erfc(-ab.statistic / std::sqrt(2.0))).epsilon(1e-12));
  const auto two = dm_test(a, b, 1.0, true);
  CHECK(two.p_value == doctest::Approx(std::erfc(std::abs(ab.statistic) / std::sqrt(2.0))).epsilon(1e-10));

  const auto same = dm_test(a, a);
  CHECK(same.degenerate);
  CHECK(same.statistic == 0.0);
  CHECK(same.p_value == 1.0);

  std::vector<std::vector<double>> short_a(10, std::vector<double>(24, 1.0));
  CHECK_THROWS_AS(dm_test(short_a, short_a), ConfigError);
  std::vector<std::vector<double>> other(40, std::vector<double>(24, 1.0));
  CHECK_THROWS_AS(dm_test(a, other), ConfigError);
}

TEST_CASE("calibration curve and quantile CSV") {
  QuantilePanel p = perfect_panel(30, 8);
  const auto curve = calibration_curve(p);
  REQUIRE(curve.size() == 99);
  CHECK(curve[0].first == doctest::Approx(0.01));
  for (const auto& [nominal, empirical] : curve) {
    CHECK(empirical >= 0.0);
    CHECK(empirical <= 1.0);
  }
  std::stringstream ss;
  write_quantiles_csv(ss, p);
  std::string header;
  std::getline(std::istringstream(ss.str()), header);
  CHECK(header.rfind("date,hour,q01,q02", 0) == 0);
  CHECK(header.substr(header.size() - 4) == ",q99");
  const auto back = read_quantiles_csv(ss);
  CHECK(back.days == p.days);
  CHECK(back.horizon == 24);
  REQUIRE(back.q.size() == p.q.size());
  for (std::size_t i = 0; i < p.q.size(); ++i) CHECK(back.q[i] == p.q[i]);
  CHECK(std::isnan(back.y[0]));
}
