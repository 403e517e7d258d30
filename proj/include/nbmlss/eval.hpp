#pragma once

// Ensemble aggregation, quantile extraction and forecast evaluation metrics.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nbmlss/dists.hpp"

namespace nbmlss::eval {

inline constexpr std::size_t kPercentiles = 99;
using QuantileVector = std::array<double, kPercentiles>;

/// Level of the k-th percentile (k = 0..98 maps to 0.01..0.99).
constexpr double percentile_level(std::size_t k) { return static_cast<double>(k + 1) / 100.0; }

enum class Aggregation { p, v };
std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

struct EnsembleSpec {
  std::size_t members = 5;
  Aggregation mode = Aggregation::p;
  std::size_t n_samples = 10000;
  std::uint64_t seed = 0;
  /// Use closed-form quantiles instead of Monte-Carlo percentiles.
  bool closed_form = false;

  void validate() const;
};

struct ForecastDistribution {
  std::int64_t day = 0;
  std::size_t hour = 0;
  std::vector<dists::DistParams> members;
  std::optional<QuantileVector> quantiles;
};

/// Type-7 (linear interpolation) empirical quantile of sorted data.
double empirical_quantile(std::span<const double> sorted, double level);

/// Percentiles 1..99 of the ensemble forecast. Mode p pools draws from the
/// uniform mixture (n_samples split evenly, remainder to the first members);
/// mode v averages per-member percentiles. Output is sorted non-decreasing.
QuantileVector extract_quantiles(const ForecastDistribution& fc, const EnsembleSpec& spec);

/// Closed-form quantile of a uniform mixture by bracketing bisection.
double mixture_quantile(std::span<const dists::DistParams> members, double level);
double mixture_cdf(std::span<const dists::DistParams> members, double x);

double pinball(double y, double q_hat, double alpha);
/// Mean pinball loss over the 99 percentiles.
double crps_from_quantiles(double y, const QuantileVector& q);

/// Observations and quantile forecasts for days x hours, row-major by day.
struct QuantilePanel {
  std::vector<std::int64_t> days;
  std::size_t horizon = 24;
  std::vector<double> y;
  std::vector<QuantileVector> q;

  std::size_t size() const { return y.size(); }
  void validate() const;
};

/// Percentile indices (0-based) of the central interval with coverage c.
std::pair<std::size_t, std::size_t> central_interval(double coverage);

double picp(const QuantilePanel& panel, double coverage);
std::size_t interval_hits(const QuantilePanel& panel, double coverage, std::optional<std::size_t> hour = {});

struct KupiecResult {
  double lr = 0.0;
  bool pass = true;
};

inline constexpr double kChi2Crit95 = 3.841459;

KupiecResult kupiec(std::size_t hits, std::size_t n, double p);
/// Number of hours (of `horizon`) whose coverage series passes Kupiec.
std::size_t kupiec_hour_panel(const QuantilePanel& panel, double coverage);

double mae(const QuantilePanel& panel);
double crps(const QuantilePanel& panel);
/// Per-day, per-hour CRPS: [days][hours].
std::vector<std::vector<double>> crps_panel(const QuantilePanel& panel);

struct DmResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double mean_diff = 0.0;
  bool degenerate = false;
};

/// Multivariate Diebold-Mariano on daily loss norms,
/// delta_d = ||L^A_d||_q - ||L^B_d||_q, stat = sqrt(N) mean / sd (N-1).
/// One-sided p-value is for H0 "A is not better than B" (small when A has
/// lower loss): p = Phi(stat). Two-sided: 2 (1 - Phi(|stat|)).
DmResult dm_test(const std::vector<std::vector<double>>& loss_a, const std::vector<std::vector<double>>& loss_b,
                 double norm_order = 1.0, bool two_sided = false);

struct Metrics {
  double picp50 = 0.0;
  std::size_t kupiec50 = 0;
  double picp90 = 0.0;
  std::size_t kupiec90 = 0;
  double picp98 = 0.0;
  std::size_t kupiec98 = 0;
  double mae = 0.0;
  double crps = 0.0;

  nlohmann::json to_json() const;
};

Metrics evaluate(const QuantilePanel& panel);

/// (nominal level, fraction of y <= q_level) for the 99 percentiles.
std::vector<std::pair<double, double>> calibration_curve(const QuantilePanel& panel);

// Forecast CSV: "date,hour,q01,...,q99".
void write_quantiles_csv(std::ostream& os, const QuantilePanel& panel);
/// Reads quantiles; y is left NaN.
QuantilePanel read_quantiles_csv(std::istream& is);

}  // namespace nbmlss::eval
