#pragma once

// Hourly market data ingestion, daily sample construction and scaling.
//
// Daily sample layout (147 features), day d, hours 0..23:
//   [  0,  24)  price(d-1)
//   [ 24,  48)  price(d-2)
//   [ 48,  72)  price(d-7)
//   [ 72,  96)  load_fc(d)
//   [ 96, 120)  wind_fc(d)
//   [120, 144)  solar_fc(d)
//   144 dow_sin, 145 dow_cos  (day code 0 = Monday)
//   146 temporal_age          (years since the age origin day)
// Targets: price(d) hours 0..23.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nbmlss/diffcore.hpp"
#include "nbmlss/dists.hpp"

namespace nbmlss::data {

using diff::Matrix;

inline constexpr std::size_t kHorizon = 24;
inline constexpr std::size_t kNumFeatures = 147;
inline constexpr std::size_t kPriceLagFeatures = 72;
inline constexpr std::size_t kExogenousOffset = 72;
inline constexpr std::size_t kCalendarOffset = 144;
inline constexpr double kStdFloor = 1e-6;

// Calendar helpers. Days and hours are counted from 1970-01-01T00:00Z.

std::int64_t days_from_civil(int y, unsigned m, unsigned d);
void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d);
/// Parses ISO-8601 ("2024-01-31T13:00:00Z", "2024-01-31 13:00", "...+01:00")
/// into UTC hours since the epoch. Throws DataError on malformed input or a
/// non-zero minute/second field.
std::int64_t parse_timestamp(const std::string& s);
std::string format_timestamp(std::int64_t hour);
std::string format_date(std::int64_t day);
std::int64_t parse_date(const std::string& s);
/// 0 = Monday ... 6 = Sunday.
int day_of_week(std::int64_t day);

enum class DuplicatePolicy { reject, average };

struct LoadOptions {
  /// Gaps of up to this many consecutive hours are linearly interpolated;
  /// longer gaps invalidate the days they touch.
  std::size_t max_interpolated_gap = 3;
  DuplicatePolicy duplicates = DuplicatePolicy::reject;
};

struct LoadReport {
  std::size_t rows = 0;
  std::vector<std::int64_t> interpolated_hours;
  std::vector<std::int64_t> averaged_hours;
  std::vector<std::int64_t> rejected_days;
};

/// Contiguous hourly grid starting at `start_hour`. Hours inside rejected
/// gaps carry NaN values and valid = 0.
struct HourlySeries {
  std::int64_t start_hour = 0;
  std::vector<double> price;
  std::vector<double> load_fc;
  std::vector<double> wind_fc;
  std::vector<double> solar_fc;
  std::vector<std::uint8_t> valid;
  LoadReport report;

  std::size_t size() const { return price.size(); }
  /// True when every hour of `day` lies inside the grid and is valid.
  bool day_complete(std::int64_t day) const;
};

HourlySeries parse_csv(std::istream& in, const LoadOptions& opts = {});
HourlySeries load_csv(const std::filesystem::path& path, const LoadOptions& opts = {});

struct DaySample {
  std::int64_t day = 0;
  std::vector<double> x;
  std::vector<double> y;
};

const std::vector<std::string>& feature_names();
const std::vector<std::string>& target_names();

struct SampleOptions {
  /// Origin for temporal_age; defaults to the first complete day.
  std::optional<std::int64_t> age_origin_day;
};

/// One sample per day d whose days d, d-1, d-2 and d-7 are complete,
/// ordered by day. Appends a note to `warnings` when no sample qualifies.
std::vector<DaySample> build_samples(const HourlySeries& series, const SampleOptions& opts = {},
                                     std::vector<std::string>* warnings = nullptr);

void write_samples_csv(std::ostream& os, std::span<const DaySample> samples);
std::vector<DaySample> read_samples_csv(std::istream& is);

Matrix features_matrix(std::span<const DaySample> samples);
Matrix targets_matrix(std::span<const DaySample> samples);

// Scaling.

/// Column-wise standardization with population (1/N) std, floored at kStdFloor.
struct ZScore {
  std::vector<double> mean;
  std::vector<double> std;

  static ZScore fit(const Matrix& m, std::vector<std::string>* warnings = nullptr);
  Matrix apply(const Matrix& m) const;
  Matrix invert(const Matrix& m) const;
};

/// Per-sample statistics over the leading price-lag features.
struct RevinStats {
  double mu = 0.0;
  double sd = 1.0;
};

RevinStats revin_stats(std::span<const double> x, std::size_t lag_count = kPriceLagFeatures,
                       double floor = kStdFloor, bool* floored = nullptr);
/// Replaces the first lag_count entries by (x - mu) / sd.
std::vector<double> revin_normalize(std::span<const double> x, RevinStats& stats,
                                    std::size_t lag_count = kPriceLagFeatures,
                                    std::vector<std::string>* warnings = nullptr);
std::vector<double> revin_restore(std::span<const double> x, const RevinStats& stats,
                                  std::size_t lag_count = kPriceLagFeatures);
/// Maps a distribution predicted in normalized units back to price units.
dists::DistParams revin_denorm_params(const dists::DistParams& p, const RevinStats& stats);

enum class ScalerKind { zscore, revin };
std::string to_string(ScalerKind k);
ScalerKind scaler_from_string(const std::string& s);

/// Model-space view of a batch: normalized inputs and targets plus the
/// per-sample, per-hour affine map (price = shift + scale * normalized).
struct NormalizedBatch {
  Matrix x;
  Matrix y;
  Matrix shift;
  Matrix scale;
};

/// zscore: every feature and each target hour standardized with training
/// statistics. revin: the leading lag_count features and the targets use
/// per-sample statistics of those lags; remaining features use z-score.
class FeatureScaler {
 public:
  FeatureScaler() = default;
  static FeatureScaler fit(const Matrix& x, const Matrix& y, ScalerKind kind,
                           std::size_t lag_count = kPriceLagFeatures,
                           std::vector<std::string>* warnings = nullptr);

  ScalerKind kind() const { return kind_; }
  std::size_t lag_count() const { return lag_count_; }
  const ZScore& x_stats() const { return x_; }
  const ZScore& y_stats() const { return y_; }

  /// `y` may be empty (0 rows) at prediction time.
  NormalizedBatch transform(const Matrix& x, const Matrix& y) const;
  /// Original-unit value of feature `col` for a normalized value (z-scored
  /// columns only; revin columns are returned unchanged).
  double feature_to_original(std::size_t col, double v) const;
  double feature_to_model(std::size_t col, double v) const;
  bool column_is_revin(std::size_t col) const {
    return kind_ == ScalerKind::revin && col < lag_count_;
  }

  nlohmann::json to_json() const;
  static FeatureScaler from_json(const nlohmann::json& j);

 private:
  ScalerKind kind_ = ScalerKind::zscore;
  std::size_t lag_count_ = kPriceLagFeatures;
  ZScore x_;
  ZScore y_;
};

/// FNV-1a 64-bit digest rendered as 16 hex characters.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace nbmlss::data
