#include "nbmlss/datapipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include "nbmlss/errors.hpp"

namespace nbmlss::data {

namespace {

constexpr const char* kHeader = "timestamp,price,load_fc,wind_fc,solar_fc";

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

int parse_int(std::string_view s, const std::string& whole) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("malformed timestamp '" + whole + "'");
  }
  return v;
}

double parse_double(std::string_view s, std::size_t line, const char* column) {
  while (!s.empty() && (s.front() == ' ')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw DataError("line " + std::to_string(line) + ": malformed " + column + " value '" +
                    std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string two(unsigned v) {
  char buf[4];
  std::snprintf(buf, sizeof buf, "%02u", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> make_feature_names() {
  std::vector<std::string> names;
  names.reserve(kNumFeatures);
  for (const char* lag : {"price_d1", "price_d2", "price_d7", "load_fc", "wind_fc", "solar_fc"}) {
    for (unsigned h = 0; h < kHorizon; ++h) names.push_back(std::string(lag) + "_h" + two(h));
  }
  names.emplace_back("dow_sin");
  names.emplace_back("dow_cos");
  names.emplace_back("temporal_age");
  return names;
}

std::vector<std::string> make_target_names() {
  std::vector<std::string> names;
  for (unsigned h = 0; h < kHorizon; ++h) names.push_back("y_h" + two(h));
  return names;
}

struct Row {
  std::int64_t hour;
  double v[4];
  std::size_t line;
};

}  // namespace

// Calendar

// Howard Hinnant's civil-date algorithms.
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y = static_cast<int>(yy + (m <= 2));
}

std::int64_t parse_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw ConfigError("malformed date '" + s + "'");
  try {
    const int y = parse_int(std::string_view(s).substr(0, 4), s);
    const int m = parse_int(std::string_view(s).substr(5, 2), s);
    const int d = parse_int(std::string_view(s).substr(8, 2), s);
    if (m < 1 || m > 12 || d < 1 || d > 31) throw DataError("range");
    return days_from_civil(y, static_cast<unsigned>(m), static_cast<unsigned>(d));
  } catch (const DataError&) {
    throw ConfigError("malformed date '" + s + "'");
  }
}

std::int64_t parse_timestamp(const std::string& s) {
  std::string_view v(s);
  while (!v.empty() && (v.back() == '\r' || v.back() == ' ')) v.remove_suffix(1);
  if (v.size() < 13 || v[4] != '-' || v[7] != '-' || (v[10] != 'T' && v[10] != ' ')) {
    throw DataError("malformed timestamp '" + s + "'");
  }
  const int y = parse_int(v.substr(0, 4), s);
  const int mo = parse_int(v.substr(5, 2), s);
  const int d = parse_int(v.substr(8, 2), s);
  const int h = parse_int(v.substr(11, 2), s);
  std::size_t pos = 13;
  int minute = 0;
  int second = 0;
  if (pos < v.size() && v[pos] == ':') {
    minute = parse_int(v.substr(pos + 1, 2), s);
    pos += 3;
    if (pos < v.size() && v[pos] == ':') {
      second = parse_int(v.substr(pos + 1, 2), s);
      pos += 3;
    }
  }
  int offset_minutes = 0;
  if (pos < v.size()) {
    const std::string_view tz = v.substr(pos);
    if (tz == "Z") {
    } else if ((tz[0] == '+' || tz[0] == '-') && (tz.size() == 6 || tz.size() == 3)) {
      const int oh = parse_int(tz.substr(1, 2), s);
      const int om = tz.size() == 6 ? parse_int(tz.substr(4, 2), s) : 0;
      offset_minutes = (tz[0] == '+' ? 1 : -1) * (oh * 60 + om);
    } else {
      throw DataError("malformed timestamp '" + s + "'");
    }
  }
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || minute > 59 || second > 59) {
    throw DataError("timestamp out of range '" + s + "'");
  }
  const std::int64_t total_minutes =
      (days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 24 + h) * 60 +
      minute - offset_minutes;
  if (second != 0 || total_minutes % 60 != 0) {
    throw DataError("timestamp '" + s + "' is not on an hour boundary");
  }
  return total_minutes / 60;
}

std::string format_date(std::int64_t day) {
  int y = 0;
  unsigned m = 0;
  unsigned d = 0;
  civil_from_days(day, y, m, d);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", y, m, d);
  return buf;
}

std::string format_timestamp(std::int64_t hour) {
  const std::int64_t day = floor_div(hour, 24);
  return format_date(day) + "T" + two(static_cast<unsigned>(hour - day * 24)) + ":00:00Z";
}

int day_of_week(std::int64_t day) {
  // 1970-01-01 was a Thursday (code 3).
  return static_cast<int>(((day + 3) % 7 + 7) % 7);
}

// Loading

bool HourlySeries::day_complete(std::int64_t day) const {
  const std::int64_t first = day * 24 - start_hour;
  if (first < 0 || first + 24 > static_cast<std::int64_t>(size())) return false;
  for (std::int64_t i = first; i < first + 24; ++i) {
    if (!valid[static_cast<std::size_t>(i)]) return false;
  }
  return true;
}

HourlySeries parse_csv(std::istream& in, const LoadOptions& opts) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("line 1: empty file, expected header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) {
    throw DataError("line 1: header must be '" + std::string(kHeader) + "', got '" + line + "'");
  }

  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 5) {
      throw DataError("line " + std::to_string(lineno) + ": expected 5 columns, got " +
                      std::to_string(cols.size()));
    }
    Row r{};
    r.line = lineno;
    try {
      r.hour = parse_timestamp(std::string(cols[0]));
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    static const char* names[] = {"price", "load_fc", "wind_fc", "solar_fc"};
    for (int k = 0; k < 4; ++k) r.v[k] = parse_double(cols[static_cast<std::size_t>(k) + 1], lineno, names[k]);
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError("no data rows");

  // Ordering and duplicates.
  std::vector<Row> merged;
  merged.reserve(rows.size());
  std::vector<std::int64_t> averaged;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    if (!merged.empty() && r.hour < merged.back().hour) {
      throw DataError("line " + std::to_string(r.line) + ": timestamp " + format_timestamp(r.hour) +
                      " is earlier than the previous row");
    }
    if (!merged.empty() && r.hour == merged.back().hour) {
      if (opts.duplicates == DuplicatePolicy::reject) {
        throw DataError("line " + std::to_string(r.line) + ": duplicated timestamp " +
                        format_timestamp(r.hour));
      }
      // Average all rows sharing this hour.
      std::size_t count = 2;
      double sum[4];
      for (int k = 0; k < 4; ++k) sum[k] = merged.back().v[k] + r.v[k];
      while (i + 1 < rows.size() && rows[i + 1].hour == r.hour) {
        ++i;
        ++count;
        for (int k = 0; k < 4; ++k) sum[k] += rows[i].v[k];
      }
      for (int k = 0; k < 4; ++k) merged.back().v[k] = sum[k] / static_cast<double>(count);
      averaged.push_back(r.hour);
      continue;
    }
    merged.push_back(r);
  }

  HourlySeries s;
  s.start_hour = merged.front().hour;
  const auto n = static_cast<std::size_t>(merged.back().hour - s.start_hour + 1);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.price.assign(n, nan);
  s.load_fc.assign(n, nan);
  s.wind_fc.assign(n, nan);
  s.solar_fc.assign(n, nan);
  s.valid.assign(n, 0);
  s.report.rows = rows.size();
  s.report.averaged_hours = std::move(averaged);
  std::vector<double>* cols[4] = {&s.price, &s.load_fc, &s.wind_fc, &s.solar_fc};
  for (const Row& r : merged) {
    const auto i = static_cast<std::size_t>(r.hour - s.start_hour);
    for (int k = 0; k < 4; ++k) (*cols[k])[i] = r.v[k];
    s.valid[i] = 1;
  }

  // Gap handling between consecutive observed rows.
  std::set<std::int64_t> rejected;
  for (std::size_t j = 1; j < merged.size(); ++j) {
    const auto a = static_cast<std::size_t>(merged[j - 1].hour - s.start_hour);
    const auto b = static_cast<std::size_t>(merged[j].hour - s.start_hour);
    const std::size_t gap = b - a - 1;
    if (gap == 0) continue;
    if (gap <= opts.max_interpolated_gap) {
      for (std::size_t i = a + 1; i < b; ++i) {
        const double t = static_cast<double>(i - a) / static_cast<double>(b - a);
        for (int k = 0; k < 4; ++k) {
          (*cols[k])[i] = (*cols[k])[a] + t * ((*cols[k])[b] - (*cols[k])[a]);
        }
        s.valid[i] = 1;
        s.report.interpolated_hours.push_back(s.start_hour + static_cast<std::int64_t>(i));
      }
    } else {
      for (std::size_t i = a + 1; i < b; ++i) {
        rejected.insert(floor_div(s.start_hour + static_cast<std::int64_t>(i), 24));
      }
    }
  }
  s.report.rejected_days.assign(rejected.begin(), rejected.end());
  return s;
}

HourlySeries load_csv(const std::filesystem::path& path, const LoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file " + path.string());
  return parse_csv(in, opts);
}

// Samples

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = make_feature_names();
  return names;
}

const std::vector<std::string>& target_names() {
  static const std::vector<std::string> names = make_target_names();
  return names;
}

std::vector<DaySample> build_samples(const HourlySeries& series, const SampleOptions& opts,
                                     std::vector<std::string>* warnings) {
  std::vector<DaySample> out;
  if (series.size() == 0) {
    if (warnings) warnings->push_back("empty series: no samples built");
    return out;
  }
  const std::int64_t first_day = floor_div(series.start_hour + 23, 24);
  const std::int64_t last_day =
      floor_div(series.start_hour + static_cast<std::int64_t>(series.size()), 24) - 1;
  std::int64_t first_complete = first_day;
  while (first_complete <= last_day && !series.day_complete(first_complete)) ++first_complete;
  const std::int64_t origin = opts.age_origin_day.value_or(first_complete);

  auto at = [&](const std::vector<double>& col, std::int64_t day, std::size_t h) {
    return col[static_cast<std::size_t>(day * 24 + static_cast<std::int64_t>(h) - series.start_hour)];
  };

  for (std::int64_t d = first_day + 7; d <= last_day; ++d) {
    if (!series.day_complete(d) || !series.day_complete(d - 1) || !series.day_complete(d - 2) ||
        !series.day_complete(d - 7)) {
      continue;
    }
    DaySample s;
    s.day = d;
    s.x.resize(kNumFeatures);
    s.y.resize(kHorizon);
    const std::int64_t lag_days[3] = {d - 1, d - 2, d - 7};
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t h = 0; h < kHorizon; ++h) s.x[l * kHorizon + h] = at(series.price, lag_days[l], h);
    }
    const std::vector<double>* exo[3] = {&series.load_fc, &series.wind_fc, &series.solar_fc};
    for (std::size_t e = 0; e < 3; ++e) {
      for (std::size_t h = 0; h < kHorizon; ++h) {
        s.x[kExogenousOffset + e * kHorizon + h] = at(*exo[e], d, h);
      }
    }
    const double angle = 2.0 * std::numbers::pi * day_of_week(d) / 7.0;
    s.x[kCalendarOffset] = std::sin(angle);
    s.x[kCalendarOffset + 1] = std::cos(angle);
    s.x[kCalendarOffset + 2] = static_cast<double>(d - origin) / 365.25;
    for (std::size_t h = 0; h < kHorizon; ++h) s.y[h] = at(series.price, d, h);
    out.push_back(std::move(s));
  }
  if (out.empty() && warnings) {
    warnings->push_back("insufficient history: at least 8 complete consecutive days are required");
  }
  return out;
}

void write_samples_csv(std::ostream& os, std::span<const DaySample> samples) {
  os << "date";
  for (const auto& n : feature_names()) os << ',' << n;
  for (const auto& n : target_names()) os << ',' << n;
  os << '\n';
  for (const DaySample& s : samples) {
    if (s.x.size() != kNumFeatures || s.y.size() != kHorizon) {
      throw ConfigError("write_samples_csv: sample for " + format_date(s.day) + " has wrong width");
    }
    os << format_date(s.day);
    for (double v : s.x) os << ',' << fmt17(v);
    for (double v : s.y) os << ',' << fmt17(v);
    os << '\n';
  }
}

std::vector<DaySample> read_samples_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("line 1: empty samples file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line, ',');
  if (header.size() != 1 + kNumFeatures + kHorizon || header[0] != "date") {
    throw DataError("line 1: samples header does not match the documented layout");
  }
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    if (header[1 + i] != feature_names()[i]) {
      throw DataError("line 1: column " + std::to_string(i + 2) + " should be " + feature_names()[i]);
    }
  }
  std::vector<DaySample> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != header.size()) {
      throw DataError("line " + std::to_string(lineno) + ": expected " +
                      std::to_string(header.size()) + " columns");
    }
    DaySample s;
    try {
      s.day = parse_date(std::string(cols[0]));
    } catch (const ConfigError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    s.x.resize(kNumFeatures);
    s.y.resize(kHorizon);
    for (std::size_t i = 0; i < kNumFeatures; ++i) s.x[i] = parse_double(cols[1 + i], lineno, "feature");
    for (std::size_t h = 0; h < kHorizon; ++h) {
      s.y[h] = parse_double(cols[1 + kNumFeatures + h], lineno, "target");
    }
    if (!out.empty() && s.day <= out.back().day) {
      throw DataError("line " + std::to_string(lineno) + ": sample dates must be strictly increasing");
    }
    out.push_back(std::move(s));
  }
  return out;
}

Matrix features_matrix(std::span<const DaySample> samples) {
  if (samples.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(samples[0].x.size()));
  for (std::size_t r = 0; r < samples.size(); ++r) {
    for (std::size_t c = 0; c < samples[r].x.size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = samples[r].x[c];
    }
  }
  return m;
}

Matrix targets_matrix(std::span<const DaySample> samples) {
  if (samples.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(samples[0].y.size()));
  for (std::size_t r = 0; r < samples.size(); ++r) {
    for (std::size_t c = 0; c < samples[r].y.size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = samples[r].y[c];
    }
  }
  return m;
}

// Scaling

ZScore ZScore::fit(const Matrix& m, std::vector<std::string>* warnings) {
  if (m.rows() == 0) throw ConfigError("cannot fit z-score on zero rows");
  ZScore z;
  const auto n = static_cast<double>(m.rows());
  z.mean.resize(static_cast<std::size_t>(m.cols()));
  z.std.resize(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double mu = m.col(c).sum() / n;
    const double var = (m.col(c).array() - mu).square().sum() / n;
    double sd = std::sqrt(var);
    if (!(sd >= kStdFloor)) {
      if (warnings) {
        warnings->push_back("column " + std::to_string(c) + " has near-zero variance; std floored at 1e-6");
      }
      sd = kStdFloor;
    }
    z.mean[static_cast<std::size_t>(c)] = mu;
    z.std[static_cast<std::size_t>(c)] = sd;
  }
  return z;
}

Matrix ZScore::apply(const Matrix& m) const {
  if (static_cast<std::size_t>(m.cols()) != mean.size()) throw ConfigError("z-score width mismatch");
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    out.col(c) = (m.col(c).array() - mean[k]) / std[k];
  }
  return out;
}

Matrix ZScore::invert(const Matrix& m) const {
  if (static_cast<std::size_t>(m.cols()) != mean.size()) throw ConfigError("z-score width mismatch");
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    out.col(c) = m.col(c).array() * std[k] + mean[k];
  }
  return out;
}

RevinStats revin_stats(std::span<const double> x, std::size_t lag_count, double floor, bool* floored) {
  if (x.size() < lag_count || lag_count == 0) {
    throw ConfigError("sample has fewer than " + std::to_string(lag_count) + " lag features");
  }
  double mu = 0.0;
  for (std::size_t i = 0; i < lag_count; ++i) mu += x[i];
  mu /= static_cast<double>(lag_count);
  double var = 0.0;
  for (std::size_t i = 0; i < lag_count; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= static_cast<double>(lag_count);
  RevinStats st{mu, std::sqrt(var)};
  if (floored) *floored = false;
  if (!(st.sd >= floor)) {
    st.sd = floor;
    if (floored) *floored = true;
  }
  return st;
}

std::vector<double> revin_normalize(std::span<const double> x, RevinStats& stats, std::size_t lag_count,
                                    std::vector<std::string>* warnings) {
  bool floored = false;
  stats = revin_stats(x, lag_count, kStdFloor, &floored);
  if (floored && warnings) warnings->push_back("instance std below floor; floored at 1e-6");
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < lag_count; ++i) out[i] = (x[i] - stats.mu) / stats.sd;
  return out;
}

std::vector<double> revin_restore(std::span<const double> x, const RevinStats& stats, std::size_t lag_count) {
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t i = 0; i < lag_count && i < out.size(); ++i) out[i] = x[i] * stats.sd + stats.mu;
  return out;
}

dists::DistParams revin_denorm_params(const dists::DistParams& p, const RevinStats& stats) {
  return dists::pushforward(p, stats.mu, stats.sd);
}

std::string to_string(ScalerKind k) { return k == ScalerKind::zscore ? "zscore" : "revin"; }

ScalerKind scaler_from_string(const std::string& s) {
  if (s == "zscore") return ScalerKind::zscore;
  if (s == "revin") return ScalerKind::revin;
  throw ConfigError("unknown scaler '" + s + "' (expected zscore|revin)");
}

FeatureScaler FeatureScaler::fit(const Matrix& x, const Matrix& y, ScalerKind kind, std::size_t lag_count,
                                 std::vector<std::string>* warnings) {
  FeatureScaler s;
  s.kind_ = kind;
  s.lag_count_ = lag_count;
  if (kind == ScalerKind::revin && static_cast<std::size_t>(x.cols()) < lag_count) {
    throw ConfigError("revin scaler needs at least " + std::to_string(lag_count) + " features");
  }
  if (kind == ScalerKind::revin) {
    // Lag columns are normalized per sample; keep identity stats for them so
    // constant lag columns do not raise spurious warnings.
    Matrix rest = x;
    rest.leftCols(static_cast<Eigen::Index>(lag_count)).setZero();
    s.x_ = ZScore::fit(rest, nullptr);
    for (std::size_t c = 0; c < lag_count; ++c) {
      s.x_.mean[c] = 0.0;
      s.x_.std[c] = 1.0;
    }
    if (warnings) {
      for (std::size_t c = lag_count; c < s.x_.std.size(); ++c) {
        if (s.x_.std[c] == kStdFloor) {
          warnings->push_back("column " + std::to_string(c) + " has near-zero variance; std floored at 1e-6");
        }
      }
    }
  } else {
    s.x_ = ZScore::fit(x, warnings);
  }
  s.y_ = ZScore::fit(y, warnings);
  return s;
}

NormalizedBatch FeatureScaler::transform(const Matrix& x, const Matrix& y) const {
  NormalizedBatch b;
  b.x = x_.apply(x);
  const Eigen::Index H = static_cast<Eigen::Index>(y_.mean.size());
  b.shift.resize(x.rows(), H);
  b.scale.resize(x.rows(), H);
  if (kind_ == ScalerKind::zscore) {
    for (Eigen::Index h = 0; h < H; ++h) {
      b.shift.col(h).setConstant(y_.mean[static_cast<std::size_t>(h)]);
      b.scale.col(h).setConstant(y_.std[static_cast<std::size_t>(h)]);
    }
  } else {
    const auto L = static_cast<Eigen::Index>(lag_count_);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const RevinStats st =
          revin_stats({x.row(r).data(), static_cast<std::size_t>(x.cols())}, lag_count_, kStdFloor);
      b.x.row(r).head(L) = (x.row(r).head(L).array() - st.mu) / st.sd;
      b.shift.row(r).setConstant(st.mu);
      b.scale.row(r).setConstant(st.sd);
    }
  }
  if (y.rows() > 0) {
    if (y.rows() != x.rows() || y.cols() != H) throw ConfigError("target matrix shape mismatch");
    b.y = (y - b.shift).cwiseQuotient(b.scale);
  }
  return b;
}

double FeatureScaler::feature_to_original(std::size_t col, double v) const {
  if (column_is_revin(col)) return v;
  return v * x_.std.at(col) + x_.mean.at(col);
}

double FeatureScaler::feature_to_model(std::size_t col, double v) const {
  if (column_is_revin(col)) return v;
  return (v - x_.mean.at(col)) / x_.std.at(col);
}

nlohmann::json FeatureScaler::to_json() const {
  return {{"kind", to_string(kind_)},
          {"lag_count", lag_count_},
          {"x_mean", x_.mean},
          {"x_std", x_.std},
          {"y_mean", y_.mean},
          {"y_std", y_.std}};
}

FeatureScaler FeatureScaler::from_json(const nlohmann::json& j) {
  FeatureScaler s;
  s.kind_ = scaler_from_string(j.at("kind").get<std::string>());
  s.lag_count_ = j.at("lag_count").get<std::size_t>();
  s.x_.mean = j.at("x_mean").get<std::vector<double>>();
  s.x_.std = j.at("x_std").get<std::vector<double>>();
  s.y_.mean = j.at("y_mean").get<std::vector<double>>();
  s.y_.std = j.at("y_std").get<std::vector<double>>();
  return s;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace nbmlss::data
