#include "nbmlss/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>

#include "nbmlss/datapipe.hpp"
#include "nbmlss/errors.hpp"

namespace nbmlss::eval {

namespace {

// x ln(y) with the 0 ln 0 = 0 convention.
double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace

std::string to_string(Aggregation a) { return a == Aggregation::p ? "p" : "v"; }

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "p") return Aggregation::p;
  if (s == "v") return Aggregation::v;
  throw ConfigError("unknown aggregation '" + s + "' (expected p|v)");
}

void EnsembleSpec::validate() const {
  if (members == 0) throw ConfigError("ensemble needs at least one member");
  if (n_samples < 1000) throw ConfigError("ensemble n_samples must be at least 1000");
}

double empirical_quantile(std::span<const double> sorted, double level) {
  if (sorted.empty()) throw ConfigError("empirical_quantile on empty data");
  const double pos = level * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double mixture_cdf(std::span<const dists::DistParams> members, double x) {
  double s = 0.0;
  for (const auto& m : members) s += dists::cdf(x, m);
  return s / static_cast<double>(members.size());
}

double mixture_quantile(std::span<const dists::DistParams> members, double level) {
  if (members.empty()) throw ConfigError("mixture of zero members");
  if (members.size() == 1) return dists::quantile(level, members[0]);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& m : members) {
    const double q = dists::quantile(level, m);
    lo = std::min(lo, q);
    hi = std::max(hi, q);
  }
  for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mixture_cdf(members, mid) < level) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

QuantileVector extract_quantiles(const ForecastDistribution& fc, const EnsembleSpec& spec) {
  if (fc.members.empty()) throw ConfigError("forecast distribution without members");
  if (!spec.closed_form && spec.n_samples == 0) throw ConfigError("n_samples must be positive");
  QuantileVector q{};
  const std::size_t m = fc.members.size();
  if (spec.closed_form) {
    for (std::size_t k = 0; k < kPercentiles; ++k) {
      const double level = percentile_level(k);
      if (spec.mode == Aggregation::v) {
        // Mean as an offset from the first member, exact for identical members.
        const double q0 = dists::quantile(level, fc.members[0]);
        double s = 0.0;
        for (std::size_t j = 1; j < m; ++j) s += dists::quantile(level, fc.members[j]) - q0;
        q[k] = q0 + s / static_cast<double>(m);
      } else {
        q[k] = mixture_quantile(fc.members, level);
      }
    }
  } else {
    const std::uint64_t item_seed =
        diff::mix_seed(diff::mix_seed(spec.seed, static_cast<std::uint64_t>(fc.day)), fc.hour);
    if (spec.mode == Aggregation::p) {
      std::vector<double> pool(spec.n_samples);
      std::size_t offset = 0;
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t count = spec.n_samples / m + (j < spec.n_samples % m ? 1 : 0);
        diff::Rng rng(diff::mix_seed(item_seed, j));
        dists::sample_into(fc.members[j], std::span<double>(pool.data() + offset, count), rng);
        offset += count;
      }
      std::sort(pool.begin(), pool.end());
      for (std::size_t k = 0; k < kPercentiles; ++k) q[k] = empirical_quantile(pool, percentile_level(k));
    } else {
      q.fill(0.0);
      std::vector<double> draws(spec.n_samples);
      for (std::size_t j = 0; j < m; ++j) {
        diff::Rng rng(diff::mix_seed(item_seed, j));
        dists::sample_into(fc.members[j], draws, rng);
        std::sort(draws.begin(), draws.end());
        for (std::size_t k = 0; k < kPercentiles; ++k) q[k] += empirical_quantile(draws, percentile_level(k));
      }
      for (double& v : q) v /= static_cast<double>(m);
    }
  }
  // Post-hoc sorting against quantile crossing.
  std::sort(q.begin(), q.end());
  return q;
}

double pinball(double y, double q_hat, double alpha) {
  return y >= q_hat ? alpha * (y - q_hat) : (1.0 - alpha) * (q_hat - y);
}

double crps_from_quantiles(double y, const QuantileVector& q) {
  double s = 0.0;
  for (std::size_t k = 0; k < kPercentiles; ++k) s += pinball(y, q[k], percentile_level(k));
  return s / static_cast<double>(kPercentiles);
}

void QuantilePanel::validate() const {
  if (horizon == 0) throw ConfigError("panel horizon must be positive");
  if (y.size() != q.size()) throw ConfigError("panel observation / quantile counts differ");
  if (y.size() != days.size() * horizon) throw ConfigError("panel size is not days x horizon");
}

std::pair<std::size_t, std::size_t> central_interval(double coverage) {
  const double lo_level = (1.0 - coverage) / 2.0;
  const double lo_pct = lo_level * 100.0;
  const double rounded = std::round(lo_pct);
  if (!(coverage > 0.0 && coverage < 1.0) || std::abs(lo_pct - rounded) > 1e-9 || rounded < 1.0 || rounded > 49.0) {
    throw ConfigError("coverage " + std::to_string(coverage) + " has no bounds on the 99-percentile grid");
  }
  const auto lo = static_cast<std::size_t>(rounded) - 1;
  return {lo, kPercentiles - 1 - lo};
}

std::size_t interval_hits(const QuantilePanel& panel, double coverage, std::optional<std::size_t> hour) {
  panel.validate();
  const auto [lo, hi] = central_interval(coverage);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    if (hour && i % panel.horizon != *hour) continue;
    if (panel.q[i][lo] <= panel.y[i] && panel.y[i] <= panel.q[i][hi]) ++hits;
  }
  return hits;
}

double picp(const QuantilePanel& panel, double coverage) {
  if (panel.size() == 0) throw ConfigError("picp on empty panel");
  return static_cast<double>(interval_hits(panel, coverage)) / static_cast<double>(panel.size());
}

KupiecResult kupiec(std::size_t hits, std::size_t n, double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("kupiec nominal level must lie in (0, 1)");
  if (hits > n) throw ConfigError("kupiec: hits exceed observations");
  if (n == 0) return {0.0, true};
  const double x = static_cast<double>(hits);
  const double nn = static_cast<double>(n);
  const double pi = x / nn;
  const double ll_null = xlogy(nn - x, 1.0 - p) + xlogy(x, p);
  const double ll_alt = xlogy(nn - x, 1.0 - pi) + xlogy(x, pi);
  const double lr = std::max(0.0, -2.0 * ll_null + 2.0 * ll_alt);
  return {lr, lr < kChi2Crit95};
}

std::size_t kupiec_hour_panel(const QuantilePanel& panel, double coverage) {
  panel.validate();
  std::size_t passes = 0;
  for (std::size_t h = 0; h < panel.horizon; ++h) {
    const std::size_t hits = interval_hits(panel, coverage, h);
    if (kupiec(hits, panel.days.size(), coverage).pass) ++passes;
  }
  return passes;
}

double mae(const QuantilePanel& panel) {
  panel.validate();
  if (panel.size() == 0) throw ConfigError("mae on empty panel");
  double s = 0.0;
  for (std::size_t i = 0; i < panel.size(); ++i) s += std::abs(panel.y[i] - panel.q[i][49]);
  return s / static_cast<double>(panel.size());
}

std::vector<std::vector<double>> crps_panel(const QuantilePanel& panel) {
  panel.validate();
  std::vector<std::vector<double>> out(panel.days.size(), std::vector<double>(panel.horizon));
  for (std::size_t i = 0; i < panel.size(); ++i) {
    out[i / panel.horizon][i % panel.horizon] = crps_from_quantiles(panel.y[i], panel.q[i]);
  }
  return out;
}

double crps(const QuantilePanel& panel) {
  panel.validate();
  if (panel.size() == 0) throw ConfigError("crps on empty panel");
  double s = 0.0;
  for (std::size_t i = 0; i < panel.size(); ++i) s += crps_from_quantiles(panel.y[i], panel.q[i]);
  return s / static_cast<double>(panel.size());
}

DmResult dm_test(const std::vector<std::vector<double>>& loss_a, const std::vector<std::vector<double>>& loss_b,
                 double norm_order, bool two_sided) {
  if (loss_a.size() != loss_b.size()) throw ConfigError("DM test: day counts differ");
  if (loss_a.size() < 30) throw ConfigError("DM test needs at least 30 days");
  if (!(norm_order >= 1.0)) throw ConfigError("DM norm order must be >= 1");
  const std::size_t n = loss_a.size();
  auto norm = [norm_order](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += std::pow(std::abs(x), norm_order);
    return std::pow(s, 1.0 / norm_order);
  };
  std::vector<double> delta(n);
  for (std::size_t d = 0; d < n; ++d) {
    if (loss_a[d].size() != loss_b[d].size()) throw ConfigError("DM test: hour counts differ");
    delta[d] = norm(loss_a[d]) - norm(loss_b[d]);
  }
  double mean = 0.0;
  for (double v : delta) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : delta) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  DmResult r;
  r.mean_diff = mean;
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.statistic = 0.0;
      r.p_value = 1.0;
    } else {
      r.statistic = mean > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p_value = two_sided ? 0.0 : (mean < 0.0 ? 0.0 : 1.0);
    }
    return r;
  }
  r.statistic = std::sqrt(static_cast<double>(n)) * mean / sd;
  r.p_value = two_sided ? 2.0 * (1.0 - dists::std_normal_cdf(std::abs(r.statistic)))
                        : dists::std_normal_cdf(r.statistic);
  return r;
}

nlohmann::json Metrics::to_json() const {
  nlohmann::json j;
  j["picp50"] = picp50;
  j["kupiec50"] = kupiec50;
  j["picp90"] = picp90;
  j["kupiec90"] = kupiec90;
  j["picp98"] = picp98;
  j["kupiec98"] = kupiec98;
  j["mae"] = mae;
  j["crps"] = crps;
  return j;
}

Metrics evaluate(const QuantilePanel& panel) {
  Metrics m;
  m.picp50 = picp(panel, 0.5);
  m.kupiec50 = kupiec_hour_panel(panel, 0.5);
  m.picp90 = picp(panel, 0.9);
  m.kupiec90 = kupiec_hour_panel(panel, 0.9);
  m.picp98 = picp(panel, 0.98);
  m.kupiec98 = kupiec_hour_panel(panel, 0.98);
  m.mae = mae(panel);
  m.crps = crps(panel);
  return m;
}

std::vector<std::pair<double, double>> calibration_curve(const QuantilePanel& panel) {
  panel.validate();
  if (panel.size() == 0) throw ConfigError("calibration on empty panel");
  std::vector<std::pair<double, double>> out;
  for (std::size_t k = 0; k < kPercentiles; ++k) {
    std::size_t below = 0;
    for (std::size_t i = 0; i < panel.size(); ++i) {
      if (panel.y[i] <= panel.q[i][k]) ++below;
    }
    out.emplace_back(percentile_level(k), static_cast<double>(below) / static_cast<double>(panel.size()));
  }
  return out;
}

void write_quantiles_csv(std::ostream& os, const QuantilePanel& panel) {
  panel.validate();
  os << "date,hour";
  for (std::size_t k = 1; k <= kPercentiles; ++k) {
    char buf[8];
    std::snprintf(buf, sizeof buf, ",q%02zu", k);
    os << buf;
  }
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < panel.size(); ++i) {
    os << data::format_date(panel.days[i / panel.horizon]) << ',' << i % panel.horizon;
    for (double v : panel.q[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
}

QuantilePanel read_quantiles_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("line 1: empty forecast file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line);
  if (header.size() != 2 + kPercentiles || header[0] != "date" || header[1] != "hour") {
    throw DataError("line 1: forecast header must be date,hour,q01..q99");
  }
  QuantilePanel panel;
  std::size_t max_hour = 0;
  std::vector<std::pair<std::int64_t, std::size_t>> keys;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line);
    if (cols.size() != header.size()) throw DataError("line " + std::to_string(lineno) + ": wrong column count");
    std::int64_t day = 0;
    try {
      day = data::parse_date(std::string(cols[0]));
    } catch (const ConfigError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    std::size_t hour = 0;
    auto [p, ec] = std::from_chars(cols[1].data(), cols[1].data() + cols[1].size(), hour);
    if (ec != std::errc() || p != cols[1].data() + cols[1].size()) {
      throw DataError("line " + std::to_string(lineno) + ": malformed hour");
    }
    QuantileVector q{};
    for (std::size_t k = 0; k < kPercentiles; ++k) {
      const auto c = cols[2 + k];
      auto [pp, ee] = std::from_chars(c.data(), c.data() + c.size(), q[k]);
      if (ee != std::errc() || pp != c.data() + c.size()) {
        throw DataError("line " + std::to_string(lineno) + ": malformed quantile value");
      }
    }
    keys.emplace_back(day, hour);
    max_hour = std::max(max_hour, hour);
    panel.q.push_back(q);
  }
  panel.horizon = max_hour + 1;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].second != i % panel.horizon) throw DataError("forecast rows must list hours 0..H-1 for each date");
    if (i % panel.horizon == 0) panel.days.push_back(keys[i].first);
    if (keys[i].first != panel.days.back()) throw DataError("forecast date changes inside a day block");
  }
  if (keys.size() % panel.horizon != 0) throw DataError("incomplete final day in forecast file");
  panel.y.assign(panel.q.size(), std::numeric_limits<double>::quiet_NaN());
  return panel;
}

}  // namespace nbmlss::eval
