#include "nbmlss/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "nbmlss/errors.hpp"
#include "nbmlss/model.hpp"

namespace nbmlss::pipeline {

namespace {

const std::set<std::string> kTopKeys = {
    "data",     "samples", "train_start", "test_start", "test_end", "tune_start", "tune_end", "model",
    "scaler",   "revin_affine", "link",   "mask",       "ensemble", "train",      "cadence_days", "grid",
    "load",     "shapes",  "out",         "seed",       "jobs"};

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
  }
}

std::optional<std::int64_t> opt_date(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return data::parse_date(j.at(key).get<std::string>());
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string());
  return os;
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  auto os = open_out(p);
  os << j.dump(2) << '\n';
}

void log_line(const CommandOptions& opts, const std::string& msg) {
  if (opts.log) *opts.log << msg << '\n';
}

std::int64_t require(const std::optional<std::int64_t>& d, const char* name) {
  if (!d) throw ConfigError(std::string("config needs '") + name + "'");
  return *d;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Param vectors for cache files: slot order of the head.
std::vector<double> param_values(const dists::DistParams& p) {
  switch (dists::kind_of(p)) {
    case dists::HeadKind::jsu: {
      const auto& q = std::get<dists::JsuParams>(p);
      return {q.lambda, q.sigma, q.tau, q.zeta};
    }
    case dists::HeadKind::normal: {
      const auto& q = std::get<dists::NormalParams>(p);
      return {q.mu, q.sigma};
    }
    case dists::HeadKind::studentt: {
      const auto& q = std::get<dists::StudentTParams>(p);
      return {q.mu, q.sigma, q.nu};
    }
  }
  return {};
}

dists::DistParams params_from_values(dists::HeadKind head, const std::vector<double>& v) {
  if (v.size() != static_cast<std::size_t>(dists::param_count(head))) {
    throw ConfigError("cached parameter vector has the wrong length");
  }
  switch (head) {
    case dists::HeadKind::jsu: return dists::JsuParams{v[0], v[1], v[2], v[3]};
    case dists::HeadKind::normal: return dists::NormalParams{v[0], v[1]};
    case dists::HeadKind::studentt: return dists::StudentTParams{v[0], v[1], v[2]};
  }
  throw ConfigError("bad head");
}

[[noreturn]] void rethrow_with_context(const std::string& ctx) {
  try {
    throw;
  } catch (const DataError& e) {
    throw DataError(ctx + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(ctx + ": " + e.what());
  } catch (const StateError& e) {
    throw StateError(ctx + ": " + e.what());
  } catch (const DomainError& e) {
    throw DomainError(ctx + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

nlohmann::json checkpoint_header(const RunConfig& cfg, train::TrainedModel& tm, std::size_t member,
                                 std::size_t block) {
  nlohmann::json h;
  h["model"] = tm.forecaster.config_json();
  h["spec"] = cfg.model_spec().to_json();
  h["scaler"] = tm.scaler.to_json();
  h["feature_min"] = tm.feature_min;
  h["feature_max"] = tm.feature_max;
  h["mask_hash"] = tm.forecaster.network().config_json().value("mask_hash", std::string("full"));
  h["member"] = member;
  h["block"] = block;
  return h;
}

// Every output of a block depends on these; a cache entry is reused only
// when they agree.
std::string run_key(const RunConfig& cfg, const std::string& data_hash, std::size_t member) {
  nlohmann::json k;
  k["spec"] = cfg.model_spec().to_json();
  k["train"] = cfg.train.to_json();
  k["train_start"] = *cfg.train_start;
  k["cadence"] = cfg.cadence_days;
  k["seed"] = cfg.seed;
  k["member"] = member;
  k["data"] = data_hash;
  return data::fnv1a_hex(k.dump());
}

eval::QuantilePanel make_panel(const std::vector<std::int64_t>& days, std::size_t horizon,
                               const std::map<std::int64_t, const data::DaySample*>& actual) {
  eval::QuantilePanel panel;
  panel.days = days;
  panel.horizon = horizon;
  for (auto d : days) {
    const auto it = actual.find(d);
    if (it == actual.end()) throw DataError("no actual prices for " + data::format_date(d));
    for (std::size_t h = 0; h < horizon; ++h) panel.y.push_back(it->second->y[h]);
  }
  return panel;
}

void write_calibration(const fs::path& p, const eval::QuantilePanel& panel) {
  auto os = open_out(p);
  os << "nominal,empirical\n";
  for (const auto& [nom, emp] : eval::calibration_curve(panel)) os << fmt17(nom) << ',' << fmt17(emp) << '\n';
}

// Pairwise one-sided DM p-values (row better than column); returns a note
// when the test could not be run.
std::optional<std::string> write_dm(const fs::path& p, const std::vector<std::string>& names,
                                    const std::vector<eval::QuantilePanel>& panels) {
  if (panels.size() < 2) return std::string("fewer than two forecasts; DM matrix skipped");
  if (panels.front().days.size() < 30) {
    return "DM test needs at least 30 days, have " + std::to_string(panels.front().days.size()) +
           "; DM matrix skipped";
  }
  std::vector<std::vector<std::vector<double>>> losses;
  for (const auto& pn : panels) losses.push_back(eval::crps_panel(pn));
  auto os = open_out(p);
  os << "model";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t a = 0; a < names.size(); ++a) {
    os << names[a];
    for (std::size_t b = 0; b < names.size(); ++b) {
      os << ',';
      if (a != b) os << fmt17(eval::dm_test(losses[a], losses[b]).p_value);
    }
    os << '\n';
  }
  return std::nullopt;
}

}  // namespace

// RunConfig

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  check_keys(j, kTopKeys, "");
  RunConfig c;
  try {
    auto resolve = [&](const std::string& s) {
      fs::path p(s);
      return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    if (j.contains("data")) c.data = resolve(j.at("data").get<std::string>());
    if (j.contains("samples")) c.samples = resolve(j.at("samples").get<std::string>());
    c.train_start = opt_date(j, "train_start");
    c.test_start = opt_date(j, "test_start");
    c.test_end = opt_date(j, "test_end");
    c.tune_start = opt_date(j, "tune_start");
    c.tune_end = opt_date(j, "tune_end");
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, {"kind", "head", "n_u", "n_z", "dropout", "first_layer_bias"}, "model.");
      c.model.update(m);
      if (c.model.value("kind", std::string("nbmlss")) == "ddnn" && !m.contains("n_u")) c.model["n_u"] = 128;
    }
    model::model_kind_from_string(c.model.value("kind", std::string("nbmlss")));
    c.link.head = dists::head_from_string(c.model.value("head", std::string("jsu")));
    if (j.contains("scaler")) c.scaler = data::scaler_from_string(j.at("scaler").get<std::string>());
    c.revin_affine = j.value("revin_affine", false);
    if (j.contains("link")) {
      check_keys(j.at("link"), {"epsilon", "gamma"}, "link.");
      c.link.epsilon = j.at("link").value("epsilon", c.link.epsilon);
      c.link.gamma = j.at("link").value("gamma", c.link.gamma);
    }
    c.mask = j.value("mask", c.mask);
    if (j.contains("ensemble")) {
      const auto& e = j.at("ensemble");
      check_keys(e, {"members", "n_samples", "aggregate", "closed_form"}, "ensemble.");
      c.ensemble.members = e.value("members", c.ensemble.members);
      c.ensemble.n_samples = e.value("n_samples", c.ensemble.n_samples);
      c.ensemble.closed_form = e.value("closed_form", false);
      c.aggregate = e.value("aggregate", c.aggregate);
    }
    if (j.contains("train")) {
      check_keys(j.at("train"), {"max_epochs", "patience", "batch_size", "lr", "val_fraction", "seed"}, "train.");
      c.train = train::TrainConfig::from_json(j.at("train"));
    }
    c.cadence_days = j.value("cadence_days", c.cadence_days);
    if (j.contains("grid")) {
      check_keys(j.at("grid"), {"n_u", "n_z", "dropout", "lr", "folds"}, "grid.");
      c.grid = j.at("grid");
    }
    if (j.contains("load")) {
      const auto& l = j.at("load");
      check_keys(l, {"max_interpolated_gap", "duplicates"}, "load.");
      c.load.max_interpolated_gap = l.value("max_interpolated_gap", c.load.max_interpolated_gap);
      const std::string dup = l.value("duplicates", std::string("reject"));
      if (dup == "reject") {
        c.load.duplicates = data::DuplicatePolicy::reject;
      } else if (dup == "average") {
        c.load.duplicates = data::DuplicatePolicy::average;
      } else {
        throw ConfigError("load.duplicates must be reject|average");
      }
    }
    if (j.contains("shapes")) {
      check_keys(j.at("shapes"), {"resolution"}, "shapes.");
      c.shape_resolution = j.at("shapes").value("resolution", c.shape_resolution);
    }
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (c.mask != "full" && c.mask != "hour") throw ConfigError("mask must be full|hour");
  if (c.aggregate != "p" && c.aggregate != "v" && c.aggregate != "both") {
    throw ConfigError("aggregate must be p|v|both");
  }
  if (c.cadence_days == 0) throw ConfigError("cadence_days must be positive");
  if (c.train_start && c.test_start && !(*c.train_start < *c.test_start)) {
    throw ConfigError("train_start must precede test_start");
  }
  if (c.test_start && c.test_end && *c.test_end < *c.test_start) throw ConfigError("test_end precedes test_start");
  if (c.tune_start && c.tune_end && !(*c.tune_start < *c.tune_end)) {
    throw ConfigError("tune_start must precede tune_end");
  }
  c.ensemble.validate();
  c.train.validate();
  return c;
}

RunConfig RunConfig::load_file(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  if (!data.empty()) j["data"] = data.string();
  if (!samples.empty()) j["samples"] = samples.string();
  auto put_date = [&](const char* k, const std::optional<std::int64_t>& d) {
    if (d) j[k] = data::format_date(*d);
  };
  put_date("train_start", train_start);
  put_date("test_start", test_start);
  put_date("test_end", test_end);
  put_date("tune_start", tune_start);
  put_date("tune_end", tune_end);
  j["model"] = model;
  j["scaler"] = data::to_string(scaler);
  j["revin_affine"] = revin_affine;
  j["link"] = {{"epsilon", link.epsilon}, {"gamma", link.gamma}};
  j["mask"] = mask;
  j["ensemble"] = {{"members", ensemble.members},
                   {"n_samples", ensemble.n_samples},
                   {"aggregate", aggregate},
                   {"closed_form", ensemble.closed_form}};
  j["train"] = train.to_json();
  j["cadence_days"] = cadence_days;
  if (grid) j["grid"] = *grid;
  j["load"] = {{"max_interpolated_gap", load.max_interpolated_gap},
               {"duplicates", load.duplicates == data::DuplicatePolicy::reject ? "reject" : "average"}};
  j["shapes"] = {{"resolution", shape_resolution}};
  j["out"] = out.string();
  j["seed"] = seed;
  j["jobs"] = jobs;
  return j;
}

train::ModelSpec RunConfig::model_spec() const {
  train::ModelSpec s;
  s.network = model;
  s.network["mask"] = mask;
  s.link = link;
  s.link.head = dists::head_from_string(model.value("head", std::string("jsu")));
  s.scaler = scaler;
  s.revin_affine = revin_affine;
  if (mask == "hour" && model.value("kind", std::string("nbmlss")) != "nbmlss") {
    throw ConfigError("mask=hour applies to the nbmlss model only");
  }
  return s;
}

std::vector<eval::Aggregation> RunConfig::aggregations() const {
  if (aggregate == "both") return {eval::Aggregation::p, eval::Aggregation::v};
  return {eval::aggregation_from_string(aggregate)};
}

// Helpers

std::vector<data::DaySample> load_samples(const RunConfig& cfg, std::string* data_hash, data::LoadReport* report) {
  if (!cfg.samples.empty()) {
    const std::string bytes = read_file(cfg.samples);
    if (data_hash) *data_hash = data::fnv1a_hex(bytes);
    std::istringstream is(bytes);
    return data::read_samples_csv(is);
  }
  if (cfg.data.empty()) throw ConfigError("config needs 'data' (hourly CSV) or 'samples'");
  if (!fs::exists(cfg.data)) throw ConfigError("data file not found: " + cfg.data.string());
  const std::string bytes = read_file(cfg.data);
  if (data_hash) *data_hash = data::fnv1a_hex(bytes);
  std::istringstream is(bytes);
  const data::HourlySeries series = data::parse_csv(is, cfg.load);
  if (report) *report = series.report;
  return data::build_samples(series);
}

std::vector<eval::QuantileVector> climatology_quantiles(std::span<const data::DaySample> train,
                                                        std::size_t horizon) {
  if (train.empty()) throw ConfigError("climatology needs training samples");
  std::vector<eval::QuantileVector> out(horizon);
  std::vector<double> col(train.size());
  for (std::size_t h = 0; h < horizon; ++h) {
    for (std::size_t i = 0; i < train.size(); ++i) col[i] = train[i].y[h];
    std::sort(col.begin(), col.end());
    for (std::size_t k = 0; k < eval::kPercentiles; ++k) {
      out[h][k] = eval::empirical_quantile(col, eval::percentile_level(k));
    }
  }
  return out;
}

void write_params_csv(std::ostream& os, const std::vector<train::DayForecast>& forecasts) {
  const auto head = forecasts.empty() || forecasts.front().hours.empty()
                        ? dists::HeadKind::jsu
                        : dists::kind_of(forecasts.front().hours.front());
  switch (head) {
    case dists::HeadKind::jsu: os << "date,hour,lambda,sigma,tau,zeta\n"; break;
    case dists::HeadKind::normal: os << "date,hour,mu,sigma\n"; break;
    case dists::HeadKind::studentt: os << "date,hour,mu,sigma,nu\n"; break;
  }
  for (const auto& f : forecasts) {
    for (std::size_t h = 0; h < f.hours.size(); ++h) {
      os << data::format_date(f.day) << ',' << h;
      for (double v : param_values(f.hours[h])) os << ',' << fmt17(v);
      os << '\n';
    }
  }
}

int exit_code_for_current_exception() {
  try {
    throw;
  } catch (const DataError&) {
    return 3;
  } catch (const NumericError&) {
    return 4;
  } catch (const Error&) {
    return 2;
  } catch (const nlohmann::json::exception&) {
    return 2;
  } catch (...) {
    return 1;
  }
}

// prepare

nlohmann::json cmd_prepare(const RunConfig& cfg, const CommandOptions& opts) {
  std::string hash;
  data::LoadReport report;
  const auto samples = load_samples(cfg, &hash, &report);
  if (samples.empty()) throw DataError("no complete day has the lags needed for a sample");
  std::ostringstream dump;
  data::write_samples_csv(dump, samples);
  const std::string bytes = dump.str();
  {
    auto os = open_out(cfg.out / "samples.csv");
    os << bytes;
  }

  std::vector<data::DaySample> fit_rows;
  for (const auto& s : samples) {
    if (cfg.train_start && s.day < *cfg.train_start) continue;
    if (cfg.test_start && s.day >= *cfg.test_start) continue;
    fit_rows.push_back(s);
  }
  if (fit_rows.empty()) throw DataError("no samples inside the training range");
  std::vector<std::string> warnings;
  const auto scaler = data::FeatureScaler::fit(data::features_matrix(fit_rows), data::targets_matrix(fit_rows),
                                               cfg.scaler, data::kPriceLagFeatures, &warnings);
  write_json(cfg.out / "scaler.json", scaler.to_json());

  std::vector<std::string> rejected;
  for (auto d : report.rejected_days) rejected.push_back(data::format_date(d));
  nlohmann::json manifest = {{"data_hash", hash},
                             {"samples_hash", data::fnv1a_hex(bytes)},
                             {"rows", report.rows},
                             {"samples", samples.size()},
                             {"first_day", data::format_date(samples.front().day)},
                             {"last_day", data::format_date(samples.back().day)},
                             {"interpolated_hours", report.interpolated_hours.size()},
                             {"averaged_hours", report.averaged_hours.size()},
                             {"rejected_days", rejected},
                             {"scaler_rows", fit_rows.size()},
                             {"warnings", warnings}};
  write_json(cfg.out / "prepare_manifest.json", manifest);
  log_line(opts, "prepared " + std::to_string(samples.size()) + " samples -> " + (cfg.out / "samples.csv").string());
  return manifest;
}

// backtest

nlohmann::json cmd_backtest(const RunConfig& cfg, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::int64_t train_start = require(cfg.train_start, "train_start");
  const std::int64_t test_start = require(cfg.test_start, "test_start");
  const std::int64_t test_end = require(cfg.test_end, "test_end");
  const train::ModelSpec spec = cfg.model_spec();
  const dists::HeadKind head = spec.link.head;

  std::string data_hash;
  const auto samples = load_samples(cfg, &data_hash);
  std::map<std::int64_t, const data::DaySample*> by_day;
  for (const auto& s : samples) by_day[s.day] = &s;
  const std::size_t horizon = samples.empty() ? data::kHorizon : samples.front().y.size();

  train::RecalibrationPlan plan{train_start, test_start, test_end, cfg.cadence_days};
  const std::size_t M = cfg.ensemble.members;
  std::vector<std::optional<train::RecalibrationResult>> results(M);
  std::vector<std::string> failures(M);
  std::mutex log_mu;

  train::parallel_for(M, cfg.jobs, [&](std::size_t m) {
    const fs::path cache_dir = cfg.out / "cache" / ("member_" + std::to_string(m));
    const std::string key = run_key(cfg, data_hash, m);
    auto cache_file = [&](std::size_t b) {
      char name[32];
      std::snprintf(name, sizeof name, "block_%03zu.json", b);
      return cache_dir / name;
    };
    train::RecalibrationHooks hooks;
    hooks.load_block = [&](const train::BlockRecord& rec) -> std::optional<std::vector<train::DayForecast>> {
      const fs::path p = cache_file(rec.index);
      if (!fs::exists(p)) return std::nullopt;
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(read_file(p));
      } catch (const nlohmann::json::exception&) {
        return std::nullopt;
      }
      if (doc.value("key", "") != key || doc.value("start", std::int64_t{-1}) != rec.start ||
          doc.value("end", std::int64_t{-1}) != rec.end) {
        return std::nullopt;
      }
      std::vector<train::DayForecast> out;
      for (const auto& f : doc.at("forecasts")) {
        train::DayForecast df;
        df.day = f.at("day").get<std::int64_t>();
        for (const auto& hp : f.at("hours")) df.hours.push_back(params_from_values(head, hp.get<std::vector<double>>()));
        out.push_back(std::move(df));
      }
      return out;
    };
    hooks.on_block = [&](const train::BlockRecord& rec, const std::vector<train::DayForecast>& fc,
                         train::TrainedModel& tm) {
      nlohmann::json doc;
      doc["key"] = key;
      doc["start"] = rec.start;
      doc["end"] = rec.end;
      doc["history"] = rec.history.to_json();
      doc["forecasts"] = nlohmann::json::array();
      for (const auto& f : fc) {
        nlohmann::json hours = nlohmann::json::array();
        for (const auto& p : f.hours) hours.push_back(param_values(p));
        doc["forecasts"].push_back({{"day", f.day}, {"hours", hours}});
      }
      write_json(cache_file(rec.index), doc);
      fs::create_directories(cfg.out / "models");
      auto params = tm.forecaster.parameters();
      std::vector<const diff::ParamTensor*> cparams(params.begin(), params.end());
      diff::save_checkpoint(cfg.out / "models" / ("member_" + std::to_string(m) + ".json"), cparams,
                            checkpoint_header(cfg, tm, m, rec.index));
      std::lock_guard<std::mutex> lock(log_mu);
      log_line(opts, "member " + std::to_string(m) + " block " + std::to_string(rec.index) + " (" +
                         data::format_date(rec.start) + ") trained on " + std::to_string(rec.train_samples) +
                         " samples, " + std::to_string(rec.history.epochs()) + " epochs");
    };
    train::TrainConfig tc = cfg.train;
    tc.seed = train::derive_seed(cfg.seed, 0x1000 + m);
    try {
      results[m] = train::run_recalibration(plan, spec, samples, tc, train::derive_seed(cfg.seed, m), hooks);
    } catch (const Error& e) {
      if (!opts.skip_failed) rethrow_with_context("member " + std::to_string(m));
      failures[m] = e.what();
      std::lock_guard<std::mutex> lock(log_mu);
      log_line(opts, "member " + std::to_string(m) + " failed: " + e.what());
    }
  });

  std::vector<std::size_t> ok;
  for (std::size_t m = 0; m < M; ++m) {
    if (results[m]) ok.push_back(m);
  }
  if (ok.empty()) throw NumericError("every ensemble member failed");

  // Days forecast by every surviving member.
  std::vector<std::int64_t> days;
  for (const auto& f : results[ok.front()]->forecasts) days.push_back(f.day);
  std::vector<std::map<std::int64_t, const train::DayForecast*>> member_fc(M);
  for (auto m : ok) {
    for (const auto& f : results[m]->forecasts) member_fc[m][f.day] = &f;
    {
      auto os = open_out(cfg.out / ("params_m" + std::to_string(m) + ".csv"));
      write_params_csv(os, results[m]->forecasts);
    }
  }
  days.erase(std::remove_if(days.begin(), days.end(),
                            [&](std::int64_t d) {
                              for (auto m : ok) {
                                if (!member_fc[m].count(d)) return true;
                              }
                              return false;
                            }),
             days.end());
  if (days.empty()) throw DataError("no test day has a complete sample");

  std::vector<std::string> names;
  std::vector<eval::QuantilePanel> panels;
  nlohmann::json metrics;
  for (const auto mode : cfg.aggregations()) {
    eval::EnsembleSpec es = cfg.ensemble;
    es.mode = mode;
    es.seed = train::derive_seed(cfg.seed, 0xe7a1);
    eval::QuantilePanel panel = make_panel(days, horizon, by_day);
    panel.q.resize(days.size() * horizon);
    train::parallel_for(days.size() * horizon, cfg.jobs, [&](std::size_t i) {
      eval::ForecastDistribution fd;
      fd.day = days[i / horizon];
      fd.hour = i % horizon;
      for (auto m : ok) fd.members.push_back(member_fc[m].at(fd.day)->hours[fd.hour]);
      panel.q[i] = eval::extract_quantiles(fd, es);
    });
    const std::string name = eval::to_string(mode);
    {
      auto os = open_out(cfg.out / ("forecasts_" + name + ".csv"));
      eval::write_quantiles_csv(os, panel);
    }
    write_calibration(cfg.out / ("calibration_" + name + ".csv"), panel);
    metrics[name] = eval::evaluate(panel).to_json();
    names.push_back(name);
    panels.push_back(std::move(panel));
  }

  // Climatological reference: per-hour percentiles of the training targets.
  std::vector<data::DaySample> clim_train;
  for (const auto& s : samples) {
    if (s.day >= train_start && s.day < test_start) clim_train.push_back(s);
  }
  if (!clim_train.empty()) {
    const auto cq = climatology_quantiles(clim_train, horizon);
    eval::QuantilePanel panel = make_panel(days, horizon, by_day);
    for (std::size_t i = 0; i < days.size() * horizon; ++i) panel.q.push_back(cq[i % horizon]);
    metrics["climatology"] = eval::evaluate(panel).to_json();
    names.push_back("climatology");
    panels.push_back(std::move(panel));
  }
  if (!panels.empty()) {
    std::ifstream first(cfg.out / ("calibration_" + names.front() + ".csv"), std::ios::binary);
    auto os = open_out(cfg.out / "calibration.csv");
    os << first.rdbuf();
  }
  const auto dm_note = write_dm(cfg.out / "dm.csv", names, panels);

  nlohmann::json report;
  report["days"] = days.size();
  report["first_day"] = data::format_date(days.front());
  report["last_day"] = data::format_date(days.back());
  report["members"] = ok.size();
  nlohmann::json failed = nlohmann::json::array();
  for (std::size_t m = 0; m < M; ++m) {
    if (!results[m]) failed.push_back({{"member", m}, {"error", failures[m]}});
  }
  report["failed_members"] = failed;
  report["metrics"] = metrics;
  report["dm"] = dm_note ? nlohmann::json(*dm_note) : nlohmann::json("dm.csv");
  write_json(cfg.out / "report.json", report);

  nlohmann::json manifest;
  manifest["config"] = cfg.to_json();
  manifest["seed"] = cfg.seed;
  manifest["data_hash"] = data_hash;
  nlohmann::json members = nlohmann::json::array();
  for (auto m : ok) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : results[m]->blocks) {
      std::vector<std::string> skipped;
      for (auto d : b.skipped_days) skipped.push_back(data::format_date(d));
      blocks.push_back({{"index", b.index},
                        {"start", data::format_date(b.start)},
                        {"end", data::format_date(b.end)},
                        {"train_samples", b.train_samples},
                        {"max_train_day", data::format_date(b.max_train_day)},
                        {"skipped_days", skipped},
                        {"from_cache", b.from_cache},
                        {"history", b.history.to_json()}});
    }
    members.push_back({{"member", m}, {"blocks", blocks}});
  }
  manifest["members"] = members;
  manifest["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest["created_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  write_json(cfg.out / "run_manifest.json", manifest);
  log_line(opts, "backtest finished: " + std::to_string(days.size()) + " days, report -> " +
                     (cfg.out / "report.json").string());
  return report;
}

// gridsearch

nlohmann::json cmd_gridsearch(const RunConfig& cfg, const CommandOptions& opts) {
  const std::int64_t train_start = require(cfg.train_start, "train_start");
  const std::int64_t tune_start = require(cfg.tune_start, "tune_start");
  std::optional<std::int64_t> tune_end = cfg.tune_end ? cfg.tune_end : cfg.test_start;
  if (!tune_end) throw ConfigError("config needs 'tune_end' or 'test_start'");
  if (cfg.test_start && *tune_end > *cfg.test_start) throw ConfigError("tuning range overlaps the test range");
  if (!(train_start < tune_start)) throw ConfigError("train_start must precede tune_start");

  const train::ModelSpec spec = cfg.model_spec();
  const auto kind = model::model_kind_from_string(spec.network.value("kind", std::string("nbmlss")));
  if (kind == model::ModelKind::constant) throw ConfigError("nothing to tune for the constant model");
  const train::GridSpec grid = train::GridSpec::from_json(cfg.grid.value_or(nlohmann::json::object()), kind);
  const auto samples = load_samples(cfg);
  train::TrainConfig tc = cfg.train;
  tc.seed = train::derive_seed(cfg.seed, 0x9d1d);
  const auto ranking =
      train::grid_search(grid, spec, samples, tc, {train_start, tune_start, *tune_end, cfg.jobs}, cfg.seed);

  {
    auto os = open_out(cfg.out / "ranking.csv");
    os << "rank,n_u,n_z,dropout,lr,score";
    for (std::size_t k = 0; k < grid.folds; ++k) os << ",fold" << k + 1;
    os << ",note\n";
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      const auto& g = ranking[r];
      os << r + 1 << ',' << g.cell.n_u << ',' << g.cell.n_z << ',' << fmt17(g.cell.dropout) << ','
         << fmt17(g.cell.lr) << ',' << fmt17(g.score);
      for (double s : g.fold_scores) os << ',' << fmt17(s);
      std::string note = g.note;
      std::replace(note.begin(), note.end(), ',', ';');
      os << ',' << note << '\n';
    }
  }
  RunConfig best = cfg;
  const auto& top = ranking.front();
  best.model["n_u"] = top.cell.n_u;
  if (kind == model::ModelKind::nbmlss) best.model["n_z"] = top.cell.n_z;
  best.model["dropout"] = top.cell.dropout;
  best.train.lr = top.cell.lr;
  write_json(cfg.out / "best_config.json", best.to_json());
  log_line(opts, "grid search ranked " + std::to_string(ranking.size()) + " configurations");
  return {{"cells", ranking.size()}, {"best", top.cell.to_json()}, {"score", top.score}};
}

// export-shapes

nlohmann::json cmd_export_shapes(const RunConfig& cfg, const CommandOptions& opts) {
  const fs::path ckpt = opts.checkpoint ? *opts.checkpoint : cfg.out / "models" / "member_0.json";
  const nlohmann::json doc = diff::load_checkpoint_document(ckpt);
  const nlohmann::json& header = doc.at("header");
  const train::ModelSpec spec = cfg.model_spec();
  model::Forecaster fc = spec.build(0);
  const nlohmann::json want = fc.config_json();
  const nlohmann::json have = header.at("model");
  std::vector<std::string> mismatched;
  for (const char* field : {"kind", "head", "n_f", "horizon", "n_u", "n_z", "first_layer_bias", "mask", "revin_affine"}) {
    const bool in_want = want.contains(field);
    const bool in_have = have.contains(field);
    if (in_want != in_have || (in_want && want.at(field) != have.at(field))) {
      std::string detail = field;
      if (in_want && in_have && field != std::string("mask")) {
        detail += " (config " + want.at(field).dump() + ", checkpoint " + have.at(field).dump() + ")";
      }
      mismatched.push_back(detail);
    }
  }
  if (!mismatched.empty()) {
    std::string msg = "checkpoint " + ckpt.string() + " does not match the config: ";
    for (std::size_t i = 0; i < mismatched.size(); ++i) msg += (i ? ", " : "") + mismatched[i];
    throw ConfigError(msg);
  }
  auto params = fc.parameters();
  diff::tensors_from_json(doc, params);
  auto* nb = dynamic_cast<model::NbmlssModel*>(&fc.network());
  if (!nb) throw ConfigError("shape export needs an nbmlss checkpoint");

  const auto scaler = data::FeatureScaler::from_json(header.at("scaler"));
  const auto fmin = header.at("feature_min").get<std::vector<double>>();
  const auto fmax = header.at("feature_max").get<std::vector<double>>();
  const auto& pnames = model::param_names(spec.link.head);
  const std::size_t H = nb->dims().horizon;

  std::vector<std::size_t> ps;
  if (opts.param) {
    ps.push_back(model::param_index(spec.link.head, *opts.param));
  } else {
    for (std::size_t p = 0; p < pnames.size(); ++p) ps.push_back(p);
  }
  std::vector<std::size_t> hs;
  if (opts.hour) {
    if (*opts.hour >= H) throw ConfigError("hour " + std::to_string(*opts.hour) + " outside 0.." + std::to_string(H - 1));
    hs.push_back(*opts.hour);
  } else {
    for (std::size_t h = 0; h < H; ++h) hs.push_back(h);
  }

  const auto& fnames = data::feature_names();
  nlohmann::json files = nlohmann::json::array();
  for (auto p : ps) {
    for (auto h : hs) {
      model::ShapeGridSpec gs;
      gs.resolution = cfg.shape_resolution;
      gs.selections = {{p, h}};
      const auto rows = model::export_shape_functions(*nb, scaler, fmin, fmax, gs);
      char name[64];
      std::snprintf(name, sizeof name, "shapes_%s_h%02zu.csv", pnames[p].c_str(), h);
      const fs::path path = cfg.out / "shapes" / name;
      auto os = open_out(path);
      os << "feature,param,hour,x,f,contribution,extrapolated\n";
      for (const auto& r : rows) {
        const std::string feat = nb->dims().n_f == fnames.size() ? fnames[r.feature] : "x" + std::to_string(r.feature);
        os << feat << ',' << pnames[r.param] << ',' << r.hour << ',' << fmt17(r.x) << ',' << fmt17(r.f) << ','
           << fmt17(r.contribution) << ',' << (r.extrapolated ? 1 : 0) << '\n';
      }
      files.push_back(path.string());
    }
  }
  log_line(opts, "wrote " + std::to_string(files.size()) + " shape files under " + (cfg.out / "shapes").string());
  return {{"files", files}, {"resolution", cfg.shape_resolution}};
}

// evaluate

nlohmann::json cmd_evaluate(const RunConfig& cfg, const CommandOptions& opts) {
  if (opts.forecasts.empty()) throw ConfigError("evaluate needs at least one forecast CSV");
  const auto samples = load_samples(cfg);
  std::map<std::int64_t, const data::DaySample*> by_day;
  for (const auto& s : samples) by_day[s.day] = &s;

  std::vector<std::string> names;
  std::vector<eval::QuantilePanel> panels;
  nlohmann::json metrics;
  for (const auto& path : opts.forecasts) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open forecast file " + path.string());
    eval::QuantilePanel panel = eval::read_quantiles_csv(is);
    const auto actual = make_panel(panel.days, panel.horizon, by_day);
    panel.y = actual.y;
    std::string name = path.stem().string();
    if (metrics.contains(name)) name += "_" + std::to_string(names.size());
    metrics[name] = eval::evaluate(panel).to_json();
    write_calibration(cfg.out / ("calibration_" + name + ".csv"), panel);
    names.push_back(name);
    panels.push_back(std::move(panel));
  }
  bool aligned = true;
  for (std::size_t i = 1; i < panels.size(); ++i) {
    aligned = aligned && panels[i].days == panels[0].days && panels[i].horizon == panels[0].horizon;
  }
  const auto note = aligned ? write_dm(cfg.out / "dm.csv", names, panels)
                            : std::optional<std::string>("forecast files cover different days; DM matrix skipped");
  nlohmann::json report = {{"days", panels.front().days.size()}, {"metrics", metrics}};
  report["dm"] = note ? nlohmann::json(*note) : nlohmann::json("dm.csv");
  write_json(cfg.out / "evaluation.json", report);
  log_line(opts, "evaluated " + std::to_string(names.size()) + " forecast file(s)");
  return report;
}

}  // namespace nbmlss::pipeline
