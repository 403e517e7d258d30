#pragma once

// Batch commands behind the nbmlss executable: prepare, backtest,
// gridsearch, export-shapes and evaluate. Every command reads one JSON run
// config and writes only below its output directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nbmlss/datapipe.hpp"
#include "nbmlss/eval.hpp"
#include "nbmlss/train.hpp"

namespace nbmlss::pipeline {

namespace fs = std::filesystem;

/// Declarative run configuration. Only `data` and the dates a command needs
/// are required; everything else has a default.
struct RunConfig {
  fs::path data;     // hourly CSV
  fs::path samples;  // optional prepared samples CSV (used instead of `data`)
  std::optional<std::int64_t> train_start;
  std::optional<std::int64_t> test_start;
  std::optional<std::int64_t> test_end;  // inclusive
  std::optional<std::int64_t> tune_start;
  std::optional<std::int64_t> tune_end;  // exclusive, defaults to test_start

  nlohmann::json model = {{"kind", "nbmlss"}, {"head", "jsu"}, {"n_u", 64}, {"n_z", 64}, {"dropout", 0.0}};
  data::ScalerKind scaler = data::ScalerKind::zscore;
  bool revin_affine = false;
  dists::LinkConfig link;
  std::string mask = "full";  // full | hour

  eval::EnsembleSpec ensemble;
  std::string aggregate = "p";  // p | v | both
  train::TrainConfig train;
  std::size_t cadence_days = 7;
  std::optional<nlohmann::json> grid;
  data::LoadOptions load;
  std::size_t shape_resolution = 256;

  fs::path out = "out";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  static RunConfig from_json(const nlohmann::json& j, const fs::path& base_dir = {});
  static RunConfig load_file(const fs::path& path);
  nlohmann::json to_json() const;

  train::ModelSpec model_spec() const;
  std::vector<eval::Aggregation> aggregations() const;
};

struct CommandOptions {
  bool skip_failed = false;
  std::optional<fs::path> checkpoint;
  std::optional<std::string> param;
  std::optional<std::size_t> hour;
  std::vector<fs::path> forecasts;
  /// Progress lines go here when set.
  std::ostream* log = nullptr;
};

/// Loads the configured data source into daily samples; fills `data_hash`.
std::vector<data::DaySample> load_samples(const RunConfig& cfg, std::string* data_hash = nullptr,
                                          data::LoadReport* report = nullptr);

nlohmann::json cmd_prepare(const RunConfig& cfg, const CommandOptions& opts = {});
nlohmann::json cmd_backtest(const RunConfig& cfg, const CommandOptions& opts = {});
nlohmann::json cmd_gridsearch(const RunConfig& cfg, const CommandOptions& opts = {});
nlohmann::json cmd_export_shapes(const RunConfig& cfg, const CommandOptions& opts = {});
nlohmann::json cmd_evaluate(const RunConfig& cfg, const CommandOptions& opts = {});

/// Per-hour empirical percentiles of the given training targets, used as the
/// climatological reference forecast.
std::vector<eval::QuantileVector> climatology_quantiles(std::span<const data::DaySample> train,
                                                        std::size_t horizon);

/// Parameter dump "date,hour,lambda,sigma,tau,zeta". Normal rows leave tau
/// and zeta empty; Student-t rows store nu in the tau column.
void write_params_csv(std::ostream& os, const std::vector<train::DayForecast>& forecasts);

/// Process exit code for the active exception: 2 config, 3 data, 4 numeric.
int exit_code_for_current_exception();

}  // namespace nbmlss::pipeline
