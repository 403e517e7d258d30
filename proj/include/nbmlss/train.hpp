#pragma once

// NLL training with early stopping, weekly recalibration backtests and the
// grid-search harness.

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nbmlss/datapipe.hpp"
#include "nbmlss/model.hpp"

namespace nbmlss::train {

using diff::Matrix;

struct TrainConfig {
  std::size_t max_epochs = 800;
  std::size_t patience = 20;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig defaults);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig()); }
};

struct History {
  std::vector<double> train_nll;  // mean per-sample NLL, normalized units
  std::vector<double> val_nll;
  std::size_t best_epoch = 0;     // 0-based
  double best_val = std::numeric_limits<double>::infinity();

  std::size_t epochs() const { return train_nll.size(); }
  nlohmann::json to_json() const;
};

/// Mixes a base seed with a stream index (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Trains on already-normalized data with a fixed validation set. Restores the
/// weights of the best validation epoch before returning.
History fit_normalized(model::Forecaster& fc, const Matrix& x_train, const Matrix& y_train,
                       const Matrix& x_val, const Matrix& y_val, const TrainConfig& cfg);

/// Everything needed to build a fresh model.
struct ModelSpec {
  nlohmann::json network = {{"kind", "nbmlss"}};
  dists::LinkConfig link;
  data::ScalerKind scaler = data::ScalerKind::zscore;
  bool revin_affine = false;
  std::size_t lag_count = data::kPriceLagFeatures;

  model::Forecaster build(std::uint64_t seed) const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

struct TrainedModel {
  model::Forecaster forecaster;
  data::FeatureScaler scaler;
  History history;
  std::vector<double> feature_min;  // model units, training split
  std::vector<double> feature_max;
  std::size_t train_rows = 0;
  std::size_t val_rows = 0;
};

/// Random validation subsplit (val_fraction), scaler fitted on the training
/// part only, output bias initialized, then fit_normalized.
TrainedModel fit(const ModelSpec& spec, std::span<const data::DaySample> samples, const TrainConfig& cfg,
                 std::uint64_t init_seed);

/// Convenience overload on raw matrices (any feature width).
TrainedModel fit(const ModelSpec& spec, const Matrix& x, const Matrix& y, const TrainConfig& cfg,
                 std::uint64_t init_seed);

struct DayForecast {
  std::int64_t day = 0;
  std::vector<dists::DistParams> hours;
};

std::vector<DayForecast> predict_days(TrainedModel& tm, std::span<const data::DaySample> samples);

struct RecalibrationPlan {
  std::int64_t train_start = 0;
  std::int64_t test_start = 0;
  std::int64_t test_end = 0;  // inclusive
  std::size_t cadence_days = 7;

  void validate() const;
  /// Consecutive [start, end] day ranges covering the test range.
  std::vector<std::pair<std::int64_t, std::int64_t>> blocks() const;
};

struct BlockRecord {
  std::size_t index = 0;
  std::int64_t start = 0;
  std::int64_t end = 0;
  std::size_t train_samples = 0;
  std::int64_t max_train_day = 0;
  std::vector<std::int64_t> skipped_days;
  History history;
  bool from_cache = false;
};

struct RecalibrationResult {
  std::vector<DayForecast> forecasts;
  std::vector<BlockRecord> blocks;
};

struct RecalibrationHooks {
  /// Returns previously stored forecasts for a block, if any.
  std::function<std::optional<std::vector<DayForecast>>(const BlockRecord&)> load_block;
  /// Invoked after each freshly trained block.
  std::function<void(const BlockRecord&, const std::vector<DayForecast>&, TrainedModel&)> on_block;
};

/// For each block: retrain a fresh model (seed init_seed) on every sample with
/// train_start <= day < block start, then forecast each day of the block.
RecalibrationResult run_recalibration(const RecalibrationPlan& plan, const ModelSpec& spec,
                                      std::span<const data::DaySample> samples, const TrainConfig& cfg,
                                      std::uint64_t init_seed, const RecalibrationHooks& hooks = {});

// Grid search

struct GridCell {
  std::size_t n_u = 0;
  std::size_t n_z = 0;  // unused for DDNN
  double dropout = 0.0;
  double lr = 1e-3;

  nlohmann::json to_json() const;
};

struct GridSpec {
  model::ModelKind kind = model::ModelKind::nbmlss;
  std::vector<std::size_t> n_u;
  std::vector<std::size_t> n_z;
  std::vector<double> dropout;
  std::vector<double> lr;
  std::size_t folds = 4;

  static GridSpec ddnn_default();
  static GridSpec nbmlss_default();
  /// Cartesian product in n_u, n_z, dropout, lr order.
  std::vector<GridCell> cells() const;
  static GridSpec from_json(const nlohmann::json& j, model::ModelKind kind);
};

struct GridResult {
  GridCell cell;
  std::vector<double> fold_scores;  // mean per-sample NLL in price units
  double score = std::numeric_limits<double>::infinity();
  std::string note;
};

struct GridSearchInput {
  std::int64_t train_start = 0;
  std::int64_t tune_start = 0;
  std::int64_t tune_end = 0;  // exclusive; must not overlap the test range
  std::size_t jobs = 1;
};

/// Scores every cell by the mean validation NLL across `folds` contiguous
/// blocks tiling [tune_start, tune_end), each trained on all earlier samples.
/// Ranked ascending with ties broken by smaller n_u, smaller n_z, larger
/// dropout, smaller lr. Diverging cells score +inf.
std::vector<GridResult> grid_search(const GridSpec& grid, const ModelSpec& base,
                                    std::span<const data::DaySample> samples, const TrainConfig& cfg,
                                    const GridSearchInput& in, std::uint64_t seed);

/// Mean per-sample NLL of price-unit targets.
double mean_nll(TrainedModel& tm, std::span<const data::DaySample> samples);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions propagate
/// (the first one by index).
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace nbmlss::train
