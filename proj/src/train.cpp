#include "nbmlss/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "nbmlss/errors.hpp"

namespace nbmlss::train {

namespace {

Matrix take_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

std::vector<Matrix> snapshot(const std::vector<model::ParamTensor*>& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(p->value());
  return out;
}

void restore(const std::vector<model::ParamTensor*>& params, const std::vector<Matrix>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = snap[i];
}

std::vector<data::DaySample> select_days(std::span<const data::DaySample> samples, std::int64_t from,
                                         std::int64_t to_exclusive) {
  std::vector<data::DaySample> out;
  for (const auto& s : samples) {
    if (s.day >= from && s.day < to_exclusive) out.push_back(s);
  }
  return out;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) { return diff::mix_seed(base, stream); }

void TrainConfig::validate() const {
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (patience >= max_epochs) throw ConfigError("patience must be smaller than max_epochs");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"max_epochs", max_epochs}, {"patience", patience}, {"batch_size", batch_size},
          {"lr", lr},                 {"val_fraction", val_fraction}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig d) {
  d.max_epochs = j.value("max_epochs", d.max_epochs);
  d.patience = j.value("patience", d.patience);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.val_fraction = j.value("val_fraction", d.val_fraction);
  d.seed = j.value("seed", d.seed);
  return d;
}

nlohmann::json History::to_json() const {
  return {{"train_nll", train_nll}, {"val_nll", val_nll}, {"best_epoch", best_epoch}, {"best_val", best_val}};
}

History fit_normalized(model::Forecaster& fc, const Matrix& x_train, const Matrix& y_train, const Matrix& x_val,
                       const Matrix& y_val, const TrainConfig& cfg) {
  cfg.validate();
  if (x_val.rows() == 0) throw ConfigError("empty validation set");
  if (x_train.rows() == 0) throw ConfigError("empty training set");

  auto params = fc.parameters();
  diff::Adam adam({cfg.lr, 0.9, 0.999, 1e-8});
  diff::Rng shuffle_rng(derive_seed(cfg.seed, 0x5eed));
  std::vector<std::size_t> order(static_cast<std::size_t>(x_train.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});

  History hist;
  std::vector<Matrix> best = snapshot(params);
  const auto n_val = static_cast<double>(x_val.rows());
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix xb = take_rows(x_train, idx);
      const Matrix yb = take_rows(y_train, idx);
      double loss = 0.0;
      try {
        loss = fc.loss(xb, yb, diff::Mode::train);
        if (!std::isfinite(loss)) throw NumericError("non-finite loss");
        const double inv = 1.0 / static_cast<double>(idx.size());
        for (auto* p : params) p->grad() *= inv;
        adam.step(params);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_index + 1) + ": " + e.what());
      }
      epoch_loss += loss;
    }
    double val = 0.0;
    try {
      val = fc.loss(x_val, y_val, diff::Mode::eval) / n_val;
    } catch (const NumericError& e) {
      throw NumericError("validation diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    if (!std::isfinite(val)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch + 1));
    }
    hist.train_nll.push_back(epoch_loss / static_cast<double>(order.size()));
    hist.val_nll.push_back(val);
    if (val < hist.best_val) {
      hist.best_val = val;
      hist.best_epoch = epoch;
      best = snapshot(params);
    }
    if (epoch - hist.best_epoch >= cfg.patience) break;
  }
  restore(params, best);
  return hist;
}

model::Forecaster ModelSpec::build(std::uint64_t seed) const {
  return model::Forecaster(model::make_network(network, seed), link, revin_affine, lag_count);
}

nlohmann::json ModelSpec::to_json() const {
  return {{"network", network},
          {"epsilon", link.epsilon},
          {"gamma", link.gamma},
          {"scaler", data::to_string(scaler)},
          {"revin_affine", revin_affine},
          {"lag_count", lag_count}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.network = j.at("network");
  s.link.epsilon = j.value("epsilon", 1e-3);
  s.link.gamma = j.value("gamma", 3.0);
  s.link.head = dists::head_from_string(s.network.value("head", std::string("jsu")));
  s.scaler = data::scaler_from_string(j.value("scaler", std::string("zscore")));
  s.revin_affine = j.value("revin_affine", false);
  s.lag_count = j.value("lag_count", data::kPriceLagFeatures);
  return s;
}

TrainedModel fit(const ModelSpec& spec, const Matrix& x, const Matrix& y, const TrainConfig& cfg,
                 std::uint64_t init_seed) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(x.rows());
  if (n < 2 * cfg.batch_size) {
    throw ConfigError("training needs at least 2 x batch_size = " + std::to_string(2 * cfg.batch_size) +
                      " samples, got " + std::to_string(n));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  diff::Rng split_rng(derive_seed(cfg.seed, 0x7a11d));
  std::shuffle(idx.begin(), idx.end(), split_rng);
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n) throw ConfigError("validation split is empty or covers all samples");
  std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> tr_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(tr_idx.begin(), tr_idx.end());

  const Matrix x_tr = take_rows(x, tr_idx);
  const Matrix y_tr = take_rows(y, tr_idx);
  const Matrix x_va = take_rows(x, val_idx);
  const Matrix y_va = take_rows(y, val_idx);

  TrainedModel tm{spec.build(init_seed),
                  data::FeatureScaler::fit(x_tr, y_tr, spec.scaler, spec.lag_count),
                  {},
                  {},
                  {},
                  tr_idx.size(),
                  val_idx.size()};
  const data::NormalizedBatch tr = tm.scaler.transform(x_tr, y_tr);
  const data::NormalizedBatch va = tm.scaler.transform(x_va, y_va);
  tm.feature_min.resize(static_cast<std::size_t>(tr.x.cols()));
  tm.feature_max.resize(static_cast<std::size_t>(tr.x.cols()));
  for (Eigen::Index c = 0; c < tr.x.cols(); ++c) {
    tm.feature_min[static_cast<std::size_t>(c)] = tr.x.col(c).minCoeff();
    tm.feature_max[static_cast<std::size_t>(c)] = tr.x.col(c).maxCoeff();
  }
  tm.forecaster.init_output_bias(tr.y);
  tm.history = fit_normalized(tm.forecaster, tr.x, tr.y, va.x, va.y, cfg);
  return tm;
}

TrainedModel fit(const ModelSpec& spec, std::span<const data::DaySample> samples, const TrainConfig& cfg,
                 std::uint64_t init_seed) {
  return fit(spec, data::features_matrix(samples), data::targets_matrix(samples), cfg, init_seed);
}

std::vector<DayForecast> predict_days(TrainedModel& tm, std::span<const data::DaySample> samples) {
  std::vector<DayForecast> out;
  if (samples.empty()) return out;
  const Matrix x = data::features_matrix(samples);
  const data::NormalizedBatch b = tm.scaler.transform(x, Matrix(0, 0));
  auto params = tm.forecaster.predict(b);
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back({samples[i].day, std::move(params[i])});
  return out;
}

double mean_nll(TrainedModel& tm, std::span<const data::DaySample> samples) {
  if (samples.empty()) throw ConfigError("mean_nll on empty sample set");
  const auto fc = predict_days(tm, samples);
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) total += dists::nll(samples[i].y, fc[i].hours);
  return total / static_cast<double>(samples.size());
}

// Recalibration

void RecalibrationPlan::validate() const {
  if (cadence_days == 0) throw ConfigError("recalibration cadence must be positive");
  if (!(train_start < test_start)) throw ConfigError("train start must precede test start");
  if (test_end < test_start) throw ConfigError("test end precedes test start");
}

std::vector<std::pair<std::int64_t, std::int64_t>> RecalibrationPlan::blocks() const {
  validate();
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  const auto step = static_cast<std::int64_t>(cadence_days);
  for (std::int64_t s = test_start; s <= test_end; s += step) out.emplace_back(s, std::min(test_end, s + step - 1));
  return out;
}

RecalibrationResult run_recalibration(const RecalibrationPlan& plan, const ModelSpec& spec,
                                      std::span<const data::DaySample> samples, const TrainConfig& cfg,
                                      std::uint64_t init_seed, const RecalibrationHooks& hooks) {
  RecalibrationResult result;
  const auto blocks = plan.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto [start, end] = blocks[b];
    BlockRecord rec;
    rec.index = b;
    rec.start = start;
    rec.end = end;

    std::vector<data::DaySample> test_days;
    for (std::int64_t d = start; d <= end; ++d) {
      auto it = std::lower_bound(samples.begin(), samples.end(), d,
                                 [](const data::DaySample& s, std::int64_t day) { return s.day < day; });
      if (it != samples.end() && it->day == d) {
        test_days.push_back(*it);
      } else {
        rec.skipped_days.push_back(d);
      }
    }

    if (hooks.load_block) {
      if (auto cached = hooks.load_block(rec)) {
        rec.from_cache = true;
        for (auto& f : *cached) result.forecasts.push_back(std::move(f));
        result.blocks.push_back(std::move(rec));
        continue;
      }
    }

    const auto train = select_days(samples, plan.train_start, start);
    rec.train_samples = train.size();
    rec.max_train_day = train.empty() ? plan.train_start : train.back().day;
    if (!train.empty() && train.back().day >= start) {
      throw StateError("leakage: training sample dated " + data::format_date(train.back().day) +
                       " for block starting " + data::format_date(start));
    }
    TrainConfig block_cfg = cfg;
    block_cfg.seed = derive_seed(cfg.seed, b);
    TrainedModel tm = fit(spec, train, block_cfg, init_seed);
    rec.history = tm.history;
    auto fc = predict_days(tm, test_days);
    if (hooks.on_block) hooks.on_block(rec, fc, tm);
    for (auto& f : fc) result.forecasts.push_back(std::move(f));
    result.blocks.push_back(std::move(rec));
  }
  return result;
}

// Grid search

nlohmann::json GridCell::to_json() const {
  return {{"n_u", n_u}, {"n_z", n_z}, {"dropout", dropout}, {"lr", lr}};
}

GridSpec GridSpec::ddnn_default() {
  GridSpec g;
  g.kind = model::ModelKind::ddnn;
  g.n_u = {128, 512, 640, 768};
  g.n_z = {0};
  g.dropout = {0.0, 0.1, 0.3, 0.5};
  g.lr = {1e-3, 5e-4, 1e-4, 5e-5};
  return g;
}

GridSpec GridSpec::nbmlss_default() {
  GridSpec g;
  g.kind = model::ModelKind::nbmlss;
  g.n_u = {32, 64, 128, 256};
  g.n_z = {32, 64, 128, 256};
  g.dropout = {0.0, 0.1, 0.3, 0.5};
  g.lr = {1e-3, 5e-4, 1e-4, 5e-5};
  return g;
}

GridSpec GridSpec::from_json(const nlohmann::json& j, model::ModelKind kind) {
  GridSpec g = kind == model::ModelKind::ddnn ? ddnn_default() : nbmlss_default();
  g.kind = kind;
  if (j.contains("n_u")) g.n_u = j.at("n_u").get<std::vector<std::size_t>>();
  if (j.contains("n_z")) g.n_z = j.at("n_z").get<std::vector<std::size_t>>();
  if (j.contains("dropout")) g.dropout = j.at("dropout").get<std::vector<double>>();
  if (j.contains("lr")) g.lr = j.at("lr").get<std::vector<double>>();
  g.folds = j.value("folds", g.folds);
  return g;
}

std::vector<GridCell> GridSpec::cells() const {
  std::vector<GridCell> out;
  const std::vector<std::size_t> nz = kind == model::ModelKind::nbmlss ? n_z : std::vector<std::size_t>{0};
  for (auto u : n_u) {
    for (auto z : nz) {
      for (auto d : dropout) {
        for (auto l : lr) out.push_back({u, z, d, l});
      }
    }
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i = 0;
      {
        std::lock_guard lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<GridResult> grid_search(const GridSpec& grid, const ModelSpec& base,
                                    std::span<const data::DaySample> samples, const TrainConfig& cfg,
                                    const GridSearchInput& in, std::uint64_t seed) {
  if (grid.folds == 0) throw ConfigError("grid search needs at least one fold");
  if (!(in.tune_start < in.tune_end)) throw ConfigError("empty tuning range");
  const auto cells = grid.cells();
  if (cells.empty()) throw ConfigError("empty grid");

  const std::int64_t span_days = in.tune_end - in.tune_start;
  std::vector<std::pair<std::int64_t, std::int64_t>> folds;
  for (std::size_t k = 0; k < grid.folds; ++k) {
    const std::int64_t a = in.tune_start + span_days * static_cast<std::int64_t>(k) / static_cast<std::int64_t>(grid.folds);
    const std::int64_t b =
        in.tune_start + span_days * static_cast<std::int64_t>(k + 1) / static_cast<std::int64_t>(grid.folds);
    folds.emplace_back(a, b);
  }

  std::vector<GridResult> results(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    results[c].cell = cells[c];
    results[c].fold_scores.assign(folds.size(), std::numeric_limits<double>::infinity());
  }
  std::vector<std::string> notes(cells.size() * folds.size());
  parallel_for(cells.size() * folds.size(), in.jobs, [&](std::size_t task) {
    const std::size_t c = task / folds.size();
    const std::size_t k = task % folds.size();
    const GridCell& cell = cells[c];
    ModelSpec spec = base;
    spec.network["kind"] = model::to_string(grid.kind);
    spec.network["n_u"] = cell.n_u;
    if (grid.kind == model::ModelKind::nbmlss) spec.network["n_z"] = cell.n_z;
    spec.network["dropout"] = cell.dropout;
    TrainConfig tc = cfg;
    tc.lr = cell.lr;
    tc.seed = derive_seed(cfg.seed, k);
    const auto train = select_days(samples, in.train_start, folds[k].first);
    const auto val = select_days(samples, folds[k].first, folds[k].second);
    try {
      if (val.empty()) throw ConfigError("fold " + std::to_string(k) + " has no validation samples");
      TrainedModel tm = fit(spec, train, tc, seed);
      const double s = mean_nll(tm, val);
      results[c].fold_scores[k] = std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
    } catch (const NumericError& e) {
      notes[task] = std::string("diverged: ") + e.what();
    }
  });
  for (std::size_t c = 0; c < cells.size(); ++c) {
    double sum = 0.0;
    for (double s : results[c].fold_scores) sum += s;
    results[c].score = sum / static_cast<double>(folds.size());
    if (!std::isfinite(results[c].score)) results[c].score = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < folds.size(); ++k) {
      if (!notes[c * folds.size() + k].empty()) results[c].note = notes[c * folds.size() + k];
    }
  }
  std::stable_sort(results.begin(), results.end(), [](const GridResult& a, const GridResult& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.cell.n_u != b.cell.n_u) return a.cell.n_u < b.cell.n_u;
    if (a.cell.n_z != b.cell.n_z) return a.cell.n_z < b.cell.n_z;
    if (a.cell.dropout != b.cell.dropout) return a.cell.dropout > b.cell.dropout;
    return a.cell.lr < b.cell.lr;
  });
  return results;
}

}  // namespace nbmlss::train
