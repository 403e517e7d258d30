#include <atomic>
#include <cmath>
#include <random>

#include "doctest.h"
#include "nbmlss/errors.hpp"
#include "nbmlss/train.hpp"

using namespace nbmlss;
using namespace nbmlss::train;
using diff::Matrix;

namespace {

const std::int64_t kDay0 = data::days_from_civil(2020, 1, 6);

// Daily samples whose targets depend on the first calendar-free columns.
std::vector<data::DaySample> synthetic_samples(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<data::DaySample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.day = kDay0 + static_cast<std::int64_t>(i);
    s.x.resize(data::kNumFeatures);
    for (auto& v : s.x) v = 40.0 + 10.0 * z(rng);
    s.y.resize(data::kHorizon);
    for (std::size_t h = 0; h < data::kHorizon; ++h) s.y[h] = 0.5 * s.x[h] + 0.3 * s.x[72 + h] + 2.0 * z(rng);
  }
  return out;
}

ModelSpec constant_spec() {
  ModelSpec s;
  s.network = {{"kind", "constant"}, {"head", "jsu"}};
  return s;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.max_epochs = 6;
  c.patience = 3;
  c.batch_size = 8;
  c.lr = 1e-2;
  return c;
}

}  // namespace

TEST_CASE("config validation and round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.patience = c.max_epochs;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig::from_json({{"max_epochs", 10}, {"lr", 0.01}});
  CHECK(c.max_epochs == 10);
  CHECK(c.lr == 0.01);
  CHECK(c.patience == 20);
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"val_fraction", 1.5}}).validate(), ConfigError);
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
}

TEST_CASE("constant normal head recovers N(3, 2)") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(3.0, 2.0);
  Matrix y(4000, 1);
  for (Eigen::Index i = 0; i < y.rows(); ++i) y(i, 0) = n(rng);
  const Matrix x = Matrix::Zero(4000, 1);
  model::Forecaster fc(model::make_network({{"kind", "constant"}, {"head", "normal"}, {"n_f", 1}, {"horizon", 1}}, 0),
                       dists::LinkConfig{1e-3, 3.0, dists::HeadKind::normal});
  TrainConfig cfg;
  cfg.max_epochs = 60;
  cfg.patience = 10;
  cfg.batch_size = 200;
  cfg.lr = 0.05;
  const History h = fit_normalized(fc, x.topRows(3000), y.topRows(3000), x.bottomRows(1000), y.bottomRows(1000), cfg);
  const Matrix p = fc.predict_normalized(Matrix::Zero(1, 1));
  CHECK(p(0, 0) == doctest::Approx(3.0).epsilon(0.04));
  CHECK(p(0, 1) == doctest::Approx(2.0).epsilon(0.04));
  CHECK(h.val_nll.back() < h.val_nll.front());
}

TEST_CASE("early stopping and best-weight restore") {
  const auto samples = synthetic_samples(64, 1);
  ModelSpec spec;
  spec.network = {{"kind", "nbmlss"}, {"n_u", 4}, {"n_z", 4}};
  SUBCASE("patience 0 stops after one epoch") {
    TrainConfig c = quick_config();
    c.patience = 0;
    const auto tm = fit(spec, samples, c, 1);
    CHECK(tm.history.epochs() == 1);
    CHECK(tm.history.best_epoch == 0);
  }
  SUBCASE("restored weights reproduce the best validation loss") {
    TrainConfig c = quick_config();
    c.max_epochs = 12;
    const Matrix x = data::features_matrix(samples);
    const Matrix y = data::targets_matrix(samples);
    const auto scaler = data::FeatureScaler::fit(x, y, data::ScalerKind::zscore);
    const auto b = scaler.transform(x, y);
    model::Forecaster fc = spec.build(3);
    fc.init_output_bias(b.y.topRows(48));
    const History h = fit_normalized(fc, b.x.topRows(48), b.y.topRows(48), b.x.bottomRows(16), b.y.bottomRows(16), c);
    const double best = *std::min_element(h.val_nll.begin(), h.val_nll.end());
    CHECK(h.best_val == best);
    CHECK(h.val_nll[h.best_epoch] == best);
    CHECK(fc.loss(b.x.bottomRows(16), b.y.bottomRows(16), diff::Mode::eval) / 16.0 ==
          doctest::Approx(best).epsilon(1e-12));
    CHECK(h.epochs() <= c.max_epochs);
    CHECK((h.epochs() == c.max_epochs || h.epochs() - 1 - h.best_epoch == c.patience));
  }
}

TEST_CASE("training is deterministic and seeds matter") {
  const auto samples = synthetic_samples(48, 2);
  ModelSpec spec;
  spec.network = {{"kind", "nbmlss"}, {"n_u", 4}, {"n_z", 4}};
  const TrainConfig c = quick_config();
  auto a = fit(spec, samples, c, 7);
  auto b = fit(spec, samples, c, 7);
  auto d = fit(spec, samples, c, 8);
  CHECK(a.history.val_nll == b.history.val_nll);
  const auto pa = predict_days(a, samples);
  const auto pb = predict_days(b, samples);
  const auto pd = predict_days(d, samples);
  CHECK(dists::location(pa[3].hours[5]) == dists::location(pb[3].hours[5]));
  CHECK(dists::location(pa[3].hours[5]) != dists::location(pd[3].hours[5]));
}

TEST_CASE("minimum sample count") {
  const auto samples = synthetic_samples(15, 3);
  TrainConfig c = quick_config();
  CHECK_THROWS_AS(fit(constant_spec(), samples, c, 0), ConfigError);
  c.batch_size = 7;
  CHECK_NOTHROW(fit(constant_spec(), samples, c, 0));
}

TEST_CASE("recalibration blocks") {
  RecalibrationPlan plan{kDay0, kDay0 + 40, kDay0 + 53, 7};
  auto blocks = plan.blocks();
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0] == std::make_pair(kDay0 + 40, kDay0 + 46));
  CHECK(blocks[1] == std::make_pair(kDay0 + 47, kDay0 + 53));
  plan.cadence_days = 14;
  CHECK(plan.blocks().size() == 1);
  plan.cadence_days = 5;
  blocks = plan.blocks();
  CHECK(blocks.size() == 3);
  CHECK(blocks.back().second == kDay0 + 53);
  plan.cadence_days = 0;
  CHECK_THROWS_AS(plan.blocks(), ConfigError);
  CHECK_THROWS_AS((RecalibrationPlan{kDay0, kDay0, kDay0 + 3, 7}.blocks()), ConfigError);
}

TEST_CASE("expanding window without leakage") {
  auto samples = synthetic_samples(70, 4);
  const RecalibrationPlan plan{kDay0, kDay0 + 42, kDay0 + 62, 7};
  const TrainConfig c = quick_config();
  std::size_t trained = 0;
  RecalibrationHooks hooks;
  hooks.on_block = [&](const BlockRecord& r, const std::vector<DayForecast>& f, TrainedModel& tm) {
    ++trained;
    CHECK(r.max_train_day < r.start);
    CHECK(r.max_train_day == r.start - 1);
    CHECK(tm.train_rows + tm.val_rows == r.train_samples);
    CHECK(f.size() == static_cast<std::size_t>(r.end - r.start + 1));
  };
  const auto res = run_recalibration(plan, constant_spec(), samples, c, 11, hooks);
  CHECK(trained == 3);
  REQUIRE(res.blocks.size() == 3);
  for (std::size_t b = 1; b < res.blocks.size(); ++b) {
    CHECK(res.blocks[b].train_samples == res.blocks[b - 1].train_samples + 7);
  }
  CHECK(res.forecasts.size() == 21);

  // Sentinel: poisoning every day from the second block on leaves the first
  // block's forecasts untouched.
  auto poisoned = samples;
  for (auto& s : poisoned) {
    if (s.day >= kDay0 + 49) {
      for (auto& v : s.y) v = 1e6;
      for (auto& v : s.x) v = -1e6;
    }
  }
  const auto res2 = run_recalibration(plan, constant_spec(), poisoned, c, 11);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(res2.forecasts[i].day == res.forecasts[i].day);
    for (std::size_t h = 0; h < 24; ++h) {
      CHECK(dists::location(res2.forecasts[i].hours[h]) == dists::location(res.forecasts[i].hours[h]));
      CHECK(dists::scale(res2.forecasts[i].hours[h]) == dists::scale(res.forecasts[i].hours[h]));
    }
  }
  // Block 1 trains on days before 49 only; block 2 sees poisoned history.
  for (std::size_t i = 7; i < 14; ++i) {
    CHECK(dists::location(res2.forecasts[i].hours[0]) == dists::location(res.forecasts[i].hours[0]));
  }
  CHECK(dists::location(res2.forecasts[15].hours[0]) != dists::location(res.forecasts[15].hours[0]));
}

TEST_CASE("missing test days are skipped and cached blocks are reused") {
  auto samples = synthetic_samples(60, 5);
  samples.erase(samples.begin() + 45);
  const RecalibrationPlan plan{kDay0, kDay0 + 42, kDay0 + 55, 7};
  RecalibrationHooks hooks;
  hooks.load_block = [&](const BlockRecord& r) -> std::optional<std::vector<DayForecast>> {
    if (r.index != 1) return std::nullopt;
    return std::vector<DayForecast>{{r.start, {}}};
  };
  const auto res = run_recalibration(plan, constant_spec(), samples, quick_config(), 1, hooks);
  CHECK(res.blocks[0].skipped_days == std::vector<std::int64_t>{kDay0 + 45});
  CHECK(res.blocks[1].from_cache);
  CHECK(res.forecasts.size() == 6 + 1);
}

TEST_CASE("grid definitions") {
  CHECK(GridSpec::ddnn_default().cells().size() == 64);
  CHECK(GridSpec::nbmlss_default().cells().size() == 256);
  const auto g = GridSpec::from_json({{"n_u", {8}}, {"n_z", {4, 2}}, {"dropout", {0.0}}, {"lr", {1e-3}}, {"folds", 2}},
                                     model::ModelKind::nbmlss);
  const auto cells = g.cells();
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].n_z == 4);
  CHECK(cells[1].n_z == 2);
  CHECK(g.folds == 2);
}

TEST_CASE("grid search ranks a planted optimum first") {
  const auto samples = synthetic_samples(120, 6);
  GridSpec g;
  g.kind = model::ModelKind::ddnn;
  g.n_u = {4};
  g.n_z = {0};
  g.dropout = {0.0};
  g.lr = {1e-9, 1e-2};
  g.folds = 2;
  ModelSpec base;
  base.network = {{"kind", "ddnn"}};
  TrainConfig c = quick_config();
  c.max_epochs = 15;
  GridSearchInput in{kDay0, kDay0 + 80, kDay0 + 120, 1};
  const auto res = grid_search(g, base, samples, c, in, 3);
  REQUIRE(res.size() == 2);
  CHECK(res[0].cell.lr == 1e-2);
  CHECK(res[0].score < res[1].score);
  CHECK(res[0].fold_scores.size() == 2);
  CHECK(res[0].score == doctest::Approx((res[0].fold_scores[0] + res[0].fold_scores[1]) / 2));

  g.lr = {1e-2};
  const auto one = grid_search(g, base, samples, c, in, 3);
  REQUIRE(one.size() == 1);
  CHECK(one[0].score == res[0].score);
  in.tune_end = in.tune_start;
  CHECK_THROWS_AS(grid_search(g, base, samples, c, in, 3), ConfigError);
}

TEST_CASE("parallel_for") {
  std::vector<int> hit(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hit[i] += 1; });
  CHECK(std::count(hit.begin(), hit.end(), 1) == 50);
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 4) throw DataError("boom");
                               }),
                  DataError);
}
