// nbmlss command-line front end.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nbmlss/errors.hpp"
#include "nbmlss/pipeline.hpp"

namespace pl = nbmlss::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Neural basis models for location, scale and shape: day-ahead price forecasting"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::string> aggregate;
  std::optional<std::string> mask;
  std::optional<std::string> out;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config,-c", config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Base seed (overrides the config)");
    sub->add_option("--jobs,-j", jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--mask", mask, "Projection mask")->check(CLI::IsMember({"full", "hour"}));
    sub->add_option("--out,-o", out, "Output directory");
    sub->add_flag("--quiet,-q", quiet, "Suppress progress lines");
  };

  pl::CommandOptions opts;

  auto* prepare = app.add_subcommand("prepare", "Build the daily sample dump and scaler state");
  add_common(prepare);

  auto* backtest = app.add_subcommand("backtest", "Recalibrated ensemble backtest with evaluation");
  add_common(backtest);
  backtest->add_option("--aggregate", aggregate, "Ensemble aggregation")->check(CLI::IsMember({"p", "v", "both"}));
  backtest->add_flag("--skip-failed", opts.skip_failed, "Continue when an ensemble member fails");

  auto* grid = app.add_subcommand("gridsearch", "Rank hyperparameter cells on the tuning folds");
  add_common(grid);

  auto* shapes = app.add_subcommand("export-shapes", "Export shape functions from a checkpoint");
  add_common(shapes);
  std::string checkpoint;
  std::string param;
  std::size_t hour = 0;
  auto* ck_opt = shapes->add_option("--checkpoint", checkpoint, "Model checkpoint (default <out>/models/member_0.json)");
  auto* param_opt = shapes->add_option("--param", param, "Parameter name (loc, scale, tailweight, skewness, df)");
  auto* hour_opt = shapes->add_option("--hour", hour, "Delivery hour");

  auto* evaluate = app.add_subcommand("evaluate", "Metrics for existing forecast CSVs");
  add_common(evaluate);
  std::vector<std::string> forecasts;
  evaluate->add_option("--forecasts,-f", forecasts, "Forecast CSV files (date,hour,q01..q99)")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    pl::RunConfig cfg = pl::RunConfig::load_file(config_path);
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    if (aggregate) cfg.aggregate = *aggregate;
    if (mask) cfg.mask = *mask;
    if (out) cfg.out = *out;
    if (!quiet) opts.log = &std::cerr;
    if (ck_opt->count()) opts.checkpoint = checkpoint;
    if (param_opt->count()) opts.param = param;
    if (hour_opt->count()) opts.hour = hour;
    for (const auto& f : forecasts) opts.forecasts.emplace_back(f);

    nlohmann::json summary;
    if (*prepare) {
      summary = pl::cmd_prepare(cfg, opts);
    } else if (*backtest) {
      summary = pl::cmd_backtest(cfg, opts);
    } else if (*grid) {
      summary = pl::cmd_gridsearch(cfg, opts);
    } else if (*shapes) {
      summary = pl::cmd_export_shapes(cfg, opts);
    } else if (*evaluate) {
      summary = pl::cmd_evaluate(cfg, opts);
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return pl::exit_code_for_current_exception();
  }
}
