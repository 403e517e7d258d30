// Python bindings for the nbmlss core.

#include <memory>
#include <string>
#include <vector>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "nbmlss/datapipe.hpp"
#include "nbmlss/dists.hpp"
#include "nbmlss/errors.hpp"
#include "nbmlss/eval.hpp"
#include "nbmlss/model.hpp"
#include "nbmlss/pipeline.hpp"
#include "nbmlss/train.hpp"

namespace py = pybind11;
using namespace nbmlss;
using diff::Matrix;

namespace {

dists::DistParams make_params(const std::string& head, const std::vector<double>& v) {
  const auto kind = dists::head_from_string(head);
  if (v.size() != static_cast<std::size_t>(dists::param_count(kind))) {
    throw ConfigError(head + " takes " + std::to_string(dists::param_count(kind)) + " parameters");
  }
  switch (kind) {
    case dists::HeadKind::jsu: return dists::JsuParams{v[0], v[1], v[2], v[3]};
    case dists::HeadKind::normal: return dists::NormalParams{v[0], v[1]};
    case dists::HeadKind::studentt: return dists::StudentTParams{v[0], v[1], v[2]};
  }
  throw ConfigError("bad head");
}

std::vector<double> values_of(const dists::DistParams& p) {
  return std::visit(
      [](const auto& q) -> std::vector<double> {
        using T = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<T, dists::JsuParams>) return {q.lambda, q.sigma, q.tau, q.zeta};
        if constexpr (std::is_same_v<T, dists::NormalParams>) return {q.mu, q.sigma};
        if constexpr (std::is_same_v<T, dists::StudentTParams>) return {q.mu, q.sigma, q.nu};
      },
      p);
}

// Trained model handle: fit on raw arrays, predict parameter arrays
// [rows x H x n_p] in price units.
struct PyModel {
  std::unique_ptr<train::TrainedModel> tm;
  dists::HeadKind head;

  py::array_t<double> predict(const Matrix& x) {
    const data::NormalizedBatch b = tm->scaler.transform(x, Matrix(0, 0));
    const auto params = tm->forecaster.predict(b);
    const auto np = static_cast<py::ssize_t>(dists::param_count(head));
    const auto H = params.empty() ? py::ssize_t{0} : static_cast<py::ssize_t>(params[0].size());
    py::array_t<double> out({static_cast<py::ssize_t>(params.size()), H, np});
    auto r = out.mutable_unchecked<3>();
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t h = 0; h < params[i].size(); ++h) {
        const auto v = values_of(params[i][h]);
        for (std::size_t k = 0; k < v.size(); ++k) r(i, h, k) = v[k];
      }
    }
    return out;
  }
};

PyModel fit_arrays(const std::string& spec_json, const Matrix& x, const Matrix& y, const std::string& train_json,
                   std::uint64_t seed) {
  const auto spec = train::ModelSpec::from_json(nlohmann::json::parse(spec_json));
  const auto cfg = train::TrainConfig::from_json(nlohmann::json::parse(train_json));
  PyModel m{std::make_unique<train::TrainedModel>(train::fit(spec, x, y, cfg, seed)), spec.link.head};
  return m;
}

std::string run_command(const std::string& name, const std::string& config_json, const std::string& base_dir,
                        const std::string& options_json) {
  auto cfg = pipeline::RunConfig::from_json(nlohmann::json::parse(config_json), base_dir);
  const auto o = nlohmann::json::parse(options_json);
  pipeline::CommandOptions opts;
  opts.skip_failed = o.value("skip_failed", false);
  if (o.contains("checkpoint")) opts.checkpoint = o.at("checkpoint").get<std::string>();
  if (o.contains("param")) opts.param = o.at("param").get<std::string>();
  if (o.contains("hour")) opts.hour = o.at("hour").get<std::size_t>();
  for (const auto& f : o.value("forecasts", std::vector<std::string>{})) opts.forecasts.emplace_back(f);
  nlohmann::json r;
  if (name == "prepare") {
    r = pipeline::cmd_prepare(cfg, opts);
  } else if (name == "backtest") {
    r = pipeline::cmd_backtest(cfg, opts);
  } else if (name == "gridsearch") {
    r = pipeline::cmd_gridsearch(cfg, opts);
  } else if (name == "export-shapes") {
    r = pipeline::cmd_export_shapes(cfg, opts);
  } else if (name == "evaluate") {
    r = pipeline::cmd_evaluate(cfg, opts);
  } else {
    throw ConfigError("unknown command '" + name + "'");
  }
  return r.dump();
}

}  // namespace

PYBIND11_MODULE(_nbmlss, m) {
  m.doc() = "Neural basis distributional regression for day-ahead price forecasting";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());

  // Distributions
  m.def("logpdf", [](double x, const std::string& head, const std::vector<double>& p) {
    return dists::logpdf(x, make_params(head, p));
  }, py::arg("x"), py::arg("head"), py::arg("params"));
  m.def("cdf", [](double x, const std::string& head, const std::vector<double>& p) {
    return dists::cdf(x, make_params(head, p));
  }, py::arg("x"), py::arg("head"), py::arg("params"));
  m.def("quantile", [](double u, const std::string& head, const std::vector<double>& p) {
    return dists::quantile(u, make_params(head, p));
  }, py::arg("u"), py::arg("head"), py::arg("params"));
  m.def("sample", [](const std::string& head, const std::vector<double>& p, std::size_t n, std::uint64_t seed) {
    return dists::sample(make_params(head, p), n, seed);
  }, py::arg("head"), py::arg("params"), py::arg("n"), py::arg("seed") = 0);
  m.def("link_transform", [](const std::vector<double>& raw, const std::string& head, std::size_t horizon,
                             double epsilon, double gamma) {
    dists::LinkConfig cfg{epsilon, gamma, dists::head_from_string(head)};
    std::vector<std::vector<double>> out;
    for (const auto& p : dists::link_transform(raw, cfg, horizon)) out.push_back(values_of(p));
    return out;
  }, py::arg("raw"), py::arg("head"), py::arg("horizon"), py::arg("epsilon") = 1e-3, py::arg("gamma") = 3.0);

  // Data
  m.def("load_samples", [](const std::string& path) {
    const auto series = data::load_csv(path);
    const auto samples = data::build_samples(series);
    std::vector<std::string> days;
    for (const auto& s : samples) days.push_back(data::format_date(s.day));
    return py::make_tuple(days, data::features_matrix(samples), data::targets_matrix(samples));
  }, py::arg("path"), "Hourly CSV -> (dates, X [days x 147], Y [days x 24]).");
  m.def("feature_names", &data::feature_names);
  m.def("target_names", &data::target_names);

  // Models
  m.def("make_exogenous_mask", [](std::size_t n_p) {
    const auto mask = model::make_exogenous_mask(n_p);
    py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(mask.n_p), static_cast<py::ssize_t>(mask.horizon),
                                   static_cast<py::ssize_t>(mask.n_f)});
    std::copy(mask.bits.begin(), mask.bits.end(), out.mutable_data());
    return out;
  }, py::arg("n_p"));
  m.def("parameter_count", [](const std::string& network_json) {
    return model::make_network(nlohmann::json::parse(network_json), 0)->parameter_count();
  }, py::arg("network_json"));

  py::class_<PyModel>(m, "TrainedModel")
      .def("predict", &PyModel::predict, py::arg("x"), "Distribution parameters [rows x H x n_p].")
      .def_property_readonly("history", [](const PyModel& pm) { return pm.tm->history.to_json().dump(); })
      .def_property_readonly("epochs", [](const PyModel& pm) { return pm.tm->history.epochs(); });
  m.def("fit", &fit_arrays, py::arg("spec_json"), py::arg("x"), py::arg("y"), py::arg("train_json") = "{}",
        py::arg("seed") = 0);

  // Evaluation
  m.def("crps_from_quantiles", [](double y, const eval::QuantileVector& q) { return eval::crps_from_quantiles(y, q); });
  m.def("pinball", &eval::pinball);
  m.def("kupiec", [](std::size_t hits, std::size_t n, double p) {
    const auto r = eval::kupiec(hits, n, p);
    return py::make_tuple(r.lr, r.pass);
  }, py::arg("hits"), py::arg("n"), py::arg("p"));
  m.def("dm_test", [](const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                      double norm_order, bool two_sided) {
    const auto r = eval::dm_test(a, b, norm_order, two_sided);
    return py::make_tuple(r.statistic, r.p_value);
  }, py::arg("loss_a"), py::arg("loss_b"), py::arg("norm_order") = 1.0, py::arg("two_sided") = false);
  m.def("ensemble_quantiles", [](const std::string& head, const std::vector<std::vector<double>>& members,
                                 const std::string& mode, std::size_t n_samples, std::uint64_t seed,
                                 bool closed_form) {
    eval::ForecastDistribution fd;
    for (const auto& p : members) fd.members.push_back(make_params(head, p));
    eval::EnsembleSpec es;
    es.members = members.size();
    es.mode = eval::aggregation_from_string(mode);
    es.n_samples = n_samples;
    es.seed = seed;
    es.closed_form = closed_form;
    return eval::extract_quantiles(fd, es);
  }, py::arg("head"), py::arg("members"), py::arg("mode") = "p", py::arg("n_samples") = 10000, py::arg("seed") = 0,
        py::arg("closed_form") = false);

  m.def("_run_command", &run_command);
}
