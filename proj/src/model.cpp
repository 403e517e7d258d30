#include "nbmlss/model.hpp"

#include <algorithm>
#include <cmath>

#include "nbmlss/errors.hpp"

namespace nbmlss::model {

namespace {

Matrix mask_matrix(const NbmlssConfig& cfg) {
  const auto np = static_cast<std::size_t>(dists::param_count(cfg.dims.head));
  const std::size_t H = cfg.dims.horizon;
  const std::size_t nf = cfg.dims.n_f;
  Matrix m = Matrix::Ones(static_cast<Eigen::Index>(np * H), static_cast<Eigen::Index>(nf));
  if (!cfg.mask) return m;
  const FeatureMask& fm = *cfg.mask;
  if (fm.n_p != np || fm.horizon != H || fm.n_f != nf || fm.bits.size() != np * H * nf) {
    throw ConfigError("feature mask dims (" + std::to_string(fm.n_p) + "x" + std::to_string(fm.horizon) +
                      "x" + std::to_string(fm.n_f) + ") do not match the model");
  }
  for (std::size_t p = 0; p < np; ++p) {
    for (std::size_t h = 0; h < H; ++h) {
      if (fm.row_sum(p, h) == 0) {
        throw ConfigError("feature mask row (param " + std::to_string(p) + ", hour " + std::to_string(h) +
                          ") is all zero");
      }
      for (std::size_t i = 0; i < nf; ++i) {
        m(static_cast<Eigen::Index>(p * H + h), static_cast<Eigen::Index>(i)) = fm.at(p, h, i) ? 1.0 : 0.0;
      }
    }
  }
  return m;
}

void he_uniform(ParamTensor& t, std::size_t fan_in, diff::Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-limit, limit);
  double* d = t.value().data();
  for (Eigen::Index i = 0; i < t.size(); ++i) d[i] = u(rng);
}

std::string mask_bits_string(const FeatureMask& m) {
  std::string s(m.bits.size(), '0');
  for (std::size_t i = 0; i < m.bits.size(); ++i) s[i] = m.bits[i] ? '1' : '0';
  return s;
}

NetworkDims dims_from_json(const nlohmann::json& j) {
  NetworkDims d;
  d.n_f = j.value("n_f", data::kNumFeatures);
  d.horizon = j.value("horizon", data::kHorizon);
  d.head = dists::head_from_string(j.value("head", std::string("jsu")));
  return d;
}

nlohmann::json dims_to_json(const NetworkDims& d) {
  return {{"n_f", d.n_f}, {"horizon", d.horizon}, {"head", dists::to_string(d.head)}};
}

}  // namespace

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::nbmlss: return "nbmlss";
    case ModelKind::ddnn: return "ddnn";
    case ModelKind::constant: return "constant";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "nbmlss") return ModelKind::nbmlss;
  if (s == "ddnn") return ModelKind::ddnn;
  if (s == "constant") return ModelKind::constant;
  throw ConfigError("unknown model kind '" + s + "' (expected nbmlss|ddnn|constant)");
}

// Masks

std::size_t FeatureMask::row_sum(std::size_t p, std::size_t h) const {
  std::size_t s = 0;
  for (std::size_t i = 0; i < n_f; ++i) s += at(p, h, i) ? 1 : 0;
  return s;
}

std::string FeatureMask::hash() const {
  return data::fnv1a_hex({reinterpret_cast<const char*>(bits.data()), bits.size()});
}

FeatureMask full_mask(std::size_t n_p, std::size_t horizon, std::size_t n_f) {
  return FeatureMask{n_p, horizon, n_f, std::vector<std::uint8_t>(n_p * horizon * n_f, 1)};
}

FeatureMask make_exogenous_mask(std::size_t n_p) {
  using namespace data;
  FeatureMask m = full_mask(n_p, kHorizon, kNumFeatures);
  for (std::size_t p = 0; p < n_p; ++p) {
    for (std::size_t h = 0; h < kHorizon; ++h) {
      for (std::size_t i = kExogenousOffset; i < kCalendarOffset; ++i) {
        const std::size_t feature_hour = (i - kExogenousOffset) % kHorizon;
        m.bits[(p * kHorizon + h) * kNumFeatures + i] = feature_hour == h ? 1 : 0;
      }
    }
  }
  return m;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (const ParamTensor* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

void set_bias_from_moments(Matrix& bias_row, std::span<const double> loc, std::span<const double> scale,
                           const dists::LinkConfig& link, std::size_t horizon) {
  const auto H = static_cast<Eigen::Index>(horizon);
  for (Eigen::Index h = 0; h < H; ++h) {
    const auto k = static_cast<std::size_t>(h);
    bias_row(0, h) = loc[k];
    const double target = std::max((scale[k] - link.epsilon) / link.gamma, 1e-6);
    bias_row(0, H + h) = dists::softplus_inverse(target);
  }
}

// NBMLSS

NbmlssModel::NbmlssModel(NbmlssConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      rng_(seed),
      layer1_("basis.layer1", 1, static_cast<Eigen::Index>(cfg_.n_u), cfg_.first_layer_bias),
      drop1_(cfg_.dropout),
      layer2_("basis.layer2", static_cast<Eigen::Index>(cfg_.n_u), static_cast<Eigen::Index>(cfg_.n_z)),
      drop2_(cfg_.dropout),
      w_("shape.w", {cfg_.dims.n_f, cfg_.n_z}),
      v_("proj.v", {static_cast<std::size_t>(dists::param_count(cfg_.dims.head)) * cfg_.dims.horizon,
                    cfg_.dims.n_f}),
      beta_("proj.beta", {static_cast<std::size_t>(dists::param_count(cfg_.dims.head)) * cfg_.dims.horizon}) {
  if (cfg_.n_u == 0 || cfg_.n_z == 0 || cfg_.dims.n_f == 0 || cfg_.dims.horizon == 0) {
    throw ConfigError("NBMLSS dimensions must be positive");
  }
  mask_ = mask_matrix(cfg_);
  layer1_.init_he_uniform(rng_);
  layer2_.init_he_uniform(rng_);
  he_uniform(w_, cfg_.n_z, rng_);
  he_uniform(v_, cfg_.dims.n_f, rng_);
  if (parameter_count() != expected_parameter_count()) {
    throw ConfigError("NBMLSS parameter count mismatch");
  }
}

std::size_t NbmlssModel::expected_parameter_count() const {
  const std::size_t nu = cfg_.n_u;
  const std::size_t nz = cfg_.n_z;
  const std::size_t nf = cfg_.dims.n_f;
  const std::size_t P = static_cast<std::size_t>(dists::param_count(cfg_.dims.head)) * cfg_.dims.horizon;
  return nu + nu * nz + nz + nf * nz + P * nf + P + (cfg_.first_layer_bias ? nu : 0);
}

std::vector<ParamTensor*> NbmlssModel::parameters() {
  std::vector<ParamTensor*> out{&layer1_.weight()};
  if (layer1_.has_bias()) out.push_back(&layer1_.bias());
  out.push_back(&layer2_.weight());
  out.push_back(&layer2_.bias());
  out.push_back(&w_);
  out.push_back(&v_);
  out.push_back(&beta_);
  return out;
}

nlohmann::json NbmlssModel::config_json() const {
  nlohmann::json j = dims_to_json(cfg_.dims);
  j["kind"] = "nbmlss";
  j["n_u"] = cfg_.n_u;
  j["n_z"] = cfg_.n_z;
  j["dropout"] = cfg_.dropout;
  j["first_layer_bias"] = cfg_.first_layer_bias;
  if (!cfg_.mask) {
    j["mask"] = "full";
  } else {
    const auto np = static_cast<std::size_t>(dists::param_count(cfg_.dims.head));
    const bool hour = cfg_.dims.n_f == data::kNumFeatures && cfg_.dims.horizon == data::kHorizon &&
                      cfg_.mask->bits == make_exogenous_mask(np).bits;
    j["mask"] = hour ? std::string("hour") : mask_bits_string(*cfg_.mask);
    j["mask_hash"] = cfg_.mask->hash();
  }
  return j;
}

Matrix NbmlssModel::basis_forward(const Matrix& scalars, Mode mode) {
  Matrix h = drop1_.forward(act1_.forward(layer1_.forward(scalars)), mode, rng_);
  return drop2_.forward(act2_.forward(layer2_.forward(h)), mode, rng_);
}

Matrix NbmlssModel::basis_eval(const Matrix& scalars, Mode mode) {
  if (scalars.cols() != 1) throw ConfigError("basis_eval expects a single column of scalars");
  return basis_forward(scalars, mode);
}

Matrix NbmlssModel::aggregate(const Matrix& z, Eigen::Index batch) const {
  const auto nf = static_cast<Eigen::Index>(cfg_.dims.n_f);
  Matrix f(batch, nf);
  for (Eigen::Index b = 0; b < batch; ++b) {
    f.row(b) = z.middleRows(b * nf, nf).cwiseProduct(w_.value()).rowwise().sum().transpose();
  }
  return f;
}

Matrix NbmlssModel::effective_projection() const { return v_.value().cwiseProduct(mask_); }

Matrix NbmlssModel::forward(const Matrix& x, Mode mode) {
  const auto nf = static_cast<Eigen::Index>(cfg_.dims.n_f);
  if (x.cols() != nf) {
    throw ConfigError("NBMLSS expects " + std::to_string(nf) + " features, got " + std::to_string(x.cols()));
  }
  batch_ = x.rows();
  // Every scalar of the batch flows through the shared basis network at once.
  const Matrix scalars = Eigen::Map<const Matrix>(x.data(), x.size(), 1);
  z_cache_ = basis_forward(scalars, mode);
  f_cache_ = aggregate(z_cache_, batch_);
  Matrix raw = f_cache_ * effective_projection().transpose();
  raw.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(beta_.value().data(), beta_.size());
  return raw;
}

Matrix NbmlssModel::backward(const Matrix& draw) {
  if (batch_ < 0) throw StateError("NBMLSS: backward before forward");
  if (draw.rows() != batch_ || draw.cols() != v_.value().rows()) {
    throw ConfigError("NBMLSS backward: gradient shape mismatch");
  }
  const auto nf = static_cast<Eigen::Index>(cfg_.dims.n_f);
  v_.grad() += (draw.transpose() * f_cache_).cwiseProduct(mask_);
  beta_.grad() += draw.colwise().sum();
  const Matrix df = draw * effective_projection();  // [B x n_f]
  Matrix dz(z_cache_.rows(), z_cache_.cols());
  for (Eigen::Index b = 0; b < batch_; ++b) {
    const auto zb = z_cache_.middleRows(b * nf, nf);
    const Eigen::VectorXd dfb = df.row(b).transpose();
    w_.grad() += (zb.array().colwise() * dfb.array()).matrix();
    dz.middleRows(b * nf, nf) = (w_.value().array().colwise() * dfb.array()).matrix();
  }
  Matrix dh = act2_.backward(drop2_.backward(dz));
  dh = layer2_.backward(dh);
  Matrix ds = layer1_.backward(act1_.backward(drop1_.backward(dh)));
  return Eigen::Map<const Matrix>(ds.data(), batch_, nf);
}

Matrix NbmlssModel::shape_eval(const Matrix& x) {
  const auto nf = static_cast<Eigen::Index>(cfg_.dims.n_f);
  if (x.cols() != nf) throw ConfigError("shape_eval: feature count mismatch");
  const Matrix scalars = Eigen::Map<const Matrix>(x.data(), x.size(), 1);
  return aggregate(basis_forward(scalars, Mode::eval), x.rows());
}

std::vector<double> NbmlssModel::contributions(std::span<const double> x, std::size_t p, std::size_t h) {
  const auto nf = static_cast<Eigen::Index>(cfg_.dims.n_f);
  if (static_cast<Eigen::Index>(x.size()) != nf) throw ConfigError("contributions: feature count mismatch");
  const Matrix row = Eigen::Map<const Matrix>(x.data(), 1, nf);
  const Matrix f = shape_eval(row);
  const Matrix v = effective_projection();
  const auto r = static_cast<Eigen::Index>(p * cfg_.dims.horizon + h);
  std::vector<double> out(static_cast<std::size_t>(nf));
  for (Eigen::Index i = 0; i < nf; ++i) out[static_cast<std::size_t>(i)] = v(r, i) * f(0, i);
  return out;
}

// DDNN

DdnnModel::DdnnModel(DdnnConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      rng_(seed),
      h1_("ddnn.hidden1", static_cast<Eigen::Index>(cfg_.dims.n_f), static_cast<Eigen::Index>(cfg_.n_u)),
      d1_(cfg_.dropout),
      h2_("ddnn.hidden2", static_cast<Eigen::Index>(cfg_.n_u), static_cast<Eigen::Index>(cfg_.n_u)),
      d2_(cfg_.dropout),
      out_("ddnn.out", static_cast<Eigen::Index>(cfg_.n_u),
           static_cast<Eigen::Index>(dists::param_count(cfg_.dims.head) * cfg_.dims.horizon)) {
  if (cfg_.n_u == 0) throw ConfigError("DDNN width must be positive");
  h1_.init_he_uniform(rng_);
  h2_.init_he_uniform(rng_);
  out_.init_he_uniform(rng_);
}

Matrix DdnnModel::forward(const Matrix& x, Mode mode) {
  Matrix h = d1_.forward(a1_.forward(h1_.forward(x)), mode, rng_);
  h = d2_.forward(a2_.forward(h2_.forward(h)), mode, rng_);
  return out_.forward(h);
}

Matrix DdnnModel::backward(const Matrix& draw) {
  Matrix g = out_.backward(draw);
  g = h2_.backward(a2_.backward(d2_.backward(g)));
  return h1_.backward(a1_.backward(d1_.backward(g)));
}

std::vector<ParamTensor*> DdnnModel::parameters() {
  return {&h1_.weight(), &h1_.bias(), &h2_.weight(), &h2_.bias(), &out_.weight(), &out_.bias()};
}

void DdnnModel::init_output_bias(std::span<const double> loc, std::span<const double> scale,
                                 const dists::LinkConfig& link) {
  set_bias_from_moments(out_.bias().value(), loc, scale, link, cfg_.dims.horizon);
}

nlohmann::json DdnnModel::config_json() const {
  nlohmann::json j = dims_to_json(cfg_.dims);
  j["kind"] = "ddnn";
  j["n_u"] = cfg_.n_u;
  j["dropout"] = cfg_.dropout;
  return j;
}

// Constant

ConstantModel::ConstantModel(NetworkDims dims)
    : dims_(dims),
      bias_("const.bias", {static_cast<std::size_t>(dists::param_count(dims.head)) * dims.horizon}) {}

Matrix ConstantModel::forward(const Matrix& x, Mode) {
  batch_ = x.rows();
  n_in_ = x.cols();
  Matrix out(x.rows(), bias_.size());
  out.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias_.value().data(), bias_.size());
  return out;
}

Matrix ConstantModel::backward(const Matrix& draw) {
  if (batch_ < 0) throw StateError("ConstantModel: backward before forward");
  bias_.grad() += draw.colwise().sum();
  return Matrix::Zero(draw.rows(), n_in_);
}

void ConstantModel::init_output_bias(std::span<const double> loc, std::span<const double> scale,
                                     const dists::LinkConfig& link) {
  set_bias_from_moments(bias_.value(), loc, scale, link, dims_.horizon);
}

nlohmann::json ConstantModel::config_json() const {
  nlohmann::json j = dims_to_json(dims_);
  j["kind"] = "constant";
  return j;
}

std::unique_ptr<Network> make_network(const nlohmann::json& cfg, std::uint64_t seed) {
  const ModelKind kind = model_kind_from_string(cfg.value("kind", std::string("nbmlss")));
  const NetworkDims dims = dims_from_json(cfg);
  switch (kind) {
    case ModelKind::nbmlss: {
      NbmlssConfig c;
      c.dims = dims;
      c.n_u = cfg.value("n_u", std::size_t{64});
      c.n_z = cfg.value("n_z", std::size_t{64});
      c.dropout = cfg.value("dropout", 0.0);
      c.first_layer_bias = cfg.value("first_layer_bias", false);
      const std::string mask = cfg.value("mask", std::string("full"));
      const auto np = static_cast<std::size_t>(dists::param_count(dims.head));
      if (mask == "hour") {
        if (dims.n_f != data::kNumFeatures || dims.horizon != data::kHorizon) {
          throw ConfigError("hour-aligned mask requires the 147-feature, 24-hour layout");
        }
        c.mask = make_exogenous_mask(np);
      } else if (mask != "full") {
        FeatureMask m{np, dims.horizon, dims.n_f, {}};
        if (mask.size() != np * dims.horizon * dims.n_f) throw ConfigError("mask bit string has wrong length");
        for (char ch : mask) m.bits.push_back(ch == '1' ? 1 : 0);
        c.mask = std::move(m);
      }
      return std::make_unique<NbmlssModel>(std::move(c), seed);
    }
    case ModelKind::ddnn: {
      DdnnConfig c;
      c.dims = dims;
      c.n_u = cfg.value("n_u", std::size_t{128});
      c.dropout = cfg.value("dropout", 0.0);
      return std::make_unique<DdnnModel>(std::move(c), seed);
    }
    case ModelKind::constant: return std::make_unique<ConstantModel>(dims);
  }
  throw ConfigError("bad model kind");
}

// RevIN affine

RevinAffine::RevinAffine(std::size_t lag_count, std::size_t horizon)
    : lag_count_(lag_count), horizon_(horizon), gain_("revin.gain", {horizon}), bias_("revin.bias", {horizon}) {
  gain_.value().setOnes();
}

Matrix RevinAffine::apply_inputs(const Matrix& x) {
  x_cache_ = x;
  Matrix out = x;
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(lag_count_); ++c) {
    const Eigen::Index h = c % static_cast<Eigen::Index>(horizon_);
    out.col(c) = x.col(c).array() * gain_.value()(0, h) + bias_.value()(0, h);
  }
  return out;
}

void RevinAffine::backward_inputs(const Matrix& dx) {
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(lag_count_); ++c) {
    const Eigen::Index h = c % static_cast<Eigen::Index>(horizon_);
    gain_.grad()(0, h) += dx.col(c).dot(x_cache_.col(c));
    bias_.grad()(0, h) += dx.col(c).sum();
  }
}

void RevinAffine::reverse_outputs(Matrix& params) {
  pre_cache_ = params;
  const auto H = static_cast<Eigen::Index>(horizon_);
  for (Eigen::Index h = 0; h < H; ++h) {
    const double a = gain_.value()(0, h);
    const double b = bias_.value()(0, h);
    params.col(h) = (params.col(h).array() - b) / a;
    params.col(H + h) = params.col(H + h) / std::abs(a);
  }
}

Matrix RevinAffine::backward_outputs(const Matrix& dparams) {
  const auto H = static_cast<Eigen::Index>(horizon_);
  Matrix out = dparams;
  for (Eigen::Index h = 0; h < H; ++h) {
    const double a = gain_.value()(0, h);
    const double b = bias_.value()(0, h);
    const double sgn = a >= 0.0 ? 1.0 : -1.0;
    const auto dloc = dparams.col(h).array();
    const auto dscale = dparams.col(H + h).array();
    out.col(h) = dloc / a;
    out.col(H + h) = dscale / std::abs(a);
    gain_.grad()(0, h) += (dloc * (-(pre_cache_.col(h).array() - b) / (a * a))).sum() +
                          (dscale * (-pre_cache_.col(H + h).array() * sgn / (a * a))).sum();
    bias_.grad()(0, h) += (-dloc / a).sum();
  }
  return out;
}

// Forecaster

Forecaster::Forecaster(std::unique_ptr<Network> net, dists::LinkConfig link, bool revin_affine,
                       std::size_t lag_count)
    : net_(std::move(net)), link_(link) {
  if (!net_) throw ConfigError("Forecaster needs a network");
  if (net_->dims().head != link_.head) throw ConfigError("network head differs from link head");
  if (!(link_.epsilon > 0.0) || !(link_.gamma > 0.0)) throw ConfigError("link epsilon and gamma must be positive");
  if (revin_affine) {
    if (net_->dims().n_f < lag_count) throw ConfigError("RevIN affine needs the lag features");
    affine_.emplace(lag_count, net_->dims().horizon);
  }
}

std::vector<ParamTensor*> Forecaster::parameters() {
  auto out = net_->parameters();
  if (affine_) {
    for (ParamTensor* p : affine_->parameters()) out.push_back(p);
  }
  return out;
}

Matrix Forecaster::predict_normalized(const Matrix& x) {
  const Matrix xin = affine_ ? affine_->apply_inputs(x) : x;
  Matrix params = dists::link_forward(net_->forward(xin, Mode::eval), link_, net_->dims().horizon);
  if (affine_) affine_->reverse_outputs(params);
  return params;
}

double Forecaster::loss(const Matrix& x, const Matrix& y, Mode mode) {
  const std::size_t H = net_->dims().horizon;
  const Matrix xin = affine_ ? affine_->apply_inputs(x) : x;
  const Matrix raw = net_->forward(xin, mode);
  Matrix params = dists::link_forward(raw, link_, H);
  if (affine_) affine_->reverse_outputs(params);
  if (mode == Mode::eval) return dists::batch_nll(params, y, link_.head, nullptr);
  Matrix dparams;
  const double total = dists::batch_nll(params, y, link_.head, &dparams);
  if (affine_) dparams = affine_->backward_outputs(dparams);
  const Matrix dx = net_->backward(dists::link_backward(raw, dparams, link_, H));
  if (affine_) affine_->backward_inputs(dx);
  return total;
}

std::vector<std::vector<dists::DistParams>> Forecaster::predict(const data::NormalizedBatch& batch) {
  const Matrix params = predict_normalized(batch.x);
  const std::size_t H = net_->dims().horizon;
  std::vector<std::vector<dists::DistParams>> out(static_cast<std::size_t>(params.rows()));
  for (Eigen::Index r = 0; r < params.rows(); ++r) {
    auto& day = out[static_cast<std::size_t>(r)];
    day.reserve(H);
    const std::span<const double> row(params.row(r).data(), static_cast<std::size_t>(params.cols()));
    for (std::size_t h = 0; h < H; ++h) {
      const auto hh = static_cast<Eigen::Index>(h);
      day.push_back(dists::pushforward(dists::params_at(row, link_.head, H, h), batch.shift(r, hh),
                                       batch.scale(r, hh)));
    }
  }
  return out;
}

void Forecaster::init_output_bias(const Matrix& y_normalized) {
  const auto H = static_cast<std::size_t>(y_normalized.cols());
  std::vector<double> loc(H);
  std::vector<double> sc(H);
  const auto n = static_cast<double>(y_normalized.rows());
  for (std::size_t h = 0; h < H; ++h) {
    const auto col = y_normalized.col(static_cast<Eigen::Index>(h));
    loc[h] = col.sum() / n;
    sc[h] = std::sqrt((col.array() - loc[h]).square().sum() / n);
  }
  net_->init_output_bias(loc, sc, link_);
}

nlohmann::json Forecaster::config_json() const {
  nlohmann::json j = net_->config_json();
  j["epsilon"] = link_.epsilon;
  j["gamma"] = link_.gamma;
  j["revin_affine"] = affine_.has_value();
  return j;
}

// Shape export

const std::vector<std::string>& param_names(dists::HeadKind head) {
  static const std::vector<std::string> jsu{"loc", "scale", "tailweight", "skewness"};
  static const std::vector<std::string> normal{"loc", "scale"};
  static const std::vector<std::string> t{"loc", "scale", "df"};
  switch (head) {
    case dists::HeadKind::jsu: return jsu;
    case dists::HeadKind::normal: return normal;
    case dists::HeadKind::studentt: return t;
  }
  return jsu;
}

std::size_t param_index(dists::HeadKind head, const std::string& name) {
  const auto& names = param_names(head);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  static const std::vector<std::string> greek{"lambda", "sigma", "tau", "zeta"};
  for (std::size_t i = 0; i < greek.size() && i < names.size(); ++i) {
    if (greek[i] == name) return i;
  }
  if (head == dists::HeadKind::studentt && name == "nu") return 2;
  throw ConfigError("unknown parameter '" + name + "' for head " + dists::to_string(head));
}

std::vector<ShapeRow> export_shape_functions(NbmlssModel& model, const data::FeatureScaler& scaler,
                                             std::span<const double> train_min,
                                             std::span<const double> train_max,
                                             const ShapeGridSpec& spec) {
  const std::size_t nf = model.dims().n_f;
  const std::size_t H = model.dims().horizon;
  const auto np = static_cast<std::size_t>(dists::param_count(model.dims().head));
  if (train_min.size() != nf || train_max.size() != nf) throw ConfigError("feature range length mismatch");
  if (spec.resolution < 2) throw ConfigError("shape grid resolution must be at least 2");
  if (spec.selections.empty()) throw ConfigError("no (param, hour) selection requested");
  for (const auto& s : spec.selections) {
    if (s.param >= np || s.hour >= H) throw ConfigError("shape selection out of range");
  }
  if (spec.bounds && spec.bounds->size() != nf) throw ConfigError("shape bounds length mismatch");

  const Matrix v = model.effective_projection();
  const Matrix& w = model.shape_weights().value();
  const auto R = static_cast<Eigen::Index>(spec.resolution);
  std::vector<ShapeRow> rows;
  rows.reserve(nf * spec.resolution * spec.selections.size());
  for (std::size_t i = 0; i < nf; ++i) {
    const double lo = spec.bounds ? (*spec.bounds)[i].first : train_min[i];
    const double hi = spec.bounds ? (*spec.bounds)[i].second : train_max[i];
    Matrix grid(R, 1);
    for (Eigen::Index g = 0; g < R; ++g) {
      grid(g, 0) = g == R - 1 ? hi : lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(R - 1);
    }
    const Matrix z = model.basis_eval(grid, Mode::eval);
    const Eigen::VectorXd f = z * w.row(static_cast<Eigen::Index>(i)).transpose();
    for (Eigen::Index g = 0; g < R; ++g) {
      const double xm = grid(g, 0);
      const bool extrap = xm < train_min[i] || xm > train_max[i];
      for (const auto& s : spec.selections) {
        const double vv = v(static_cast<Eigen::Index>(s.param * H + s.hour), static_cast<Eigen::Index>(i));
        rows.push_back({i, s.param, s.hour, scaler.feature_to_original(i, xm), f(g), vv * f(g), extrap});
      }
    }
  }
  return rows;
}

}  // namespace nbmlss::model
