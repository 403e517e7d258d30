#pragma once

// Distributional networks emitting raw parameter rows [B x n_p*H]:
//
//   NbmlssModel  shared basis network over every scalar feature value,
//                per-feature shape aggregation f_i = sum_k w_ik z_k(x_i),
//                per-(parameter, hour) linear projection of the f_i.
//   DdnnModel    two-hidden-layer dense baseline.
//   ConstantModel  bias-only head (unconditional distribution).
//
// Forecaster couples a network with the link functions, the optional
// learnable RevIN affine and the per-sample output pushforward.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nbmlss/datapipe.hpp"
#include "nbmlss/diffcore.hpp"
#include "nbmlss/dists.hpp"

namespace nbmlss::model {

using diff::Matrix;
using diff::Mode;
using diff::ParamTensor;

enum class ModelKind { nbmlss, ddnn, constant };
std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

/// Binary projection mask laid out [n_p][H][n_f].
struct FeatureMask {
  std::size_t n_p = 0;
  std::size_t horizon = 0;
  std::size_t n_f = 0;
  std::vector<std::uint8_t> bits;

  bool at(std::size_t p, std::size_t h, std::size_t i) const {
    return bits[(p * horizon + h) * n_f + i] != 0;
  }
  std::size_t row_sum(std::size_t p, std::size_t h) const;
  std::string hash() const;
};

FeatureMask full_mask(std::size_t n_p, std::size_t horizon, std::size_t n_f);
/// Hour-aligned exogenous mask for the 147-feature daily layout: lags and
/// calendar features always on, load/wind/solar only at the matching hour.
FeatureMask make_exogenous_mask(std::size_t n_p);

struct NetworkDims {
  std::size_t n_f = data::kNumFeatures;
  std::size_t horizon = data::kHorizon;
  dists::HeadKind head = dists::HeadKind::jsu;
};

class Network {
 public:
  virtual ~Network() = default;

  virtual ModelKind kind() const = 0;
  virtual const NetworkDims& dims() const = 0;
  std::size_t output_dim() const {
    return static_cast<std::size_t>(dists::param_count(dims().head)) * dims().horizon;
  }

  /// x: [B x n_f] model-space inputs. Train mode samples fresh dropout masks.
  virtual Matrix forward(const Matrix& x, Mode mode) = 0;
  /// Accumulates parameter gradients for dL/draw and returns dL/dx.
  virtual Matrix backward(const Matrix& draw) = 0;
  virtual std::vector<ParamTensor*> parameters() = 0;

  /// Called once before training with the normalized target mean/std per hour.
  virtual void init_output_bias(std::span<const double> /*loc*/, std::span<const double> /*scale*/,
                                const dists::LinkConfig& /*link*/) {}
  virtual nlohmann::json config_json() const = 0;

  std::size_t parameter_count();
};

struct NbmlssConfig {
  NetworkDims dims;
  std::size_t n_u = 64;
  std::size_t n_z = 64;
  double dropout = 0.0;
  /// Eq.-literal basis has no first-layer bias.
  bool first_layer_bias = false;
  std::optional<FeatureMask> mask;
};

class NbmlssModel final : public Network {
 public:
  NbmlssModel(NbmlssConfig cfg, std::uint64_t seed);

  ModelKind kind() const override { return ModelKind::nbmlss; }
  const NetworkDims& dims() const override { return cfg_.dims; }
  const NbmlssConfig& config() const { return cfg_; }

  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& draw) override;
  std::vector<ParamTensor*> parameters() override;
  nlohmann::json config_json() const override;

  /// Basis outputs z(x) for a column of scalar values: [N x n_z].
  Matrix basis_eval(const Matrix& scalars, Mode mode = Mode::eval);
  /// Shape functions f_i(x_i) for every row: [B x n_f] (eval mode).
  Matrix shape_eval(const Matrix& x);
  /// Additive terms mask * v * f_i for parameter p, hour h of one sample.
  std::vector<double> contributions(std::span<const double> x, std::size_t p, std::size_t h);

  /// n_u + n_u n_z + n_z + n_f n_z + n_p H n_f + n_p H (+ n_u with a first-layer bias).
  std::size_t expected_parameter_count() const;

  ParamTensor& basis_in() { return layer1_.weight(); }
  ParamTensor& basis_out() { return layer2_.weight(); }
  ParamTensor& basis_out_bias() { return layer2_.bias(); }
  ParamTensor& shape_weights() { return w_; }
  ParamTensor& projection() { return v_; }
  ParamTensor& projection_bias() { return beta_; }

  /// v with the mask applied: [n_p*H x n_f].
  Matrix effective_projection() const;

 private:
  Matrix basis_forward(const Matrix& scalars, Mode mode);
  Matrix aggregate(const Matrix& z, Eigen::Index batch) const;

  NbmlssConfig cfg_;
  diff::Rng rng_;
  diff::Dense layer1_;
  diff::Relu act1_;
  diff::Dropout drop1_;
  diff::Dense layer2_;
  diff::Relu act2_;
  diff::Dropout drop2_;
  ParamTensor w_;
  ParamTensor v_;
  ParamTensor beta_;
  Matrix mask_;  // [n_p*H x n_f] of 0/1

  Matrix z_cache_;
  Matrix f_cache_;
  Eigen::Index batch_ = -1;
};

struct DdnnConfig {
  NetworkDims dims;
  std::size_t n_u = 128;
  double dropout = 0.0;
};

class DdnnModel final : public Network {
 public:
  DdnnModel(DdnnConfig cfg, std::uint64_t seed);

  ModelKind kind() const override { return ModelKind::ddnn; }
  const NetworkDims& dims() const override { return cfg_.dims; }
  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& draw) override;
  std::vector<ParamTensor*> parameters() override;
  void init_output_bias(std::span<const double> loc, std::span<const double> scale,
                        const dists::LinkConfig& link) override;
  nlohmann::json config_json() const override;

 private:
  DdnnConfig cfg_;
  diff::Rng rng_;
  diff::Dense h1_;
  diff::Relu a1_;
  diff::Dropout d1_;
  diff::Dense h2_;
  diff::Relu a2_;
  diff::Dropout d2_;
  diff::Dense out_;
};

class ConstantModel final : public Network {
 public:
  explicit ConstantModel(NetworkDims dims);

  ModelKind kind() const override { return ModelKind::constant; }
  const NetworkDims& dims() const override { return dims_; }
  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& draw) override;
  std::vector<ParamTensor*> parameters() override { return {&bias_}; }
  void init_output_bias(std::span<const double> loc, std::span<const double> scale,
                        const dists::LinkConfig& link) override;
  nlohmann::json config_json() const override;

 private:
  NetworkDims dims_;
  ParamTensor bias_;
  Eigen::Index n_in_ = 0;
  Eigen::Index batch_ = -1;
};

/// Initializes the location / scale slots of a raw bias row so that the
/// link outputs match the given per-hour mean / std.
void set_bias_from_moments(Matrix& bias_row, std::span<const double> loc, std::span<const double> scale,
                           const dists::LinkConfig& link, std::size_t horizon);

/// Generic construction from a JSON config (kind, head, dims, widths, mask).
std::unique_ptr<Network> make_network(const nlohmann::json& cfg, std::uint64_t seed);

/// Per-hour learnable affine on the RevIN-normalized lag features, reversed on
/// the predicted location and scale. Lag column c belongs to hour c % H.
class RevinAffine {
 public:
  RevinAffine(std::size_t lag_count, std::size_t horizon);

  Matrix apply_inputs(const Matrix& x);
  void backward_inputs(const Matrix& dx);
  /// params: transformed parameter rows (normalized units). Reverses in place.
  void reverse_outputs(Matrix& params);
  /// Given dL/d(reversed params) returns dL/d(pre-reversal params), accumulating
  /// affine gradients.
  Matrix backward_outputs(const Matrix& dparams);

  std::vector<ParamTensor*> parameters() { return {&gain_, &bias_}; }

 private:
  std::size_t lag_count_;
  std::size_t horizon_;
  ParamTensor gain_;
  ParamTensor bias_;
  Matrix x_cache_;
  Matrix pre_cache_;
};

class Forecaster {
 public:
  Forecaster(std::unique_ptr<Network> net, dists::LinkConfig link, bool revin_affine = false,
             std::size_t lag_count = data::kPriceLagFeatures);

  Network& network() { return *net_; }
  const Network& network() const { return *net_; }
  const dists::LinkConfig& link() const { return link_; }
  bool has_revin_affine() const { return affine_.has_value(); }

  /// Transformed parameters in normalized units: [B x n_p*H].
  Matrix predict_normalized(const Matrix& x);
  /// Summed NLL of normalized targets; accumulates gradients when mode == train.
  double loss(const Matrix& x, const Matrix& y, Mode mode);
  /// Per-sample, per-hour distributions in price units.
  std::vector<std::vector<dists::DistParams>> predict(const data::NormalizedBatch& batch);

  std::vector<ParamTensor*> parameters();
  void init_output_bias(const Matrix& y_normalized);

  nlohmann::json config_json() const;

 private:
  std::unique_ptr<Network> net_;
  dists::LinkConfig link_;
  std::optional<RevinAffine> affine_;
};

struct ShapeSelection {
  std::size_t param = 0;
  std::size_t hour = 0;
};

struct ShapeGridSpec {
  std::size_t resolution = 256;
  std::vector<ShapeSelection> selections;
  /// Optional per-feature bounds in model units overriding the training range.
  std::optional<std::vector<std::pair<double, double>>> bounds;
};

struct ShapeRow {
  std::size_t feature = 0;
  std::size_t param = 0;
  std::size_t hour = 0;
  double x = 0.0;  // original units (model units for RevIN-normalized lags)
  double f = 0.0;
  double contribution = 0.0;
  bool extrapolated = false;
};

/// Grids each feature over its training range (model units, min/max per
/// column), evaluates f_i and the weighted contributions for the selections.
std::vector<ShapeRow> export_shape_functions(NbmlssModel& model, const data::FeatureScaler& scaler,
                                             std::span<const double> train_min,
                                             std::span<const double> train_max,
                                             const ShapeGridSpec& spec);

const std::vector<std::string>& param_names(dists::HeadKind head);
std::size_t param_index(dists::HeadKind head, const std::string& name);

}  // namespace nbmlss::model
