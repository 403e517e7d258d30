#include "nbmlss/diffcore.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include "nbmlss/errors.hpp"

namespace nbmlss::diff {

namespace {

std::atomic<std::uint64_t> next_tensor_id{1};

std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

Index rows_of(const std::vector<std::size_t>& shape) {
  if (shape.size() == 1) return 1;
  if (shape.size() == 2) return static_cast<Index>(shape[0]);
  throw ConfigError("ParamTensor supports 1-D or 2-D shapes only");
}

Index cols_of(const std::vector<std::size_t>& shape) {
  return static_cast<Index>(shape.back());
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

ParamTensor::ParamTensor(std::string name, std::vector<std::size_t> shape)
    : name_(std::move(name)),
      shape_(std::move(shape)),
      id_(next_tensor_id.fetch_add(1)),
      value_(Matrix::Zero(rows_of(shape_), cols_of(shape_))),
      grad_(Matrix::Zero(rows_of(shape_), cols_of(shape_))) {}

Matrix dense_forward(const Matrix& x, const ParamTensor& W, const ParamTensor& b) {
  if (x.cols() != W.value().rows()) {
    throw ConfigError("dense_forward: input " + shape_str(x.rows(), x.cols()) + " vs weight " +
                      shape_str(W.value().rows(), W.value().cols()));
  }
  if (b.size() != W.value().cols()) {
    throw ConfigError("dense_forward: bias length " + std::to_string(b.size()) + " vs " +
                      std::to_string(W.value().cols()) + " outputs");
  }
  if (!x.allFinite()) throw NumericError("dense_forward: non-finite input");
  Matrix out = x * W.value();
  out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), b.size());
  return out;
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix dropout_apply(const Matrix& x, const DropoutMask& mask) {
  if (!(mask.keep_prob > 0.0) || mask.keep_prob > 1.0) {
    throw ConfigError("dropout keep_prob must lie in (0, 1]");
  }
  if (mask.mode == Mode::eval || mask.keep_prob == 1.0) return x;
  if (mask.mask.rows() != x.rows() || mask.mask.cols() != x.cols()) {
    throw ConfigError("dropout mask shape mismatch");
  }
  return x.cwiseProduct(mask.mask) / mask.keep_prob;
}

DropoutMask sample_dropout_mask(Index rows, Index cols, double keep_prob, Mode mode, Rng& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0) {
    throw ConfigError("dropout keep_prob must lie in (0, 1]");
  }
  DropoutMask out;
  out.keep_prob = keep_prob;
  out.mode = mode;
  if (mode == Mode::eval || keep_prob == 1.0) return out;
  out.mask.resize(rows, cols);
  std::bernoulli_distribution keep(keep_prob);
  double* data = out.mask.data();
  for (Index i = 0; i < out.mask.size(); ++i) data[i] = keep(rng) ? 1.0 : 0.0;
  return out;
}

Dense::Dense(const std::string& name, Index in, Index out, bool with_bias)
    : weight_(name + ".weight", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)}),
      bias_(name + ".bias", {static_cast<std::size_t>(out)}),
      has_bias_(with_bias) {}

Matrix Dense::forward(const Matrix& x) {
  input_ = x;
  has_input_ = true;
  if (has_bias_) return dense_forward(x, weight_, bias_);
  if (x.cols() != weight_.value().rows()) {
    throw ConfigError("Dense(" + weight_.name() + "): input " + shape_str(x.rows(), x.cols()) +
                      " vs weight " + shape_str(weight_.value().rows(), weight_.value().cols()));
  }
  if (!x.allFinite()) throw NumericError("Dense(" + weight_.name() + "): non-finite input");
  return x * weight_.value();
}

Matrix Dense::backward(const Matrix& dy) {
  if (!has_input_) throw StateError("Dense(" + weight_.name() + "): backward before forward");
  weight_.grad().noalias() += input_.transpose() * dy;
  if (has_bias_) bias_.grad() += dy.colwise().sum();
  return dy * weight_.value().transpose();
}

void Dense::init_he_uniform(Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(weight_.value().rows()));
  std::uniform_real_distribution<double> u(-limit, limit);
  double* w = weight_.value().data();
  for (Index i = 0; i < weight_.size(); ++i) w[i] = u(rng);
  bias_.value().setZero();
}

Matrix Relu::forward(const Matrix& x) {
  active_ = (x.array() > 0.0).cast<double>().matrix();
  has_input_ = true;
  return x.cwiseMax(0.0);
}

Matrix Relu::backward(const Matrix& dy) const {
  if (!has_input_) throw StateError("Relu: backward before forward");
  return dy.cwiseProduct(active_);
}

Dropout::Dropout(double rate) : rate_(rate) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
}

Matrix Dropout::forward(const Matrix& x, Mode mode, Rng& rng) {
  last_ = sample_dropout_mask(x.rows(), x.cols(), 1.0 - rate_, mode, rng);
  has_input_ = true;
  return dropout_apply(x, last_);
}

Matrix Dropout::backward(const Matrix& dy) const {
  if (!has_input_) throw StateError("Dropout: backward before forward");
  return dropout_apply(dy, last_);
}

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
  if (!(cfg.lr > 0) || !(cfg.beta1 > 0) || !(cfg.beta2 > 0) || !(cfg.eps > 0)) {
    throw ConfigError("Adam hyperparameters must be positive");
  }
}

void Adam::step(std::span<ParamTensor* const> params) {
  for (const ParamTensor* p : params) {
    if (!p->grad().allFinite()) {
      throw NumericError("non-finite gradient in parameter '" + p->name() + "' (id " +
                         std::to_string(p->id()) + ")");
    }
  }
  for (ParamTensor* p : params) {
    AdamState& st = states_[p->id()];
    if (st.t == 0) {
      st.m = Matrix::Zero(p->value().rows(), p->value().cols());
      st.v2 = Matrix::Zero(p->value().rows(), p->value().cols());
    }
    st.t += 1;
    const auto& g = p->grad().array();
    st.m.array() = cfg_.beta1 * st.m.array() + (1.0 - cfg_.beta1) * g;
    st.v2.array() = cfg_.beta2 * st.v2.array() + (1.0 - cfg_.beta2) * g.square();
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
    p->value().array() -= cfg_.lr * (st.m.array() / c1) / ((st.v2.array() / c2).sqrt() + cfg_.eps);
    p->zero_grad();
  }
}

const AdamState* Adam::state(const ParamTensor& p) const {
  auto it = states_.find(p.id());
  return it == states_.end() ? nullptr : &it->second;
}

nlohmann::json tensors_to_json(std::span<const ParamTensor* const> params) {
  nlohmann::json arr = nlohmann::json::array();
  for (const ParamTensor* p : params) {
    const double* d = p->value().data();
    arr.push_back({{"name", p->name()},
                   {"shape", p->shape()},
                   {"values", std::vector<double>(d, d + p->size())}});
  }
  return arr;
}

void tensors_from_json(const nlohmann::json& doc, std::span<ParamTensor* const> params) {
  const auto& arr = doc.contains("tensors") ? doc.at("tensors") : doc;
  if (!arr.is_array() || arr.size() != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(arr.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = arr[i];
    ParamTensor& p = *params[i];
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    if (name != p.name()) {
      throw ConfigError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                        p.name() + "'");
    }
    if (shape != p.shape()) throw ConfigError("checkpoint shape mismatch for '" + name + "'");
    const auto values = t.at("values").get<std::vector<double>>();
    if (static_cast<Index>(values.size()) != p.size()) {
      throw ConfigError("checkpoint value count mismatch for '" + name + "'");
    }
    std::copy(values.begin(), values.end(), p.value().data());
  }
}

void save_checkpoint(const std::filesystem::path& path, std::span<const ParamTensor* const> params,
                     const nlohmann::json& header) {
  nlohmann::json doc;
  doc["format"] = "nbmlss-checkpoint/1";
  doc["header"] = header;
  doc["tensors"] = tensors_to_json(params);
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  os << doc.dump(1) << '\n';
}

nlohmann::json load_checkpoint_document(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "nbmlss-checkpoint/1") {
    throw ConfigError("unrecognized checkpoint format in " + path.string());
  }
  return doc;
}

}  // namespace nbmlss::diff
