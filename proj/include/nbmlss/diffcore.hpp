#pragma once

// Small reverse-mode layer kit: each layer caches what its backward pass
// needs during forward and accumulates parameter gradients on backward.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace nbmlss::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

/// Trainable tensor with a same-shape gradient accumulator.
/// One- and two-dimensional shapes are stored as row-major matrices
/// (a shape {n} is held as 1 x n).
class ParamTensor {
 public:
  ParamTensor(std::string name, std::vector<std::size_t> shape);

  const std::string& name() const { return name_; }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::uint64_t id() const { return id_; }
  Index size() const { return value_.size(); }

  Matrix& value() { return value_; }
  const Matrix& value() const { return value_; }
  Matrix& grad() { return grad_; }
  const Matrix& grad() const { return grad_; }

  void zero_grad() { grad_.setZero(); }

 private:
  std::string name_;
  std::vector<std::size_t> shape_;
  std::uint64_t id_;
  Matrix value_;
  Matrix grad_;
};

enum class Mode { train, eval };

// Pure ops.

/// out = x * W + b, with shape and finiteness checks.
Matrix dense_forward(const Matrix& x, const ParamTensor& W, const ParamTensor& b);
Matrix relu(const Matrix& x);

struct DropoutMask {
  double keep_prob = 1.0;
  Matrix mask;  // 0/1 entries, same shape as the input
  Mode mode = Mode::eval;
};

/// Inverted dropout: train mode scales kept units by 1/keep_prob,
/// eval mode is the identity.
Matrix dropout_apply(const Matrix& x, const DropoutMask& mask);

/// Bernoulli(keep_prob) mask of the given shape.
DropoutMask sample_dropout_mask(Index rows, Index cols, double keep_prob, Mode mode, Rng& rng);

// Layers.

class Dense {
 public:
  Dense(const std::string& name, Index in, Index out, bool with_bias = true);

  Matrix forward(const Matrix& x);
  /// Accumulates dW, db and returns dL/dx.
  Matrix backward(const Matrix& dy);

  /// Uniform He fan-in init for the weight; bias set to zero.
  void init_he_uniform(Rng& rng);

  ParamTensor& weight() { return weight_; }
  const ParamTensor& weight() const { return weight_; }
  bool has_bias() const { return has_bias_; }
  ParamTensor& bias() { return bias_; }
  const ParamTensor& bias() const { return bias_; }

  void clear_cache() { input_.resize(0, 0); has_input_ = false; }

 private:
  ParamTensor weight_;
  ParamTensor bias_;
  bool has_bias_;
  Matrix input_;
  bool has_input_ = false;
};

class Relu {
 public:
  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dy) const;

 private:
  Matrix active_;  // 1 where x > 0
  bool has_input_ = false;
};

class Dropout {
 public:
  explicit Dropout(double rate);

  double rate() const { return rate_; }
  Matrix forward(const Matrix& x, Mode mode, Rng& rng);
  Matrix backward(const Matrix& dy) const;

 private:
  double rate_;
  DropoutMask last_;
  bool has_input_ = false;
};

// Optimizer.

struct AdamState {
  Matrix m;
  Matrix v2;
  std::uint64_t t = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {});

  /// Bias-corrected Adam update of every tensor, then zeroes the grads.
  /// Throws NumericError naming the tensor on a non-finite gradient; in that
  /// case no tensor is modified.
  void step(std::span<ParamTensor* const> params);

  const AdamConfig& config() const { return cfg_; }
  const AdamState* state(const ParamTensor& p) const;

 private:
  AdamConfig cfg_;
  std::unordered_map<std::uint64_t, AdamState> states_;
};

// Checkpoints: JSON document
//   {"format": "nbmlss-checkpoint/1", "header": {...},
//    "tensors": [{"name": ..., "shape": [...], "values": [...]}, ...]}
// Values are written with 17 significant digits, which round-trips
// IEEE-754 doubles exactly.

nlohmann::json tensors_to_json(std::span<const ParamTensor* const> params);
/// Copies values into `params` matching by position; names and shapes must agree.
void tensors_from_json(const nlohmann::json& doc, std::span<ParamTensor* const> params);

void save_checkpoint(const std::filesystem::path& path, std::span<const ParamTensor* const> params,
                     const nlohmann::json& header);
nlohmann::json load_checkpoint_document(const std::filesystem::path& path);

bool all_finite(const Matrix& m);

/// Mixes a base seed with a stream index (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace nbmlss::diff
