#pragma once

// Distribution heads: Johnson's SU, Normal and Student-t.
//
// Johnson's SU density, with u = (x - lambda) / sigma:
//
//   p(x) = tau / (sigma sqrt(2 pi)) / sqrt(1 + u^2)
//          * exp(-0.5 (zeta + tau asinh(u))^2)
//
// Note the skewness enters as +zeta. References using the gamma/delta
// convention with a minus sign map zeta <-> -zeta.
//
// Raw network outputs are laid out parameter-major: for horizon H the
// slots [p*H, (p+1)*H) hold the p-th parameter for every hour.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nbmlss/diffcore.hpp"

namespace nbmlss::dists {

using diff::Matrix;

enum class HeadKind { jsu, normal, studentt };

std::string to_string(HeadKind k);
HeadKind head_from_string(const std::string& s);

/// Number of distribution parameters emitted per hour.
int param_count(HeadKind k);

struct LinkConfig {
  double epsilon = 1e-3;
  double gamma = 3.0;
  HeadKind head = HeadKind::jsu;
};

struct JsuParams {
  double lambda = 0.0;
  double sigma = 1.0;
  double tau = 1.0;
  double zeta = 0.0;
};

struct NormalParams {
  double mu = 0.0;
  double sigma = 1.0;
};

struct StudentTParams {
  double mu = 0.0;
  double sigma = 1.0;
  double nu = 5.0;
};

using DistParams = std::variant<JsuParams, NormalParams, StudentTParams>;

HeadKind kind_of(const DistParams& p);
double location(const DistParams& p);
double scale(const DistParams& p);

// Scalar helpers.

/// log(1 + e^x) without overflow or negative underflow.
double softplus(double x);
double sigmoid(double x);
/// Inverse of softplus for y > 0.
double softplus_inverse(double y);

double std_normal_cdf(double z);
double std_normal_quantile(double u);

// Link functions.

/// Maps one raw vector of length param_count * H onto per-hour parameters.
std::vector<DistParams> link_transform(std::span<const double> raw, const LinkConfig& cfg,
                                       std::size_t horizon);

/// Same mapping over a batch: row-wise, slot order preserved.
Matrix link_forward(const Matrix& raw, const LinkConfig& cfg, std::size_t horizon);
/// Chain rule through the links: given dL/dparams returns dL/draw.
Matrix link_backward(const Matrix& raw, const Matrix& dparams, const LinkConfig& cfg,
                     std::size_t horizon);

/// Extracts hour h from a transformed parameter row.
DistParams params_at(std::span<const double> row, HeadKind head, std::size_t horizon,
                     std::size_t h);

// Densities.

double logpdf(double x, const JsuParams& p);
double logpdf(double x, const NormalParams& p);
double logpdf(double x, const StudentTParams& p);
double logpdf(double x, const DistParams& p);

/// Derivatives of logpdf wrt the parameters in slot order
/// (lambda, sigma, tau, zeta) / (mu, sigma) / (mu, sigma, nu).
std::array<double, 4> logpdf_grad(double x, const DistParams& p);

double cdf(double x, const JsuParams& p);
double cdf(double x, const NormalParams& p);
double cdf(double x, const StudentTParams& p);
double cdf(double x, const DistParams& p);

/// Closed-form quantile; throws DomainError unless 0 < u < 1.
double quantile(double u, const JsuParams& p);
double quantile(double u, const NormalParams& p);
double quantile(double u, const StudentTParams& p);
double quantile(double u, const DistParams& p);

/// n i.i.d. draws from a seeded generator. JSU draws are
/// lambda + sigma sinh((Z - zeta) / tau), Z standard normal.
std::vector<double> sample(const DistParams& p, std::size_t n, std::uint64_t seed);
void sample_into(const DistParams& p, std::span<double> out, diff::Rng& rng);

/// Distribution of shift + scale * X. Stays within the family; shape
/// parameters are untouched.
DistParams pushforward(const DistParams& p, double shift, double scale_factor);

/// -sum_h logpdf(y_h; params_h). Throws NumericError naming the hour on a
/// non-finite term.
double nll(std::span<const double> y, std::span<const DistParams> params);

/// Sum of per-entry NLL over a batch of transformed parameter rows
/// [B x n_p*H] against targets [B x H]. When `dparams` is given it receives
/// dNLL/dparams with the same layout.
double batch_nll(const Matrix& params, const Matrix& y, HeadKind head, Matrix* dparams);

}  // namespace nbmlss::dists
