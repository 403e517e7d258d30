#include "nbmlss/dists.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/digamma.hpp>

#include "nbmlss/errors.hpp"

namespace nbmlss::dists {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

void check_unit(double u) {
  if (!(u > 0.0 && u < 1.0)) {
    throw DomainError("quantile level must lie in (0, 1), got " + std::to_string(u));
  }
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::jsu: return "jsu";
    case HeadKind::normal: return "normal";
    case HeadKind::studentt: return "studentt";
  }
  return "?";
}

HeadKind head_from_string(const std::string& s) {
  if (s == "jsu") return HeadKind::jsu;
  if (s == "normal") return HeadKind::normal;
  if (s == "studentt") return HeadKind::studentt;
  throw ConfigError("unknown distribution head '" + s + "' (expected jsu|normal|studentt)");
}

int param_count(HeadKind k) {
  switch (k) {
    case HeadKind::jsu: return 4;
    case HeadKind::normal: return 2;
    case HeadKind::studentt: return 3;
  }
  return 0;
}

HeadKind kind_of(const DistParams& p) {
  return std::visit(overloaded{[](const JsuParams&) { return HeadKind::jsu; },
                               [](const NormalParams&) { return HeadKind::normal; },
                               [](const StudentTParams&) { return HeadKind::studentt; }},
                    p);
}

double location(const DistParams& p) {
  return std::visit(overloaded{[](const JsuParams& q) { return q.lambda; },
                               [](const NormalParams& q) { return q.mu; },
                               [](const StudentTParams& q) { return q.mu; }},
                    p);
}

double scale(const DistParams& p) {
  return std::visit([](const auto& q) { return q.sigma; }, p);
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse requires y > 0");
  if (y > 30.0) return y + std::log1p(-std::exp(-y));
  return std::log(std::expm1(y));
}

double std_normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

double std_normal_quantile(double u) {
  check_unit(u);
  static const boost::math::normal_distribution<double> n01(0.0, 1.0);
  return boost::math::quantile(n01, u);
}

// Links

namespace {
// Keeps nu strictly above 2 when softplus underflows.
constexpr double kNuMargin = 1e-9;
}  // namespace

DistParams params_at(std::span<const double> row, HeadKind head, std::size_t horizon,
                     std::size_t h) {
  const std::size_t H = horizon;
  switch (head) {
    case HeadKind::jsu: return JsuParams{row[h], row[H + h], row[2 * H + h], row[3 * H + h]};
    case HeadKind::normal: return NormalParams{row[h], row[H + h]};
    case HeadKind::studentt: return StudentTParams{row[h], row[H + h], row[2 * H + h]};
  }
  throw ConfigError("bad head");
}

std::vector<DistParams> link_transform(std::span<const double> raw, const LinkConfig& cfg,
                                       std::size_t horizon) {
  const auto np = static_cast<std::size_t>(param_count(cfg.head));
  if (raw.size() != np * horizon) {
    throw ConfigError("raw parameter vector has length " + std::to_string(raw.size()) +
                      ", expected " + std::to_string(np * horizon));
  }
  Matrix row = Eigen::Map<const Matrix>(raw.data(), 1, static_cast<Eigen::Index>(raw.size()));
  const Matrix t = link_forward(row, cfg, horizon);
  std::vector<DistParams> out;
  out.reserve(horizon);
  for (std::size_t h = 0; h < horizon; ++h) {
    out.push_back(params_at({t.data(), static_cast<std::size_t>(t.cols())}, cfg.head, horizon, h));
  }
  return out;
}

Matrix link_forward(const Matrix& raw, const LinkConfig& cfg, std::size_t horizon) {
  const auto H = static_cast<Eigen::Index>(horizon);
  const int np = param_count(cfg.head);
  if (raw.cols() != np * H) {
    throw ConfigError("raw parameter matrix has " + std::to_string(raw.cols()) +
                      " columns, expected " + std::to_string(np * H));
  }
  Matrix out = raw;
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    for (Eigen::Index h = 0; h < H; ++h) {
      out(r, H + h) = cfg.epsilon + cfg.gamma * softplus(raw(r, H + h));
      if (cfg.head == HeadKind::jsu) {
        out(r, 2 * H + h) = 1.0 + cfg.gamma * softplus(raw(r, 2 * H + h));
      } else if (cfg.head == HeadKind::studentt) {
        out(r, 2 * H + h) = 2.0 + std::max(softplus(raw(r, 2 * H + h)), kNuMargin);
      }
    }
  }
  return out;
}

Matrix link_backward(const Matrix& raw, const Matrix& dparams, const LinkConfig& cfg,
                     std::size_t horizon) {
  const auto H = static_cast<Eigen::Index>(horizon);
  Matrix out = dparams;
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    for (Eigen::Index h = 0; h < H; ++h) {
      out(r, H + h) *= cfg.gamma * sigmoid(raw(r, H + h));
      if (cfg.head == HeadKind::jsu) {
        out(r, 2 * H + h) *= cfg.gamma * sigmoid(raw(r, 2 * H + h));
      } else if (cfg.head == HeadKind::studentt) {
        const double sp = softplus(raw(r, 2 * H + h));
        out(r, 2 * H + h) *= sp > kNuMargin ? sigmoid(raw(r, 2 * H + h)) : 0.0;
      }
    }
  }
  return out;
}

// Densities

double logpdf(double x, const JsuParams& p) {
  const double u = (x - p.lambda) / p.sigma;
  const double r = p.zeta + p.tau * std::asinh(u);
  return std::log(p.tau) - std::log(p.sigma) - kHalfLog2Pi - 0.5 * std::log1p(u * u) - 0.5 * r * r;
}

double logpdf(double x, const NormalParams& p) {
  const double u = (x - p.mu) / p.sigma;
  return -std::log(p.sigma) - kHalfLog2Pi - 0.5 * u * u;
}

double logpdf(double x, const StudentTParams& p) {
  const double u = (x - p.mu) / p.sigma;
  const double nu = p.nu;
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
         0.5 * std::log(nu * std::numbers::pi) - std::log(p.sigma) -
         0.5 * (nu + 1.0) * std::log1p(u * u / nu);
}

double logpdf(double x, const DistParams& p) {
  return std::visit([x](const auto& q) { return logpdf(x, q); }, p);
}

std::array<double, 4> logpdf_grad(double x, const DistParams& p) {
  return std::visit(
      overloaded{
          [x](const JsuParams& q) -> std::array<double, 4> {
            const double u = (x - q.lambda) / q.sigma;
            const double s = std::asinh(u);
            const double r = q.zeta + q.tau * s;
            const double root = std::sqrt(1.0 + u * u);
            const double dldu = -u / (1.0 + u * u) - r * q.tau / root;
            return {-dldu / q.sigma, -1.0 / q.sigma - dldu * u / q.sigma, 1.0 / q.tau - r * s, -r};
          },
          [x](const NormalParams& q) -> std::array<double, 4> {
            const double u = (x - q.mu) / q.sigma;
            return {u / q.sigma, (u * u - 1.0) / q.sigma, 0.0, 0.0};
          },
          [x](const StudentTParams& q) -> std::array<double, 4> {
            const double u = (x - q.mu) / q.sigma;
            const double nu = q.nu;
            const double w = (nu + 1.0) / (nu + u * u);
            const double dnu = 0.5 * boost::math::digamma(0.5 * (nu + 1.0)) -
                               0.5 * boost::math::digamma(0.5 * nu) - 0.5 / nu -
                               0.5 * std::log1p(u * u / nu) + 0.5 * w * u * u / nu;
            return {w * u / q.sigma, (w * u * u - 1.0) / q.sigma, dnu, 0.0};
          }},
      p);
}

double cdf(double x, const JsuParams& p) {
  return std_normal_cdf(p.zeta + p.tau * std::asinh((x - p.lambda) / p.sigma));
}

double cdf(double x, const NormalParams& p) { return std_normal_cdf((x - p.mu) / p.sigma); }

double cdf(double x, const StudentTParams& p) {
  const boost::math::students_t_distribution<double> t(p.nu);
  return boost::math::cdf(t, (x - p.mu) / p.sigma);
}

double cdf(double x, const DistParams& p) {
  return std::visit([x](const auto& q) { return cdf(x, q); }, p);
}

double quantile(double u, const JsuParams& p) {
  check_unit(u);
  return p.lambda + p.sigma * std::sinh((std_normal_quantile(u) - p.zeta) / p.tau);
}

double quantile(double u, const NormalParams& p) {
  check_unit(u);
  return p.mu + p.sigma * std_normal_quantile(u);
}

double quantile(double u, const StudentTParams& p) {
  check_unit(u);
  const boost::math::students_t_distribution<double> t(p.nu);
  return p.mu + p.sigma * boost::math::quantile(t, u);
}

double quantile(double u, const DistParams& p) {
  return std::visit([u](const auto& q) { return quantile(u, q); }, p);
}

void sample_into(const DistParams& p, std::span<double> out, diff::Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::visit(overloaded{[&](const JsuParams& q) {
                          for (double& v : out) {
                            v = q.lambda + q.sigma * std::sinh((z(rng) - q.zeta) / q.tau);
                          }
                        },
                        [&](const NormalParams& q) {
                          for (double& v : out) v = q.mu + q.sigma * z(rng);
                        },
                        [&](const StudentTParams& q) {
                          std::chi_squared_distribution<double> chi(q.nu);
                          for (double& v : out) {
                            const double n = z(rng);
                            v = q.mu + q.sigma * n / std::sqrt(chi(rng) / q.nu);
                          }
                        }},
             p);
}

std::vector<double> sample(const DistParams& p, std::size_t n, std::uint64_t seed) {
  std::vector<double> out(n);
  diff::Rng rng(seed);
  sample_into(p, out, rng);
  return out;
}

DistParams pushforward(const DistParams& p, double shift, double scale_factor) {
  if (!(scale_factor > 0.0)) throw DomainError("pushforward scale must be positive");
  return std::visit(
      overloaded{[&](JsuParams q) -> DistParams {
                   q.lambda = q.lambda * scale_factor + shift;
                   q.sigma *= scale_factor;
                   return q;
                 },
                 [&](NormalParams q) -> DistParams {
                   q.mu = q.mu * scale_factor + shift;
                   q.sigma *= scale_factor;
                   return q;
                 },
                 [&](StudentTParams q) -> DistParams {
                   q.mu = q.mu * scale_factor + shift;
                   q.sigma *= scale_factor;
                   return q;
                 }},
      p);
}

double nll(std::span<const double> y, std::span<const DistParams> params) {
  if (y.size() != params.size()) throw ConfigError("nll: target and parameter lengths differ");
  double total = 0.0;
  for (std::size_t h = 0; h < y.size(); ++h) {
    const double lp = logpdf(y[h], params[h]);
    if (!std::isfinite(lp)) throw NumericError("non-finite log-density at hour " + std::to_string(h));
    total -= lp;
  }
  return total;
}

double batch_nll(const Matrix& params, const Matrix& y, HeadKind head, Matrix* dparams) {
  const Eigen::Index H = y.cols();
  const int np = param_count(head);
  if (params.cols() != np * H || params.rows() != y.rows()) {
    throw ConfigError("batch_nll: parameter matrix does not match targets");
  }
  if (dparams) dparams->setZero(params.rows(), params.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < params.rows(); ++r) {
    const std::span<const double> row(params.row(r).data(), static_cast<std::size_t>(params.cols()));
    for (Eigen::Index h = 0; h < H; ++h) {
      const DistParams p = params_at(row, head, static_cast<std::size_t>(H), static_cast<std::size_t>(h));
      const double lp = logpdf(y(r, h), p);
      if (!std::isfinite(lp)) {
        throw NumericError("non-finite log-density at row " + std::to_string(r) + ", hour " +
                           std::to_string(h));
      }
      total -= lp;
      if (dparams) {
        const auto g = logpdf_grad(y(r, h), p);
        for (int k = 0; k < np; ++k) (*dparams)(r, k * H + h) = -g[static_cast<std::size_t>(k)];
      }
    }
  }
  return total;
}

}  // namespace nbmlss::dists
