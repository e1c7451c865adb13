// SimAM attention. Each neuron gets the weight sigmoid(1/e*), where e* is
// the minimal value of a per-neuron linear-separability energy over its
// channel plane. The production path evaluates the closed form built from
// full-channel statistics; the exact leave-one-out minimizer lives alongside
// it as an oracle so the closed form stays falsifiable.
//
// Energy of neuron t within a channel of M values, labels +1 for the target
// and -1 for the rest:
//
//   E(w, b) = (1/(M-1)) * sum_{i != t} (-1 - (w x_i + b))^2
//             + (1 - (w t + b))^2 + lambda w^2
//
// Stationarity gives b = -(w/2)(t + mu_t) and
//   w = 2 (t - mu_t) / ((t - mu_t)^2 + 2 sigma_t^2 + 2 lambda)
// with mu_t, sigma_t^2 the leave-one-out mean and biased variance. The
// closed-form minimum with full-channel statistics is
//   e* = 4 (sigma^2 + lambda) / ((t - mu)^2 + 2 sigma^2 + 2 lambda).
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bss/errors.hpp"
#include "bss/ops.hpp"
#include "bss/parallel.hpp"
#include "bss/rng.hpp"
#include "bss/tensor.hpp"

namespace bss {

struct SimAMConfig {
  double lambda = 1e-4;
};

template <typename T>
struct EnergyFieldT {
  TensorT<T> e_star;               // per-neuron minimal energies
  std::vector<double> mu_hat;      // per (n, c) plane, n*c entries
  std::vector<double> sigma2_hat;  // biased variance per plane
};

using EnergyField = EnergyFieldT<float>;

namespace detail {

inline void check_simam_lambda(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("simam: lambda must be finite and >= 0, got " +
                      std::to_string(lambda));
  }
}

}  // namespace detail

template <typename T>
EnergyFieldT<T> simam_energy(const TensorT<T>& x, const SimAMConfig& cfg) {
  detail::check_simam_lambda(cfg.lambda);
  const Shape4 d = x.dims();
  const std::int64_t m = d.plane();
  EnergyFieldT<T> field{TensorT<T>(d),
                        std::vector<double>(static_cast<std::size_t>(d.n) * d.c),
                        std::vector<double>(static_cast<std::size_t>(d.n) * d.c)};
  std::vector<char> degenerate(static_cast<std::size_t>(d.n) * d.c, 0);
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int c = static_cast<int>(p) % d.c;
    const T* src = x.plane_ptr(n, c);
    double mu = 0.0;
    for (std::int64_t i = 0; i < m; ++i) mu += static_cast<double>(src[i]);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double dv = static_cast<double>(src[i]) - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(m);
    field.mu_hat[p] = mu;
    field.sigma2_hat[p] = var;
    if (cfg.lambda == 0.0 && var == 0.0) {
      degenerate[p] = 1;
      return;
    }
    const double num = 4.0 * (var + cfg.lambda);
    T* dst = field.e_star.plane_ptr(n, c);
    for (std::int64_t i = 0; i < m; ++i) {
      const double dev = static_cast<double>(src[i]) - mu;
      dst[i] = static_cast<T>(num / (dev * dev + 2.0 * var + 2.0 * cfg.lambda));
    }
  });
  for (std::size_t p = 0; p < degenerate.size(); ++p) {
    if (degenerate[p]) {
      throw DegenerateError(
          "simam: lambda=0 with a constant channel plane (index " +
          std::to_string(p) + ") divides by zero");
    }
  }
  return field;
}

// X~ = sigmoid(1/e*) .* X, elementwise.
template <typename T>
TensorT<T> simam_forward(const TensorT<T>& x, const SimAMConfig& cfg) {
  const EnergyFieldT<T> field = simam_energy(x, cfg);
  TensorT<T> out(x.dims());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double w = sigmoid(1.0 / static_cast<double>(field.e_star[static_cast<std::size_t>(i)]));
    out[static_cast<std::size_t>(i)] =
        static_cast<T>(w * static_cast<double>(x[static_cast<std::size_t>(i)]));
  }
  return out;
}

// dL/dx for L = <upstream, simam_forward(x)>, including the coupling of
// every neuron through the plane statistics.
template <typename T>
TensorT<T> simam_backward(const TensorT<T>& x, const SimAMConfig& cfg,
                          const TensorT<T>& upstream) {
  require_same_dims(x, upstream, "simam_backward");
  detail::check_simam_lambda(cfg.lambda);
  const Shape4 d = x.dims();
  const std::int64_t m = d.plane();
  TensorT<T> out(d);
  std::vector<char> degenerate(static_cast<std::size_t>(d.n) * d.c, 0);
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int c = static_cast<int>(p) % d.c;
    const T* src = x.plane_ptr(n, c);
    const T* up = upstream.plane_ptr(n, c);
    T* dst = out.plane_ptr(n, c);

    double mu = 0.0;
    for (std::int64_t i = 0; i < m; ++i) mu += static_cast<double>(src[i]);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double dv = static_cast<double>(src[i]) - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(m);
    if (cfg.lambda == 0.0 && var == 0.0) {
      degenerate[p] = 1;
      return;
    }

    // e_t = A / D_t with A = 4(var + lambda), D_t = d_t^2 + 2 var + 2 lambda.
    // With s_t = 1/e_t, w_t = sigmoid(s_t) and c_t = u_t x_t w_t (1 - w_t):
    //   dL/dx_k = u_k w_k + (2 c_k d_k)/A - (2/(M A)) S1
    //             + (4 d_k/(M A)) S0 - (8 d_k/(M A^2)) S2
    // where S0 = sum c_t, S1 = sum c_t d_t, S2 = sum c_t D_t.
    const double a = 4.0 * (var + cfg.lambda);
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double dev = static_cast<double>(src[i]) - mu;
      const double bigd = dev * dev + 2.0 * var + 2.0 * cfg.lambda;
      const double w = sigmoid(bigd / a);
      const double ct = static_cast<double>(up[i]) * static_cast<double>(src[i]) *
                        w * (1.0 - w);
      s0 += ct;
      s1 += ct * dev;
      s2 += ct * bigd;
    }
    const double md = static_cast<double>(m);
    for (std::int64_t i = 0; i < m; ++i) {
      const double dev = static_cast<double>(src[i]) - mu;
      const double bigd = dev * dev + 2.0 * var + 2.0 * cfg.lambda;
      const double w = sigmoid(bigd / a);
      const double ck = static_cast<double>(up[i]) * static_cast<double>(src[i]) *
                        w * (1.0 - w);
      const double grad = static_cast<double>(up[i]) * w + (2.0 * ck * dev) / a -
                          (2.0 / (md * a)) * s1 + (4.0 * dev / (md * a)) * s0 -
                          (8.0 * dev / (md * a * a)) * s2;
      dst[i] = static_cast<T>(grad);
    }
  });
  for (std::size_t p = 0; p < degenerate.size(); ++p) {
    if (degenerate[p]) {
      throw DegenerateError("simam_backward: lambda=0 with a constant channel plane");
    }
  }
  return out;
}

// Exact minimizer of the per-neuron energy over one channel.
struct ExactEnergySolution {
  double omega_t = 0.0;
  double b_t = 0.0;
  double e_min = 0.0;
  int t_index = 0;
  double mu_t = 0.0;      // leave-one-out mean
  double sigma2_t = 0.0;  // leave-one-out biased variance
};

// E(w, b) evaluated directly from the definition; the reference all oracle
// claims are checked against.
inline double simam_energy_at(std::span<const double> channel, int t_index,
                              double omega, double b, double lambda) {
  const std::int64_t m = static_cast<std::int64_t>(channel.size());
  if (m < 2) throw DegenerateError("simam energy: need M >= 2");
  if (t_index < 0 || t_index >= m) throw ConfigError("simam energy: t out of range");
  const double t = channel[static_cast<std::size_t>(t_index)];
  double acc = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    if (i == t_index) continue;
    const double r = -1.0 - (omega * channel[static_cast<std::size_t>(i)] + b);
    acc += r * r;
  }
  acc /= static_cast<double>(m - 1);
  const double rt = 1.0 - (omega * t + b);
  return acc + rt * rt + lambda * omega * omega;
}

// Closed-form stationary point (leave-one-out statistics).
inline ExactEnergySolution simam_analytic_min(std::span<const double> channel,
                                              int t_index, double lambda) {
  const std::int64_t m = static_cast<std::int64_t>(channel.size());
  if (m < 2) throw DegenerateError("simam analytic: need M >= 2");
  if (t_index < 0 || t_index >= m) throw ConfigError("simam analytic: t out of range");
  const double t = channel[static_cast<std::size_t>(t_index)];
  double s1 = 0.0, s2 = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    if (i == t_index) continue;
    const double v = channel[static_cast<std::size_t>(i)];
    s1 += v;
    s2 += v * v;
  }
  const double mu_t = s1 / static_cast<double>(m - 1);
  const double sigma2_t = s2 / static_cast<double>(m - 1) - mu_t * mu_t;
  const double dev = t - mu_t;
  const double denom = dev * dev + 2.0 * sigma2_t + 2.0 * lambda;
  if (denom == 0.0) {
    throw DegenerateError("simam analytic: singular system (lambda=0, constant channel)");
  }
  ExactEnergySolution sol;
  sol.t_index = t_index;
  sol.mu_t = mu_t;
  sol.sigma2_t = sigma2_t;
  sol.omega_t = 2.0 * dev / denom;
  sol.b_t = -0.5 * (t + mu_t) * sol.omega_t;
  sol.e_min = simam_energy_at(channel, t_index, sol.omega_t, sol.b_t, lambda);
  return sol;
}

// Independent route: assemble and solve the 2x2 ridge normal equations, then
// confirm by random sampling that nothing beats the claimed minimum.
inline ExactEnergySolution simam_oracle_min(std::span<const double> channel,
                                            int t_index, double lambda,
                                            int samples = 10000,
                                            std::uint64_t seed = 0x5eed) {
  const std::int64_t m = static_cast<std::int64_t>(channel.size());
  if (m < 2) throw DegenerateError("simam oracle: need M >= 2");
  if (t_index < 0 || t_index >= m) throw ConfigError("simam oracle: t out of range");
  const double t = channel[static_cast<std::size_t>(t_index)];
  double s1 = 0.0, s2 = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    if (i == t_index) continue;
    const double v = channel[static_cast<std::size_t>(i)];
    s1 += v;
    s2 += v * v;
  }
  const double mu_t = s1 / static_cast<double>(m - 1);
  const double sq_t = s2 / static_cast<double>(m - 1);

  // Gradient of E: a11 w + a12 b = r1, a12 w + a22 b = r2.
  const double a11 = sq_t + t * t + lambda;
  const double a12 = mu_t + t;
  const double a22 = 2.0;
  const double r1 = t - mu_t;
  const double r2 = 0.0;
  const double det = a11 * a22 - a12 * a12;
  if (det == 0.0 || !std::isfinite(det)) {
    throw DegenerateError("simam oracle: singular normal equations");
  }
  ExactEnergySolution sol;
  sol.t_index = t_index;
  sol.mu_t = mu_t;
  sol.sigma2_t = sq_t - mu_t * mu_t;
  sol.omega_t = (r1 * a22 - r2 * a12) / det;
  sol.b_t = (a11 * r2 - a12 * r1) / det;
  sol.e_min = simam_energy_at(channel, t_index, sol.omega_t, sol.b_t, lambda);

  Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(t_index)));
  const double w_span = 5.0 * (1.0 + std::abs(sol.omega_t));
  const double b_span = 5.0 * (1.0 + std::abs(sol.b_t));
  for (int s = 0; s < samples; ++s) {
    const double w = sol.omega_t + rng.uniform(-w_span, w_span);
    const double b = sol.b_t + rng.uniform(-b_span, b_span);
    const double e = simam_energy_at(channel, t_index, w, b, lambda);
    if (e < sol.e_min - 1e-9) {
      throw OracleError("simam oracle: sampled energy " + std::to_string(e) +
                        " beats claimed minimum " + std::to_string(sol.e_min));
    }
  }
  return sol;
}

// Closed-form energy at the analytic stationary point, O(1) per neuron given
// the plane sums. Used by the approximation-gap sweeps where evaluating the
// defining sum per neuron would be quadratic.
inline double simam_exact_min_energy(double t, double sum, double sumsq,
                                     std::int64_t m, double lambda) {
  const double s1 = sum - t;
  const double s2 = sumsq - t * t;
  const double mu_t = s1 / static_cast<double>(m - 1);
  const double sq_t = s2 / static_cast<double>(m - 1);
  const double sigma2_t = sq_t - mu_t * mu_t;
  const double dev = t - mu_t;
  const double denom = dev * dev + 2.0 * sigma2_t + 2.0 * lambda;
  const double w = 2.0 * dev / denom;
  const double b = -0.5 * (t + mu_t) * w;
  // E(w, b) = (1/(M-1)) sum_{i!=t} (1 + w x_i + b)^2 + (1 - w t - b)^2 + l w^2
  const double one_b = 1.0 + b;
  const double others = one_b * one_b + 2.0 * one_b * w * mu_t + w * w * sq_t;
  const double rt = 1.0 - w * t - b;
  return others + rt * rt + lambda * w * w;
}

}  // namespace bss
