// Central finite differences and a uniform driver for every backward pass in
// the library. Everything here runs on double tensors end to end so a failed
// check means a wrong formula, not float rounding.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bss/bifpn.hpp"
#include "bss/errors.hpp"
#include "bss/ops.hpp"
#include "bss/rng.hpp"
#include "bss/shuffle_attention.hpp"
#include "bss/simam.hpp"
#include "bss/tensor.hpp"

namespace bss {

// (f(x + h e_i) - f(x - h e_i)) / (2 h), step scaled per element by
// max(1, |x_i|).
template <typename F>
DTensor numeric_grad(F&& f, const DTensor& x, double h) {
  if (!(h > 0.0)) throw ConfigError("numeric_grad: h must be > 0");
  DTensor grad(x.dims());
  DTensor probe = x;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const std::size_t idx = static_cast<std::size_t>(i);
    const double step = h * std::max(1.0, std::abs(x[idx]));
    const double keep = probe[idx];
    probe[idx] = keep + step;
    const double hi = f(probe);
    probe[idx] = keep - step;
    const double lo = f(probe);
    probe[idx] = keep;
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw OracleError("numeric_grad: non-finite value at element " + std::to_string(i));
    }
    grad[idx] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

struct GradCheckReport {
  std::string op;
  int trials = 0;
  double tol = 0.0;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::int64_t worst_index = -1;
  std::string worst_shape;
  std::vector<std::string> shapes;
  bool pass = false;
};

// One randomized instance: a differentiated tensor, a forward map and the
// backward under test. The upstream is folded into the scalar loss
// L = <upstream, forward(x)>.
struct GradCheckCase {
  DTensor x;
  DTensor upstream;
  std::function<DTensor(const DTensor&)> forward;
  std::function<DTensor(const DTensor&, const DTensor&)> backward;
};

using GradCaseGen = std::function<GradCheckCase(Rng&)>;

namespace gradcheck_detail {

inline DTensor random_tensor(Rng& rng, Shape4 d, double scale = 1.0) {
  DTensor t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[static_cast<std::size_t>(i)] = scale * rng.normal();
  }
  return t;
}

inline GradCheckCase simam_case(Rng& rng) {
  const Shape4 d{static_cast<int>(rng.uniform_int(1, 2)), static_cast<int>(rng.uniform_int(1, 3)),
                 static_cast<int>(rng.uniform_int(2, 4)), static_cast<int>(rng.uniform_int(2, 4))};
  GradCheckCase c;
  c.x = random_tensor(rng, d);
  c.upstream = random_tensor(rng, d);
  const SimAMConfig cfg{1e-4};
  c.forward = [cfg](const DTensor& x) { return simam_forward(x, cfg); };
  c.backward = [cfg](const DTensor& x, const DTensor& u) {
    return simam_backward(x, cfg, u);
  };
  return c;
}

inline GradCheckCase sa_case(Rng& rng) {
  const int k = static_cast<int>(rng.uniform_int(1, 2));
  const int half = static_cast<int>(rng.uniform_int(1, 2));
  // planes of at least 3x3: tiny planes make the GN curvature large enough
  // to poke through the h^2 truncation floor of the oracle
  const Shape4 d{static_cast<int>(rng.uniform_int(1, 2)), 2 * k * half,
                 static_cast<int>(rng.uniform_int(3, 4)), static_cast<int>(rng.uniform_int(3, 4))};
  SAConfig cfg;
  cfg.groups = k;
  cfg.gn_delta = 1e-2;
  const std::vector<int> divisors = [&] {
    std::vector<int> v;
    for (int g = 1; g <= d.c; ++g) {
      if (d.c % g == 0) v.push_back(g);
    }
    return v;
  }();
  cfg.shuffle_groups = divisors[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(divisors.size()) - 1))];
  SAWeightsT<double> wts;
  for (int i = 0; i < half; ++i) {
    wts.w1.push_back(rng.normal());
    wts.b1.push_back(0.5 * rng.normal());
    wts.w2.push_back(0.5 * rng.normal());
    wts.b2.push_back(0.5 * rng.normal());
  }
  GradCheckCase c;
  c.x = random_tensor(rng, d);
  c.upstream = random_tensor(rng, d);
  c.forward = [cfg, wts](const DTensor& x) { return sa_forward(x, cfg, wts); };
  c.backward = [cfg, wts](const DTensor& x, const DTensor& u) {
    return sa_backward(x, cfg, wts, u).dx;
  };
  return c;
}

// Parameter gradients: the differentiated tensor packs (w1,b1,w2,b2) as a
// [1,1,4,len] tensor; the input stays fixed.
inline GradCheckCase sa_params_case(Rng& rng) {
  const int k = static_cast<int>(rng.uniform_int(1, 2));
  const int half = static_cast<int>(rng.uniform_int(1, 2));
  const Shape4 d{1, 2 * k * half, 3, 3};
  SAConfig cfg;
  cfg.groups = k;
  cfg.gn_delta = 1e-3;
  cfg.shuffle_groups = 2;
  const DTensor x = random_tensor(rng, d);
  const DTensor up = random_tensor(rng, d);
  auto unpack = [half](const DTensor& p) {
    SAWeightsT<double> w;
    for (int i = 0; i < half; ++i) {
      w.w1.push_back(p.at(0, 0, 0, i));
      w.b1.push_back(p.at(0, 0, 1, i));
      w.w2.push_back(p.at(0, 0, 2, i));
      w.b2.push_back(p.at(0, 0, 3, i));
    }
    return w;
  };
  GradCheckCase c;
  c.x = random_tensor(rng, Shape4{1, 1, 4, half});
  c.upstream = up;
  c.forward = [cfg, x, unpack](const DTensor& p) { return sa_forward(x, cfg, unpack(p)); };
  c.backward = [cfg, x, unpack, half](const DTensor& p, const DTensor& u) {
    const auto grads = sa_backward(x, cfg, unpack(p), u);
    DTensor out(Shape4{1, 1, 4, half});
    for (int i = 0; i < half; ++i) {
      out.at(0, 0, 0, i) = grads.dwts.w1[i];
      out.at(0, 0, 1, i) = grads.dwts.b1[i];
      out.at(0, 0, 2, i) = grads.dwts.w2[i];
      out.at(0, 0, 3, i) = grads.dwts.b2[i];
    }
    return out;
  };
  return c;
}

// The k fused inputs ride in the batch dimension of a single tensor.
inline GradCheckCase fuse_case(Rng& rng) {
  const int k = static_cast<int>(rng.uniform_int(2, 4));
  const Shape4 unit{1, static_cast<int>(rng.uniform_int(1, 3)),
                    static_cast<int>(rng.uniform_int(2, 4)), static_cast<int>(rng.uniform_int(2, 4))};
  std::vector<double> weights;
  for (int i = 0; i < k; ++i) weights.push_back(rng.uniform(-0.5, 2.0));
  const double eps = 1e-4;
  auto split = [unit, k](const DTensor& stacked) {
    std::vector<DTensor> parts;
    for (int i = 0; i < k; ++i) {
      DTensor p(unit);
      const std::size_t stride = static_cast<std::size_t>(unit.elems());
      for (std::size_t e = 0; e < stride; ++e) {
        p[e] = stacked[static_cast<std::size_t>(i) * stride + e];
      }
      parts.push_back(std::move(p));
    }
    return parts;
  };
  GradCheckCase c;
  c.x = random_tensor(rng, Shape4{k, unit.c, unit.h, unit.w});
  c.upstream = random_tensor(rng, unit);
  c.forward = [split, weights, eps](const DTensor& stacked) {
    return fuse_weighted(split(stacked), weights, eps);
  };
  c.backward = [split, weights, eps, unit, k](const DTensor& stacked, const DTensor& u) {
    const auto grads = fuse_weighted_backward(static_cast<std::size_t>(k), weights, eps, u);
    DTensor out(stacked.dims());
    const std::size_t stride = static_cast<std::size_t>(unit.elems());
    for (int i = 0; i < k; ++i) {
      for (std::size_t e = 0; e < stride; ++e) {
        out[static_cast<std::size_t>(i) * stride + e] = grads[static_cast<std::size_t>(i)][e];
      }
    }
    return out;
  };
  return c;
}

inline GradCheckCase group_norm_case(Rng& rng) {
  const int groups = static_cast<int>(rng.uniform_int(1, 3));
  const int c = groups * static_cast<int>(rng.uniform_int(1, 3));
  const Shape4 d{static_cast<int>(rng.uniform_int(1, 2)), c,
                 static_cast<int>(rng.uniform_int(2, 4)), static_cast<int>(rng.uniform_int(2, 4))};
  const double delta = 1e-3;
  GradCheckCase cse;
  cse.x = random_tensor(rng, d);
  cse.upstream = random_tensor(rng, d);
  cse.forward = [groups, delta](const DTensor& x) { return group_norm(x, groups, delta); };
  cse.backward = [groups, delta](const DTensor& x, const DTensor& u) {
    return group_norm_backward(x, groups, delta, u);
  };
  return cse;
}

inline GradCheckCase pointwise_conv_case(Rng& rng) {
  const Shape4 d{static_cast<int>(rng.uniform_int(1, 2)), static_cast<int>(rng.uniform_int(1, 3)),
                 static_cast<int>(rng.uniform_int(2, 4)), static_cast<int>(rng.uniform_int(2, 4))};
  const int cout = static_cast<int>(rng.uniform_int(1, 3));
  ConvSpec<double> spec;
  spec.out_channels = cout;
  spec.in_channels = d.c;
  for (int i = 0; i < cout * d.c; ++i) spec.weight.push_back(rng.normal());
  for (int i = 0; i < cout; ++i) spec.bias.push_back(rng.normal());
  GradCheckCase c;
  c.x = random_tensor(rng, d);
  c.upstream = random_tensor(rng, Shape4{d.n, cout, d.h, d.w});
  c.forward = [spec](const DTensor& x) { return pointwise_conv(x, spec); };
  c.backward = [spec](const DTensor& x, const DTensor& u) {
    return pointwise_conv_backward(x, spec, u).dx;
  };
  return c;
}

inline GradCheckCase pointwise_conv_params_case(Rng& rng) {
  const Shape4 d{1, static_cast<int>(rng.uniform_int(1, 3)), 3, 3};
  const int cout = static_cast<int>(rng.uniform_int(1, 3));
  const DTensor x = random_tensor(rng, d);
  auto unpack = [d, cout](const DTensor& p) {
    ConvSpec<double> spec;
    spec.out_channels = cout;
    spec.in_channels = d.c;
    for (int i = 0; i < cout * d.c; ++i) spec.weight.push_back(p[static_cast<std::size_t>(i)]);
    for (int i = 0; i < cout; ++i) {
      spec.bias.push_back(p[static_cast<std::size_t>(cout * d.c + i)]);
    }
    return spec;
  };
  GradCheckCase c;
  c.x = random_tensor(rng, Shape4{1, 1, 1, cout * d.c + cout});
  c.upstream = random_tensor(rng, Shape4{d.n, cout, d.h, d.w});
  c.forward = [x, unpack](const DTensor& p) { return pointwise_conv(x, unpack(p)); };
  c.backward = [x, unpack, d, cout](const DTensor& p, const DTensor& u) {
    const auto g = pointwise_conv_backward(x, unpack(p), u);
    DTensor out(Shape4{1, 1, 1, cout * d.c + cout});
    for (int i = 0; i < cout * d.c; ++i) out[static_cast<std::size_t>(i)] = g.dweight[static_cast<std::size_t>(i)];
    for (int i = 0; i < cout; ++i) {
      out[static_cast<std::size_t>(cout * d.c + i)] = g.dbias[static_cast<std::size_t>(i)];
    }
    return out;
  };
  return c;
}

inline GradCheckCase identity_case(Rng& rng) {
  const Shape4 d{1, 2, 3, 3};
  GradCheckCase c;
  c.x = random_tensor(rng, d);
  c.upstream = random_tensor(rng, d);
  c.forward = [](const DTensor& x) { return x; };
  c.backward = [](const DTensor&, const DTensor& u) { return u; };
  return c;
}

}  // namespace gradcheck_detail

inline const std::map<std::string, GradCaseGen>& gradcheck_registry() {
  static const std::map<std::string, GradCaseGen> registry = {
      {"identity", gradcheck_detail::identity_case},
      {"simam_forward", gradcheck_detail::simam_case},
      {"sa_forward", gradcheck_detail::sa_case},
      {"sa_params", gradcheck_detail::sa_params_case},
      {"fuse_weighted", gradcheck_detail::fuse_case},
      {"group_norm", gradcheck_detail::group_norm_case},
      {"pointwise_conv", gradcheck_detail::pointwise_conv_case},
      {"pointwise_conv_params", gradcheck_detail::pointwise_conv_params_case},
  };
  return registry;
}

inline GradCheckReport check_op(const std::string& op, int trials, double tol,
                                std::uint64_t seed, double h = 1e-3) {
  const auto& registry = gradcheck_registry();
  auto it = registry.find(op);
  if (it == registry.end()) throw ConfigError("check_op: unregistered op \"" + op + "\"");
  GradCheckReport rep;
  rep.op = op;
  rep.trials = trials;
  rep.tol = tol;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(trial)));
    GradCheckCase c = it->second(rng);
    const DTensor analytic = c.backward(c.x, c.upstream);
    const auto loss = [&](const DTensor& x) { return dot(c.upstream, c.forward(x)); };
    const DTensor numeric = numeric_grad(loss, c.x, h);
    rep.shapes.push_back(c.x.dims().str());
    for (std::int64_t i = 0; i < analytic.size(); ++i) {
      const std::size_t idx = static_cast<std::size_t>(i);
      const double a = analytic[idx];
      const double n = numeric[idx];
      const double abs_err = std::abs(a - n);
      const double rel = abs_err / std::max({std::abs(a), std::abs(n), 1e-8});
      if (abs_err > rep.max_abs) rep.max_abs = abs_err;
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst_index = i;
        rep.worst_shape = c.x.dims().str();
      }
    }
  }
  rep.pass = rep.max_rel <= tol;
  return rep;
}

inline std::vector<GradCheckReport> check_all_ops(int trials, double tol,
                                                  std::uint64_t seed) {
  std::vector<GradCheckReport> reports;
  for (const auto& [name, _] : gradcheck_registry()) {
    reports.push_back(check_op(name, trials, tol, seed));
  }
  return reports;
}

}  // namespace bss
