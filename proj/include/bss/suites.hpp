// Runtime check suites behind `bss check`: invariant properties, the SimAM
// oracle battery, and the gradient checks. Each entry reports pass/fail with
// a one-line detail; the CLI renders the table and the exit code.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bss/bifpn.hpp"
#include "bss/detect_metrics.hpp"
#include "bss/gradcheck.hpp"
#include "bss/ops.hpp"
#include "bss/rng.hpp"
#include "bss/shuffle_attention.hpp"
#include "bss/simam.hpp"
#include "bss/tensor_io.hpp"

namespace bss {

struct SuiteResult {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace suite_detail {

inline Tensor random_tensor(Rng& rng, Shape4 d, double scale = 1.0) {
  Tensor t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[static_cast<std::size_t>(i)] = static_cast<float>(scale * rng.normal());
  }
  return t;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace suite_detail

inline std::uint64_t hash_bytes(const std::vector<std::uint8_t>& bytes) {
  return suite_detail::fnv1a64(bytes.data(), bytes.size());
}

inline std::vector<SuiteResult> run_invariant_suite(std::uint64_t seed) {
  using suite_detail::random_tensor;
  std::vector<SuiteResult> results;
  auto check = [&](const std::string& name, bool ok, const std::string& detail = "") {
    results.push_back({"invariants", name, ok, detail});
  };

  {  // BST1 round-trip, byte exact
    bool ok = true;
    for (int i = 0; i < 20 && ok; ++i) {
      Rng rng(Rng::mix(seed, 100 + static_cast<std::uint64_t>(i)));
      const Shape4 d{static_cast<int>(rng.uniform_int(1, 3)), static_cast<int>(rng.uniform_int(1, 5)),
                     static_cast<int>(rng.uniform_int(1, 6)), static_cast<int>(rng.uniform_int(1, 6))};
      const Tensor t = random_tensor(rng, d, 10.0);
      const auto bytes = bst_serialize(to_bst(t));
      const Tensor back = tensor_from_bst(bst_deserialize(bytes));
      ok = back == t && bst_serialize(to_bst(back)) == bytes;
    }
    check("bst1_roundtrip_byte_exact", ok);
  }

  {  // channel shuffle is a permutation and inverts with C/groups
    Rng rng(Rng::mix(seed, 1));
    const Tensor t = random_tensor(rng, Shape4{2, 12, 3, 3});
    bool ok = true;
    for (int g : {1, 2, 3, 4, 6, 12}) {
      const Tensor s = channel_shuffle(t, g);
      const Tensor back = channel_shuffle(s, 12 / g);
      if (!(back == t)) ok = false;
      std::vector<float> a = t.raw(), b = s.raw();
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      if (a != b) ok = false;
    }
    check("channel_shuffle_permutation_inverse", ok);
  }

  {  // group_norm standardizes each group
    Rng rng(Rng::mix(seed, 2));
    const double delta = 1e-5;
    bool ok = true;
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor t = random_tensor(rng, Shape4{2, 6, 4, 4}, 3.0);
      for (int groups : {1, 2, 3, 6}) {
        const Tensor z = group_norm(t, groups, delta);
        const int per = 6 / groups;
        const std::int64_t m = per * 16;
        for (int n = 0; n < 2; ++n) {
          for (int g = 0; g < groups; ++g) {
            double mean = 0, var = 0, in_mean = 0, in_var = 0;
            const float* zp = z.plane_ptr(n, g * per);
            const float* xp = t.plane_ptr(n, g * per);
            for (std::int64_t i = 0; i < m; ++i) in_mean += xp[i];
            in_mean /= static_cast<double>(m);
            for (std::int64_t i = 0; i < m; ++i) {
              in_var += (xp[i] - in_mean) * (xp[i] - in_mean);
            }
            in_var /= static_cast<double>(m);
            for (std::int64_t i = 0; i < m; ++i) mean += zp[i];
            mean /= static_cast<double>(m);
            for (std::int64_t i = 0; i < m; ++i) var += (zp[i] - mean) * (zp[i] - mean);
            var /= static_cast<double>(m);
            if (std::abs(mean) > 1e-6) ok = false;
            if (std::abs(var - in_var / (in_var + delta)) > 1e-4) ok = false;
          }
        }
      }
    }
    check("group_norm_moments", ok);
  }

  {  // gap linearity
    Rng rng(Rng::mix(seed, 3));
    const Shape4 d{2, 3, 5, 5};
    const Tensor x = random_tensor(rng, d), y = random_tensor(rng, d);
    const double a = 1.75, b = -0.5;
    Tensor mix(d);
    for (std::int64_t i = 0; i < mix.size(); ++i) {
      mix[static_cast<std::size_t>(i)] = static_cast<float>(
          a * x[static_cast<std::size_t>(i)] + b * y[static_cast<std::size_t>(i)]);
    }
    const Tensor gm = global_avg_pool(mix), gx = global_avg_pool(x), gy = global_avg_pool(y);
    bool ok = true;
    for (std::int64_t i = 0; i < gm.size(); ++i) {
      const double want = a * gx[static_cast<std::size_t>(i)] + b * gy[static_cast<std::size_t>(i)];
      if (std::abs(gm[static_cast<std::size_t>(i)] - want) > 1e-6) ok = false;
    }
    check("gap_linearity", ok);
  }

  {  // resample: down2(up2(x)) == x
    Rng rng(Rng::mix(seed, 4));
    const Tensor x = random_tensor(rng, Shape4{1, 3, 5, 7});
    check("resample_down2_of_up2_identity", resample(resample(x, Resample::up2), Resample::down2) == x);
  }

  {  // Eq.-1 fusion algebra, on doubles so the 1e-9 identities are meaningful
    Rng rng(Rng::mix(seed, 5));
    const Shape4 d{1, 2, 4, 4};
    const double eps = 1e-4;
    std::vector<DTensor> inputs;
    for (int i = 0; i < 3; ++i) {
      DTensor t(d);
      for (std::int64_t e = 0; e < t.size(); ++e) t[static_cast<std::size_t>(e)] = rng.normal();
      inputs.push_back(std::move(t));
    }
    const std::vector<double> w{0.5, 1.5, 2.0};

    double wsum = 0;
    for (double v : w) wsum += v;
    const double coeff_sum = wsum / (eps + wsum);
    bool ok = coeff_sum < 1.0 && std::abs((w[0] + w[1] + w[2]) / (eps + wsum) - coeff_sum) <= 1e-12;

    const DTensor same = fuse_weighted(std::vector<DTensor>{inputs[0], inputs[0]}, {1.0, 1.0}, eps);
    for (std::int64_t i = 0; i < same.size(); ++i) {
      const double want = (2.0 / 2.0001) * inputs[0][static_cast<std::size_t>(i)];
      if (std::abs(same[static_cast<std::size_t>(i)] - want) > 1e-9) ok = false;
    }

    // weight homogeneity: fuse(c*w, eps) == fuse(w, eps/c)
    const double c = 3.5;
    const DTensor lhs = fuse_weighted(inputs, {c * w[0], c * w[1], c * w[2]}, eps);
    const DTensor rhs = fuse_weighted(inputs, w, eps / c);
    for (std::int64_t i = 0; i < lhs.size(); ++i) {
      if (std::abs(lhs[static_cast<std::size_t>(i)] - rhs[static_cast<std::size_t>(i)]) > 1e-9) ok = false;
    }

    // scale equivariance
    std::vector<DTensor> scaled;
    for (const auto& t : inputs) {
      DTensor s(d);
      for (std::int64_t i = 0; i < s.size(); ++i) {
        s[static_cast<std::size_t>(i)] = 2.5 * t[static_cast<std::size_t>(i)];
      }
      scaled.push_back(std::move(s));
    }
    const DTensor base = fuse_weighted(inputs, w, eps);
    const DTensor big = fuse_weighted(scaled, w, eps);
    for (std::int64_t i = 0; i < base.size(); ++i) {
      const double want = 2.5 * base[static_cast<std::size_t>(i)];
      const double rel = std::abs(big[static_cast<std::size_t>(i)] - want) /
                         std::max(1e-8, std::abs(want));
      if (rel > 1e-6) ok = false;
    }
    check("fuse_weighted_algebra", ok);
  }

  {  // graph edge order never changes the result (sorted by source id)
    Rng rng(Rng::mix(seed, 6));
    const Shape4 d{1, 2, 4, 4};
    std::map<std::string, Tensor> ins{{"A", random_tensor(rng, d)},
                                      {"B", random_tensor(rng, d)},
                                      {"C", random_tensor(rng, d)}};
    auto build = [&](std::vector<std::pair<std::string, double>> order) {
      FusionGraph g;
      for (const auto& name : {"A", "B", "C"}) {
        FusionNode in;
        in.id = name;
        in.kind = NodeKind::input;
        g.nodes.push_back(in);
        g.input_dims[name] = d;
      }
      FusionNode f;
      f.id = "O";
      f.kind = NodeKind::fuse;
      for (const auto& [src, wv] : order) {
        f.edges.push_back({src, {}});
        f.raw_weights.push_back(wv);
      }
      g.nodes.push_back(f);
      g.outputs = {"O"};
      return graph_execute(g, ins).at("O");
    };
    const Tensor a = build({{"A", 0.3}, {"B", 1.2}, {"C", 0.7}});
    const Tensor b = build({{"C", 0.7}, {"A", 0.3}, {"B", 1.2}});
    check("graph_fusion_order_invariance", a == b);
  }

  {  // default neck validates, simplify is idempotent, dims preserved
    Rng rng(Rng::mix(seed, 7));
    FusionGraph g = make_default_neck(1, 4, 16, 16);
    const auto rep = graph_validate(g);
    bool ok = rep.valid;
    const FusionGraph s1 = graph_simplify(g);
    const FusionGraph s2 = graph_simplify(s1);
    ok = ok && s1.nodes.size() == s2.nodes.size() && s2.nodes.size() == g.nodes.size();
    std::map<std::string, Tensor> ins{{"P3", random_tensor(rng, Shape4{1, 4, 16, 16})},
                                      {"P4", random_tensor(rng, Shape4{1, 4, 8, 8})},
                                      {"P5", random_tensor(rng, Shape4{1, 4, 4, 4})}};
    const auto outs = graph_execute(g, ins);
    ok = ok && outs.at("P3out").dims() == Shape4{1, 4, 16, 16} &&
         outs.at("P4out").dims() == Shape4{1, 4, 8, 8} &&
         outs.at("P5out").dims() == Shape4{1, 4, 4, 4};
    check("default_neck_valid_and_dim_preserving", ok);
  }

  {  // SimAM: gate range, deviation monotonicity, sign preservation
    Rng rng(Rng::mix(seed, 8));
    const SimAMConfig cfg{1e-4};
    bool ok = true;
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor x = random_tensor(rng, Shape4{1, 2, 4, 4}, 2.0);
      const auto field = simam_energy(x, cfg);
      const Tensor y = simam_forward(x, cfg);
      for (int c = 0; c < 2; ++c) {
        const double mu = field.mu_hat[static_cast<std::size_t>(c)];
        const float* e = field.e_star.plane_ptr(0, c);
        const float* xp = x.plane_ptr(0, c);
        const float* yp = y.plane_ptr(0, c);
        for (int i = 0; i < 16; ++i) {
          if (!(e[i] > 0)) ok = false;
          const double wgt = sigmoid(1.0 / e[i]);
          if (!(wgt > 0.5 && wgt < 1.0)) ok = false;
          if (xp[i] > 0 && !(yp[i] > 0)) ok = false;
          if (xp[i] < 0 && !(yp[i] < 0)) ok = false;
          if (xp[i] == 0 && yp[i] != 0) ok = false;
          for (int j = 0; j < 16; ++j) {
            const double di = std::abs(xp[i] - mu), dj = std::abs(xp[j] - mu);
            if (di > dj && !(e[i] < e[j])) ok = false;
          }
        }
      }
    }
    check("simam_gate_range_and_monotonicity", ok);
  }

  {  // SA structural laws
    Rng rng(Rng::mix(seed, 9));
    SAConfig cfg;
    cfg.groups = 2;
    cfg.shuffle_groups = 2;
    cfg.gn_delta = 1e-5;
    const Tensor x = random_tensor(rng, Shape4{1, 8, 4, 4});
    const SAWeights wts = SAWeights::defaults(2);
    const Tensor y = sa_forward(x, cfg, wts);
    bool ok = y.dims() == x.dims();

    // gates live in (0,1): compare pre-shuffle magnitudes channel by channel
    const Tensor pre = channel_shuffle(y, 8 / cfg.shuffle_groups);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const float xi = x[static_cast<std::size_t>(i)];
      const float pi = pre[static_cast<std::size_t>(i)];
      if (xi != 0.0f && !(std::abs(pi) < std::abs(xi))) ok = false;
    }

    // all-zero weights, trivial shuffle -> exactly x/2
    SAConfig plain = cfg;
    plain.shuffle_groups = 1;
    SAWeights zeros;
    zeros.w1.assign(2, 0.0f);
    zeros.b1.assign(2, 0.0f);
    zeros.w2.assign(2, 0.0f);
    zeros.b2.assign(2, 0.0f);
    const Tensor halved = sa_forward(x, plain, zeros);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      if (halved[static_cast<std::size_t>(i)] != 0.5f * x[static_cast<std::size_t>(i)]) ok = false;
    }

    // group independence through the shuffle permutation
    Tensor x2 = x;
    for (int c = 4; c < 8; ++c) {  // perturb group 1 only
      float* p = x2.plane_ptr(0, c);
      for (int i = 0; i < 16; ++i) p[i] += 1.0f;
    }
    const Tensor y2 = sa_forward(x2, cfg, wts);
    const auto perm = shuffle_permutation(8, cfg.shuffle_groups);
    for (int out_c = 0; out_c < 8; ++out_c) {
      const bool from_group1 = perm[out_c] >= 4;
      const float* a = y.plane_ptr(0, out_c);
      const float* b = y2.plane_ptr(0, out_c);
      bool same = true;
      for (int i = 0; i < 16; ++i) {
        if (a[i] != b[i]) same = false;
      }
      if (!from_group1 && !same) ok = false;
      if (from_group1 && same) ok = false;
    }
    check("sa_structural_laws", ok);
  }

  {  // metrics bookkeeping on random synthetic scenes
    Rng rng(Rng::mix(seed, 10));
    bool ok = true;
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<GTRecord> gts;
      std::vector<DetRecord> dets;
      const int classes = 3;
      for (int i = 0; i < 12; ++i) {
        GTRecord g;
        g.image = "im" + std::to_string(static_cast<int>(rng.uniform_int(0, 3)));
        g.class_id = static_cast<int>(rng.uniform_int(0, classes - 1));
        g.box = Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.15, 0.15};
        g.corners = to_corners(g.box);
        gts.push_back(g);
      }
      for (int i = 0; i < 15; ++i) {
        DetRecord d;
        d.image = "im" + std::to_string(static_cast<int>(rng.uniform_int(0, 3)));
        d.class_id = static_cast<int>(rng.uniform_int(0, classes - 1));
        d.box = Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.15, 0.15};
        d.corners = to_corners(d.box);
        d.score = rng.uniform();
        d.order = static_cast<std::size_t>(i);
        dets.push_back(d);
      }
      const auto rep = evaluate(dets, gts, 0.5, classes);
      for (const auto& ce : rep.per_class) {
        if (ce.tp + ce.fn != ce.gt_count) ok = false;
        if (ce.ap_defined && (ce.ap < 0.0 || ce.ap > 1.0)) ok = false;
        double prev_env = 1.0;
        std::vector<double> env(ce.curve.points.size());
        double running = 0.0;
        for (std::size_t i = ce.curve.points.size(); i-- > 0;) {
          running = std::max(running, ce.curve.points[i].precision);
          env[i] = running;
        }
        for (double e : env) {
          if (e > prev_env + 1e-12) ok = false;
          prev_env = e;
        }
      }
      // AP only depends on score order
      std::vector<DetRecord> squashed = dets;
      for (auto& d : squashed) d.score = d.score * d.score;  // strictly monotone on [0,1]
      const auto rep2 = evaluate(squashed, gts, 0.5, classes);
      for (int q = 0; q < classes; ++q) {
        if (rep.per_class[q].ap_defined &&
            std::abs(rep.per_class[q].ap - rep2.per_class[q].ap) > 1e-12) {
          ok = false;
        }
      }
    }
    check("metrics_bookkeeping", ok);
  }

  return results;
}

inline std::vector<SuiteResult> run_oracle_suite(std::uint64_t seed) {
  std::vector<SuiteResult> results;
  auto check = [&](const std::string& name, bool ok, const std::string& detail = "") {
    results.push_back({"oracle", name, ok, detail});
  };

  {  // analytic solution == exact normal-equation minimizer; sampling never wins
    bool ok = true;
    double worst = 0.0;
    const double lambdas[] = {1e-4, 1e-2, 0.1};
    for (int trial = 0; trial < 100 && ok; ++trial) {
      Rng rng(Rng::mix(seed, 200 + static_cast<std::uint64_t>(trial)));
      const int m = static_cast<int>(rng.uniform_int(4, 64));
      std::vector<double> channel(static_cast<std::size_t>(m));
      for (auto& v : channel) v = rng.normal();
      const double lambda = lambdas[trial % 3];
      const int t = static_cast<int>(rng.uniform_int(0, m - 1));
      const auto analytic = simam_analytic_min(channel, t, lambda);
      const auto exact = simam_oracle_min(channel, t, lambda, 10000, Rng::mix(seed, 777 + trial));
      worst = std::max({worst, std::abs(analytic.omega_t - exact.omega_t),
                        std::abs(analytic.b_t - exact.b_t)});
      if (std::abs(analytic.omega_t - exact.omega_t) > 1e-8) ok = false;
      if (std::abs(analytic.b_t - exact.b_t) > 1e-8) ok = false;
      if (std::abs(analytic.e_min - exact.e_min) > 1e-9) ok = false;
      if (!(exact.e_min <= 2.0 + 1e-12)) ok = false;  // (0,0) scores exactly 2
    }
    check("simam_analytic_matches_normal_equations", ok,
          "max |analytic - exact| = " + std::to_string(worst));
  }

  {  // closed-form energy with full statistics sharpens as M grows
    auto median_gap = [&](int m, std::uint64_t stream) {
      Rng rng(Rng::mix(seed, stream));
      std::vector<double> gaps;
      const double lambda = 1e-4;
      const int channels = 8;
      for (int c = 0; c < channels; ++c) {
        std::vector<double> channel(static_cast<std::size_t>(m));
        double sum = 0, sumsq = 0;
        for (auto& v : channel) {
          v = rng.normal();
          sum += v;
          sumsq += v * v;
        }
        const double mu = sum / m;
        const double var = sumsq / m - mu * mu;
        for (int t = 0; t < m; ++t) {
          const double dev = channel[static_cast<std::size_t>(t)] - mu;
          const double e5 = 4.0 * (var + lambda) / (dev * dev + 2.0 * var + 2.0 * lambda);
          const double exact = simam_exact_min_energy(channel[static_cast<std::size_t>(t)],
                                                      sum, sumsq, m, lambda);
          gaps.push_back(std::abs(e5 - exact));
        }
      }
      std::nth_element(gaps.begin(), gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2),
                       gaps.end());
      return gaps[gaps.size() / 2];
    };
    const double small_m = median_gap(64, 300);
    const double big_m = median_gap(6400, 301);
    check("simam_approximation_gap_shrinks",
          big_m < small_m,
          "median gap M=64: " + std::to_string(small_m) +
              ", M=6400: " + std::to_string(big_m));
  }

  {  // the chosen Eq.-7/Eq.-8 readings, pinned numerically
    Tensor x(1, 1, 1, 2);
    x.at(0, 0, 0, 0) = 1.0f;
    x.at(0, 0, 0, 1) = 3.0f;
    const Tensor spatial = sa_spatial_branch(x, std::vector<float>{1.0f},
                                             std::vector<float>{0.0f}, 1e-5);
    bool ok = std::abs(spatial.at(0, 0, 0, 0) - 0.268943) < 1e-5 &&
              std::abs(spatial.at(0, 0, 0, 1) - 2.193171) < 1e-5;
    Tensor ones(1, 1, 2, 2, 1.0f);
    const Tensor chan = sa_channel_branch(ones, std::vector<float>{1.0f},
                                          std::vector<float>{0.0f});
    for (std::int64_t i = 0; i < chan.size(); ++i) {
      if (std::abs(chan[static_cast<std::size_t>(i)] - 0.731059) > 1e-6) ok = false;
    }
    check("sa_gate_readings_pinned", ok);
  }

  {  // constant-channel law: e* = 2, gate = sigmoid(0.5)
    bool ok = true;
    for (double lambda : {1e-4, 1e-2, 1.0}) {
      Tensor x(1, 2, 3, 3, 4.25f);
      const auto field = simam_energy(x, SimAMConfig{lambda});
      const Tensor y = simam_forward(x, SimAMConfig{lambda});
      for (std::int64_t i = 0; i < field.e_star.size(); ++i) {
        if (std::abs(field.e_star[static_cast<std::size_t>(i)] - 2.0) > 1e-6) ok = false;
        if (std::abs(y[static_cast<std::size_t>(i)] - 0.622459 * 4.25) > 1e-5) ok = false;
      }
    }
    check("simam_constant_channel_law", ok);
  }

  return results;
}

inline std::vector<SuiteResult> run_grad_suite(int trials, double tol,
                                               std::uint64_t seed,
                                               const std::string& only_op = "") {
  std::vector<SuiteResult> results;
  for (const auto& [name, _] : gradcheck_registry()) {
    if (!only_op.empty() && name != only_op) continue;
    const GradCheckReport rep = check_op(name, trials, tol, seed);
    results.push_back({"grad", name, rep.pass,
                       "max rel " + std::to_string(rep.max_rel) + ", max abs " +
                           std::to_string(rep.max_abs)});
  }
  if (!only_op.empty() && results.empty()) {
    throw ConfigError("check: unregistered op \"" + only_op + "\"");
  }
  return results;
}

}  // namespace bss
