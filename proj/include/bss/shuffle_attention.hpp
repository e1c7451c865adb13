// Shuffle Attention. Channels are split into K groups; each group is halved
// into a channel-attention branch (GAP + per-channel scale + sigmoid gate)
// and a spatial-attention branch (per-channel GN + affine + sigmoid gate).
// Halves are concatenated back and a channel shuffle mixes the groups.
//
// The branch parameters are shared across groups: four vectors of length
// C/2K, applied per local channel.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bss/errors.hpp"
#include "bss/ops.hpp"
#include "bss/parallel.hpp"
#include "bss/tensor.hpp"
#include "bss/tensor_io.hpp"

#include <nlohmann/json.hpp>

namespace bss {

struct SAConfig {
  int groups = 1;          // K
  double gn_delta = 1e-5;  // GN epsilon in the spatial branch
  int shuffle_groups = 2;  // final channel shuffle
};

template <typename T>
struct SAWeightsT {
  std::vector<T> w1, b1;  // channel branch scale / bias
  std::vector<T> w2, b2;  // spatial branch affine

  // w=1, b=0: deterministic, non-degenerate defaults so an untrained forward
  // pass still exercises both gates.
  static SAWeightsT defaults(int len) {
    SAWeightsT w;
    w.w1.assign(len, T(1));
    w.b1.assign(len, T(0));
    w.w2.assign(len, T(1));
    w.b2.assign(len, T(0));
    return w;
  }
};

using SAWeights = SAWeightsT<float>;

namespace detail {

inline void check_sa_config(const Shape4& d, const SAConfig& cfg) {
  if (cfg.groups < 1) throw ConfigError("sa: groups must be >= 1");
  if (d.c % (2 * cfg.groups) != 0) {
    throw ConfigError("sa: 2*groups=" + std::to_string(2 * cfg.groups) +
                      " must divide C=" + std::to_string(d.c));
  }
  if (cfg.shuffle_groups < 1 || d.c % cfg.shuffle_groups != 0) {
    throw ConfigError("sa: shuffle_groups must divide C=" + std::to_string(d.c));
  }
  if (!(cfg.gn_delta > 0.0)) throw ConfigError("sa: gn_delta must be > 0");
}

template <typename T>
void check_sa_weights(const SAWeightsT<T>& w, int len) {
  if (static_cast<int>(w.w1.size()) != len || static_cast<int>(w.b1.size()) != len ||
      static_cast<int>(w.w2.size()) != len || static_cast<int>(w.b2.size()) != len) {
    throw ConfigError("sa: weight vectors must have length C/2K=" + std::to_string(len));
  }
}

template <typename T>
TensorT<T> channel_slice(const TensorT<T>& x, int c0, int count) {
  const Shape4 d = x.dims();
  TensorT<T> out(d.n, count, d.h, d.w);
  const std::int64_t m = d.plane();
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < count; ++c) {
      const T* src = x.plane_ptr(n, c0 + c);
      T* dst = out.plane_ptr(n, c);
      for (std::int64_t i = 0; i < m; ++i) dst[i] = src[i];
    }
  }
  return out;
}

template <typename T>
void channel_paste(TensorT<T>& dst, const TensorT<T>& src, int c0) {
  const std::int64_t m = dst.dims().plane();
  for (int n = 0; n < dst.dims().n; ++n) {
    for (int c = 0; c < src.dims().c; ++c) {
      const T* s = src.plane_ptr(n, c);
      T* d = dst.plane_ptr(n, c0 + c);
      for (std::int64_t i = 0; i < m; ++i) d[i] = s[i];
    }
  }
}

}  // namespace detail

// K groups of C/K contiguous channels, each halved into (channel-branch,
// spatial-branch) sub-tensors. Concatenating the halves back in order
// reproduces the input exactly.
template <typename T>
std::vector<std::pair<TensorT<T>, TensorT<T>>> sa_split(const TensorT<T>& x,
                                                        const SAConfig& cfg) {
  detail::check_sa_config(x.dims(), cfg);
  const int per_group = x.dims().c / cfg.groups;
  const int half = per_group / 2;
  std::vector<std::pair<TensorT<T>, TensorT<T>>> out;
  out.reserve(cfg.groups);
  for (int k = 0; k < cfg.groups; ++k) {
    out.emplace_back(detail::channel_slice(x, k * per_group, half),
                     detail::channel_slice(x, k * per_group + half, half));
  }
  return out;
}

// X' = sigmoid(w1 .* GAP(X) + b1) .* X, gate spatially constant per channel.
template <typename T>
TensorT<T> sa_channel_branch(const TensorT<T>& x, const std::vector<T>& w1,
                             const std::vector<T>& b1) {
  const Shape4 d = x.dims();
  if (static_cast<int>(w1.size()) != d.c || static_cast<int>(b1.size()) != d.c) {
    throw ConfigError("sa_channel_branch: parameter length != channels");
  }
  const TensorT<T> g = global_avg_pool(x);
  TensorT<T> out(d);
  const std::int64_t m = d.plane();
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int c = static_cast<int>(p) % d.c;
    const double gate = sigmoid(static_cast<double>(w1[c]) *
                                    static_cast<double>(g.at(n, c, 0, 0)) +
                                static_cast<double>(b1[c]));
    const T* src = x.plane_ptr(n, c);
    T* dst = out.plane_ptr(n, c);
    for (std::int64_t i = 0; i < m; ++i) {
      dst[i] = static_cast<T>(gate * static_cast<double>(src[i]));
    }
  });
  return out;
}

// X' = sigmoid(w2 .* GN(X) + b2) .* X with one channel per GN group, so the
// gate varies per pixel.
template <typename T>
TensorT<T> sa_spatial_branch(const TensorT<T>& x, const std::vector<T>& w2,
                             const std::vector<T>& b2, double gn_delta) {
  const Shape4 d = x.dims();
  if (static_cast<int>(w2.size()) != d.c || static_cast<int>(b2.size()) != d.c) {
    throw ConfigError("sa_spatial_branch: parameter length != channels");
  }
  const TensorT<T> z = group_norm(x, d.c, gn_delta);
  TensorT<T> out(d);
  const std::int64_t m = d.plane();
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int c = static_cast<int>(p) % d.c;
    const T* src = x.plane_ptr(n, c);
    const T* zp = z.plane_ptr(n, c);
    T* dst = out.plane_ptr(n, c);
    for (std::int64_t i = 0; i < m; ++i) {
      const double gate = sigmoid(static_cast<double>(w2[c]) * static_cast<double>(zp[i]) +
                                  static_cast<double>(b2[c]));
      dst[i] = static_cast<T>(gate * static_cast<double>(src[i]));
    }
  });
  return out;
}

template <typename T>
TensorT<T> sa_forward(const TensorT<T>& x, const SAConfig& cfg,
                      const SAWeightsT<T>& wts) {
  detail::check_sa_config(x.dims(), cfg);
  const int per_group = x.dims().c / cfg.groups;
  const int half = per_group / 2;
  detail::check_sa_weights(wts, half);
  TensorT<T> pre(x.dims());
  parallel_for(static_cast<std::size_t>(cfg.groups), [&](std::size_t k) {
    const int c0 = static_cast<int>(k) * per_group;
    const TensorT<T> x1 = detail::channel_slice(x, c0, half);
    const TensorT<T> x2 = detail::channel_slice(x, c0 + half, half);
    detail::channel_paste(pre, sa_channel_branch(x1, wts.w1, wts.b1), c0);
    detail::channel_paste(pre, sa_spatial_branch(x2, wts.w2, wts.b2, cfg.gn_delta),
                          c0 + half);
  });
  return channel_shuffle(pre, cfg.shuffle_groups);
}

template <typename T>
struct SAGrads {
  TensorT<T> dx;
  SAWeightsT<T> dwts;
};

template <typename T>
SAGrads<T> sa_backward(const TensorT<T>& x, const SAConfig& cfg,
                       const SAWeightsT<T>& wts, const TensorT<T>& upstream) {
  require_same_dims(x, upstream, "sa_backward");
  detail::check_sa_config(x.dims(), cfg);
  const Shape4 d = x.dims();
  const int per_group = d.c / cfg.groups;
  const int half = per_group / 2;
  detail::check_sa_weights(wts, half);

  // Undo the final shuffle: shuffling with C/g applies the inverse
  // permutation, which is exactly the gradient of a channel permutation.
  const TensorT<T> up = channel_shuffle(upstream, d.c / cfg.shuffle_groups);

  SAGrads<T> out{TensorT<T>(d), SAWeightsT<T>{
                                    std::vector<T>(half, T(0)), std::vector<T>(half, T(0)),
                                    std::vector<T>(half, T(0)), std::vector<T>(half, T(0))}};
  const std::int64_t m = d.plane();
  const double md = static_cast<double>(m);

  for (int k = 0; k < cfg.groups; ++k) {
    const int c0 = k * per_group;
    // Channel branch: y = s * x with s = sigmoid(w1 * mean(x) + b1).
    for (int c = 0; c < half; ++c) {
      for (int n = 0; n < d.n; ++n) {
        const T* src = x.plane_ptr(n, c0 + c);
        const T* u = up.plane_ptr(n, c0 + c);
        T* dst = out.dx.plane_ptr(n, c0 + c);
        double g = 0.0;
        for (std::int64_t i = 0; i < m; ++i) g += static_cast<double>(src[i]);
        g /= md;
        const double s = sigmoid(static_cast<double>(wts.w1[c]) * g +
                                 static_cast<double>(wts.b1[c]));
        const double sds = s * (1.0 - s);
        double ux = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
          ux += static_cast<double>(u[i]) * static_cast<double>(src[i]);
        }
        const double common = sds * ux;
        for (std::int64_t i = 0; i < m; ++i) {
          dst[i] = static_cast<T>(s * static_cast<double>(u[i]) +
                                  common * static_cast<double>(wts.w1[c]) / md);
        }
        out.dwts.w1[c] = static_cast<T>(static_cast<double>(out.dwts.w1[c]) + common * g);
        out.dwts.b1[c] = static_cast<T>(static_cast<double>(out.dwts.b1[c]) + common);
      }
    }
    // Spatial branch: y = t .* x with t = sigmoid(w2 * z + b2), z per-channel GN.
    for (int c = 0; c < half; ++c) {
      for (int n = 0; n < d.n; ++n) {
        const T* src = x.plane_ptr(n, c0 + half + c);
        const T* u = up.plane_ptr(n, c0 + half + c);
        T* dst = out.dx.plane_ptr(n, c0 + half + c);
        double mean = 0.0;
        for (std::int64_t i = 0; i < m; ++i) mean += static_cast<double>(src[i]);
        mean /= md;
        double var = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
          const double dv = static_cast<double>(src[i]) - mean;
          var += dv * dv;
        }
        var /= md;
        const double r = std::sqrt(var + cfg.gn_delta);
        const double w2 = static_cast<double>(wts.w2[c]);
        const double b2 = static_cast<double>(wts.b2[c]);
        // a_q = u_q x_q t_q (1 - t_q) w2 collects the gate sensitivity; the
        // GN coupling mirrors group_norm_backward.
        double a_sum = 0.0, az_sum = 0.0, dw2 = 0.0, db2 = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
          const double z = (static_cast<double>(src[i]) - mean) / r;
          const double t = sigmoid(w2 * z + b2);
          const double uxt = static_cast<double>(u[i]) * static_cast<double>(src[i]) *
                             t * (1.0 - t);
          a_sum += uxt * w2;
          az_sum += uxt * w2 * z;
          dw2 += uxt * z;
          db2 += uxt;
        }
        for (std::int64_t i = 0; i < m; ++i) {
          const double z = (static_cast<double>(src[i]) - mean) / r;
          const double t = sigmoid(w2 * z + b2);
          const double a = static_cast<double>(u[i]) * static_cast<double>(src[i]) *
                           t * (1.0 - t) * w2;
          const double grad = static_cast<double>(u[i]) * t + a / r -
                              a_sum / (md * r) - z * az_sum / (md * r);
          dst[i] = static_cast<T>(grad);
        }
        out.dwts.w2[c] = static_cast<T>(static_cast<double>(out.dwts.w2[c]) + dw2);
        out.dwts.b2[c] = static_cast<T>(static_cast<double>(out.dwts.b2[c]) + db2);
      }
    }
  }
  return out;
}

// Weights directory: manifest.json naming four rank-1 BST1 vectors.
//   {"w1": "w1.bst", "b1": "b1.bst", "w2": "w2.bst", "b2": "b2.bst"}
inline SAWeights load_sa_weights(const std::filesystem::path& dir, int expected_len) {
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  auto load_vec = [&](const char* key) {
    if (!manifest.contains(key)) {
      throw ParseError(manifest_path.string() + ": missing key \"" + key + "\"");
    }
    const auto file = dir / manifest.at(key).get<std::string>();
    auto v = vector_from_bst(bst_read(file), file.string());
    if (static_cast<int>(v.size()) != expected_len) {
      throw ConfigError(file.string() + ": expected length " +
                        std::to_string(expected_len) + ", got " +
                        std::to_string(v.size()));
    }
    for (float f : v) {
      if (!std::isfinite(f)) throw ConfigError(file.string() + ": non-finite value");
    }
    return v;
  };
  SAWeights w;
  w.w1 = load_vec("w1");
  w.b1 = load_vec("b1");
  w.w2 = load_vec("w2");
  w.b2 = load_vec("b2");
  return w;
}

}  // namespace bss
