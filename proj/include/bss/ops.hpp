// Primitive operators the attention and fusion mechanisms are built from.
// All of them are pure; reductions run in double with a fixed sequential
// order, and any internal parallelism splits only across units whose outputs
// are disjoint.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bss/errors.hpp"
#include "bss/parallel.hpp"
#include "bss/tensor.hpp"

namespace bss {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Mean over each (n, c) plane -> [N, C, 1, 1].
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  const Shape4 d = x.dims();
  TensorT<T> out(d.n, d.c, 1, 1);
  const std::int64_t m = d.plane();
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int c = static_cast<int>(p) % d.c;
    const T* src = x.plane_ptr(n, c);
    double acc = 0.0;
    for (std::int64_t i = 0; i < m; ++i) acc += static_cast<double>(src[i]);
    out.at(n, c, 0, 0) = static_cast<T>(acc / static_cast<double>(m));
  });
  return out;
}

// (x - mu_g) / sqrt(var_g + delta) per sample and channel group; biased
// variance, no affine term.
template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, int groups, double delta) {
  const Shape4 d = x.dims();
  if (groups < 1 || d.c % groups != 0) {
    throw ConfigError("group_norm: groups " + std::to_string(groups) +
                      " does not divide C=" + std::to_string(d.c));
  }
  const int per = d.c / groups;
  const std::int64_t m = static_cast<std::int64_t>(per) * d.plane();
  TensorT<T> out(d);
  parallel_for(static_cast<std::size_t>(d.n) * groups, [&](std::size_t p) {
    const int n = static_cast<int>(p) / groups;
    const int g = static_cast<int>(p) % groups;
    const T* src = x.plane_ptr(n, g * per);
    T* dst = out.plane_ptr(n, g * per);
    double mean = 0.0;
    for (std::int64_t i = 0; i < m; ++i) mean += static_cast<double>(src[i]);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double dv = static_cast<double>(src[i]) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(m);
    const double inv = 1.0 / std::sqrt(var + delta);
    for (std::int64_t i = 0; i < m; ++i) {
      dst[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * inv);
    }
  });
  return out;
}

// dL/dx for y = group_norm(x): (u - mean(u) - z * mean(u*z)) / r per group.
template <typename T>
TensorT<T> group_norm_backward(const TensorT<T>& x, int groups, double delta,
                               const TensorT<T>& upstream) {
  require_same_dims(x, upstream, "group_norm_backward");
  const Shape4 d = x.dims();
  if (groups < 1 || d.c % groups != 0) {
    throw ConfigError("group_norm_backward: groups " + std::to_string(groups) +
                      " does not divide C=" + std::to_string(d.c));
  }
  const int per = d.c / groups;
  const std::int64_t m = static_cast<std::int64_t>(per) * d.plane();
  TensorT<T> out(d);
  parallel_for(static_cast<std::size_t>(d.n) * groups, [&](std::size_t p) {
    const int n = static_cast<int>(p) / groups;
    const int g = static_cast<int>(p) % groups;
    const T* src = x.plane_ptr(n, g * per);
    const T* up = upstream.plane_ptr(n, g * per);
    T* dst = out.plane_ptr(n, g * per);
    double mean = 0.0;
    for (std::int64_t i = 0; i < m; ++i) mean += static_cast<double>(src[i]);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double dv = static_cast<double>(src[i]) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(m);
    const double r = std::sqrt(var + delta);
    double u_mean = 0.0;
    double uz_mean = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double z = (static_cast<double>(src[i]) - mean) / r;
      u_mean += static_cast<double>(up[i]);
      uz_mean += static_cast<double>(up[i]) * z;
    }
    u_mean /= static_cast<double>(m);
    uz_mean /= static_cast<double>(m);
    for (std::int64_t i = 0; i < m; ++i) {
      const double z = (static_cast<double>(src[i]) - mean) / r;
      dst[i] = static_cast<T>((static_cast<double>(up[i]) - u_mean - z * uz_mean) / r);
    }
  });
  return out;
}

// out[j] = in[perm[j]]: view C as (groups, C/groups), transpose, flatten.
inline std::vector<int> shuffle_permutation(int channels, int groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError("channel_shuffle: groups " + std::to_string(groups) +
                      " does not divide C=" + std::to_string(channels));
  }
  const int per = channels / groups;
  std::vector<int> perm(channels);
  for (int j = 0; j < channels; ++j) {
    const int row = j / groups;   // index within source group
    const int col = j % groups;   // source group
    perm[j] = col * per + row;
  }
  return perm;
}

template <typename T>
TensorT<T> permute_channels(const TensorT<T>& x, const std::vector<int>& perm) {
  const Shape4 d = x.dims();
  if (static_cast<int>(perm.size()) != d.c) {
    throw ConfigError("permute_channels: permutation length mismatch");
  }
  TensorT<T> out(d);
  const std::int64_t m = d.plane();
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int j = static_cast<int>(p) % d.c;
    const T* src = x.plane_ptr(n, perm[j]);
    T* dst = out.plane_ptr(n, j);
    for (std::int64_t i = 0; i < m; ++i) dst[i] = src[i];
  });
  return out;
}

template <typename T>
TensorT<T> channel_shuffle(const TensorT<T>& x, int groups) {
  return permute_channels(x, shuffle_permutation(x.dims().c, groups));
}

enum class Resample { none, up2, down2 };

inline const char* resample_name(Resample r) {
  switch (r) {
    case Resample::none: return "none";
    case Resample::up2: return "up2";
    case Resample::down2: return "down2";
  }
  return "?";
}

// up2: nearest-neighbor x2. down2: 2x2 max-pool, stride 2 (even H, W only).
template <typename T>
TensorT<T> resample(const TensorT<T>& x, Resample mode) {
  const Shape4 d = x.dims();
  if (mode == Resample::none) return x;
  if (mode == Resample::up2) {
    TensorT<T> out(d.n, d.c, d.h * 2, d.w * 2);
    parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
      const int n = static_cast<int>(p) / d.c;
      const int c = static_cast<int>(p) % d.c;
      for (int y = 0; y < d.h; ++y) {
        for (int xx = 0; xx < d.w; ++xx) {
          const T v = x.at(n, c, y, xx);
          out.at(n, c, 2 * y, 2 * xx) = v;
          out.at(n, c, 2 * y, 2 * xx + 1) = v;
          out.at(n, c, 2 * y + 1, 2 * xx) = v;
          out.at(n, c, 2 * y + 1, 2 * xx + 1) = v;
        }
      }
    });
    return out;
  }
  if (d.h % 2 != 0 || d.w % 2 != 0) {
    throw ShapeError("down2 requires even H and W, got " + d.str());
  }
  TensorT<T> out(d.n, d.c, d.h / 2, d.w / 2);
  parallel_for(static_cast<std::size_t>(d.n) * d.c, [&](std::size_t p) {
    const int n = static_cast<int>(p) / d.c;
    const int c = static_cast<int>(p) % d.c;
    for (int y = 0; y < d.h / 2; ++y) {
      for (int xx = 0; xx < d.w / 2; ++xx) {
        T m = x.at(n, c, 2 * y, 2 * xx);
        m = std::max(m, x.at(n, c, 2 * y, 2 * xx + 1));
        m = std::max(m, x.at(n, c, 2 * y + 1, 2 * xx));
        m = std::max(m, x.at(n, c, 2 * y + 1, 2 * xx + 1));
        out.at(n, c, y, xx) = m;
      }
    }
  });
  return out;
}

// 1x1 convolution: per pixel, out = weight * in + bias. weight is
// out_channels x in_channels, row-major.
template <typename T>
struct ConvSpec {
  int out_channels = 0;
  int in_channels = 0;
  std::vector<T> weight;  // out_channels * in_channels
  std::vector<T> bias;    // out_channels

  static ConvSpec identity(int channels) {
    ConvSpec s;
    s.out_channels = channels;
    s.in_channels = channels;
    s.weight.assign(static_cast<std::size_t>(channels) * channels, T(0));
    for (int i = 0; i < channels; ++i) s.weight[static_cast<std::size_t>(i) * channels + i] = T(1);
    s.bias.assign(channels, T(0));
    return s;
  }

  void validate() const {
    if (out_channels < 1 || in_channels < 1) {
      throw ConfigError("pointwise conv: channel counts must be >= 1");
    }
    if (weight.size() != static_cast<std::size_t>(out_channels) * in_channels) {
      throw ShapeError("pointwise conv: weight is not out_channels x in_channels");
    }
    if (bias.size() != static_cast<std::size_t>(out_channels)) {
      throw ShapeError("pointwise conv: bias length != out_channels");
    }
  }
};

template <typename T>
TensorT<T> pointwise_conv(const TensorT<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  const Shape4 d = x.dims();
  if (spec.in_channels != d.c) {
    throw ShapeError("pointwise conv: weight expects Cin=" +
                     std::to_string(spec.in_channels) + ", input has C=" +
                     std::to_string(d.c));
  }
  TensorT<T> out(d.n, spec.out_channels, d.h, d.w);
  const std::int64_t m = d.plane();
  parallel_for(static_cast<std::size_t>(d.n) * spec.out_channels, [&](std::size_t p) {
    const int n = static_cast<int>(p) / spec.out_channels;
    const int co = static_cast<int>(p) % spec.out_channels;
    const T* wrow = spec.weight.data() + static_cast<std::size_t>(co) * d.c;
    T* dst = out.plane_ptr(n, co);
    for (std::int64_t i = 0; i < m; ++i) {
      double acc = static_cast<double>(spec.bias[co]);
      for (int ci = 0; ci < d.c; ++ci) {
        acc += static_cast<double>(wrow[ci]) *
               static_cast<double>(x.plane_ptr(n, ci)[i]);
      }
      dst[i] = static_cast<T>(acc);
    }
  });
  return out;
}

template <typename T>
struct PointwiseConvGrads {
  TensorT<T> dx;
  std::vector<T> dweight;
  std::vector<T> dbias;
};

template <typename T>
PointwiseConvGrads<T> pointwise_conv_backward(const TensorT<T>& x,
                                              const ConvSpec<T>& spec,
                                              const TensorT<T>& upstream) {
  spec.validate();
  const Shape4 d = x.dims();
  if (spec.in_channels != d.c) {
    throw ShapeError("pointwise conv backward: Cin mismatch");
  }
  const Shape4 ud = upstream.dims();
  if (!(ud == Shape4{d.n, spec.out_channels, d.h, d.w})) {
    throw ShapeError("pointwise conv backward: upstream dims " + ud.str());
  }
  PointwiseConvGrads<T> g{TensorT<T>(d), std::vector<T>(spec.weight.size(), T(0)),
                          std::vector<T>(spec.bias.size(), T(0))};
  const std::int64_t m = d.plane();
  for (int n = 0; n < d.n; ++n) {
    for (int co = 0; co < spec.out_channels; ++co) {
      const T* up = upstream.plane_ptr(n, co);
      const T* wrow = spec.weight.data() + static_cast<std::size_t>(co) * d.c;
      double dbias_acc = static_cast<double>(g.dbias[co]);
      for (int ci = 0; ci < d.c; ++ci) {
        const T* src = x.plane_ptr(n, ci);
        T* dxp = g.dx.plane_ptr(n, ci);
        double dw_acc = static_cast<double>(
            g.dweight[static_cast<std::size_t>(co) * d.c + ci]);
        for (std::int64_t i = 0; i < m; ++i) {
          dxp[i] = static_cast<T>(static_cast<double>(dxp[i]) +
                                  static_cast<double>(wrow[ci]) *
                                      static_cast<double>(up[i]));
          dw_acc += static_cast<double>(up[i]) * static_cast<double>(src[i]);
        }
        g.dweight[static_cast<std::size_t>(co) * d.c + ci] = static_cast<T>(dw_acc);
      }
      for (std::int64_t i = 0; i < m; ++i) dbias_acc += static_cast<double>(up[i]);
      g.dbias[co] = static_cast<T>(dbias_acc);
    }
  }
  return g;
}

template <typename T>
TensorT<T> sigmoid_map(const TensorT<T>& x) {
  TensorT<T> out(x.dims());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<T>(sigmoid(static_cast<double>(x[i])));
  }
  return out;
}

template <typename T>
TensorT<T> silu_map(const TensorT<T>& x) {
  TensorT<T> out(x.dims());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double v = static_cast<double>(x[i]);
    out[i] = static_cast<T>(v * sigmoid(v));
  }
  return out;
}

}  // namespace bss
