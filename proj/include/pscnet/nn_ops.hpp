#pragma once

// Structured neural operations over [C,H,W] tensors: grouped 2-D convolution,
// channel-axis 1-D convolution, batch normalization, pooling, bilinear
// resize, channel concatenation. Each op installs its backward rule on the
// active tape.
//
// Convolution is cross-correlation (no kernel flip) with "same" padding
// (k-1)*dilation/2, the standard deep-learning convention.

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pscnet/params.hpp"
#include "pscnet/tensor.hpp"

namespace pscnet {

enum class Mode { kTrain, kEval };

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <typename T>
inline void require_chw(const char* op, const Tensor<T>& x) {
  require(x.rank() == 3, std::string(op) + ": expected [C,H,W] input, got " + shape_str(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {},
                        int groups = 1, int dilation = 1) {
  detail::require_chw("conv2d", x);
  detail::require(weight.rank() == 4, "conv2d: weight must be [out,in/G,k,k], got " + shape_str(weight.shape()));
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  const int OC = weight.extent(0), ICG = weight.extent(1), K = weight.extent(2);
  detail::require(weight.extent(3) == K, "conv2d: kernel must be square, got " + shape_str(weight.shape()));
  detail::require(K % 2 == 1, "conv2d: kernel extent must be odd, got " + std::to_string(K));
  detail::require(groups >= 1 && dilation >= 1, "conv2d: groups and dilation must be positive");
  detail::require(OC % groups == 0,
                  "conv2d: out channels " + std::to_string(OC) + " not divisible by groups " + std::to_string(groups));
  detail::require(ICG * groups == C, "conv2d: input has " + std::to_string(C) + " channels, weight implies " +
                                         std::to_string(ICG * groups));
  if (bias.defined())
    detail::require(bias.numel() == OC, "conv2d: bias length " + std::to_string(bias.numel()) +
                                            " != out channels " + std::to_string(OC));

  const int pad = (K - 1) * dilation / 2;
  const int OCG = OC / groups;
  const int plane = H * W;
  Tensor<T> out({OC, H, W});
  const T* px = x.data();
  const T* pw = weight.data();
  T* po = out.data();
  if (bias.defined()) {
    const T* pb = bias.data();
    for (int oc = 0; oc < OC; ++oc) std::fill(po + oc * plane, po + (oc + 1) * plane, pb[oc]);
  }
  for (int g = 0; g < groups; ++g) {
    for (int ocg = 0; ocg < OCG; ++ocg) {
      const int oc = g * OCG + ocg;
      T* outp = po + oc * plane;
      for (int icg = 0; icg < ICG; ++icg) {
        const int ic = g * ICG + icg;
        const T* inp = px + ic * plane;
        const T* wtap = pw + (static_cast<long long>(oc) * ICG + icg) * K * K;
        for (int ky = 0; ky < K; ++ky) {
          for (int kx = 0; kx < K; ++kx) {
            const T w = wtap[ky * K + kx];
            const int dy = ky * dilation - pad, dx = kx * dilation - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            for (int y = y0; y < y1; ++y) {
              T* orow = outp + y * W;
              const T* irow = inp + (y + dy) * W + dx;
              for (int xx = x0; xx < x1; ++xx) orow[xx] += w * irow[xx];
            }
          }
        }
      }
    }
  }

  Tensor<T> xc = x, wc = weight, bc = bias, oc_t = out;
  detail::finalize_op("conv2d", bias.defined() ? std::initializer_list<Tensor<T>>{x, weight, bias}
                                               : std::initializer_list<Tensor<T>>{x, weight},
                      out, [xc, wc, bc, oc_t, groups, dilation, pad, K, ICG, OCG, H, W, plane]() {
                        const auto& g_out = oc_t.grad_raw();
                        const T* pg = g_out.data();
                        const T* px2 = xc.data();
                        const T* pw2 = wc.data();
                        T* gx = xc.requires_grad() ? xc.grad_raw().data() : nullptr;
                        T* gw = wc.requires_grad() ? wc.grad_raw().data() : nullptr;
                        T* gb = bc.defined() && bc.requires_grad() ? bc.grad_raw().data() : nullptr;
                        for (int grp = 0; grp < groups; ++grp) {
                          for (int ocg = 0; ocg < OCG; ++ocg) {
                            const int oc = grp * OCG + ocg;
                            const T* grow_base = pg + static_cast<long long>(oc) * plane;
                            if (gb) {
                              T s = 0;
                              for (int i = 0; i < plane; ++i) s += grow_base[i];
                              gb[oc] += s;
                            }
                            for (int icg = 0; icg < ICG; ++icg) {
                              const int ic = grp * ICG + icg;
                              const long long woff = (static_cast<long long>(oc) * ICG + icg) * K * K;
                              for (int ky = 0; ky < K; ++ky) {
                                for (int kx = 0; kx < K; ++kx) {
                                  const int dy = ky * dilation - pad, dx = kx * dilation - pad;
                                  const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
                                  const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                                  if (gx) {
                                    const T w = pw2[woff + ky * K + kx];
                                    for (int y = y0; y < y1; ++y) {
                                      const T* grow = grow_base + y * W;
                                      T* xrow = gx + ic * plane + (y + dy) * W + dx;
                                      for (int xx = x0; xx < x1; ++xx) xrow[xx] += w * grow[xx];
                                    }
                                  }
                                  if (gw) {
                                    T acc = 0;
                                    for (int y = y0; y < y1; ++y) {
                                      const T* grow = grow_base + y * W;
                                      const T* xrow = px2 + ic * plane + (y + dy) * W + dx;
                                      for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * xrow[xx];
                                    }
                                    gw[woff + ky * K + kx] += acc;
                                  }
                                }
                              }
                            }
                          }
                        }
                      });
  return out;
}

// ---------------------------------------------------------------------------
// conv1d over the channel axis (weights shared across positions, zero pad)

template <typename T>
inline Tensor<T> conv1d_channel(const Tensor<T>& s, const Tensor<T>& kernel) {
  detail::require(s.rank() == 1, "conv1d_channel: expected a vector, got " + shape_str(s.shape()));
  detail::require(kernel.rank() == 1, "conv1d_channel: kernel must be a vector");
  const int C = s.extent(0), K = kernel.extent(0);
  detail::require(K % 2 == 1, "conv1d_channel: kernel length must be odd, got " + std::to_string(K));
  const int pad = (K - 1) / 2;
  Tensor<T> out({C});
  const T* ps = s.data();
  const T* pk = kernel.data();
  T* po = out.data();
  for (int c = 0; c < C; ++c) {
    T acc = 0;
    for (int j = 0; j < K; ++j) {
      const int idx = c + j - pad;
      if (idx >= 0 && idx < C) acc += pk[j] * ps[idx];
    }
    po[c] = acc;
  }
  Tensor<T> sc = s, kc = kernel, oc = out;
  detail::finalize_op("conv1d_channel", {s, kernel}, out, [sc, kc, oc, C, K, pad]() {
    const auto& g = oc.grad_raw();
    const T* ps2 = sc.data();
    const T* pk2 = kc.data();
    T* gs = sc.requires_grad() ? sc.grad_raw().data() : nullptr;
    T* gk = kc.requires_grad() ? kc.grad_raw().data() : nullptr;
    for (int c = 0; c < C; ++c) {
      for (int j = 0; j < K; ++j) {
        const int idx = c + j - pad;
        if (idx < 0 || idx >= C) continue;
        if (gs) gs[idx] += pk2[j] * g[static_cast<size_t>(c)];
        if (gk) gk[j] += ps2[idx] * g[static_cast<size_t>(c)];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// batch normalization (batch size 1: statistics are per-image, per-channel)

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;                   // trainable
  Tensor<T> running_mean, running_var;     // buffers
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNormLayer() = default;
  BatchNormLayer(ModelParams<T>& params, const std::string& name, int channels) {
    gamma = params.add_parameter(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta = params.add_parameter(name + ".beta", Tensor<T>({channels}));
    running_mean = params.add_buffer(name + ".running_mean", Tensor<T>({channels}));
    running_var = params.add_buffer(name + ".running_var", Tensor<T>::full({channels}, T(1)));
  }
  int channels() const { return gamma.extent(0); }
};

// Train mode normalizes by the current input's spatial statistics (biased
// variance) and updates the running buffers; eval mode uses the buffers only.
template <typename T>
inline Tensor<T> batch_norm2d(const Tensor<T>& x, const BatchNormLayer<T>& bn, Mode mode) {
  detail::require_chw("batch_norm2d", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(C == bn.channels(), "batch_norm2d: input has " + std::to_string(C) + " channels, layer has " +
                                          std::to_string(bn.channels()));
  const int N = H * W;
  const T* px = x.data();
  const T* pgamma = bn.gamma.data();
  const T* pbeta = bn.beta.data();
  Tensor<T> out({C, H, W});
  T* po = out.data();

  std::vector<T> mean(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));
  if (mode == Mode::kTrain) {
    Tensor<T> rm = bn.running_mean, rv = bn.running_var;
    for (int c = 0; c < C; ++c) {
      const T* plane = px + static_cast<long long>(c) * N;
      T m = 0;
      for (int i = 0; i < N; ++i) m += plane[i];
      m /= static_cast<T>(N);
      T var = 0;
      for (int i = 0; i < N; ++i) {
        const T d = plane[i] - m;
        var += d * d;
      }
      var /= static_cast<T>(N);
      mean[static_cast<size_t>(c)] = m;
      inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(var + bn.eps);
      rm.raw()[static_cast<size_t>(c)] = (T(1) - bn.momentum) * rm.raw()[static_cast<size_t>(c)] + bn.momentum * m;
      rv.raw()[static_cast<size_t>(c)] = (T(1) - bn.momentum) * rv.raw()[static_cast<size_t>(c)] + bn.momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = bn.running_mean.raw()[static_cast<size_t>(c)];
      inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(bn.running_var.raw()[static_cast<size_t>(c)] + bn.eps);
    }
  }
  for (int c = 0; c < C; ++c) {
    const T* plane = px + static_cast<long long>(c) * N;
    T* oplane = po + static_cast<long long>(c) * N;
    const T m = mean[static_cast<size_t>(c)], inv = inv_std[static_cast<size_t>(c)];
    const T gmm = pgamma[c], bt = pbeta[c];
    for (int i = 0; i < N; ++i) oplane[i] = gmm * (plane[i] - m) * inv + bt;
  }

  Tensor<T> xc = x, gc = bn.gamma, bc = bn.beta, oc = out;
  detail::finalize_op("batch_norm2d", {x, bn.gamma, bn.beta}, out, [xc, gc, bc, oc, mean, inv_std, mode, C, N]() {
    const auto& g = oc.grad_raw();
    const T* px2 = xc.data();
    const T* pgamma2 = gc.data();
    T* gx = xc.requires_grad() ? xc.grad_raw().data() : nullptr;
    T* gg = gc.requires_grad() ? gc.grad_raw().data() : nullptr;
    T* gb = bc.requires_grad() ? bc.grad_raw().data() : nullptr;
    for (int c = 0; c < C; ++c) {
      const T* plane = px2 + static_cast<long long>(c) * N;
      const T* gplane = g.data() + static_cast<long long>(c) * N;
      const T m = mean[static_cast<size_t>(c)], inv = inv_std[static_cast<size_t>(c)];
      T sum_g = 0, sum_gx = 0;
      for (int i = 0; i < N; ++i) {
        sum_g += gplane[i];
        sum_gx += gplane[i] * (plane[i] - m) * inv;
      }
      if (gb) gb[c] += sum_g;
      if (gg) gg[c] += sum_gx;
      if (gx) {
        T* gxp = gx + static_cast<long long>(c) * N;
        const T scale = pgamma2[c] * inv;
        if (mode == Mode::kTrain) {
          const T mg = sum_g / static_cast<T>(N);
          const T mgx = sum_gx / static_cast<T>(N);
          for (int i = 0; i < N; ++i) {
            const T xhat = (plane[i] - m) * inv;
            gxp[i] += scale * (gplane[i] - mg - xhat * mgx);
          }
        } else {
          for (int i = 0; i < N; ++i) gxp[i] += scale * gplane[i];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// pooling and resize

// Output cell (i,j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh)) and the
// matching column window.
template <typename T>
inline Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int out_h, int out_w) {
  detail::require_chw("adaptive_avg_pool", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(out_h >= 1 && out_w >= 1, "adaptive_avg_pool: output extents must be positive");
  detail::require(out_h <= H && out_w <= W, "adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                                                std::to_string(out_w) + " exceeds input " + std::to_string(H) +
                                                "x" + std::to_string(W));
  Tensor<T> out({C, out_h, out_w});
  const T* px = x.data();
  T* po = out.data();
  auto win = [](int i, int n, int on) {
    return std::pair<int, int>{(i * n) / on, ((i + 1) * n + on - 1) / on};
  };
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < out_h; ++i) {
      auto [r0, r1] = win(i, H, out_h);
      for (int j = 0; j < out_w; ++j) {
        auto [c0, c1] = win(j, W, out_w);
        T acc = 0;
        for (int y = r0; y < r1; ++y)
          for (int xx = c0; xx < c1; ++xx) acc += px[(static_cast<long long>(c) * H + y) * W + xx];
        po[(static_cast<long long>(c) * out_h + i) * out_w + j] = acc / static_cast<T>((r1 - r0) * (c1 - c0));
      }
    }
  }
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("adaptive_avg_pool", {x}, out, [xc, oc, C, H, W, out_h, out_w]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    T* gx = xc.grad_raw().data();
    auto win = [](int i, int n, int on) {
      return std::pair<int, int>{(i * n) / on, ((i + 1) * n + on - 1) / on};
    };
    for (int c = 0; c < C; ++c) {
      for (int i = 0; i < out_h; ++i) {
        auto [r0, r1] = win(i, H, out_h);
        for (int j = 0; j < out_w; ++j) {
          auto [c0, c1] = win(j, W, out_w);
          const T share = g[(static_cast<size_t>(c) * out_h + i) * out_w + j] / static_cast<T>((r1 - r0) * (c1 - c0));
          for (int y = r0; y < r1; ++y)
            for (int xx = c0; xx < c1; ++xx) gx[(static_cast<long long>(c) * H + y) * W + xx] += share;
        }
      }
    }
  });
  return out;
}

namespace detail {

// Half-pixel-center source taps: output index i samples (i+0.5)*n/on - 0.5,
// clamped to [0, n-1].
struct LinearTap {
  int lo, hi;
  double frac;
};

inline std::vector<LinearTap> linear_taps(int n, int on) {
  std::vector<LinearTap> taps(static_cast<size_t>(on));
  for (int i = 0; i < on; ++i) {
    double src = (i + 0.5) * static_cast<double>(n) / on - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(n - 1));
    int lo = static_cast<int>(src);
    int hi = std::min(lo + 1, n - 1);
    taps[static_cast<size_t>(i)] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace detail

// Lerp form keeps constant fields bit-exact under any resize.
template <typename T>
inline Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  detail::require_chw("bilinear_resize", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: output extents must be positive");
  const auto ty = detail::linear_taps(H, out_h);
  const auto tx = detail::linear_taps(W, out_w);
  Tensor<T> out({C, out_h, out_w});
  const T* px = x.data();
  T* po = out.data();
  for (int c = 0; c < C; ++c) {
    const T* plane = px + static_cast<long long>(c) * H * W;
    T* oplane = po + static_cast<long long>(c) * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const auto& yt = ty[static_cast<size_t>(i)];
      const T fy = static_cast<T>(yt.frac);
      for (int j = 0; j < out_w; ++j) {
        const auto& xt = tx[static_cast<size_t>(j)];
        const T fx = static_cast<T>(xt.frac);
        const T a = plane[yt.lo * W + xt.lo], b = plane[yt.lo * W + xt.hi];
        const T c2 = plane[yt.hi * W + xt.lo], d = plane[yt.hi * W + xt.hi];
        const T top = a + fx * (b - a);
        const T bot = c2 + fx * (d - c2);
        oplane[i * out_w + j] = top + fy * (bot - top);
      }
    }
  }
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("bilinear_resize", {x}, out, [xc, oc, ty, tx, C, H, W, out_h, out_w]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    T* gx = xc.grad_raw().data();
    for (int c = 0; c < C; ++c) {
      T* gplane = gx + static_cast<long long>(c) * H * W;
      const T* goplane = g.data() + static_cast<long long>(c) * out_h * out_w;
      for (int i = 0; i < out_h; ++i) {
        const auto& yt = ty[static_cast<size_t>(i)];
        const T fy = static_cast<T>(yt.frac);
        for (int j = 0; j < out_w; ++j) {
          const auto& xt = tx[static_cast<size_t>(j)];
          const T fx = static_cast<T>(xt.frac);
          const T go = goplane[i * out_w + j];
          gplane[yt.lo * W + xt.lo] += go * (T(1) - fy) * (T(1) - fx);
          gplane[yt.lo * W + xt.hi] += go * (T(1) - fy) * fx;
          gplane[yt.hi * W + xt.lo] += go * fy * (T(1) - fx);
          gplane[yt.hi * W + xt.hi] += go * fy * fx;
        }
      }
    }
  });
  return out;
}

// Non-overlapping 2x2 max; gradient routes to the first maximum in row-major
// window order.
template <typename T>
inline Tensor<T> max_pool2(const Tensor<T>& x) {
  detail::require_chw("max_pool2", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(H % 2 == 0 && W % 2 == 0,
                  "max_pool2: spatial extents must be even, got " + std::to_string(H) + "x" + std::to_string(W));
  const int oh = H / 2, ow = W / 2;
  Tensor<T> out({C, oh, ow});
  std::vector<int> argmax(static_cast<size_t>(C) * oh * ow);
  const T* px = x.data();
  T* po = out.data();
  for (int c = 0; c < C; ++c) {
    const T* plane = px + static_cast<long long>(c) * H * W;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const int base = 2 * i * W + 2 * j;
        const std::array<int, 4> cand = {base, base + 1, base + W, base + W + 1};
        int best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (plane[cand[static_cast<size_t>(k)]] > plane[best]) best = cand[static_cast<size_t>(k)];
        po[(static_cast<long long>(c) * oh + i) * ow + j] = plane[best];
        argmax[(static_cast<size_t>(c) * oh + i) * ow + j] = best;
      }
    }
  }
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("max_pool2", {x}, out, [xc, oc, argmax, C, H, W, oh, ow]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    T* gx = xc.grad_raw().data();
    for (int c = 0; c < C; ++c) {
      T* gplane = gx + static_cast<long long>(c) * H * W;
      for (int i = 0; i < oh * ow; ++i)
        gplane[argmax[static_cast<size_t>(c * oh * ow + i)]] += g[static_cast<size_t>(c * oh * ow + i)];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// channel concatenation / slicing / spatial crop and pad

template <typename T>
inline Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts) detail::require_chw("concat_channels", p);
  const int H = parts[0].extent(1), W = parts[0].extent(2);
  int C = 0;
  for (const auto& p : parts) {
    detail::require(p.extent(1) == H && p.extent(2) == W,
                    "concat_channels: spatial mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    C += p.extent(0);
  }
  Tensor<T> out({C, H, W});
  T* po = out.data();
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.raw().begin(), p.raw().end(), po + off);
    off += p.raw().size();
  }
  std::vector<Tensor<T>> copies = parts;
  Tensor<T> oc = out;
  // finalize_op takes an initializer_list; route the variadic case manually.
  detail::check_finite("concat_channels", out);
  if (Tape<T>* tape = Tape<T>::current()) {
    bool tracked = false;
    for (const auto& p : copies) tracked = tracked || p.requires_grad();
    if (tracked) {
      for (const auto& p : copies)
        if (p.requires_grad()) p.ensure_grad();
      out.set_requires_grad(true);
      out.ensure_grad();
      tape->record("concat_channels", [copies, oc]() {
        const auto& g = oc.grad_raw();
        size_t off2 = 0;
        for (const auto& p : copies) {
          if (p.requires_grad()) {
            auto& gp = p.grad_raw();
            for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[off2 + i];
          }
          off2 += p.raw().size();
        }
      });
    }
  }
  return out;
}

template <typename T>
inline Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  return concat_channels(std::vector<Tensor<T>>{a, b});
}

template <typename T>
inline Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  detail::require_chw("slice_channels", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: invalid range [" + std::to_string(c0) + "," +
                                                     std::to_string(c1) + ") for " + std::to_string(C) + " channels");
  const int plane = H * W;
  Tensor<T> out({c1 - c0, H, W});
  std::copy(x.raw().begin() + static_cast<long long>(c0) * plane, x.raw().begin() + static_cast<long long>(c1) * plane,
            out.raw().begin());
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("slice_channels", {x}, out, [xc, oc, c0, plane]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    auto& gx = xc.grad_raw();
    const size_t base = static_cast<size_t>(c0) * plane;
    for (size_t i = 0; i < g.size(); ++i) gx[base + i] += g[i];
  });
  return out;
}

// Top-left spatial crop.
template <typename T>
inline Tensor<T> crop2d(const Tensor<T>& x, int out_h, int out_w) {
  detail::require_chw("crop2d", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(out_h >= 1 && out_h <= H && out_w >= 1 && out_w <= W,
                  "crop2d: crop " + std::to_string(out_h) + "x" + std::to_string(out_w) + " invalid for " +
                      std::to_string(H) + "x" + std::to_string(W));
  if (out_h == H && out_w == W) return sum(x, {});  // identity copy keeps op semantics uniform
  Tensor<T> out({C, out_h, out_w});
  const T* px = x.data();
  T* po = out.data();
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < out_h; ++i)
      std::copy(px + (static_cast<long long>(c) * H + i) * W, px + (static_cast<long long>(c) * H + i) * W + out_w,
                po + (static_cast<long long>(c) * out_h + i) * out_w);
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("crop2d", {x}, out, [xc, oc, C, H, W, out_h, out_w]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    T* gx = xc.grad_raw().data();
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j)
          gx[(static_cast<long long>(c) * H + i) * W + j] += g[(static_cast<size_t>(c) * out_h + i) * out_w + j];
  });
  return out;
}

// Zero pad on the bottom/right up to the target extents.
template <typename T>
inline Tensor<T> pad2d_br(const Tensor<T>& x, int out_h, int out_w) {
  detail::require_chw("pad2d_br", x);
  const int C = x.extent(0), H = x.extent(1), W = x.extent(2);
  detail::require(out_h >= H && out_w >= W, "pad2d_br: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                                " smaller than input " + std::to_string(H) + "x" + std::to_string(W));
  if (out_h == H && out_w == W) return sum(x, {});
  Tensor<T> out({C, out_h, out_w});
  const T* px = x.data();
  T* po = out.data();
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      std::copy(px + (static_cast<long long>(c) * H + i) * W, px + (static_cast<long long>(c) * H + i) * W + W,
                po + (static_cast<long long>(c) * out_h + i) * out_w);
  Tensor<T> xc = x, oc = out;
  detail::finalize_op("pad2d_br", {x}, out, [xc, oc, C, H, W, out_h, out_w]() {
    if (!xc.requires_grad()) return;
    const auto& g = oc.grad_raw();
    T* gx = xc.grad_raw().data();
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          gx[(static_cast<long long>(c) * H + i) * W + j] += g[(static_cast<size_t>(c) * out_h + i) * out_w + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// layers

template <typename T>
inline void fill_uniform(Tensor<T>& t, T bound, std::mt19937& rng) {
  std::uniform_real_distribution<T> dist(-bound, bound);
  for (auto& v : t.raw()) v = dist(rng);
}

// Same-padded square convolution; weights uniform in +-1/sqrt(fan_in), bias
// zero-initialized.
template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer feeds a batch norm
  int groups = 1;
  int dilation = 1;

  Conv2dLayer() = default;
  Conv2dLayer(ModelParams<T>& params, const std::string& name, int in_ch, int out_ch, int k, int groups_,
              bool with_bias, std::mt19937& rng, int dilation_ = 1)
      : groups(groups_), dilation(dilation_) {
    detail::require(in_ch % groups == 0 && out_ch % groups == 0,
                    name + ": groups " + std::to_string(groups) + " must divide channels " + std::to_string(in_ch) +
                        "->" + std::to_string(out_ch));
    Tensor<T> w({out_ch, in_ch / groups, k, k});
    const T bound = T(1) / std::sqrt(static_cast<T>(in_ch / groups) * k * k);
    fill_uniform(w, bound, rng);
    weight = params.add_parameter(name + ".weight", w);
    if (with_bias) bias = params.add_parameter(name + ".bias", Tensor<T>({out_ch}));
  }

  int in_channels() const { return weight.extent(1) * groups; }
  int out_channels() const { return weight.extent(0); }
  int kernel() const { return weight.extent(2); }
  long long parameter_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, groups, dilation); }
};

// Conv (no bias) -> batch norm -> ReLU, the block used throughout the PSM.
template <typename T>
struct ConvBnRelu {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  ConvBnRelu() = default;
  ConvBnRelu(ModelParams<T>& params, const std::string& name, int in_ch, int out_ch, int k, int groups,
             std::mt19937& rng)
      : conv(params, name, in_ch, out_ch, k, groups, /*with_bias=*/false, rng),
        bn(params, name + ".bn", out_ch) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const { return relu(batch_norm2d(conv.forward(x), bn, mode)); }
};

}  // namespace pscnet
