#pragma once

// End-to-end network: backbone (stride 16) -> x2 bilinear upsample -> PSM ->
// GCM gate -> regression head (3x3, 3x3, 1x1) -> absolute value. The density
// map comes out at stride 8 with one channel.
//
// Submodules draw from separate seeded generators, so toggling use_gcm does
// not shift the initialization of anything else; a zero-init GCM model and a
// GCM-free model start bit-identical.

#include <cstdint>
#include <random>

#include "pscnet/backbone.hpp"
#include "pscnet/gcm.hpp"
#include "pscnet/nn_ops.hpp"
#include "pscnet/params.hpp"
#include "pscnet/psm.hpp"

namespace pscnet {

struct PscnetConfig {
  double width_scale = 1.0;
  bool use_gcm = true;
  GcmGate gcm_gate = GcmGate::kResidual;
  double gcm_eps = 1e-4;
};

template <typename T>
struct PaddedImage {
  Tensor<T> image;
  int orig_h = 0;
  int orig_w = 0;
};

// Zero-pads bottom/right to the next multiple of 16. Annotation coordinates
// refer to the top-left origin and stay valid. Aligned input passes through
// without copying.
template <typename T>
inline PaddedImage<T> pad_to_stride(const Tensor<T>& image) {
  detail::require_chw("pad_to_stride", image);
  const int H = image.extent(1), W = image.extent(2);
  const int ph = (H + 15) / 16 * 16, pw = (W + 15) / 16 * 16;
  if (ph == H && pw == W) return {image, H, W};
  return {pad2d_br(image, ph, pw), H, W};
}

// Density cells covering the unpadded image: ceil(extent / 8) per axis.
template <typename T>
inline Tensor<T> crop_density(const Tensor<T>& density, int orig_h, int orig_w) {
  return crop2d(density, (orig_h + 7) / 8, (orig_w + 7) / 8);
}

// Plain sequential sum in row-major order; bit-reproducible.
template <typename T>
inline T predicted_count(const Tensor<T>& density) {
  T s = 0;
  for (T v : density.raw()) s += v;
  return s;
}

template <typename T>
struct PscnetModel {
  PscnetConfig cfg;
  Backbone<T> backbone;
  Psm<T> psm;
  Gcm<T> gcm;
  Conv2dLayer<T> head1, head2, head3;

  PscnetModel() = default;
  PscnetModel(ModelParams<T>& params, const PscnetConfig& config, uint64_t seed) : cfg(config) {
    {
      std::mt19937 rng(static_cast<uint32_t>(seed + 1));
      backbone = Backbone<T>(params, {cfg.width_scale}, rng);
    }
    const int P = round_channels(512, cfg.width_scale);
    {
      std::mt19937 rng(static_cast<uint32_t>(seed + 2));
      psm = Psm<T>(params, backbone.out_channels(), P, rng);
    }
    if (cfg.use_gcm) {
      std::mt19937 rng(static_cast<uint32_t>(seed + 3));
      gcm = Gcm<T>(params, "gcm", 2 * P, rng, static_cast<T>(cfg.gcm_eps), cfg.gcm_gate);
    }
    {
      std::mt19937 rng(static_cast<uint32_t>(seed + 4));
      const int h1 = round_channels(256, cfg.width_scale), h2 = round_channels(128, cfg.width_scale);
      head1 = Conv2dLayer<T>(params, "head.conv1", 2 * P, h1, 3, 1, /*with_bias=*/true, rng);
      head2 = Conv2dLayer<T>(params, "head.conv2", h1, h2, 3, 1, true, rng);
      head3 = Conv2dLayer<T>(params, "head.conv3", h2, 1, 1, 1, true, rng);
    }
  }

  // [1, H/8, W/8] nonnegative density map. H, W must be multiples of 16.
  Tensor<T> forward(const Tensor<T>& image, Mode mode) const {
    auto f = backbone.forward(image);
    f = bilinear_resize(f, 2 * f.extent(1), 2 * f.extent(2));
    f = psm.forward(f, mode);
    if (cfg.use_gcm) f = gcm.forward(f);
    f = relu(head1.forward(f));
    f = relu(head2.forward(f));
    return abs(head3.forward(f));
  }
};

}  // namespace pscnet
