#pragma once

// Truncated VGG19-style feature extractor: five blocks of {2,2,4,4,4} 3x3
// conv+ReLU layers with base widths {64,128,256,512,512}, 2x2 max pooling
// after blocks 1-4 only, so features come out at stride 16. No batch norm,
// no classifier. A width_scale knob shrinks every width for desk-scale runs.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "pscnet/checkpoint.hpp"
#include "pscnet/nn_ops.hpp"
#include "pscnet/params.hpp"

namespace pscnet {

// Nearest multiple of 16, floor 16, so grouped convs downstream keep their
// divisibility.
inline int round_channels(int base, double width_scale) {
  const int c = 16 * static_cast<int>(std::llround(base * width_scale / 16.0));
  return std::max(16, c);
}

struct BackboneConfig {
  double width_scale = 1.0;
};

namespace detail {
inline constexpr int kVggBlockConvs[5] = {2, 2, 4, 4, 4};
inline constexpr int kVggBaseWidths[5] = {64, 128, 256, 512, 512};
}  // namespace detail

template <typename T>
struct Backbone {
  std::vector<Conv2dLayer<T>> convs;

  Backbone() = default;
  Backbone(ModelParams<T>& params, const BackboneConfig& cfg, std::mt19937& rng) {
    detail::require(cfg.width_scale > 0.0 && cfg.width_scale <= 1.0,
                    "backbone: width_scale must be in (0,1], got " + std::to_string(cfg.width_scale));
    int in_ch = 3;
    for (int b = 0; b < 5; ++b) {
      const int out_ch = round_channels(detail::kVggBaseWidths[b], cfg.width_scale);
      for (int i = 0; i < detail::kVggBlockConvs[b]; ++i) {
        convs.emplace_back(params, "backbone.block" + std::to_string(b + 1) + ".conv" + std::to_string(i + 1), in_ch,
                           out_ch, 3, 1, /*with_bias=*/true, rng);
        in_ch = out_ch;
      }
    }
  }

  int out_channels() const { return convs.back().out_channels(); }

  Tensor<T> forward(const Tensor<T>& image) const {
    detail::require_chw("backbone_forward", image);
    detail::require(image.extent(0) == 3,
                    "backbone_forward: expected 3 input channels, got " + std::to_string(image.extent(0)));
    const int H = image.extent(1), W = image.extent(2);
    if (H % 16 != 0 || W % 16 != 0) {
      const int ph = (H + 15) / 16 * 16, pw = (W + 15) / 16 * 16;
      throw Error("backbone_forward: extents " + std::to_string(H) + "x" + std::to_string(W) +
                  " must be multiples of 16; pad to " + std::to_string(ph) + "x" + std::to_string(pw));
    }
    Tensor<T> x = image;
    size_t li = 0;
    for (int b = 0; b < 5; ++b) {
      for (int i = 0; i < detail::kVggBlockConvs[b]; ++i) x = relu(convs[li++].forward(x));
      if (b < 4) x = max_pool2(x);
    }
    return x;
  }
};

// Replaces the parameters named in the file; tensors the file does not
// mention keep their current values, so a backbone-only checkpoint can seed a
// full model.
inline void load_external_weights(const std::string& path, ModelParams<float>& params) {
  apply_checkpoint(read_checkpoint(path), params, /*require_complete=*/false);
}

}  // namespace pscnet
