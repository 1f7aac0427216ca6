#pragma once

// Pyramidal Scale Module: two parallel PyConv blocks. The local block runs at
// input resolution; the global block pools to (at most) 9x9 first and resizes
// back, so its branches see the whole map. Output is the channel
// concatenation, 2P wide.
//
// A PyConv block is a 1x1 entry conv to width P, four parallel grouped convs
// with kernels {9,7,5,3} and nominal groups {16,8,4,1} each producing P/4
// channels, their concatenation, and a 1x1 fuse conv back to P. Every conv is
// bias-free and followed by batch norm and ReLU.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "pscnet/nn_ops.hpp"
#include "pscnet/params.hpp"

namespace pscnet {

// Largest group count <= nominal that divides the branch width. Branch input
// P is 4x the branch width, so the result divides it as well.
inline int clamp_groups(int nominal, int branch_channels) {
  for (int g = nominal; g > 1; --g)
    if (branch_channels % g == 0) return g;
  return 1;
}

namespace detail {
inline constexpr int kPyConvKernels[4] = {9, 7, 5, 3};
inline constexpr int kPyConvGroups[4] = {16, 8, 4, 1};
}  // namespace detail

template <typename T>
struct PyConvBlock {
  ConvBnRelu<T> entry;
  std::array<ConvBnRelu<T>, 4> branches;
  ConvBnRelu<T> fuse;

  PyConvBlock() = default;
  PyConvBlock(ModelParams<T>& params, const std::string& name, int in_ch, int width, std::mt19937& rng) {
    detail::require(width % 4 == 0, name + ": width must be divisible by 4, got " + std::to_string(width));
    entry = ConvBnRelu<T>(params, name + ".entry", in_ch, width, 1, 1, rng);
    const int branch_ch = width / 4;
    for (int i = 0; i < 4; ++i) {
      const int k = detail::kPyConvKernels[i];
      branches[static_cast<size_t>(i)] =
          ConvBnRelu<T>(params, name + ".branch" + std::to_string(k), width, branch_ch,
                        k, clamp_groups(detail::kPyConvGroups[i], branch_ch), rng);
    }
    fuse = ConvBnRelu<T>(params, name + ".fuse", width, width, 1, 1, rng);
  }

  int width() const { return fuse.conv.out_channels(); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    auto e = entry.forward(x, mode);
    std::vector<Tensor<T>> outs;
    outs.reserve(4);
    for (const auto& b : branches) outs.push_back(b.forward(e, mode));
    return fuse.forward(concat_channels(outs), mode);
  }
};

template <typename T>
struct Psm {
  PyConvBlock<T> local_block;
  PyConvBlock<T> global_block;

  Psm() = default;
  Psm(ModelParams<T>& params, int in_ch, int width, std::mt19937& rng)
      : local_block(params, "psm.local", in_ch, width, rng),
        global_block(params, "psm.global", in_ch, width, rng) {}

  int width() const { return local_block.width(); }
  int out_channels() const { return 2 * width(); }

  Tensor<T> local_forward(const Tensor<T>& x, Mode mode) const { return local_block.forward(x, mode); }

  Tensor<T> global_forward(const Tensor<T>& x, Mode mode) const {
    const int h = x.extent(1), w = x.extent(2);
    auto pooled = adaptive_avg_pool(x, std::min(9, h), std::min(9, w));
    return bilinear_resize(global_block.forward(pooled, mode), h, w);
  }

  // Channels [0,P) from the local block, [P,2P) from the global block.
  Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
    return concat_channels(local_forward(x, mode), global_forward(x, mode));
  }
};

}  // namespace pscnet
