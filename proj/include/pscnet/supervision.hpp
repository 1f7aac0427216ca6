#pragma once

// Point-supervised losses over the stride-8 density grid.
//
// Each density cell m gets a posterior over explanations: annotation points
// n = 1..N and, optionally, background. Unnormalized log-likelihoods are
//   point n:     -|x_m - z_n|^2 / (2 sigma^2)
//   background:  -(d_m - d)^2 / (2 sigma^2),  d_m = min_n |x_m - z_n|
// normalized per row by max-subtracted exponentiation. The Bayesian loss
// pushes each point's expected count E[c_n] = sum_m P[m,n] d_m to 1 and the
// background's to 0 under an l1 metric; the counting loss is |count - N|.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pscnet/nn_ops.hpp"
#include "pscnet/tensor.hpp"

namespace pscnet {

using Point = std::array<double, 2>;  // (x, y) in input pixels

struct SupervisionConfig {
  double sigma = 8.0;
  double background_margin = 0.0;  // absolute pixels; see background_margin_for_crop
  bool use_background = true;
  double lambda = 0.1;
};

inline double background_margin_for_crop(int crop_h, int crop_w, double ratio = 0.15) {
  return ratio * std::min(crop_h, crop_w);
}

// Density cell (i,j) observes the input around (stride*j + stride/2,
// stride*i + stride/2); row-major order matches the flattened density map.
inline std::vector<Point> grid_coordinates(int out_h, int out_w, int stride = 8) {
  detail::require(out_h >= 1 && out_w >= 1, "grid_coordinates: extents must be positive");
  std::vector<Point> grid;
  grid.reserve(static_cast<size_t>(out_h) * out_w);
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j)
      grid.push_back({stride * j + stride / 2.0, stride * i + stride / 2.0});
  return grid;
}

// Row-stochastic M x (N [+1]) matrix; when present, background is column 0.
template <typename T>
struct PosteriorMatrix {
  int rows = 0;
  int cols = 0;
  bool has_background = false;
  std::vector<T> p;

  T at(int m, int n) const { return p[static_cast<size_t>(m) * cols + n]; }
};

template <typename T>
inline PosteriorMatrix<T> build_posterior(const std::vector<Point>& points, const std::vector<Point>& grid,
                                          const SupervisionConfig& cfg) {
  detail::require(cfg.sigma > 0.0, "build_posterior: sigma must be positive, got " + std::to_string(cfg.sigma));
  if (cfg.use_background)
    detail::require(cfg.background_margin > 0.0, "build_posterior: background margin must be positive, got " +
                                                     std::to_string(cfg.background_margin));
  const int M = static_cast<int>(grid.size());
  const int N = static_cast<int>(points.size());
  PosteriorMatrix<T> post;
  post.rows = M;
  post.has_background = cfg.use_background;
  post.cols = N + (cfg.use_background ? 1 : 0);
  post.p.assign(static_cast<size_t>(M) * post.cols, T(0));
  if (post.cols == 0) return post;

  const double inv_two_sigma2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
  std::vector<double> loglik(static_cast<size_t>(post.cols));
  for (int m = 0; m < M; ++m) {
    if (N == 0) {
      post.p[static_cast<size_t>(m)] = T(1);  // background explains everything
      continue;
    }
    double min_d2 = 0.0;
    for (int n = 0; n < N; ++n) {
      const double dx = grid[static_cast<size_t>(m)][0] - points[static_cast<size_t>(n)][0];
      const double dy = grid[static_cast<size_t>(m)][1] - points[static_cast<size_t>(n)][1];
      const double d2 = dx * dx + dy * dy;
      loglik[static_cast<size_t>(n + (cfg.use_background ? 1 : 0))] = -d2 * inv_two_sigma2;
      if (n == 0 || d2 < min_d2) min_d2 = d2;
    }
    if (cfg.use_background) {
      const double dm = std::sqrt(min_d2) - cfg.background_margin;
      loglik[0] = -dm * dm * inv_two_sigma2;
    }
    double mx = loglik[0];
    for (int n = 1; n < post.cols; ++n) mx = std::max(mx, loglik[static_cast<size_t>(n)]);
    double denom = 0.0;
    for (int n = 0; n < post.cols; ++n) denom += std::exp(loglik[static_cast<size_t>(n)] - mx);
    for (int n = 0; n < post.cols; ++n)
      post.p[static_cast<size_t>(m) * post.cols + n] =
          static_cast<T>(std::exp(loglik[static_cast<size_t>(n)] - mx) / denom);
  }
  return post;
}

// loss = sum_n |1 - E[c_n]| (+ |E[c_0]| with background), E[c] = P^T d.
// The posterior is a constant; the loss differentiates through d with the
// l1 subgradient (sign(0) = 0).
template <typename T>
inline Tensor<T> bayesian_loss(const Tensor<T>& density, const PosteriorMatrix<T>& post) {
  detail::require(density.numel() == post.rows,
                  "bayesian_loss: density has " + std::to_string(density.numel()) + " cells, posterior has " +
                      std::to_string(post.rows) + " rows");
  const int M = post.rows, K = post.cols;
  const int first_point = post.has_background ? 1 : 0;
  std::vector<T> expected(static_cast<size_t>(K), T(0));
  const T* pd = density.data();
  for (int m = 0; m < M; ++m)
    for (int n = 0; n < K; ++n) expected[static_cast<size_t>(n)] += post.p[static_cast<size_t>(m) * K + n] * pd[m];

  T loss = 0;
  for (int n = first_point; n < K; ++n) loss += std::abs(T(1) - expected[static_cast<size_t>(n)]);
  if (post.has_background) loss += std::abs(expected[0]);

  Tensor<T> out = Tensor<T>::scalar(loss);
  auto sign = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
  std::vector<T> col_grad(static_cast<size_t>(K), T(0));  // d loss / d E[c_n]
  for (int n = first_point; n < K; ++n) col_grad[static_cast<size_t>(n)] = -sign(T(1) - expected[static_cast<size_t>(n)]);
  if (post.has_background) col_grad[0] = sign(expected[0]);

  Tensor<T> dc = density, oc = out;
  std::vector<T> p_copy = post.p;  // the tape may outlive the caller's posterior
  detail::finalize_op("bayesian_loss", {density}, out, [dc, oc, col_grad, p_copy, M, K]() {
    if (!dc.requires_grad()) return;
    const T g = oc.grad_raw()[0];
    T* gd = dc.grad_raw().data();
    for (int m = 0; m < M; ++m) {
      T acc = 0;
      for (int n = 0; n < K; ++n) acc += col_grad[static_cast<size_t>(n)] * p_copy[static_cast<size_t>(m) * K + n];
      gd[m] += g * acc;
    }
  });
  return out;
}

template <typename T>
inline Tensor<T> counting_loss(const Tensor<T>& pred_count, T gt_count) {
  detail::require(pred_count.numel() == 1, "counting_loss: predicted count must be a scalar");
  return abs(add(pred_count, -gt_count));
}

// bayesian + lambda * counting; lambda = 0 returns the Bayesian term itself.
template <typename T>
inline Tensor<T> overall_loss(const Tensor<T>& density, const PosteriorMatrix<T>& post, T gt_count, T lambda) {
  detail::require(lambda >= T(0), "overall_loss: lambda must be nonnegative");
  Tensor<T> bayes = bayesian_loss(density, post);
  if (lambda == T(0)) return bayes;
  return add(bayes, mul(counting_loss(sum_all(density), gt_count), lambda));
}

}  // namespace pscnet
