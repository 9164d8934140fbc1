#pragma once

#include <torch/torch.h>

#include "geocascade/denoiser.hpp"

namespace geocascade::testing {

/// Noise predictor with a 3x3 receptive field per call. Every output pixel is
/// computed by the same sequence of elementwise float64 operations, so results
/// do not depend on where a pixel sits inside the window.
class LocalMockPredictor final : public NoisePredictor {
 public:
  explicit LocalMockPredictor(int64_t n = 4) : n_(n) {}

  int64_t scale_factor() const override { return n_; }

  torch::Tensor encode_condition(const torch::Tensor& x_lr) override {
    return x_lr.to(torch::kFloat64).repeat_interleave(n_, 2).repeat_interleave(n_, 3);
  }

  torch::Tensor embed(double s, int64_t t, int64_t batch) override {
    return torch::full({batch, 1}, 1.0 / (1.0 + 1e-3 * static_cast<double>(t)) + 1e-3 * s,
                       torch::kFloat64);
  }

  torch::Tensor predict_noise(const torch::Tensor& x_t, const ConditionBundle& cond) override {
    static const double k[3][3] = {{0.02, 0.05, 0.02}, {0.05, 0.6, 0.05}, {0.02, 0.05, 0.02}};
    auto x = x_t.to(torch::kFloat64);
    auto p = torch::constant_pad_nd(x, {1, 1, 1, 1}, 0.0);
    const int64_t h = x.size(2), w = x.size(3);
    auto acc = torch::zeros_like(x);
    for (int64_t dy = 0; dy < 3; ++dy) {
      for (int64_t dx = 0; dx < 3; ++dx) {
        acc = acc + p.slice(2, dy, dy + h).slice(3, dx, dx + w) * k[dy][dx];
      }
    }
    auto scale = cond.embed.to(torch::kFloat64).view({-1, 1, 1, 1});
    return acc * scale - cond.cond_features * 0.1;
  }

  torch::Dtype dtype() const override { return torch::kFloat64; }

 private:
  int64_t n_;
};

}  // namespace geocascade::testing
