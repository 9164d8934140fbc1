#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "geocascade/cascade_tiler.hpp"

namespace geocascade {

/// Gaussian summary of a feature set.
struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;  // unbiased sample covariance
  int64_t count = 0;
};

/// Single-pass mean/covariance (Welford updates, Chan merges).
class FeatureAccumulator {
 public:
  explicit FeatureAccumulator(int64_t dim);

  void add(const Eigen::VectorXd& x);
  void merge(const FeatureAccumulator& other);
  int64_t count() const { return count_; }
  FeatureStats stats() const;

 private:
  int64_t count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

/// Any fixed deterministic image -> vector map.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// images: [B, 3, H, W] in [-1, 1] -> [B, dim] float64
  virtual torch::Tensor features(const torch::Tensor& images) = 0;
  virtual int64_t dim() const = 0;
  virtual std::string id() const = 0;
};

/// Hermetic stand-in for the Inception pool features: a small conv stack with
/// fixed-seed random weights, ReLU, global average pooling.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed = 0x5eed, int64_t dim = 32);

  torch::Tensor features(const torch::Tensor& images) override;
  int64_t dim() const override { return dim_; }
  std::string id() const override;

 private:
  uint64_t seed_;
  int64_t dim_;
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

/// images: list of [1, 3, H, W] (or one [B, 3, H, W]) tensors in [-1, 1].
FeatureStats extract_features(const std::vector<torch::Tensor>& images,
                              FeatureExtractor& extractor);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})
double fid(const FeatureStats& a, const FeatureStats& b);

struct SeamGradient {
  double horizontal = 0.0;  // |I(x) - I(x-1)| across vertical seams
  double vertical = 0.0;    // |I(y) - I(y-1)| across horizontal seams
  double average = 0.0;
};

/// Mean absolute directional gradient across tile seams, on 8-bit intensities
/// ([C, H, W] or [1, C, H, W] with values in [0, 255]).
SeamGradient seam_gradient(const torch::Tensor& intensity, const TileGrid& grid);

}  // namespace geocascade
