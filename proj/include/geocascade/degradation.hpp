#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

namespace geocascade {

enum class BlurKind { kIsoGaussian, kAnisoGaussian, kSinc };

struct BlurKernelSpec {
  BlurKind kind = BlurKind::kIsoGaussian;
  int size = 7;  // odd
  double sigma_x = 1.0;
  double sigma_y = 1.0;
  double rotation = 0.0;  // radians, anisotropic only
  double cutoff = 1.0;    // omega_c in radians/pixel, sinc only
};

/// Normalized (unit-sum) 2-D blur kernel, CV_64F of size x size.
cv::Mat make_blur_kernel(const BlurKernelSpec& spec);

enum class ResizeMethod { kNearest, kBilinear, kBicubic };
enum class NoiseKind { kGaussian, kPoisson };

/// Every random choice made for one simple degradation [(x * k) down_r + n]_JPEG.
struct StageParams {
  bool blur = true;
  BlurKernelSpec kernel;
  int out_h = 0, out_w = 0;  // resize target
  double scale = 1.0;        // r: input size / output size
  ResizeMethod resize = ResizeMethod::kBicubic;
  bool noise = true;
  NoiseKind noise_kind = NoiseKind::kGaussian;
  bool gray_noise = false;
  double noise_strength = 0.0;  // gaussian sigma in [0,1] units, or poisson scale
  uint64_t noise_seed = 0;
  bool jpeg = true;
  int jpeg_quality = 95;
};

enum class DegradationMode { kHighOrder, kBicubic };

struct DegradationConfig {
  DegradationMode mode = DegradationMode::kHighOrder;
  int order = 2;
  // blur
  int kernel_size_min = 7, kernel_size_max = 21;
  double blur_sigma_min = 0.2, blur_sigma_max = 3.0;
  double iso_prob = 0.45;  // otherwise anisotropic
  double sinc_prob = 0.1;
  // resize; stages before the last sample r in [scale_min, scale_max]
  double scale_min = 0.5, scale_max = 2.0;
  // noise
  double gaussian_noise_prob = 0.5;  // otherwise poisson
  double gaussian_sigma_min = 1.0, gaussian_sigma_max = 25.0;  // in 1/255 units
  double poisson_scale_min = 0.05, poisson_scale_max = 2.5;
  double gray_noise_prob = 0.4;
  // jpeg
  int jpeg_min = 30, jpeg_max = 95;
  // per-stage inclusion probabilities
  double blur_prob = 1.0, noise_prob = 1.0, jpeg_prob = 1.0;
  int final_scale = 4;
  uint64_t seed = 0;

  void validate() const;
};

/// Applies one simple degradation to an 8-bit RGB image.
cv::Mat simple_degrade(const cv::Mat& x, const StageParams& params);

/// Draws the parameters of one stage. `last` stages resize to (target_h, target_w).
StageParams sample_stage_params(const DegradationConfig& cfg, int in_h, int in_w, bool last,
                                int target_h, int target_w, std::mt19937_64& rng);

struct DegradedPair {
  cv::Mat lr;
  cv::Mat hr;
  std::vector<StageParams> stages;
  uint64_t seed = 0;
  DegradationMode mode = DegradationMode::kHighOrder;
};

/// x_lr = D^n(x_hr) with all randomness drawn from `seed`.
DegradedPair degrade_pair(const cv::Mat& x_hr, const DegradationConfig& cfg, uint64_t seed);
DegradedPair degrade_pair(const cv::Mat& x_hr, const DegradationConfig& cfg);

/// cfg.seed combined with a stable hash of an image path.
uint64_t image_seed(uint64_t seed, const std::string& path);

nlohmann::json to_json(const StageParams& p);
nlohmann::json pair_record(const DegradedPair& pair);

std::string to_string(BlurKind kind);
std::string to_string(ResizeMethod method);
std::string to_string(NoiseKind kind);
std::string to_string(DegradationMode mode);
DegradationMode parse_degradation_mode(const std::string& name);

}  // namespace geocascade
