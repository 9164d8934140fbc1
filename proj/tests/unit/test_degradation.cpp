#include <cmath>
#include <numbers>

#include "support/doctest_torch.hpp"
#include <opencv2/imgproc.hpp>

#include "geocascade/degradation.hpp"
#include "geocascade/engine.hpp"

using namespace geocascade;

namespace {

// Neutral colours keep the codec's chroma subsampling out of the comparison.
cv::Mat gray_image(int size) {
  cv::Mat img(size, size, CV_8UC3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto v = static_cast<uchar>(100 + 60.0 * x / size + 40 * std::sin(y * 0.07));
      img.at<cv::Vec3b>(y, x) = cv::Vec3b(v, v, v);
    }
  return img;
}

cv::Mat smooth_image(int size) {
  cv::Mat img(size, size, CV_8UC3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      img.at<cv::Vec3b>(y, x) = cv::Vec3b(static_cast<uchar>(60 + 100.0 * x / size),
                                          static_cast<uchar>(80 + 60 * std::sin(y * 0.05)),
                                          static_cast<uchar>(120 + 40 * std::cos((x + y) * 0.03)));
  return img;
}

StageParams identity_stage(int h, int w) {
  StageParams p;
  p.blur = false;
  p.kernel.size = 1;
  p.out_h = h;
  p.out_w = w;
  p.scale = 1.0;
  p.noise = false;
  p.jpeg = true;
  p.jpeg_quality = 100;
  return p;
}

double max_abs_diff(const cv::Mat& a, const cv::Mat& b) { return cv::norm(a, b, cv::NORM_INF); }

}  // namespace

TEST_CASE("blur kernels are normalized") {
  for (auto kind : {BlurKind::kIsoGaussian, BlurKind::kAnisoGaussian, BlurKind::kSinc}) {
    for (int size : {7, 13, 21}) {
      BlurKernelSpec s{kind, size, 1.7, 0.6, 0.4, 1.3};
      auto k = make_blur_kernel(s);
      CHECK(k.rows == size);
      CHECK(std::abs(cv::sum(k)[0] - 1.0) <= 1e-6);
    }
  }
  CHECK_THROWS(make_blur_kernel({BlurKind::kIsoGaussian, 6}));
  CHECK_THROWS(make_blur_kernel({BlurKind::kIsoGaussian, 7, 0.0}));
}

TEST_CASE("tiny isotropic sigma gives a delta") {
  auto k = make_blur_kernel({BlurKind::kIsoGaussian, 7, 0.05});
  CHECK(k.at<double>(3, 3) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("anisotropic kernel matches the rotated Gaussian formula") {
  for (double theta : {0.0, 0.7}) {
    const double sx = 2.0, sy = 1.0;
    auto k = make_blur_kernel({BlurKind::kAnisoGaussian, 9, sx, sy, theta});
    // Sigma = R diag(sx^2, sy^2) R^T, evaluated through its explicit inverse.
    const double c = std::cos(theta), s = std::sin(theta);
    const double s11 = c * c * sx * sx + s * s * sy * sy;
    const double s12 = c * s * (sx * sx - sy * sy);
    const double s22 = s * s * sx * sx + c * c * sy * sy;
    const double det = s11 * s22 - s12 * s12;
    double total = 0.0;
    cv::Mat ref(9, 9, CV_64F);
    for (int y = -4; y <= 4; ++y)
      for (int x = -4; x <= 4; ++x) {
        const double q = (s22 * x * x - 2 * s12 * x * y + s11 * y * y) / det;
        ref.at<double>(y + 4, x + 4) = std::exp(-0.5 * q);
        total += ref.at<double>(y + 4, x + 4);
      }
    ref /= total;
    CHECK(max_abs_diff(k, ref) <= 1e-12);
  }
}

TEST_CASE("sinc kernel is radially symmetric") {
  auto k = make_blur_kernel({BlurKind::kSinc, 11, 1, 1, 0, 1.1});
  CHECK(k.at<double>(5, 8) == doctest::Approx(k.at<double>(8, 5)));
  CHECK(k.at<double>(5, 8) == doctest::Approx(k.at<double>(2, 5)));
}

TEST_CASE("identity stage is near-lossless") {
  auto img = gray_image(64);
  auto out = simple_degrade(img, identity_stage(64, 64));
  CHECK(max_abs_diff(img, out) <= 2.0);
  // colour content: 4:2:0 chroma subsampling adds a few levels
  auto colour = smooth_image(64);
  CHECK(max_abs_diff(colour, simple_degrade(colour, identity_stage(64, 64))) <= 6.0);
}

TEST_CASE("stage resize and determinism") {
  auto img = make_texture(256, 4);
  auto p = identity_stage(128, 128);
  p.scale = 2.0;
  p.noise = true;
  p.noise_strength = 0.05;
  p.noise_seed = 5;
  p.jpeg_quality = 60;
  auto a = simple_degrade(img, p), b = simple_degrade(img, p);
  CHECK(a.rows == 128);
  CHECK(a.cols == 128);
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("pipeline geometry and determinism") {
  auto img = make_texture(256, 1);
  DegradationConfig cfg;
  auto a = degrade_pair(img, cfg, 42);
  CHECK(a.lr.rows == 64);
  CHECK(a.lr.cols == 64);
  CHECK(a.lr.type() == CV_8UC3);
  CHECK(a.stages.size() == 2);
  double scale = 1.0;
  for (const auto& s : a.stages) scale *= s.scale;
  CHECK(scale == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(a.stages[1].out_h == 64);
  auto b = degrade_pair(img, cfg, 42);
  CHECK(max_abs_diff(a.lr, b.lr) == 0.0);
  auto c = degrade_pair(img, cfg, 43);
  CHECK(max_abs_diff(a.lr, c.lr) > 0.0);
  CHECK_THROWS(degrade_pair(make_texture(66, 1), cfg, 1));
}

TEST_CASE("order 1 with identity stage reduces to bicubic downsampling") {
  auto img = gray_image(128);
  DegradationConfig cfg;
  cfg.order = 1;
  cfg.blur_prob = 0.0;
  cfg.noise_prob = 0.0;
  cfg.jpeg_min = cfg.jpeg_max = 100;
  // resize method is sampled; accept the bicubic draws only
  int compared = 0;
  for (uint64_t seed = 0; seed < 30 && compared < 3; ++seed) {
    auto pair = degrade_pair(img, cfg, seed);
    if (pair.stages[0].resize != ResizeMethod::kBicubic) continue;
    cv::Mat ref;
    cv::resize(img, ref, cv::Size(32, 32), 0, 0, cv::INTER_CUBIC);
    CHECK(max_abs_diff(pair.lr, ref) <= 2.0);
    ++compared;
  }
  CHECK(compared > 0);
}

TEST_CASE("bicubic mode is plain bicubic downsampling") {
  auto img = make_texture(128, 2);
  DegradationConfig cfg;
  cfg.mode = DegradationMode::kBicubic;
  auto pair = degrade_pair(img, cfg, 7);
  cv::Mat ref;
  cv::resize(img, ref, cv::Size(32, 32), 0, 0, cv::INTER_CUBIC);
  CHECK(max_abs_diff(pair.lr, ref) <= 1.0);  // float vs 8-bit interpolation
}

TEST_CASE("sampled jpeg qualities stay in range") {
  DegradationConfig cfg;
  std::mt19937_64 rng(2024);
  int lo = 101, hi = -1;
  for (int i = 0; i < 1000; ++i) {
    auto p = sample_stage_params(cfg, 256, 256, i % 2 == 1, 64, 64, rng);
    lo = std::min(lo, p.jpeg_quality);
    hi = std::max(hi, p.jpeg_quality);
    CHECK(p.kernel.size % 2 == 1);
    if (i % 2 == 0) {
      CHECK(p.scale >= 0.5);
      CHECK(p.scale <= 2.0);
    }
  }
  CHECK(lo >= 30);
  CHECK(hi <= 95);
}

TEST_CASE("config validation and seeds") {
  DegradationConfig cfg;
  cfg.jpeg_max = 101;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.order = 0;
  CHECK_THROWS(cfg.validate());
  CHECK(image_seed(1, "a.png") == image_seed(1, "a.png"));
  CHECK(image_seed(1, "a.png") != image_seed(1, "b.png"));
  CHECK(image_seed(1, "a.png") != image_seed(2, "a.png"));
  CHECK(parse_degradation_mode(to_string(DegradationMode::kBicubic)) == DegradationMode::kBicubic);
}
