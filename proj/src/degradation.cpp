#include "geocascade/degradation.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace geocascade {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) {
  if (p >= 1.0) return true;
  if (p <= 0.0) return false;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

int interpolation_flag(ResizeMethod m) {
  switch (m) {
    case ResizeMethod::kNearest: return cv::INTER_NEAREST;
    case ResizeMethod::kBilinear: return cv::INTER_LINEAR;
    case ResizeMethod::kBicubic: return cv::INTER_CUBIC;
  }
  return cv::INTER_CUBIC;
}

cv::Mat jpeg_roundtrip(const cv::Mat& rgb8, int quality) {
  cv::Mat bgr;
  cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
  std::vector<uchar> buf;
  if (!cv::imencode(".jpg", bgr, buf, {cv::IMWRITE_JPEG_QUALITY, quality})) {
    throw std::runtime_error("jpeg encode failed");
  }
  cv::Mat decoded = cv::imdecode(buf, cv::IMREAD_COLOR);
  cv::Mat out;
  cv::cvtColor(decoded, out, cv::COLOR_BGR2RGB);
  return out;
}

}  // namespace

cv::Mat make_blur_kernel(const BlurKernelSpec& spec) {
  if (spec.size < 1 || spec.size % 2 == 0) {
    throw std::invalid_argument("blur kernel: size must be odd and positive");
  }
  const int half = spec.size / 2;
  cv::Mat k(spec.size, spec.size, CV_64F);
  if (spec.kind == BlurKind::kSinc) {
    if (!(spec.cutoff > 0.0)) throw std::invalid_argument("blur kernel: cutoff must be positive");
    const double wc = spec.cutoff;
    for (int y = -half; y <= half; ++y) {
      for (int x = -half; x <= half; ++x) {
        const double r = std::hypot(x, y);
        k.at<double>(y + half, x + half) =
            r == 0.0 ? wc * wc / (4.0 * kPi) : wc * std::cyl_bessel_j(1.0, wc * r) / (2.0 * kPi * r);
      }
    }
  } else {
    const bool iso = spec.kind == BlurKind::kIsoGaussian;
    const double sx = spec.sigma_x;
    const double sy = iso ? spec.sigma_x : spec.sigma_y;
    if (!(sx > 0.0) || !(sy > 0.0)) throw std::invalid_argument("blur kernel: sigma must be positive");
    const double th = iso ? 0.0 : spec.rotation;
    // inverse covariance of R diag(sx^2, sy^2) R^T
    const double c = std::cos(th), s = std::sin(th);
    const double a = c * c / (sx * sx) + s * s / (sy * sy);
    const double b = c * s * (1.0 / (sx * sx) - 1.0 / (sy * sy));
    const double d = s * s / (sx * sx) + c * c / (sy * sy);
    for (int y = -half; y <= half; ++y) {
      for (int x = -half; x <= half; ++x) {
        const double q = a * x * x + 2.0 * b * x * y + d * y * y;
        k.at<double>(y + half, x + half) = std::exp(-0.5 * q);
      }
    }
  }
  const double total = cv::sum(k)[0];
  if (!(std::abs(total) > 0.0)) throw std::invalid_argument("blur kernel: degenerate kernel");
  return k / total;
}

void DegradationConfig::validate() const {
  if (order < 1) throw std::invalid_argument("degradation: order must be >= 1");
  if (jpeg_min < 1 || jpeg_max > 100 || jpeg_min > jpeg_max) {
    throw std::invalid_argument("degradation: jpeg quality range must lie in [1, 100]");
  }
  if (kernel_size_min < 1 || kernel_size_min % 2 == 0 || kernel_size_max % 2 == 0 ||
      kernel_size_min > kernel_size_max) {
    throw std::invalid_argument("degradation: kernel sizes must be odd with min <= max");
  }
  if (!(blur_sigma_min > 0.0) || blur_sigma_min > blur_sigma_max) {
    throw std::invalid_argument("degradation: bad blur sigma range");
  }
  if (!(scale_min > 0.0) || scale_min > scale_max) {
    throw std::invalid_argument("degradation: bad scale range");
  }
  for (double p : {iso_prob, sinc_prob, gaussian_noise_prob, gray_noise_prob, blur_prob,
                   noise_prob, jpeg_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("degradation: bad probability");
  }
  if (final_scale < 1) throw std::invalid_argument("degradation: final_scale must be >= 1");
}

StageParams sample_stage_params(const DegradationConfig& cfg, int in_h, int in_w, bool last,
                                int target_h, int target_w, std::mt19937_64& rng) {
  StageParams p;
  p.blur = coin(rng, cfg.blur_prob);
  {
    const int n_sizes = (cfg.kernel_size_max - cfg.kernel_size_min) / 2 + 1;
    p.kernel.size =
        cfg.kernel_size_min + 2 * std::uniform_int_distribution<int>(0, n_sizes - 1)(rng);
    if (coin(rng, cfg.sinc_prob)) {
      p.kernel.kind = BlurKind::kSinc;
      p.kernel.cutoff = p.kernel.size < 13 ? uniform(rng, kPi / 3.0, kPi)
                                           : uniform(rng, kPi / 5.0, kPi);
    } else if (coin(rng, cfg.iso_prob)) {
      p.kernel.kind = BlurKind::kIsoGaussian;
      p.kernel.sigma_x = p.kernel.sigma_y = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
    } else {
      p.kernel.kind = BlurKind::kAnisoGaussian;
      p.kernel.sigma_x = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
      p.kernel.sigma_y = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);
      p.kernel.rotation = uniform(rng, -kPi, kPi);
    }
  }
  p.resize = static_cast<ResizeMethod>(std::uniform_int_distribution<int>(0, 2)(rng));
  if (last) {
    p.out_h = target_h;
    p.out_w = target_w;
    p.scale = static_cast<double>(in_h) / target_h;
  } else {
    p.scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    p.out_h = std::max(1, static_cast<int>(std::lround(in_h / p.scale)));
    p.out_w = std::max(1, static_cast<int>(std::lround(in_w / p.scale)));
    p.scale = static_cast<double>(in_h) / p.out_h;  // realized after rounding
  }
  p.noise = coin(rng, cfg.noise_prob);
  if (coin(rng, cfg.gaussian_noise_prob)) {
    p.noise_kind = NoiseKind::kGaussian;
    p.noise_strength = uniform(rng, cfg.gaussian_sigma_min, cfg.gaussian_sigma_max) / 255.0;
  } else {
    p.noise_kind = NoiseKind::kPoisson;
    p.noise_strength = uniform(rng, cfg.poisson_scale_min, cfg.poisson_scale_max);
  }
  p.gray_noise = coin(rng, cfg.gray_noise_prob);
  p.noise_seed = rng();
  p.jpeg = coin(rng, cfg.jpeg_prob);
  p.jpeg_quality = std::uniform_int_distribution<int>(cfg.jpeg_min, cfg.jpeg_max)(rng);
  return p;
}

cv::Mat simple_degrade(const cv::Mat& x, const StageParams& params) {
  if (x.type() != CV_8UC3) throw std::invalid_argument("simple_degrade: expected 8-bit RGB");
  if (params.out_h < 1 || params.out_w < 1) {
    throw std::invalid_argument("simple_degrade: resize below one pixel");
  }
  cv::Mat img;
  x.convertTo(img, CV_32FC3, 1.0 / 255.0);

  if (params.blur && params.kernel.size > 1) {
    cv::Mat k;
    make_blur_kernel(params.kernel).convertTo(k, CV_32F);
    cv::filter2D(img, img, -1, k, cv::Point(-1, -1), 0.0, cv::BORDER_REFLECT_101);
  }
  if (params.out_h != img.rows || params.out_w != img.cols) {
    cv::resize(img, img, cv::Size(params.out_w, params.out_h), 0.0, 0.0,
               interpolation_flag(params.resize));
  }
  if (params.noise && params.noise_strength > 0.0) {
    std::mt19937_64 rng(params.noise_seed);
    const int channels = params.gray_noise ? 1 : 3;
    for (int y = 0; y < img.rows; ++y) {
      auto* row = img.ptr<cv::Vec3f>(y);
      for (int x = 0; x < img.cols; ++x) {
        cv::Vec3f& px = row[x];
        if (params.noise_kind == NoiseKind::kGaussian) {
          std::normal_distribution<double> normal(0.0, params.noise_strength);
          const double shared = channels == 1 ? normal(rng) : 0.0;
          for (int c = 0; c < 3; ++c) {
            px[c] += static_cast<float>(channels == 1 ? shared : normal(rng));
          }
        } else {
          // photon counts at 8-bit quantization, noise = (Poisson(x) - x) * scale
          constexpr double kLevels = 255.0;
          auto poisson_delta = [&](double v) {
            const double lam = std::max(0.0, v) * kLevels;
            std::poisson_distribution<long> pois(lam > 0.0 ? lam : 1e-12);
            return (static_cast<double>(pois(rng)) / kLevels - v) * params.noise_strength;
          };
          if (channels == 1) {
            const double gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            const auto d = static_cast<float>(poisson_delta(gray));
            for (int c = 0; c < 3; ++c) px[c] += d;
          } else {
            for (int c = 0; c < 3; ++c) px[c] += static_cast<float>(poisson_delta(px[c]));
          }
        }
      }
    }
  }
  cv::Mat out;
  img.convertTo(out, CV_8UC3, 255.0);  // saturating, rounds to nearest
  if (params.jpeg) out = jpeg_roundtrip(out, params.jpeg_quality);
  return out;
}

DegradedPair degrade_pair(const cv::Mat& x_hr, const DegradationConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (x_hr.type() != CV_8UC3) throw std::invalid_argument("degrade_pair: expected 8-bit RGB");
  if (x_hr.rows % cfg.final_scale != 0 || x_hr.cols % cfg.final_scale != 0) {
    throw std::invalid_argument("degrade_pair: image size not divisible by final_scale");
  }
  const int th = x_hr.rows / cfg.final_scale, tw = x_hr.cols / cfg.final_scale;
  DegradedPair pair;
  pair.hr = x_hr.clone();
  pair.seed = seed;
  pair.mode = cfg.mode;
  if (cfg.mode == DegradationMode::kBicubic) {
    StageParams p;
    p.blur = p.noise = p.jpeg = false;
    p.kernel.size = 1;
    p.out_h = th;
    p.out_w = tw;
    p.scale = cfg.final_scale;
    p.resize = ResizeMethod::kBicubic;
    pair.lr = simple_degrade(x_hr, p);
    pair.stages.push_back(p);
    return pair;
  }
  std::mt19937_64 rng(seed);
  cv::Mat cur = x_hr;
  for (int i = 0; i < cfg.order; ++i) {
    const bool last = i == cfg.order - 1;
    auto p = sample_stage_params(cfg, cur.rows, cur.cols, last, th, tw, rng);
    cur = simple_degrade(cur, p);
    if (cur.rows != p.out_h || cur.cols != p.out_w) {
      throw std::logic_error("degrade_pair: stage produced an unexpected size");
    }
    pair.stages.push_back(p);
  }
  pair.lr = cur;
  return pair;
}

DegradedPair degrade_pair(const cv::Mat& x_hr, const DegradationConfig& cfg) {
  return degrade_pair(x_hr, cfg, cfg.seed);
}

uint64_t image_seed(uint64_t seed, const std::string& path) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : path) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return seed ^ h;
}

std::string to_string(BlurKind kind) {
  switch (kind) {
    case BlurKind::kIsoGaussian: return "iso-gaussian";
    case BlurKind::kAnisoGaussian: return "aniso-gaussian";
    case BlurKind::kSinc: return "sinc";
  }
  return "?";
}

std::string to_string(ResizeMethod method) {
  switch (method) {
    case ResizeMethod::kNearest: return "nearest";
    case ResizeMethod::kBilinear: return "bilinear";
    case ResizeMethod::kBicubic: return "bicubic";
  }
  return "?";
}

std::string to_string(NoiseKind kind) {
  return kind == NoiseKind::kGaussian ? "gaussian" : "poisson";
}

std::string to_string(DegradationMode mode) {
  return mode == DegradationMode::kHighOrder ? "high-order" : "bicubic";
}

DegradationMode parse_degradation_mode(const std::string& name) {
  if (name == "high-order") return DegradationMode::kHighOrder;
  if (name == "bicubic") return DegradationMode::kBicubic;
  throw std::invalid_argument("unknown degradation mode: " + name);
}

nlohmann::json to_json(const StageParams& p) {
  nlohmann::json j;
  j["blur"] = p.blur;
  j["kernel"] = {{"kind", to_string(p.kernel.kind)}, {"size", p.kernel.size},
                 {"sigma_x", p.kernel.sigma_x},      {"sigma_y", p.kernel.sigma_y},
                 {"rotation", p.kernel.rotation},    {"cutoff", p.kernel.cutoff}};
  j["resize"] = {{"method", to_string(p.resize)}, {"scale", p.scale},
                 {"out_h", p.out_h},              {"out_w", p.out_w}};
  j["noise"] = {{"enabled", p.noise},       {"kind", to_string(p.noise_kind)},
                {"gray", p.gray_noise},     {"strength", p.noise_strength},
                {"seed", p.noise_seed}};
  j["jpeg"] = {{"enabled", p.jpeg}, {"quality", p.jpeg_quality}};
  return j;
}

nlohmann::json pair_record(const DegradedPair& pair) {
  nlohmann::json j;
  j["mode"] = to_string(pair.mode);
  j["seed"] = pair.seed;
  j["hr_size"] = {pair.hr.rows, pair.hr.cols};
  j["lr_size"] = {pair.lr.rows, pair.lr.cols};
  j["stages"] = nlohmann::json::array();
  for (const auto& s : pair.stages) j["stages"].push_back(to_json(s));
  return j;
}

}  // namespace geocascade
