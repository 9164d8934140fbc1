#include "geocascade/image_io.hpp"

#include <cstring>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace geocascade {

cv::Mat load_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

void save_rgb(const std::filesystem::path& path, const cv::Mat& rgb8) {
  cv::Mat bgr;
  cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) {
    throw std::runtime_error("cannot write image: " + path.string());
  }
}

torch::Tensor to_tensor(const cv::Mat& rgb8) {
  if (rgb8.type() != CV_8UC3) throw std::invalid_argument("to_tensor: expected 8-bit RGB");
  cv::Mat contiguous = rgb8.isContinuous() ? rgb8 : rgb8.clone();
  auto t = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3}, torch::kUInt8)
               .clone();
  return t.permute({2, 0, 1}).unsqueeze(0).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

cv::Mat to_image(const torch::Tensor& x) {
  auto t = x.dim() == 4 ? x.squeeze(0) : x;
  if (t.dim() != 3 || t.size(0) != 3) throw std::invalid_argument("to_image: expected 3 channels");
  auto u8 = ((t.detach().to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5)
                .round()
                .to(torch::kUInt8)
                .permute({1, 2, 0})
                .contiguous();
  cv::Mat out(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3);
  std::memcpy(out.data, u8.data_ptr<uint8_t>(), static_cast<size_t>(u8.numel()));
  return out;
}

torch::Tensor to_intensity(const torch::Tensor& x) {
  auto t = x.dim() == 4 ? x.squeeze(0) : x;
  return ((t.detach().to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5).round();
}

}  // namespace geocascade
