#pragma once

#include <filesystem>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace geocascade {

/// Reads an image as 8-bit RGB. Throws std::runtime_error if unreadable.
cv::Mat load_rgb(const std::filesystem::path& path);

/// Writes 8-bit RGB as PNG (or whatever the extension selects).
void save_rgb(const std::filesystem::path& path, const cv::Mat& rgb8);

/// 8-bit RGB -> [1, 3, H, W] float32 in [-1, 1].
torch::Tensor to_tensor(const cv::Mat& rgb8);

/// [1, 3, H, W] or [3, H, W] in [-1, 1] -> 8-bit RGB (clamped, rounded).
cv::Mat to_image(const torch::Tensor& x);

/// [1, 3, H, W] in [-1, 1] -> float64 tensor [3, H, W] of 8-bit intensities in [0, 255].
torch::Tensor to_intensity(const torch::Tensor& x);

}  // namespace geocascade
