#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace geocascade {

struct FrequencyEncoderConfig {
  double omega = 1e4;
  int64_t n = 64;
  int64_t out_dim() const { return 2 * n; }
};

/// Frequencies f_i = omega^(-i/n), i = 1..n.
std::vector<double> encoder_frequencies(const FrequencyEncoderConfig& cfg);

/// [cos(v f_1), sin(v f_1), ..., cos(v f_n), sin(v f_n)]
std::vector<double> frequency_encode(double value, const FrequencyEncoderConfig& cfg);

/// Row-wise encoding of a [B] tensor of values into [B, 2n] (float64 math,
/// result cast to `dtype`).
torch::Tensor frequency_encode(const torch::Tensor& values, const FrequencyEncoderConfig& cfg,
                               torch::Dtype dtype = torch::kFloat32);

/// Two affine layers with SiLU between: 2n -> D -> D.
struct EmbeddingMlpImpl : torch::nn::Module {
  EmbeddingMlpImpl(int64_t in_dim, int64_t embed_dim);
  torch::Tensor forward(const torch::Tensor& encoded);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(EmbeddingMlp);

/// e_s = F_mlp(f_omega(s)); s in m/pixel, one value per batch row.
torch::Tensor embed_resolution(const torch::Tensor& s, EmbeddingMlp& mlp,
                               const FrequencyEncoderConfig& cfg);
torch::Tensor embed_resolution(double s, EmbeddingMlp& mlp, const FrequencyEncoderConfig& cfg);

/// e_t = F_mlp(f_omega(t)); t is a 1-based timestep, one value per batch row.
torch::Tensor embed_timestep(const torch::Tensor& t, EmbeddingMlp& mlp,
                             const FrequencyEncoderConfig& cfg);
torch::Tensor embed_timestep(int64_t t, EmbeddingMlp& mlp, const FrequencyEncoderConfig& cfg);

torch::Tensor combine_embeddings(const torch::Tensor& e_s, const torch::Tensor& e_t);

/// (1 + scale) * h + shift, where e = [scale | shift] has 2C entries per row
/// and h is [B, C, H, W]. A 1-D e is broadcast over the batch.
torch::Tensor scale_shift(const torch::Tensor& h, const torch::Tensor& e);

struct ConditionEncoderConfig {
  int64_t features = 32;     // output channel width (cond_channels)
  int64_t growth = 16;       // dense-block growth channels
  int64_t blocks = 4;        // RRDB count
  int64_t scale_factor = 4;  // N, 2 or 4
};

struct ResidualDenseBlockImpl : torch::nn::Module {
  ResidualDenseBlockImpl(int64_t features, int64_t growth);
  torch::Tensor forward(const torch::Tensor& x);

  std::vector<torch::nn::Conv2d> convs;
};
TORCH_MODULE(ResidualDenseBlock);

/// Residual-in-residual dense block: three dense blocks with a scaled skip.
struct RrdbImpl : torch::nn::Module {
  RrdbImpl(int64_t features, int64_t growth);
  torch::Tensor forward(const torch::Tensor& x);

  ResidualDenseBlock rdb1{nullptr}, rdb2{nullptr}, rdb3{nullptr};
};
TORCH_MODULE(Rrdb);

/// F_up(E_lr(x_lr)): RRDB trunk at input resolution followed by log2(N)
/// rounds of nearest 2x upsampling + convolution.
struct ConditionEncoderImpl : torch::nn::Module {
  explicit ConditionEncoderImpl(const ConditionEncoderConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x_lr);

  ConditionEncoderConfig cfg;
  torch::nn::Conv2d conv_first{nullptr}, conv_trunk{nullptr};
  torch::nn::Sequential trunk{nullptr};
  std::vector<torch::nn::Conv2d> up_convs;
};
TORCH_MODULE(ConditionEncoder);

torch::Tensor encode_condition_image(const torch::Tensor& x_lr, ConditionEncoder& encoder);

/// Per-step conditioning handed to the noise predictor.
struct ConditionBundle {
  torch::Tensor cond_features;  // [B, C, NH, NW], aligned with x_t
  torch::Tensor embed;          // [B, D] = e_s + e_t
  double spatial_resolution = 0.0;
};

}  // namespace geocascade
