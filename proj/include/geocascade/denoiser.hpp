#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "geocascade/conditioning.hpp"

namespace geocascade {

struct DenoiserConfig {
  int64_t base_channels = 32;
  std::vector<int64_t> channel_mults{1, 2, 4, 8, 8};
  int64_t num_res_blocks = 3;
  std::vector<int64_t> attention_levels{3, 4};  // levels whose multiplier is 8
  int64_t num_down = 4;
  int64_t cond_channels = 32;
  int64_t embed_dim = 128;
  bool use_attention = true;

  /// Throws std::invalid_argument when the configuration is inconsistent.
  void validate() const;
  bool has_attention(int64_t level) const;
};

/// Everything needed to rebuild a noise predictor.
struct ModelConfig {
  FrequencyEncoderConfig frequency;
  ConditionEncoderConfig encoder;
  DenoiserConfig unet;

  void validate() const;
};

/// Full-size reference configuration (about 5.8e8 parameters). Never
/// instantiated in tests.
ModelConfig reference_scale_config();

/// Closed-form parameter count of the model described by `cfg`.
int64_t count_parameters(const ModelConfig& cfg);

/// GroupNorm group count used for a given channel width.
int64_t norm_groups(int64_t channels);

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t embed_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear emb_proj{nullptr};  // D -> 2C, consumed by scale_shift
};
TORCH_MODULE(ResBlock);

/// Single-head self-attention over all spatial positions.
struct AttentionBlockImpl : torch::nn::Module {
  explicit AttentionBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(AttentionBlock);

struct UNetImpl : torch::nn::Module {
  explicit UNetImpl(const DenoiserConfig& cfg);
  /// x: [B, 3 + cond_channels, H, W]; emb: [B, D]
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  // One stage of the down or up path: a res block, optional attention, or a
  // resampling conv.
  struct Layer {
    enum class Kind { kRes, kAttn, kDown, kUp } kind;
    ResBlock res{nullptr};
    AttentionBlock attn{nullptr};
    torch::nn::Conv2d conv{nullptr};
    bool push_skip = false;  // down path: record output as a skip
    bool pop_skip = false;   // up path: concat a skip before this res block
  };

  static torch::Tensor run(Layer& layer, torch::Tensor h, const torch::Tensor& emb);

  DenoiserConfig cfg_;
  torch::nn::Conv2d input_conv{nullptr}, out_conv{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
  std::vector<Layer> down_, mid_, up_;
};
TORCH_MODULE(UNet);

/// eps_theta(cat[x_t, F_up(E_lr(x_lr))], e_s + e_t).
struct CascadeDenoiserImpl : torch::nn::Module {
  explicit CascadeDenoiserImpl(const ModelConfig& cfg);

  torch::Tensor encode_condition(const torch::Tensor& x_lr);
  /// e_t^(k) for per-row resolutions s [B] and timesteps t [B].
  torch::Tensor embed(const torch::Tensor& s, const torch::Tensor& t);
  torch::Tensor predict_noise(const torch::Tensor& x_t, const ConditionBundle& cond);
  /// Full training forward pass.
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& x_lr,
                        const torch::Tensor& s, const torch::Tensor& t);

  ModelConfig cfg;
  ConditionEncoder encoder{nullptr};
  EmbeddingMlp resolution_mlp{nullptr}, timestep_mlp{nullptr};
  UNet unet{nullptr};
};
TORCH_MODULE(CascadeDenoiser);

torch::Tensor predict_noise(const torch::Tensor& x_t, const ConditionBundle& cond,
                            CascadeDenoiser& model);

/// What the samplers need from a noise model. Implemented by the trained
/// network and by test doubles with a bounded receptive field.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual int64_t scale_factor() const = 0;
  virtual torch::Tensor encode_condition(const torch::Tensor& x_lr) = 0;
  /// Embedding rows for `batch` copies of (s, t).
  virtual torch::Tensor embed(double s, int64_t t, int64_t batch) = 0;
  virtual torch::Tensor predict_noise(const torch::Tensor& x_t, const ConditionBundle& cond) = 0;
  virtual torch::Dtype dtype() const { return torch::kFloat32; }
};

/// Inference adapter around a trained CascadeDenoiser (no autograd).
class DenoiserPredictor final : public NoisePredictor {
 public:
  explicit DenoiserPredictor(CascadeDenoiser model);

  int64_t scale_factor() const override;
  torch::Tensor encode_condition(const torch::Tensor& x_lr) override;
  torch::Tensor embed(double s, int64_t t, int64_t batch) override;
  torch::Tensor predict_noise(const torch::Tensor& x_t, const ConditionBundle& cond) override;
  torch::Dtype dtype() const override;

  CascadeDenoiser& model() { return model_; }

 private:
  CascadeDenoiser model_;
};

}  // namespace geocascade
