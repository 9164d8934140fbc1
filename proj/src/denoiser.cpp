#include "geocascade/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace geocascade {

namespace nn = torch::nn;

void DenoiserConfig::validate() const {
  if (base_channels < 1 || num_res_blocks < 1 || num_down < 0 || cond_channels < 1 ||
      embed_dim < 1) {
    throw std::invalid_argument("denoiser config: sizes must be positive");
  }
  if (static_cast<int64_t>(channel_mults.size()) != num_down + 1) {
    throw std::invalid_argument("denoiser config: need one channel multiplier per level");
  }
  for (auto m : channel_mults) {
    if (m < 1) throw std::invalid_argument("denoiser config: multipliers must be positive");
  }
  for (auto l : attention_levels) {
    if (l < 0 || l > num_down) throw std::invalid_argument("denoiser config: bad attention level");
  }
}

bool DenoiserConfig::has_attention(int64_t level) const {
  return use_attention &&
         std::find(attention_levels.begin(), attention_levels.end(), level) !=
             attention_levels.end();
}

void ModelConfig::validate() const {
  unet.validate();
  if (encoder.features != unet.cond_channels) {
    throw std::invalid_argument("model config: encoder width must equal cond_channels");
  }
  if (encoder.blocks < 0 || encoder.growth < 1) {
    throw std::invalid_argument("model config: bad encoder shape");
  }
  if (frequency.n < 1 || !(frequency.omega > 1.0)) {
    throw std::invalid_argument("model config: bad frequency encoder");
  }
}

// Up to 32 groups, at least 4 channels per group.
int64_t norm_groups(int64_t channels) {
  return std::gcd(channels, std::clamp<int64_t>(channels / 4, 1, 32));
}

// ---------------------------------------------------------------------------
// parameter counting

namespace {

int64_t conv_params(int64_t in, int64_t out, int64_t k) { return in * out * k * k + out; }
int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }
int64_t norm_params(int64_t c) { return 2 * c; }

int64_t res_block_params(int64_t in, int64_t out, int64_t d) {
  int64_t n = norm_params(in) + conv_params(in, out, 3) + linear_params(d, 2 * out) +
              norm_params(out) + conv_params(out, out, 3);
  if (in != out) n += conv_params(in, out, 1);
  return n;
}

int64_t attention_params(int64_t c) {
  return norm_params(c) + conv_params(c, 3 * c, 1) + conv_params(c, c, 1);
}

}  // namespace

ModelConfig reference_scale_config() {
  ModelConfig m;
  m.frequency.n = 64;
  m.encoder.features = 64;
  m.encoder.growth = 32;
  m.encoder.blocks = 23;
  m.unet.base_channels = 128;
  m.unet.embed_dim = 512;
  m.unet.cond_channels = 64;
  return m;
}

int64_t count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const auto& u = cfg.unet;
  const auto& e = cfg.encoder;
  int64_t n = 0;

  // condition encoder
  n += conv_params(3, e.features, 3);
  int64_t rdb = 0;
  for (int64_t i = 0; i < 5; ++i) {
    rdb += conv_params(e.features + i * e.growth, i == 4 ? e.features : e.growth, 3);
  }
  n += e.blocks * 3 * rdb;
  n += conv_params(e.features, e.features, 3);
  n += (e.scale_factor == 4 ? 2 : 1) * conv_params(e.features, e.features, 3);

  // embeddings
  n += 2 * (linear_params(cfg.frequency.out_dim(), u.embed_dim) +
            linear_params(u.embed_dim, u.embed_dim));

  // U-Net, mirroring UNetImpl's construction order
  int64_t ch = u.base_channels * u.channel_mults[0];
  n += conv_params(3 + u.cond_channels, ch, 3);
  std::vector<int64_t> skips{ch};
  for (int64_t level = 0; level <= u.num_down; ++level) {
    const int64_t out = u.base_channels * u.channel_mults[level];
    for (int64_t r = 0; r < u.num_res_blocks; ++r) {
      n += res_block_params(ch, out, u.embed_dim);
      ch = out;
      if (u.has_attention(level)) n += attention_params(ch);
      skips.push_back(ch);
    }
    if (level < u.num_down) {
      n += conv_params(ch, ch, 3);
      skips.push_back(ch);
    }
  }
  n += 2 * res_block_params(ch, ch, u.embed_dim);
  if (u.use_attention) n += attention_params(ch);
  for (int64_t level = u.num_down; level >= 0; --level) {
    const int64_t out = u.base_channels * u.channel_mults[level];
    for (int64_t r = 0; r <= u.num_res_blocks; ++r) {
      const int64_t skip = skips.back();
      skips.pop_back();
      n += res_block_params(ch + skip, out, u.embed_dim);
      ch = out;
      if (u.has_attention(level)) n += attention_params(ch);
      if (level > 0 && r == u.num_res_blocks) n += conv_params(ch, ch, 3);
    }
  }
  n += norm_params(ch) + conv_params(ch, 3, 3);
  return n;
}

// ---------------------------------------------------------------------------
// blocks

ResBlockImpl::ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t embed_dim)
    : norm1(register_module("norm1", nn::GroupNorm(norm_groups(in_ch), in_ch))),
      norm2(register_module("norm2", nn::GroupNorm(norm_groups(out_ch), out_ch))),
      conv1(register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)))),
      conv2(register_module("conv2",
                            nn::Conv2d(nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)))),
      emb_proj(register_module("emb_proj", nn::Linear(embed_dim, 2 * out_ch))) {
  if (in_ch != out_ch) {
    skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = scale_shift(norm2(h), emb_proj(torch::silu(emb)));
  h = conv2(torch::silu(h));
  return (skip ? skip(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int64_t channels)
    : norm(register_module("norm", nn::GroupNorm(norm_groups(channels), channels))),
      qkv(register_module("qkv", nn::Conv2d(nn::Conv2dOptions(channels, 3 * channels, 1)))),
      proj(register_module("proj", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)))) {}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto parts = qkv(norm(x)).reshape({b, 3, c, h * w}).unbind(1);
  auto weights = torch::softmax(
      torch::bmm(parts[0].transpose(1, 2), parts[1]) / std::sqrt(static_cast<double>(c)), -1);
  auto attended = torch::bmm(parts[2], weights.transpose(1, 2)).reshape({b, c, h, w});
  return x + proj(attended);
}

UNetImpl::UNetImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto d = cfg_.embed_dim;
  int64_t ch = cfg_.base_channels * cfg_.channel_mults[0];
  input_conv = register_module(
      "input_conv", nn::Conv2d(nn::Conv2dOptions(3 + cfg_.cond_channels, ch, 3).padding(1)));
  std::vector<int64_t> skips{ch};

  auto add = [this](std::vector<Layer>& path, const std::string& prefix, Layer layer) {
    const auto name = prefix + std::to_string(path.size());
    switch (layer.kind) {
      case Layer::Kind::kRes: register_module(name, layer.res); break;
      case Layer::Kind::kAttn: register_module(name, layer.attn); break;
      default: register_module(name, layer.conv); break;
    }
    path.push_back(std::move(layer));
  };

  for (int64_t level = 0; level <= cfg_.num_down; ++level) {
    const int64_t out = cfg_.base_channels * cfg_.channel_mults[level];
    for (int64_t r = 0; r < cfg_.num_res_blocks; ++r) {
      Layer res{Layer::Kind::kRes};
      res.res = ResBlock(ch, out, d);
      ch = out;
      if (cfg_.has_attention(level)) {
        add(down_, "down", std::move(res));
        Layer attn{Layer::Kind::kAttn};
        attn.attn = AttentionBlock(ch);
        attn.push_skip = true;
        add(down_, "down", std::move(attn));
      } else {
        res.push_skip = true;
        add(down_, "down", std::move(res));
      }
      skips.push_back(ch);
    }
    if (level < cfg_.num_down) {
      Layer down{Layer::Kind::kDown};
      down.conv = nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1));
      down.push_skip = true;
      add(down_, "down", std::move(down));
      skips.push_back(ch);
    }
  }

  {
    Layer res1{Layer::Kind::kRes};
    res1.res = ResBlock(ch, ch, d);
    add(mid_, "mid", std::move(res1));
    if (cfg_.use_attention) {
      Layer attn{Layer::Kind::kAttn};
      attn.attn = AttentionBlock(ch);
      add(mid_, "mid", std::move(attn));
    }
    Layer res2{Layer::Kind::kRes};
    res2.res = ResBlock(ch, ch, d);
    add(mid_, "mid", std::move(res2));
  }

  for (int64_t level = cfg_.num_down; level >= 0; --level) {
    const int64_t out = cfg_.base_channels * cfg_.channel_mults[level];
    for (int64_t r = 0; r <= cfg_.num_res_blocks; ++r) {
      const int64_t skip = skips.back();
      skips.pop_back();
      Layer res{Layer::Kind::kRes};
      res.res = ResBlock(ch + skip, out, d);
      res.pop_skip = true;
      add(up_, "up", std::move(res));
      ch = out;
      if (cfg_.has_attention(level)) {
        Layer attn{Layer::Kind::kAttn};
        attn.attn = AttentionBlock(ch);
        add(up_, "up", std::move(attn));
      }
      if (level > 0 && r == cfg_.num_res_blocks) {
        Layer up{Layer::Kind::kUp};
        up.conv = nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).padding(1));
        add(up_, "up", std::move(up));
      }
    }
  }
  out_norm = register_module("out_norm", nn::GroupNorm(norm_groups(ch), ch));
  out_conv = register_module("out_conv", nn::Conv2d(nn::Conv2dOptions(ch, 3, 3).padding(1)));
}

torch::Tensor UNetImpl::run(Layer& layer, torch::Tensor h, const torch::Tensor& emb) {
  switch (layer.kind) {
    case Layer::Kind::kRes: return layer.res->forward(h, emb);
    case Layer::Kind::kAttn: return layer.attn->forward(h);
    case Layer::Kind::kDown: return layer.conv->forward(h);
    case Layer::Kind::kUp:
      return layer.conv->forward(
          torch::upsample_nearest2d(h, std::nullopt, std::vector<double>{2.0, 2.0}));
  }
  return h;
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  const int64_t factor = int64_t{1} << cfg_.num_down;
  if (x.dim() != 4 || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw std::invalid_argument("unet: spatial size must be divisible by 2^num_down");
  }
  if (x.size(1) != 3 + cfg_.cond_channels) {
    throw std::invalid_argument("unet: expected 3 + cond_channels input channels");
  }
  auto h = input_conv(x);
  std::vector<torch::Tensor> skips{h};
  for (auto& layer : down_) {
    h = run(layer, h, emb);
    if (layer.push_skip) skips.push_back(h);
  }
  for (auto& layer : mid_) h = run(layer, h, emb);
  for (auto& layer : up_) {
    if (layer.pop_skip) {
      h = torch::cat({h, skips.back()}, 1);
      skips.pop_back();
    }
    h = run(layer, h, emb);
  }
  return out_conv(torch::silu(out_norm(h)));
}

// ---------------------------------------------------------------------------

CascadeDenoiserImpl::CascadeDenoiserImpl(const ModelConfig& c) : cfg(c) {
  cfg.validate();
  encoder = register_module("encoder", ConditionEncoder(cfg.encoder));
  resolution_mlp = register_module(
      "resolution_mlp", EmbeddingMlp(cfg.frequency.out_dim(), cfg.unet.embed_dim));
  timestep_mlp = register_module("timestep_mlp",
                                 EmbeddingMlp(cfg.frequency.out_dim(), cfg.unet.embed_dim));
  unet = register_module("unet", UNet(cfg.unet));
}

torch::Tensor CascadeDenoiserImpl::encode_condition(const torch::Tensor& x_lr) {
  return encode_condition_image(x_lr, encoder);
}

torch::Tensor CascadeDenoiserImpl::embed(const torch::Tensor& s, const torch::Tensor& t) {
  return combine_embeddings(embed_resolution(s, resolution_mlp, cfg.frequency),
                            embed_timestep(t, timestep_mlp, cfg.frequency));
}

torch::Tensor CascadeDenoiserImpl::predict_noise(const torch::Tensor& x_t,
                                                 const ConditionBundle& cond) {
  const auto& f = cond.cond_features;
  if (f.dim() != 4 || f.size(0) != x_t.size(0) || f.size(2) != x_t.size(2) ||
      f.size(3) != x_t.size(3)) {
    throw std::invalid_argument("predict_noise: condition features not aligned with x_t");
  }
  auto emb = cond.embed.dim() == 1 ? cond.embed.unsqueeze(0).expand({x_t.size(0), -1})
                                   : cond.embed;
  return unet(torch::cat({x_t, f}, 1), emb);
}

torch::Tensor CascadeDenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& x_lr,
                                           const torch::Tensor& s, const torch::Tensor& t) {
  ConditionBundle cond{encode_condition(x_lr), embed(s, t), 0.0};
  return predict_noise(x_t, cond);
}

torch::Tensor predict_noise(const torch::Tensor& x_t, const ConditionBundle& cond,
                            CascadeDenoiser& model) {
  return model->predict_noise(x_t, cond);
}

DenoiserPredictor::DenoiserPredictor(CascadeDenoiser model) : model_(std::move(model)) {
  model_->eval();
}

int64_t DenoiserPredictor::scale_factor() const { return model_->cfg.encoder.scale_factor; }

torch::Tensor DenoiserPredictor::encode_condition(const torch::Tensor& x_lr) {
  torch::NoGradGuard no_grad;
  return model_->encode_condition(x_lr.to(dtype()));
}

torch::Tensor DenoiserPredictor::embed(double s, int64_t t, int64_t batch) {
  torch::NoGradGuard no_grad;
  auto sv = torch::full({batch}, s, torch::kFloat64);
  auto tv = torch::full({batch}, static_cast<double>(t), torch::kFloat64);
  return model_->embed(sv, tv);
}

torch::Tensor DenoiserPredictor::predict_noise(const torch::Tensor& x_t,
                                               const ConditionBundle& cond) {
  torch::NoGradGuard no_grad;
  return model_->predict_noise(x_t.to(dtype()), cond);
}

torch::Dtype DenoiserPredictor::dtype() const {
  return model_->unet->parameters().front().scalar_type();
}

}  // namespace geocascade
