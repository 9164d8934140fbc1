#include "geocascade/conditioning.hpp"

#include <cmath>
#include <stdexcept>

namespace geocascade {

namespace nn = torch::nn;

std::vector<double> encoder_frequencies(const FrequencyEncoderConfig& cfg) {
  if (cfg.n < 1 || !(cfg.omega > 1.0)) {
    throw std::invalid_argument("frequency encoder: need n >= 1 and omega > 1");
  }
  std::vector<double> f(static_cast<size_t>(cfg.n));
  const double log_omega = std::log(cfg.omega);
  for (int64_t i = 1; i <= cfg.n; ++i) {
    f[i - 1] = std::exp(-static_cast<double>(i) / static_cast<double>(cfg.n) * log_omega);
  }
  return f;
}

std::vector<double> frequency_encode(double value, const FrequencyEncoderConfig& cfg) {
  if (!std::isfinite(value)) throw std::invalid_argument("frequency_encode: non-finite input");
  const auto f = encoder_frequencies(cfg);
  std::vector<double> out;
  out.reserve(2 * f.size());
  for (double fi : f) {
    out.push_back(std::cos(value * fi));
    out.push_back(std::sin(value * fi));
  }
  return out;
}

torch::Tensor frequency_encode(const torch::Tensor& values, const FrequencyEncoderConfig& cfg,
                               torch::Dtype dtype) {
  if (values.dim() != 1) throw std::invalid_argument("frequency_encode: expected [B] values");
  auto v = values.to(torch::kFloat64);
  if (!torch::isfinite(v).all().item<bool>()) {
    throw std::invalid_argument("frequency_encode: non-finite input");
  }
  auto f = torch::tensor(encoder_frequencies(cfg), torch::kFloat64);
  auto arg = v.unsqueeze(1) * f.unsqueeze(0);  // [B, n]
  // interleave -> [B, n, 2] -> [B, 2n]
  return torch::stack({arg.cos(), arg.sin()}, 2).flatten(1).to(dtype);
}

EmbeddingMlpImpl::EmbeddingMlpImpl(int64_t in_dim, int64_t embed_dim)
    : fc1(register_module("fc1", nn::Linear(in_dim, embed_dim))),
      fc2(register_module("fc2", nn::Linear(embed_dim, embed_dim))) {}

torch::Tensor EmbeddingMlpImpl::forward(const torch::Tensor& encoded) {
  return fc2(torch::silu(fc1(encoded)));
}

namespace {

torch::Tensor param_dtype_encode(const torch::Tensor& v, EmbeddingMlp& mlp,
                                 const FrequencyEncoderConfig& cfg) {
  const auto dtype = mlp->fc1->weight.scalar_type();
  return mlp->forward(frequency_encode(v, cfg, dtype));
}

}  // namespace

torch::Tensor embed_resolution(const torch::Tensor& s, EmbeddingMlp& mlp,
                               const FrequencyEncoderConfig& cfg) {
  if (!(s > 0).all().item<bool>()) {
    throw std::invalid_argument("embed_resolution: resolution must be positive");
  }
  return param_dtype_encode(s, mlp, cfg);
}

torch::Tensor embed_resolution(double s, EmbeddingMlp& mlp, const FrequencyEncoderConfig& cfg) {
  return embed_resolution(torch::full({1}, s, torch::kFloat64), mlp, cfg);
}

torch::Tensor embed_timestep(const torch::Tensor& t, EmbeddingMlp& mlp,
                             const FrequencyEncoderConfig& cfg) {
  if (!(t >= 1).all().item<bool>()) {
    throw std::invalid_argument("embed_timestep: timestep must be >= 1");
  }
  return param_dtype_encode(t, mlp, cfg);
}

torch::Tensor embed_timestep(int64_t t, EmbeddingMlp& mlp, const FrequencyEncoderConfig& cfg) {
  return embed_timestep(torch::full({1}, static_cast<double>(t), torch::kFloat64), mlp, cfg);
}

torch::Tensor combine_embeddings(const torch::Tensor& e_s, const torch::Tensor& e_t) {
  if (e_s.size(-1) != e_t.size(-1)) {
    throw std::invalid_argument("combine_embeddings: dimension mismatch");
  }
  return e_s + e_t;
}

torch::Tensor scale_shift(const torch::Tensor& h, const torch::Tensor& e) {
  if (h.dim() != 4) throw std::invalid_argument("scale_shift: expected [B, C, H, W] features");
  const auto channels = h.size(1);
  if (e.size(-1) != 2 * channels) {
    throw std::invalid_argument("scale_shift: embedding width must be twice the channel count");
  }
  auto rows = e.dim() == 1 ? e.unsqueeze(0) : e;
  auto parts = rows.chunk(2, -1);
  auto scale = parts[0].unsqueeze(-1).unsqueeze(-1);
  auto shift = parts[1].unsqueeze(-1).unsqueeze(-1);
  return (1 + scale) * h + shift;
}

ResidualDenseBlockImpl::ResidualDenseBlockImpl(int64_t features, int64_t growth) {
  for (int64_t i = 0; i < 5; ++i) {
    const int64_t in = features + i * growth;
    const int64_t out = i == 4 ? features : growth;
    convs.push_back(register_module("conv" + std::to_string(i + 1),
                                    nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1))));
  }
}

torch::Tensor ResidualDenseBlockImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> feats{x};
  for (size_t i = 0; i + 1 < convs.size(); ++i) {
    feats.push_back(torch::leaky_relu(convs[i](torch::cat(feats, 1)), 0.2));
  }
  return convs.back()(torch::cat(feats, 1)) * 0.2 + x;
}

RrdbImpl::RrdbImpl(int64_t features, int64_t growth)
    : rdb1(register_module("rdb1", ResidualDenseBlock(features, growth))),
      rdb2(register_module("rdb2", ResidualDenseBlock(features, growth))),
      rdb3(register_module("rdb3", ResidualDenseBlock(features, growth))) {}

torch::Tensor RrdbImpl::forward(const torch::Tensor& x) {
  return rdb3(rdb2(rdb1(x))) * 0.2 + x;
}

namespace {

int64_t upsample_rounds(int64_t n) {
  if (n == 2) return 1;
  if (n == 4) return 2;
  throw std::invalid_argument("condition encoder: scale factor must be 2 or 4");
}

}  // namespace

ConditionEncoderImpl::ConditionEncoderImpl(const ConditionEncoderConfig& c) : cfg(c) {
  const auto rounds = upsample_rounds(cfg.scale_factor);
  conv_first = register_module("conv_first",
                               nn::Conv2d(nn::Conv2dOptions(3, cfg.features, 3).padding(1)));
  trunk = register_module("trunk", nn::Sequential());
  for (int64_t i = 0; i < cfg.blocks; ++i) trunk->push_back(Rrdb(cfg.features, cfg.growth));
  conv_trunk = register_module(
      "conv_trunk", nn::Conv2d(nn::Conv2dOptions(cfg.features, cfg.features, 3).padding(1)));
  for (int64_t i = 0; i < rounds; ++i) {
    up_convs.push_back(register_module(
        "up" + std::to_string(i + 1),
        nn::Conv2d(nn::Conv2dOptions(cfg.features, cfg.features, 3).padding(1))));
  }
}

torch::Tensor ConditionEncoderImpl::forward(const torch::Tensor& x_lr) {
  if (x_lr.dim() != 4 || x_lr.size(1) != 3) {
    throw std::invalid_argument("condition encoder: expected RGB input [B, 3, H, W]");
  }
  auto feat = conv_first(x_lr);
  feat = feat + conv_trunk(trunk->forward(feat));
  for (auto& conv : up_convs) {
    feat = torch::upsample_nearest2d(feat, std::nullopt, std::vector<double>{2.0, 2.0});
    feat = torch::leaky_relu(conv(feat), 0.2);
  }
  return feat;
}

torch::Tensor encode_condition_image(const torch::Tensor& x_lr, ConditionEncoder& encoder) {
  return encoder->forward(x_lr);
}

}  // namespace geocascade
