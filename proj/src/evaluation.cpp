#include "geocascade/evaluation.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace geocascade {

FeatureAccumulator::FeatureAccumulator(int64_t dim)
    : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::MatrixXd::Zero(dim, dim)) {
  if (dim < 1) throw std::invalid_argument("FeatureAccumulator: dim must be positive");
}

void FeatureAccumulator::add(const Eigen::VectorXd& x) {
  if (x.size() != mean_.size()) throw std::invalid_argument("FeatureAccumulator: dim mismatch");
  if (!x.allFinite()) throw std::invalid_argument("FeatureAccumulator: non-finite feature");
  ++count_;
  Eigen::VectorXd delta = x - mean_;
  mean_ += delta / static_cast<double>(count_);
  m2_.noalias() += delta * (x - mean_).transpose();
}

void FeatureAccumulator::merge(const FeatureAccumulator& other) {
  if (other.mean_.size() != mean_.size()) {
    throw std::invalid_argument("FeatureAccumulator: dim mismatch");
  }
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(count_);
  const double nb = static_cast<double>(other.count_);
  const double n = na + nb;
  Eigen::VectorXd delta = other.mean_ - mean_;
  mean_ += delta * (nb / n);
  m2_ += other.m2_ + delta * delta.transpose() * (na * nb / n);
  count_ += other.count_;
}

FeatureStats FeatureAccumulator::stats() const {
  if (count_ < 2) throw std::runtime_error("feature statistics need at least 2 samples");
  FeatureStats s;
  s.mu = mean_;
  Eigen::MatrixXd m = m2_ / static_cast<double>(count_ - 1);
  s.sigma = 0.5 * (m + m.transpose());
  s.count = count_;
  return s;
}

RandomConvExtractor::RandomConvExtractor(uint64_t seed, int64_t dim) : seed_(seed), dim_(dim) {
  if (dim < 1) throw std::invalid_argument("RandomConvExtractor: dim must be positive");
  auto gen = at::detail::createCPUGenerator(seed);
  const std::vector<int64_t> chans{3, 16, 32, dim};
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  for (size_t i = 0; i + 1 < chans.size(); ++i) {
    const int64_t fan_in = chans[i] * 9;
    weights_.push_back(torch::randn({chans[i + 1], chans[i], 3, 3}, gen, opts) *
                       std::sqrt(2.0 / static_cast<double>(fan_in)));
    biases_.push_back(torch::randn({chans[i + 1]}, gen, opts) * 0.1);
  }
}

torch::Tensor RandomConvExtractor::features(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) {
    throw std::invalid_argument("features: expected [B, 3, H, W]");
  }
  torch::NoGradGuard guard;
  auto h = images.detach().to(torch::kFloat64);
  for (size_t i = 0; i < weights_.size(); ++i) {
    const int64_t stride = i == 0 ? 1 : 2;
    h = torch::relu(torch::conv2d(h, weights_[i], biases_[i], stride, 1));
  }
  return h.mean({2, 3});
}

std::string RandomConvExtractor::id() const {
  std::ostringstream os;
  os << "random-conv-" << dim_ << "-seed" << seed_;
  return os.str();
}

FeatureStats extract_features(const std::vector<torch::Tensor>& images,
                              FeatureExtractor& extractor) {
  FeatureAccumulator acc(extractor.dim());
  for (const auto& img : images) {
    auto batch = img.dim() == 3 ? img.unsqueeze(0) : img;
    auto f = extractor.features(batch).to(torch::kFloat64).contiguous();
    for (int64_t b = 0; b < f.size(0); ++b) {
      auto row = f[b].contiguous();
      acc.add(Eigen::Map<const Eigen::VectorXd>(row.data_ptr<double>(), row.numel()));
    }
  }
  if (acc.count() < 2) throw std::runtime_error("FID needs at least 2 images per set");
  return acc.stats();
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const FeatureStats& a, const FeatureStats& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != a.mu.size() ||
      b.sigma.rows() != b.mu.size()) {
    throw std::invalid_argument("fid: dimension mismatch");
  }
  if (!a.mu.allFinite() || !b.mu.allFinite() || !a.sigma.allFinite() || !b.sigma.allFinite()) {
    throw std::invalid_argument("fid: non-finite statistics");
  }
  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), the inner matrix being PSD.
  Eigen::MatrixXd sa = psd_sqrt(a.sigma);
  Eigen::MatrixXd inner = sa * b.sigma * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_covmean = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() -
                   2.0 * tr_covmean;
  return std::max(0.0, d);
}

SeamGradient seam_gradient(const torch::Tensor& intensity, const TileGrid& grid) {
  auto img = intensity.dim() == 4 ? intensity.squeeze(0) : intensity;
  if (img.dim() != 3) throw std::invalid_argument("seam_gradient: expected [C, H, W]");
  if (img.size(1) != grid.canvas_h || img.size(2) != grid.canvas_w) {
    throw std::invalid_argument("seam_gradient: canvas does not match grid");
  }
  img = img.to(torch::kFloat64);
  SeamGradient out;
  if (grid.tiles.empty()) return out;

  const int64_t y0 = grid.tiles.front().y0;
  const int64_t x0 = grid.tiles.front().x0;
  const int64_t y1 = grid.tiles.back().y0 + grid.window;
  const int64_t x1 = grid.tiles.back().x0 + grid.window;
  auto region = img.slice(1, y0, y1).slice(2, x0, x1);

  int axes = 0;
  const auto cols = grid.seam_columns();
  if (!cols.empty()) {
    double total = 0.0;
    for (int64_t x : cols) {
      const int64_t lx = x - x0;
      total += (region.select(2, lx) - region.select(2, lx - 1)).abs().mean().item<double>();
    }
    out.horizontal = total / static_cast<double>(cols.size());
    ++axes;
  }
  const auto rows = grid.seam_rows();
  if (!rows.empty()) {
    double total = 0.0;
    for (int64_t y : rows) {
      const int64_t ly = y - y0;
      total += (region.select(1, ly) - region.select(1, ly - 1)).abs().mean().item<double>();
    }
    out.vertical = total / static_cast<double>(rows.size());
    ++axes;
  }
  if (axes > 0) out.average = (out.horizontal + out.vertical) / axes;
  return out;
}

}  // namespace geocascade
