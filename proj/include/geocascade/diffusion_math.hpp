#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace geocascade {

/// Precomputed per-timestep quantities of a DDPM variance schedule.
///
/// Timesteps are 1-based (t = 1..T); t = 0 denotes clean data and has
/// alpha_cum(0) == 1 by convention. The object is immutable after
/// construction.
class NoiseSchedule {
 public:
  /// Builds a schedule from explicit betas (beta[0] is beta_1).
  explicit NoiseSchedule(std::vector<double> betas);

  int64_t T() const { return static_cast<int64_t>(beta_.size()); }

  double beta(int64_t t) const;
  double alpha_cum(int64_t t) const;  // accepts t = 0
  double posterior_var(int64_t t) const;
  double sigma2(int64_t t) const;
  double lambda(int64_t t) const;
  /// alpha_cum / (1 - alpha_cum)
  double snr(int64_t t) const;

  std::span<const double> betas() const { return beta_; }
  std::span<const double> alpha_cums() const { return alpha_cum_; }

  /// Parameters for the linear constructor, kept for serialization.
  double beta_min() const { return beta_.front(); }
  double beta_max() const { return beta_.back(); }

 private:
  void check(int64_t t) const;

  std::vector<double> beta_;
  std::vector<double> alpha_cum_;
  std::vector<double> posterior_var_;
  std::vector<double> sigma2_;
  std::vector<double> lambda_;
};

NoiseSchedule make_linear_schedule(int64_t T, double beta_min, double beta_max);

struct SamplerConfig {
  double eta = 0.0;
  int64_t num_steps = 50;
  /// Bound on the predicted x0 at each step; 0 disables clipping.
  double clip_x0 = 1.0;
};

/// Uniform-stride DDIM sub-sequence of {1..T}, strictly increasing, ending at T.
std::vector<int64_t> ddim_timesteps(int64_t T, int64_t num_steps);

struct P2Config {
  double k = 1.0;
  double gamma = 1.0;
};

/// sqrt(a_t) x0 + sqrt(1 - a_t) eps
torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& sched);

/// Batched form: x0/eps are [B, ...] and t holds one timestep per batch row.
torch::Tensor q_sample(const torch::Tensor& x0, std::span<const int64_t> t,
                       const torch::Tensor& eps, const NoiseSchedule& sched);

struct Posterior {
  torch::Tensor mean;
  double variance = 0.0;
};

/// Mean and variance of q(x_{t-1} | x_t, x_0).
Posterior posterior_params(const torch::Tensor& x0, const torch::Tensor& xt, int64_t t,
                           const NoiseSchedule& sched);

/// Ancestral step: mu_theta(x_t, eps_pred) + sqrt(beta_t) z, with the
/// 1/sqrt(1 - beta_t) prefactor. z is ignored at t = 1.
torch::Tensor ddpm_step(const torch::Tensor& xt, const torch::Tensor& eps_pred, int64_t t,
                        const NoiseSchedule& sched, const torch::Tensor& z);

/// DDIM noise scale sigma_t for the jump t -> t_prev.
double ddim_sigma(int64_t t, int64_t t_prev, double eta, const NoiseSchedule& sched);

/// DDIM update from t to t_prev (t_prev may be 0). z may be undefined when eta == 0.
/// With cfg.clip_x0 > 0 the x0 estimate is clamped and the noise re-derived from it.
torch::Tensor ddim_step(const torch::Tensor& xt, const torch::Tensor& eps_pred, int64_t t,
                        int64_t t_prev, const SamplerConfig& cfg, const NoiseSchedule& sched,
                        const torch::Tensor& z = {});

/// lambda'_t = lambda_t / (k + SNR(t))^gamma
double p2_weight(int64_t t, const NoiseSchedule& sched, const P2Config& cfg);

/// Batch mean of lambda'_t * L_{t-1}, where L_{t-1} = MSE(eps, eps_pred) / lambda_t.
/// The per-example weight therefore reduces to 1 / (k + SNR(t))^gamma.
torch::Tensor training_loss(const torch::Tensor& eps, const torch::Tensor& eps_pred,
                            std::span<const int64_t> t, const NoiseSchedule& sched,
                            const P2Config& cfg);

}  // namespace geocascade
