#include "geocascade/diffusion_math.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace geocascade {

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

// Per-row coefficients broadcast against a [B, ...] tensor.
torch::Tensor row_coeffs(const std::vector<double>& values, const torch::Tensor& like) {
  std::vector<int64_t> shape(like.dim(), 1);
  shape[0] = static_cast<int64_t>(values.size());
  return torch::tensor(values, torch::TensorOptions().dtype(torch::kFloat64))
      .to(like.scalar_type())
      .view(shape);
}

int64_t require_step(int64_t t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T()) throw std::out_of_range("timestep outside [1, T]");
  return t;
}

}  // namespace

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  if (beta_.size() < 2) throw std::invalid_argument("NoiseSchedule: need T >= 2");
  const auto n = beta_.size();
  alpha_cum_.resize(n);
  posterior_var_.resize(n);
  sigma2_.resize(n);
  lambda_.resize(n);
  double prod = 1.0;
  for (size_t i = 0; i < n; ++i) {
    const double b = beta_[i];
    if (!std::isfinite(b) || b <= 0.0 || b >= 1.0) {
      throw std::invalid_argument("NoiseSchedule: beta must lie in (0, 1)");
    }
    const double prev = prod;
    prod *= 1.0 - b;
    alpha_cum_[i] = prod;
    posterior_var_[i] = (1.0 - prev) / (1.0 - prod) * b;
    sigma2_[i] = b;
    lambda_[i] = (1.0 - b) * (1.0 - prod) / b;
  }
}

void NoiseSchedule::check(int64_t t) const {
  if (t < 1 || t > T()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(T()) + "]");
  }
}

double NoiseSchedule::beta(int64_t t) const {
  check(t);
  return beta_[t - 1];
}

double NoiseSchedule::alpha_cum(int64_t t) const {
  if (t == 0) return 1.0;
  check(t);
  return alpha_cum_[t - 1];
}

double NoiseSchedule::posterior_var(int64_t t) const {
  check(t);
  return posterior_var_[t - 1];
}

double NoiseSchedule::sigma2(int64_t t) const {
  check(t);
  return sigma2_[t - 1];
}

double NoiseSchedule::lambda(int64_t t) const {
  check(t);
  return lambda_[t - 1];
}

double NoiseSchedule::snr(int64_t t) const {
  const double a = alpha_cum(t);
  return a / (1.0 - a);
}

NoiseSchedule make_linear_schedule(int64_t T, double beta_min, double beta_max) {
  if (T < 2) throw std::invalid_argument("make_linear_schedule: T must be >= 2");
  if (!std::isfinite(beta_min) || !std::isfinite(beta_max) || beta_min <= 0.0 ||
      beta_min > beta_max || beta_max >= 1.0) {
    throw std::invalid_argument("make_linear_schedule: need 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> betas(static_cast<size_t>(T));
  for (int64_t i = 0; i < T; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(T - 1);
    betas[i] = beta_min + f * (beta_max - beta_min);
  }
  betas.back() = beta_max;
  return NoiseSchedule(std::move(betas));
}

std::vector<int64_t> ddim_timesteps(int64_t T, int64_t num_steps) {
  if (num_steps < 1 || num_steps > T) {
    throw std::invalid_argument("ddim_timesteps: need 1 <= num_steps <= T");
  }
  std::vector<int64_t> steps(static_cast<size_t>(num_steps));
  for (int64_t i = 1; i <= num_steps; ++i) {
    // round(i * T / num_steps) in integer arithmetic; exact stride when divisible
    steps[i - 1] = (2 * i * T + num_steps) / (2 * num_steps);
  }
  return steps;
}

torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& sched) {
  check_same_shape(x0, eps, "q_sample");
  const double a = sched.alpha_cum(require_step(t, sched));
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, std::span<const int64_t> t,
                       const torch::Tensor& eps, const NoiseSchedule& sched) {
  check_same_shape(x0, eps, "q_sample");
  if (x0.dim() < 1 || x0.size(0) != static_cast<int64_t>(t.size())) {
    throw std::invalid_argument("q_sample: batch size does not match timestep count");
  }
  std::vector<double> sa(t.size()), sb(t.size());
  for (size_t i = 0; i < t.size(); ++i) {
    const double a = sched.alpha_cum(require_step(t[i], sched));
    sa[i] = std::sqrt(a);
    sb[i] = std::sqrt(1.0 - a);
  }
  return row_coeffs(sa, x0) * x0 + row_coeffs(sb, eps) * eps;
}

Posterior posterior_params(const torch::Tensor& x0, const torch::Tensor& xt, int64_t t,
                           const NoiseSchedule& sched) {
  check_same_shape(x0, xt, "posterior_params");
  const double b = sched.beta(t);
  const double a = sched.alpha_cum(t);
  const double a_prev = sched.alpha_cum(t - 1);
  const double c0 = std::sqrt(a_prev) * b / (1.0 - a);
  const double ct = std::sqrt(1.0 - b) * (1.0 - a_prev) / (1.0 - a);
  return {c0 * x0 + ct * xt, sched.posterior_var(t)};
}

torch::Tensor ddpm_step(const torch::Tensor& xt, const torch::Tensor& eps_pred, int64_t t,
                        const NoiseSchedule& sched, const torch::Tensor& z) {
  check_same_shape(xt, eps_pred, "ddpm_step");
  const double b = sched.beta(t);
  const double a = sched.alpha_cum(t);
  auto mean = (xt - (b / std::sqrt(1.0 - a)) * eps_pred) / std::sqrt(1.0 - b);
  if (t == 1) return mean;
  check_same_shape(xt, z, "ddpm_step");
  return mean + std::sqrt(sched.sigma2(t)) * z;
}

double ddim_sigma(int64_t t, int64_t t_prev, double eta, const NoiseSchedule& sched) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("ddim: eta must lie in [0, 1]");
  if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddim: need 0 <= t_prev < t");
  const double a = sched.alpha_cum(t);
  const double a_prev = sched.alpha_cum(t_prev);
  if (a_prev <= a) throw std::logic_error("ddim: schedule is not strictly decreasing");
  return eta * std::sqrt((1.0 - a_prev) / (1.0 - a)) * std::sqrt(1.0 - a / a_prev);
}

torch::Tensor ddim_step(const torch::Tensor& xt, const torch::Tensor& eps_pred, int64_t t,
                        int64_t t_prev, const SamplerConfig& cfg, const NoiseSchedule& sched,
                        const torch::Tensor& z) {
  check_same_shape(xt, eps_pred, "ddim_step");
  const double sigma = ddim_sigma(t, t_prev, cfg.eta, sched);
  const double a = sched.alpha_cum(t);
  const double a_prev = sched.alpha_cum(t_prev);
  const double dir2 = 1.0 - a_prev - sigma * sigma;
  if (dir2 < 0.0) throw std::invalid_argument("ddim: eta too large for this step");
  auto x0_hat = (xt - std::sqrt(1.0 - a) * eps_pred) / std::sqrt(a);
  auto eps = eps_pred;
  if (cfg.clip_x0 > 0.0) {
    x0_hat = x0_hat.clamp(-cfg.clip_x0, cfg.clip_x0);
    eps = (xt - std::sqrt(a) * x0_hat) / std::sqrt(1.0 - a);
  }
  auto out = std::sqrt(a_prev) * x0_hat + std::sqrt(dir2) * eps;
  if (sigma > 0.0) {
    check_same_shape(xt, z, "ddim_step");
    out = out + sigma * z;
  }
  return out;
}

double p2_weight(int64_t t, const NoiseSchedule& sched, const P2Config& cfg) {
  return sched.lambda(t) / std::pow(cfg.k + sched.snr(t), cfg.gamma);
}

torch::Tensor training_loss(const torch::Tensor& eps, const torch::Tensor& eps_pred,
                            std::span<const int64_t> t, const NoiseSchedule& sched,
                            const P2Config& cfg) {
  check_same_shape(eps, eps_pred, "training_loss");
  if (eps.dim() < 1 || eps.size(0) != static_cast<int64_t>(t.size())) {
    throw std::invalid_argument("training_loss: batch size does not match timestep count");
  }
  std::vector<double> w(t.size());
  for (size_t i = 0; i < t.size(); ++i) w[i] = p2_weight(t[i], sched, cfg) / sched.lambda(t[i]);
  const auto per_example = (eps - eps_pred).pow(2).flatten(1).mean(1);
  auto weights = torch::tensor(w, torch::kFloat64).to(per_example.scalar_type());
  return (weights * per_example).mean();
}

}  // namespace geocascade
