#include "geocascade/cascade_tiler.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <stdexcept>

namespace geocascade {

namespace F = torch::nn::functional;

int64_t StageSpec::stride() const {
  return window - static_cast<int64_t>(std::llround(overlap_fraction * window));
}

void StageSpec::validate() const {
  if (N != 2 && N != 4) throw std::invalid_argument("stage: N must be 2 or 4");
  if (!(s_in > 0.0)) throw std::invalid_argument("stage: s_in must be positive");
  if (overlap_fraction != 0.0 && overlap_fraction != 0.5) {
    throw std::invalid_argument("stage: overlap_fraction must be 0 or 1/2");
  }
  if (window < 2 || window % 2 != 0) throw std::invalid_argument("stage: window must be even");
  if (stride() % N != 0 || window % N != 0) {
    throw std::invalid_argument("stage: window and stride must be multiples of N");
  }
}

// ---------------------------------------------------------------------------
// grid

namespace {

std::vector<int64_t> seams(int64_t count, int64_t stride, int64_t overlap, int64_t origin) {
  std::vector<int64_t> out;
  for (int64_t j = 1; j < count; ++j) out.push_back(origin + j * stride + overlap / 2);
  return out;
}

}  // namespace

std::vector<int64_t> TileGrid::seam_columns() const {
  return seams(cols, stride, overlap(), tiles.empty() ? 0 : tiles.front().x0);
}

std::vector<int64_t> TileGrid::seam_rows() const {
  return seams(rows, stride, overlap(), tiles.empty() ? 0 : tiles.front().y0);
}

TileGrid plan_tiles(int64_t canvas_h, int64_t canvas_w, int64_t window) {
  if (window < 2 || window % 2 != 0) throw std::invalid_argument("plan_tiles: window must be even");
  return plan_tiles(canvas_h, canvas_w, window, window / 2);
}

TileGrid plan_tiles(int64_t canvas_h, int64_t canvas_w, int64_t window, int64_t stride) {
  if (window < 1 || stride < 1 || 2 * stride < window || stride > window) {
    throw std::invalid_argument("plan_tiles: stride must lie in [window/2, window]");
  }
  if (canvas_h < window || canvas_w < window) {
    throw std::invalid_argument("plan_tiles: canvas smaller than window");
  }
  if ((canvas_h - window) % stride != 0 || (canvas_w - window) % stride != 0) {
    throw std::invalid_argument("plan_tiles: canvas not aligned to the stride");
  }
  TileGrid grid;
  grid.canvas_h = canvas_h;
  grid.canvas_w = canvas_w;
  grid.window = window;
  grid.stride = stride;
  grid.rows = (canvas_h - window) / stride + 1;
  grid.cols = (canvas_w - window) / stride + 1;
  for (int64_t r = 0; r < grid.rows; ++r) {
    for (int64_t c = 0; c < grid.cols; ++c) grid.tiles.push_back({r, c, r * stride, c * stride});
  }
  return grid;
}

// ---------------------------------------------------------------------------
// noise

std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::kSharedAll: return "shared-all";
    case NoiseMode::kQuadrantConstrained: return "quadrant-constrained";
    case NoiseMode::kIndependent: return "independent";
  }
  return "?";
}

NoiseMode parse_noise_mode(const std::string& name) {
  if (name == "shared-all") return NoiseMode::kSharedAll;
  if (name == "quadrant-constrained") return NoiseMode::kQuadrantConstrained;
  if (name == "independent") return NoiseMode::kIndependent;
  throw std::invalid_argument("unknown noise mode: " + name);
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  // splitmix64 finalizer over each word
  auto mix = [](uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  uint64_t h = mix(seed);
  h = mix(h ^ a);
  h = mix(h ^ b);
  return mix(h ^ c);
}

namespace {

torch::Tensor seeded_normal(uint64_t seed, at::IntArrayRef shape) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::kFloat32);
}

constexpr uint64_t kCellTag = 0xce11;
constexpr uint64_t kTileTag = 0x711e;

}  // namespace

NoisePlan::NoisePlan(TileGrid grid, NoiseMode mode, uint64_t seed, int64_t channels)
    : grid_(std::move(grid)), mode_(mode), seed_(seed), channels_(channels) {
  if (grid_.tiles.empty()) throw std::invalid_argument("noise plan: empty grid");
  if (mode_ != NoiseMode::kIndependent) {
    const int64_t q = grid_.window / 2;
    if (grid_.window % 2 != 0 || grid_.stride % q != 0) {
      throw std::invalid_argument("noise plan: stride must be a multiple of window/2");
    }
  }
}

torch::Tensor NoisePlan::cell(int64_t r, int64_t c) const {
  const int64_t q = grid_.window / 2;
  return seeded_normal(mix_seed(seed_, kCellTag, static_cast<uint64_t>(r),
                                static_cast<uint64_t>(c)),
                       {1, channels_, q, q});
}

torch::Tensor NoisePlan::noise_for(size_t tile) const {
  if (tile >= grid_.tiles.size()) throw std::out_of_range("noise plan: tile index");
  const auto& p = grid_.tiles[tile];
  if (mode_ == NoiseMode::kIndependent) {
    return seeded_normal(mix_seed(seed_, kTileTag, tile), {1, channels_, grid_.window,
                                                           grid_.window});
  }
  const int64_t q = grid_.window / 2;
  torch::Tensor quad[2][2];
  for (int64_t i = 0; i < 2; ++i) {
    for (int64_t j = 0; j < 2; ++j) {
      quad[i][j] = mode_ == NoiseMode::kSharedAll ? cell(0, 0)
                                                  : cell(p.y0 / q + i, p.x0 / q + j);
    }
  }
  auto top = torch::cat({quad[0][0], quad[0][1]}, 3);
  auto bottom = torch::cat({quad[1][0], quad[1][1]}, 3);
  return torch::cat({top, bottom}, 2);
}

std::vector<torch::Tensor> NoisePlan::assignments() const {
  std::vector<torch::Tensor> out;
  out.reserve(grid_.tiles.size());
  for (size_t i = 0; i < grid_.tiles.size(); ++i) out.push_back(noise_for(i));
  return out;
}

NoisePlan make_noise_plan(const TileGrid& grid, NoiseMode mode, uint64_t seed) {
  return NoisePlan(grid, mode, seed);
}

// ---------------------------------------------------------------------------
// sampling

torch::Tensor sample_window(const torch::Tensor& x_lr, double s, const torch::Tensor& noise,
                            NoisePredictor& model, const NoiseSchedule& sched,
                            const SamplerConfig& sampler, std::optional<at::Generator> gen) {
  torch::NoGradGuard no_grad;
  const auto n = model.scale_factor();
  if (x_lr.dim() != 4 || noise.dim() != 4 || x_lr.size(0) != noise.size(0) ||
      x_lr.size(2) * n != noise.size(2) || x_lr.size(3) * n != noise.size(3)) {
    throw std::invalid_argument("sample_window: condition must be window/N on each side");
  }
  if (sampler.eta > 0.0 && !gen) {
    throw std::invalid_argument("sample_window: eta > 0 needs a generator");
  }
  const auto batch = noise.size(0);
  const auto steps = ddim_timesteps(sched.T(), sampler.num_steps);
  ConditionBundle cond{model.encode_condition(x_lr), {}, s};
  auto x = noise.to(model.dtype());
  for (auto i = static_cast<int64_t>(steps.size()) - 1; i >= 0; --i) {
    const int64_t t = steps[i];
    const int64_t t_prev = i > 0 ? steps[i - 1] : 0;
    cond.embed = model.embed(s, t, batch);
    auto eps = model.predict_noise(x, cond);
    torch::Tensor z;
    if (sampler.eta > 0.0) z = torch::randn(x.sizes(), *gen, x.options());
    x = ddim_step(x, eps, t, t_prev, sampler, sched, z);
  }
  return x;
}

torch::Tensor generate_window(const torch::Tensor& x_lr_block, double s_in,
                              const torch::Tensor& noise, NoisePredictor& model,
                              const NoiseSchedule& sched, const SamplerConfig& sampler) {
  if (sampler.eta != 0.0) {
    throw std::invalid_argument("generate_window: tiled generation requires eta = 0");
  }
  return sample_window(x_lr_block, s_in, noise, model, sched, sampler);
}

// ---------------------------------------------------------------------------
// stitching

std::string to_string(StitchMode mode) {
  return mode == StitchMode::kCrossfade ? "crossfade" : "center-cut";
}

StitchMode parse_stitch_mode(const std::string& name) {
  if (name == "crossfade") return StitchMode::kCrossfade;
  if (name == "center-cut") return StitchMode::kCenterCut;
  throw std::invalid_argument("unknown stitch mode: " + name);
}

std::vector<double> axis_weights(int64_t window, int64_t stride, int64_t index, int64_t count,
                                 StitchMode mode) {
  const int64_t overlap = window - stride;
  std::vector<double> w(static_cast<size_t>(window), 1.0);
  if (overlap == 0) return w;
  const bool first = index == 0;
  const bool last = index == count - 1;
  for (int64_t u = 0; u < window; ++u) {
    double v = 1.0;
    if (mode == StitchMode::kCrossfade) {
      if (!first && u < overlap) v = (static_cast<double>(u) + 0.5) / static_cast<double>(overlap);
      if (!last && u >= window - overlap) {
        v = (static_cast<double>(window - u) - 0.5) / static_cast<double>(overlap);
      }
    } else {
      const int64_t begin = first ? 0 : overlap / 2;
      const int64_t end = last ? window : stride + overlap / 2;
      v = (u >= begin && u < end) ? 1.0 : 0.0;
    }
    w[u] = v;
  }
  return w;
}

CanvasAccumulator::CanvasAccumulator(TileGrid grid, StitchMode mode, int64_t channels)
    : grid_(std::move(grid)),
      mode_(mode),
      canvas_(torch::zeros({channels, grid_.canvas_h, grid_.canvas_w}, torch::kFloat64)),
      weights_(torch::zeros({grid_.canvas_h, grid_.canvas_w}, torch::kFloat64)),
      last_(torch::zeros({channels, grid_.canvas_h, grid_.canvas_w}, torch::kFloat64)),
      covered_(torch::zeros({grid_.canvas_h, grid_.canvas_w}, torch::kBool)),
      seen_(grid_.tiles.size(), false) {}

void CanvasAccumulator::add(size_t index, const torch::Tensor& tile) {
  using torch::indexing::Slice;
  if (index >= grid_.tiles.size()) throw std::out_of_range("stitch: tile index");
  if (seen_[index]) throw std::invalid_argument("stitch: tile added twice");
  auto t = tile.dim() == 4 ? tile.squeeze(0) : tile;
  if (t.dim() != 3 || t.size(0) != canvas_.size(0) || t.size(1) != grid_.window ||
      t.size(2) != grid_.window) {
    throw std::invalid_argument("stitch: tile has the wrong shape");
  }
  t = t.to(torch::kFloat64);
  const auto& p = grid_.tiles[index];
  auto wy = torch::tensor(axis_weights(grid_.window, grid_.stride, p.row, grid_.rows, mode_),
                          torch::kFloat64);
  auto wx = torch::tensor(axis_weights(grid_.window, grid_.stride, p.col, grid_.cols, mode_),
                          torch::kFloat64);
  auto w = wy.unsqueeze(1) * wx.unsqueeze(0);
  const auto ys = Slice(p.y0, p.y0 + grid_.window);
  const auto xs = Slice(p.x0, p.x0 + grid_.window);

  auto cov = covered_.index({ys, xs});
  const auto shared = cov.sum().item<int64_t>();
  if (shared > 0) {
    auto diff = (t - last_.index({Slice(), ys, xs})).pow(2) * cov.unsqueeze(0);
    sq_diff_ += diff.sum().item<double>();
    diff_count_ += shared * t.size(0);
  }
  last_.index_put_({Slice(), ys, xs}, t);
  covered_.index_put_({ys, xs}, true);

  canvas_.index({Slice(), ys, xs}).add_(t * w.unsqueeze(0));
  weights_.index({ys, xs}).add_(w);
  seen_[index] = true;
}

torch::Tensor CanvasAccumulator::result() const {
  for (bool s : seen_) {
    if (!s) throw std::runtime_error("stitch: missing tiles");
  }
  return (canvas_ / weights_.clamp_min(1e-12).unsqueeze(0)).unsqueeze(0).to(torch::kFloat32);
}

torch::Tensor CanvasAccumulator::weight_sum() const { return weights_.clone(); }

double CanvasAccumulator::overlap_rms() const {
  return diff_count_ == 0 ? 0.0 : std::sqrt(sq_diff_ / static_cast<double>(diff_count_));
}

torch::Tensor stitch(const std::vector<torch::Tensor>& tiles, const TileGrid& grid,
                     StitchMode mode) {
  if (tiles.size() != grid.tiles.size()) throw std::invalid_argument("stitch: missing tiles");
  const int64_t channels = tiles.front().dim() == 4 ? tiles.front().size(1)
                                                    : tiles.front().size(0);
  CanvasAccumulator acc(grid, mode, channels);
  for (size_t i = 0; i < tiles.size(); ++i) acc.add(i, tiles[i]);
  return acc.result();
}

// ---------------------------------------------------------------------------
// stages

namespace {

// Smallest padded length >= max(n, window_lr) that is window_lr + k * stride_lr.
int64_t aligned_length(int64_t n, int64_t window_lr, int64_t stride_lr) {
  if (n <= window_lr) return window_lr;
  return window_lr + (n - window_lr + stride_lr - 1) / stride_lr * stride_lr;
}

torch::Tensor pad_bottom_right(const torch::Tensor& x, int64_t pad_h, int64_t pad_w) {
  if (pad_h == 0 && pad_w == 0) return x;
  const bool reflect = pad_h < x.size(2) && pad_w < x.size(3);
  auto opts = F::PadFuncOptions({0, pad_w, 0, pad_h});
  if (reflect) {
    opts.mode(torch::kReflect);
  } else {
    opts.mode(torch::kReplicate);
  }
  return F::pad(x, opts);
}

}  // namespace

StageResult run_stage(const torch::Tensor& x_lr_canvas, const StageSpec& stage,
                      const TilingOptions& opts, NoisePredictor& model,
                      const NoiseSchedule& sched, const SamplerConfig& sampler) {
  using torch::indexing::Slice;
  stage.validate();
  if (model.scale_factor() != stage.N) {
    throw std::invalid_argument("run_stage: model scale factor differs from stage N");
  }
  if (x_lr_canvas.dim() != 4 || x_lr_canvas.size(0) != 1 || x_lr_canvas.size(1) != 3) {
    throw std::invalid_argument("run_stage: expected a [1, 3, h, w] canvas");
  }
  const int64_t n = stage.N;
  const int64_t h = x_lr_canvas.size(2), w = x_lr_canvas.size(3);
  const int64_t window_lr = stage.window / n, stride_lr = stage.stride() / n;
  const int64_t hp = aligned_length(h, window_lr, stride_lr);
  const int64_t wp = aligned_length(w, window_lr, stride_lr);
  auto padded = pad_bottom_right(x_lr_canvas, hp - h, wp - w);

  StageResult result;
  result.stage = stage;
  result.noise_mode = opts.noise_mode;
  result.seed = opts.seed;
  result.grid = plan_tiles(hp * n, wp * n, stage.window, stage.stride());
  NoisePlan plan(result.grid, opts.noise_mode, opts.seed);
  CanvasAccumulator acc(result.grid, opts.stitch_mode);
  for (size_t i = 0; i < result.grid.tiles.size(); ++i) {
    const auto& p = result.grid.tiles[i];
    auto block = padded.index({Slice(), Slice(), Slice(p.y0 / n, p.y0 / n + window_lr),
                               Slice(p.x0 / n, p.x0 / n + window_lr)});
    acc.add(i, generate_window(block, stage.s_in, plan.noise_for(i), model, sched, sampler));
  }
  result.overlap_rms = acc.overlap_rms();
  result.canvas =
      acc.result().index({Slice(), Slice(), Slice(0, h * n), Slice(0, w * n)}).clamp(-1.0, 1.0);
  return result;
}

std::vector<CascadeLevel> run_cascade(const torch::Tensor& seed_image, double s0,
                                      const std::vector<StageSpec>& stages,
                                      const TilingOptions& opts, NoisePredictor& model,
                                      const NoiseSchedule& sched, const SamplerConfig& sampler,
                                      const std::function<void(const CascadeLevel&)>& on_level) {
  double s = s0;
  for (const auto& st : stages) {
    if (std::abs(st.s_in - s) > 1e-9 * s) {
      throw std::invalid_argument("run_cascade: stage resolutions do not chain");
    }
    s = st.s_out();
  }
  std::vector<CascadeLevel> levels;
  levels.push_back({seed_image, s0, std::nullopt});
  if (on_level) on_level(levels.back());
  for (const auto& st : stages) {
    TilingOptions stage_opts = opts;
    stage_opts.seed = mix_seed(opts.seed, static_cast<uint64_t>(st.k));
    auto res = run_stage(levels.back().image, st, stage_opts, model, sched, sampler);
    auto image = res.canvas;
    levels.push_back({image, st.s_out(), std::move(res)});
    if (on_level) on_level(levels.back());
  }
  return levels;
}

std::vector<StageSpec> make_stage_chain(double s0, int64_t m, int64_t N, int64_t window) {
  std::vector<StageSpec> out;
  double s = s0;
  for (int64_t k = 0; k < m; ++k) {
    StageSpec st;
    st.k = k;
    st.s_in = s;
    st.N = N;
    st.window = window;
    out.push_back(st);
    s = st.s_out();
  }
  return out;
}

}  // namespace geocascade
