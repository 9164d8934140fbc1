#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "geocascade/denoiser.hpp"
#include "geocascade/diffusion_math.hpp"

namespace geocascade {

/// One x N refinement step of the cascade.
struct StageSpec {
  int64_t k = 0;
  double s_in = 64.0;  // m/pixel of the conditioning canvas
  int64_t N = 4;
  int64_t window = 256;
  double overlap_fraction = 0.5;  // 0.5 for sliding windows, 0 for naive paste

  double s_out() const { return s_in / static_cast<double>(N); }
  int64_t stride() const;
  void validate() const;
};

struct TilePlacement {
  int64_t row = 0, col = 0;
  int64_t y0 = 0, x0 = 0;
};

struct TileGrid {
  int64_t canvas_h = 0, canvas_w = 0;
  int64_t window = 0;
  int64_t stride = 0;
  int64_t rows = 0, cols = 0;
  std::vector<TilePlacement> tiles;  // row-major

  int64_t overlap() const { return window - stride; }
  /// Canvas columns x where ownership passes from one tile column to the
  /// next (pairs (x-1, x) straddle a seam). Middle of each overlap band.
  std::vector<int64_t> seam_columns() const;
  std::vector<int64_t> seam_rows() const;
};

/// Half-overlap sliding-window grid (stride = window / 2).
TileGrid plan_tiles(int64_t canvas_h, int64_t canvas_w, int64_t window);
/// Grid with an explicit stride in [window/2, window].
TileGrid plan_tiles(int64_t canvas_h, int64_t canvas_w, int64_t window, int64_t stride);

enum class NoiseMode { kSharedAll, kQuadrantConstrained, kIndependent };

std::string to_string(NoiseMode mode);
NoiseMode parse_noise_mode(const std::string& name);

/// Initial-noise assignment for every tile of a grid. Noise is produced on
/// demand from the seed so large grids never hold all tiles at once.
///
/// The window is split into four (window/2)^2 quadrants. Quadrant-constrained
/// mode draws one quadrant-sized array per canvas cell, so neighbouring windows
/// see identical noise wherever they overlap. Shared-all draws a single
/// quadrant and replicates it into every quadrant of every window.
class NoisePlan {
 public:
  NoisePlan(TileGrid grid, NoiseMode mode, uint64_t seed, int64_t channels = 3);

  const TileGrid& grid() const { return grid_; }
  NoiseMode mode() const { return mode_; }
  uint64_t seed() const { return seed_; }

  /// [1, C, window, window] float32 standard normal.
  torch::Tensor noise_for(size_t tile) const;
  std::vector<torch::Tensor> assignments() const;

 private:
  torch::Tensor cell(int64_t r, int64_t c) const;

  TileGrid grid_;
  NoiseMode mode_;
  uint64_t seed_;
  int64_t channels_;
};

NoisePlan make_noise_plan(const TileGrid& grid, NoiseMode mode, uint64_t seed);

/// Deterministic 64-bit mixing of a seed with extra words.
uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

/// Runs a reverse trajectory from `noise`, conditioned on (x_lr, s). With
/// eta > 0 `gen` supplies the per-step noise.
torch::Tensor sample_window(const torch::Tensor& x_lr, double s, const torch::Tensor& noise,
                            NoisePredictor& model, const NoiseSchedule& sched,
                            const SamplerConfig& sampler,
                            std::optional<at::Generator> gen = std::nullopt);

/// Deterministic (eta = 0) generation of one window, as required for tiling.
torch::Tensor generate_window(const torch::Tensor& x_lr_block, double s_in,
                              const torch::Tensor& noise, NoisePredictor& model,
                              const NoiseSchedule& sched, const SamplerConfig& sampler);

enum class StitchMode {
  kCrossfade,  // linear ramps across each overlap band
  kCenterCut,  // hard cut at the middle of each overlap band
};

std::string to_string(StitchMode mode);
StitchMode parse_stitch_mode(const std::string& name);

/// Per-axis blending weights for tile `index` of `count` along one axis.
std::vector<double> axis_weights(int64_t window, int64_t stride, int64_t index, int64_t count,
                                 StitchMode mode);

/// Folds generated tiles into a canvas one at a time.
class CanvasAccumulator {
 public:
  CanvasAccumulator(TileGrid grid, StitchMode mode, int64_t channels = 3);

  /// tile: [1, C, window, window] or [C, window, window].
  void add(size_t index, const torch::Tensor& tile);
  /// [1, C, H, W]; throws if a tile is missing.
  torch::Tensor result() const;
  /// Per-pixel sum of weights, [H, W] float64.
  torch::Tensor weight_sum() const;
  /// RMS difference between each tile and previously written tiles over
  /// their shared pixels (0 when nothing overlaps).
  double overlap_rms() const;

 private:
  TileGrid grid_;
  StitchMode mode_;
  torch::Tensor canvas_;   // [C, H, W] float64
  torch::Tensor weights_;  // [H, W] float64
  torch::Tensor last_;     // last written value per pixel
  torch::Tensor covered_;  // bool [H, W]
  std::vector<bool> seen_;
  double sq_diff_ = 0.0;
  int64_t diff_count_ = 0;
};

torch::Tensor stitch(const std::vector<torch::Tensor>& tiles, const TileGrid& grid,
                     StitchMode mode = StitchMode::kCrossfade);

struct StageResult {
  torch::Tensor canvas;  // [1, 3, h*N, w*N] in model space
  StageSpec stage;
  TileGrid grid;         // grid over the padded canvas
  NoiseMode noise_mode = NoiseMode::kSharedAll;
  uint64_t seed = 0;
  double overlap_rms = 0.0;
};

struct TilingOptions {
  NoiseMode noise_mode = NoiseMode::kSharedAll;
  StitchMode stitch_mode = StitchMode::kCrossfade;
  uint64_t seed = 0;
};

/// Crops the conditioning canvas into overlapping blocks, generates each
/// window and stitches the result. Output is N times the input size.
StageResult run_stage(const torch::Tensor& x_lr_canvas, const StageSpec& stage,
                      const TilingOptions& opts, NoisePredictor& model,
                      const NoiseSchedule& sched, const SamplerConfig& sampler);

struct CascadeLevel {
  torch::Tensor image;
  double resolution = 0.0;  // m/pixel
  std::optional<StageResult> stage;
};

/// Self-cascading generation. Level 0 is the seed; level i is stage i-1's output.
std::vector<CascadeLevel> run_cascade(
    const torch::Tensor& seed_image, double s0, const std::vector<StageSpec>& stages,
    const TilingOptions& opts, NoisePredictor& model, const NoiseSchedule& sched,
    const SamplerConfig& sampler,
    const std::function<void(const CascadeLevel&)>& on_level = {});

/// Stage list for m successive x N refinements starting at s0.
std::vector<StageSpec> make_stage_chain(double s0, int64_t m, int64_t N, int64_t window);

}  // namespace geocascade
