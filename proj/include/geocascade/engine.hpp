#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "geocascade/cascade_tiler.hpp"
#include "geocascade/degradation.hpp"
#include "geocascade/denoiser.hpp"
#include "geocascade/diffusion_math.hpp"
#include "geocascade/evaluation.hpp"

namespace geocascade {

namespace fs = std::filesystem;

// Dataset manifest ----------------------------------------------------------

struct ManifestEntry {
  std::string path;
  double lat = 0.0;
  double lng = 0.0;
  double resolution = 0.0;  // m/pixel
  std::string split = "train";

  bool operator==(const ManifestEntry&) const = default;
};

struct ManifestError {
  std::string path;
  std::string message;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<double> levels{64.0, 16.0, 4.0};

  /// Throws std::invalid_argument on the first broken invariant.
  void validate() const;
  std::vector<ManifestEntry> select(const std::string& split,
                                    std::optional<double> resolution = std::nullopt) const;
};

enum class MetadataRule {
  kAuto,      // sidecar when present, otherwise the file name
  kSidecar,   // <stem>.json next to the image
  kFilename,  // {lat}_{lng}_{res}.png
};

MetadataRule parse_metadata_rule(const std::string& name);

struct ManifestBuild {
  DatasetManifest manifest;
  std::vector<ManifestError> errors;
};

/// Scans `root` recursively. Files that fail to decode or carry bad metadata
/// are reported in `errors`. The split comes from the sidecar, else from a
/// parent directory named train/val/test, else "train".
ManifestBuild build_manifest(const fs::path& root, MetadataRule rule = MetadataRule::kAuto,
                             std::vector<double> levels = {64.0, 16.0, 4.0});

nlohmann::json to_json(const ManifestEntry& e);
ManifestEntry manifest_entry_from_json(const nlohmann::json& j);

/// JSON lines, one entry per line.
void write_manifest(const fs::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const fs::path& path, std::vector<double> levels = {64.0, 16.0, 4.0});

// Configuration --------------------------------------------------------------

/// Thrown for malformed configuration or unknown keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScheduleConfig {
  int64_t T = 1000;
  double beta_min = 0.0015;
  double beta_max = 0.0155;

  NoiseSchedule make() const { return make_linear_schedule(T, beta_min, beta_max); }
};

struct TrainConfig {
  double learning_rate = 2e-6;
  int64_t epochs = 30;
  int64_t grad_accum = 8;
  int64_t batch_per_device = 1;
  int64_t device_count = 1;
  uint64_t seed = 0;
  int64_t max_steps = 0;  // > 0 caps the run regardless of epochs
  int64_t crop = 256;     // HR training crop, equal to the generation window
  double weight_decay = 0.01;
  double hr_resolution = 0.0;  // 0: use every train entry, whatever its level
  int64_t snapshot_every = 500;
  int64_t validation_images = 0;  // held-out FID per epoch when > 0
  bool float64 = false;

  int64_t effective_batch() const { return batch_per_device * grad_accum * device_count; }
};

struct TilingConfig {
  int64_t window = 256;
  double overlap_fraction = 0.5;
  NoiseMode noise_mode = NoiseMode::kSharedAll;
  StitchMode stitch_mode = StitchMode::kCrossfade;
  uint64_t seed = 0;
};

struct EvalConfig {
  uint64_t extractor_seed = 0x5eed;
  int64_t feature_dim = 32;
};

/// The single configuration document shared by every command.
struct EngineConfig {
  TrainConfig train;
  ScheduleConfig schedule;
  P2Config p2;
  DegradationConfig degradation;
  ModelConfig model;
  SamplerConfig sampler;
  TilingConfig tiling;
  EvalConfig evaluation;

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const EngineConfig& cfg);
/// Missing keys keep their defaults; unknown sections or keys throw ConfigError.
EngineConfig config_from_json(const nlohmann::json& j);
EngineConfig load_config(const fs::path& path);
void save_config(const fs::path& path, const EngineConfig& cfg);

/// Applies "section.key=value" to a config document. The value is parsed as
/// JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// 16 hex digits identifying a config document.
std::string config_hash(const nlohmann::json& doc);

// Checkpoints ----------------------------------------------------------------

inline constexpr int64_t kCheckpointFormatVersion = 1;

/// Deterministically initialized model.
CascadeDenoiser build_model(const ModelConfig& cfg, uint64_t seed,
                            torch::Dtype dtype = torch::kFloat32);

struct Checkpoint {
  int64_t format_version = kCheckpointFormatVersion;
  EngineConfig config;
  int64_t step = 0;
  CascadeDenoiser model{nullptr};
  bool has_optimizer_state = false;
};

/// Single-file container embedding the config. Written to a temporary file
/// and renamed into place.
void save_checkpoint(const fs::path& path, CascadeDenoiser& model, const EngineConfig& cfg,
                     int64_t step, torch::optim::Optimizer* optimizer = nullptr);
Checkpoint load_checkpoint(const fs::path& path);
/// Restores optimizer state saved alongside the model. Returns false if absent.
bool load_optimizer_state(const fs::path& path, torch::optim::Optimizer& optimizer);

// Training -------------------------------------------------------------------

struct TrainingImage {
  cv::Mat rgb;  // 8-bit RGB
  double resolution = 0.0;
  std::string id;
};

class TrainingSet {
 public:
  explicit TrainingSet(std::vector<TrainingImage> images);
  static TrainingSet from_manifest(const DatasetManifest& manifest, const std::string& split,
                                   std::optional<double> resolution = std::nullopt);

  size_t size() const { return images_.size(); }
  const TrainingImage& at(size_t i) const { return images_.at(i); }

 private:
  std::vector<TrainingImage> images_;
};

struct TrainExample {
  torch::Tensor x_hr;  // [1, 3, crop, crop]
  torch::Tensor x_lr;  // [1, 3, crop/N, crop/N]
  torch::Tensor eps;
  double s_lr = 0.0;
  int64_t t = 1;
};

/// Example number `index` of the run: image chosen from a per-epoch
/// permutation, random crop and flips, degradation, timestep and noise, all
/// derived from (cfg.train.seed, index).
TrainExample make_example(const TrainingSet& data, const EngineConfig& cfg, uint64_t index);

/// P2-weighted loss of a batch of examples.
torch::Tensor batch_loss(CascadeDenoiser& model, const std::vector<TrainExample>& batch,
                         const NoiseSchedule& sched, const P2Config& p2);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  Trainer(EngineConfig cfg, CascadeDenoiser model, TrainingSet data);

  /// One optimizer update over effective_batch examples; returns their mean
  /// loss. Throws NonFiniteLoss (parameters untouched) on NaN/Inf.
  double step();

  int64_t step_count() const { return step_; }
  void set_step(int64_t step) { step_ = step; }
  int64_t steps_per_epoch() const;
  int64_t total_steps() const;

  CascadeDenoiser& model() { return model_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }
  const EngineConfig& config() const { return cfg_; }
  const TrainingSet& data() const { return data_; }

 private:
  EngineConfig cfg_;
  CascadeDenoiser model_;
  TrainingSet data_;
  NoiseSchedule sched_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  int64_t step_ = 0;
};

struct TrainOptions {
  fs::path run_dir;  // empty: nothing written
  std::function<void(int64_t step, double loss)> on_step;
  std::optional<TrainingSet> validation;
};

struct TrainReport {
  int64_t steps = 0;
  std::vector<double> losses;
  std::vector<double> validation_fid;
  fs::path checkpoint;
  bool aborted = false;
  std::string message;
};

/// Runs until total_steps(). Snapshots every snapshot_every steps; on a
/// non-finite loss stops and keeps the last good parameters on disk.
TrainReport train(Trainer& trainer, const TrainOptions& opts);
TrainReport train(const DatasetManifest& manifest, const EngineConfig& cfg,
                  const TrainOptions& opts);

/// FID between HR crops of `data` and single-window reconstructions from
/// their degraded LR versions.
double validation_fid(CascadeDenoiser& model, const TrainingSet& data, const EngineConfig& cfg,
                      int64_t count);

// Generation helpers ---------------------------------------------------------

TilingOptions tiling_options(const EngineConfig& cfg);
StageSpec make_stage(const EngineConfig& cfg, int64_t k, double s_in);

nlohmann::json to_json(const TileGrid& grid);
TileGrid grid_from_json(const nlohmann::json& j);
/// {stage, s_in, s_out, canvas, grid, noise_mode, stitch_mode, seed, overlap_rms}
nlohmann::json stage_sidecar(const StageResult& r, StitchMode stitch);

/// Downsample by N with area averaging, then regenerate at the original size.
cv::Mat regenerate(const cv::Mat& rgb, double resolution, NoisePredictor& model,
                   const EngineConfig& cfg, uint64_t seed);

// Synthetic corpus -----------------------------------------------------------

/// Procedural overhead-imagery-like texture (fields, rivers, roads).
cv::Mat make_texture(int size, uint64_t seed);

/// Writes `count` textures named {lat}_{lng}_{res}.png into `dir`.
std::vector<ManifestEntry> write_texture_corpus(const fs::path& dir, int count, int size,
                                                double resolution, uint64_t seed);

// Run directories ------------------------------------------------------------

/// Creates base/<YYYYmmdd-HHMMSS>-<command>-<hash>[-n]; never reuses a directory.
fs::path make_run_dir(const fs::path& base, const std::string& command,
                      const nlohmann::json& config);

/// Writes pretty JSON; refuses to replace an existing file.
void write_json_file(const fs::path& path, const nlohmann::json& j);

}  // namespace geocascade
