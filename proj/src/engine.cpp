#include "geocascade/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "geocascade/image_io.hpp"

namespace geocascade {

using nlohmann::json;

// Dataset manifest ----------------------------------------------------------

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff";
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

bool known_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

bool is_level(double r, const std::vector<double>& levels) {
  return std::any_of(levels.begin(), levels.end(),
                     [r](double l) { return std::abs(l - r) <= 1e-9 * std::max(1.0, l); });
}

// Returns an empty string when the entry is valid.
std::string check_entry(const ManifestEntry& e, const std::vector<double>& levels) {
  if (!(e.lat >= -90.0 && e.lat <= 90.0)) return "latitude outside [-90, 90]";
  if (!(e.lng >= -180.0 && e.lng <= 180.0)) return "longitude outside [-180, 180]";
  if (!is_level(e.resolution, levels)) return "resolution is not a declared level";
  if (!known_split(e.split)) return "unknown split '" + e.split + "'";
  return {};
}

}  // namespace

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    auto msg = check_entry(e, levels);
    if (!msg.empty()) throw std::invalid_argument("manifest entry " + e.path + ": " + msg);
    if (!seen.insert(e.path).second) throw std::invalid_argument("duplicate manifest path " + e.path);
  }
}

std::vector<ManifestEntry> DatasetManifest::select(const std::string& split,
                                                   std::optional<double> resolution) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    if (resolution && std::abs(e.resolution - *resolution) > 1e-9) continue;
    out.push_back(e);
  }
  return out;
}

MetadataRule parse_metadata_rule(const std::string& name) {
  if (name == "auto") return MetadataRule::kAuto;
  if (name == "sidecar") return MetadataRule::kSidecar;
  if (name == "filename") return MetadataRule::kFilename;
  throw std::invalid_argument("unknown metadata rule: " + name);
}

ManifestBuild build_manifest(const fs::path& root, MetadataRule rule, std::vector<double> levels) {
  if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& it : fs::recursive_directory_iterator(root)) {
    if (it.is_regular_file() && is_image_file(it.path())) files.push_back(it.path());
  }
  std::sort(files.begin(), files.end());

  ManifestBuild out;
  out.manifest.levels = levels;
  std::set<std::string> seen;
  for (const auto& file : files) {
    const std::string path = file.lexically_normal().string();
    auto fail = [&](const std::string& msg) { out.errors.push_back({path, msg}); };

    ManifestEntry e;
    e.path = path;
    const std::string parent = file.parent_path().filename().string();
    e.split = known_split(parent) ? parent : "train";

    fs::path sidecar = file;
    sidecar.replace_extension(".json");
    const bool use_sidecar = rule == MetadataRule::kSidecar ||
                             (rule == MetadataRule::kAuto && fs::exists(sidecar));
    try {
      if (use_sidecar) {
        std::ifstream in(sidecar);
        if (!in) {
          fail("missing sidecar " + sidecar.filename().string());
          continue;
        }
        json j = json::parse(in);
        e.lat = j.at("lat").get<double>();
        e.lng = j.at("lng").get<double>();
        e.resolution = j.at("resolution").get<double>();
        if (j.contains("split")) e.split = j.at("split").get<std::string>();
      } else {
        const std::string stem = file.stem().string();
        std::vector<std::string> parts;
        std::stringstream ss(stem);
        for (std::string p; std::getline(ss, p, '_');) parts.push_back(p);
        if (parts.size() != 3 || !parse_double(parts[0], e.lat) ||
            !parse_double(parts[1], e.lng) || !parse_double(parts[2], e.resolution)) {
          fail("file name does not match {lat}_{lng}_{res}");
          continue;
        }
      }
    } catch (const json::exception& ex) {
      fail(std::string("malformed sidecar: ") + ex.what());
      continue;
    }

    auto msg = check_entry(e, levels);
    if (!msg.empty()) {
      fail(msg);
      continue;
    }
    if (cv::imread(path, cv::IMREAD_COLOR).empty()) {
      fail("unreadable image");
      continue;
    }
    if (!seen.insert(path).second) {
      fail("duplicate path");
      continue;
    }
    out.manifest.entries.push_back(std::move(e));
  }
  return out;
}

json to_json(const ManifestEntry& e) {
  return json{{"path", e.path}, {"lat", e.lat}, {"lng", e.lng},
              {"resolution", e.resolution}, {"split", e.split}};
}

ManifestEntry manifest_entry_from_json(const json& j) {
  ManifestEntry e;
  e.path = j.at("path").get<std::string>();
  e.lat = j.at("lat").get<double>();
  e.lng = j.at("lng").get<double>();
  e.resolution = j.at("resolution").get<double>();
  e.split = j.value("split", std::string("train"));
  return e;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  for (const auto& e : manifest.entries) out << to_json(e).dump() << '\n';
}

DatasetManifest read_manifest(const fs::path& path, std::vector<double> levels) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path.string());
  DatasetManifest m;
  m.levels = std::move(levels);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.entries.push_back(manifest_entry_from_json(json::parse(line)));
    } catch (const json::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  m.validate();
  return m;
}

// Configuration --------------------------------------------------------------

namespace {

class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (doc.contains(name_)) {
      j_ = doc.at(name_);
      if (!j_.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
    } else {
      j_ = json::object();
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& ex) {
      throw ConfigError(name_ + "." + key + ": " + ex.what());
    }
  }

  template <class E, class Parse>
  void get_enum(const char* key, E& out, Parse parse) {
    std::string s;
    if (!j_.contains(key)) return;
    get(key, s);
    try {
      out = parse(s);
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(name_ + "." + key + ": " + ex.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
    }
  }

 private:
  std::string name_;
  json j_;
  std::set<std::string> used_;
};

const std::set<std::string> kSections{"train",   "schedule", "p2",     "degradation",
                                      "frequency", "encoder", "unet",  "sampler",
                                      "tiling",  "evaluation"};

}  // namespace

void EngineConfig::validate() const {
  auto positive = [](int64_t v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(train.epochs, "train.epochs");
  positive(train.grad_accum, "train.grad_accum");
  positive(train.batch_per_device, "train.batch_per_device");
  positive(train.crop, "train.crop");
  positive(train.snapshot_every, "train.snapshot_every");
  if (train.device_count != 1) throw ConfigError("train.device_count: only one device is supported");
  if (train.max_steps < 0 || train.validation_images < 0) {
    throw ConfigError("train.max_steps and train.validation_images must be >= 0");
  }
  if (!(train.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (!(train.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (train.hr_resolution < 0.0) throw ConfigError("train.hr_resolution must be >= 0");
  positive(schedule.T, "schedule.T");
  if (!(schedule.beta_min > 0.0 && schedule.beta_min <= schedule.beta_max &&
        schedule.beta_max < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
  }
  if (!(p2.k >= 0.0) || !(p2.gamma >= 0.0)) throw ConfigError("p2: k and gamma must be >= 0");
  if (sampler.num_steps < 1 || sampler.num_steps > schedule.T) {
    throw ConfigError("sampler.num_steps must lie in [1, T]");
  }
  if (!(sampler.eta >= 0.0)) throw ConfigError("sampler.eta must be >= 0");
  if (!(sampler.clip_x0 >= 0.0)) throw ConfigError("sampler.clip_x0 must be >= 0");
  try {
    model.validate();
    degradation.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  const int64_t N = model.encoder.scale_factor;
  if (degradation.final_scale != N) {
    throw ConfigError("degradation.final_scale must equal encoder.scale_factor");
  }
  const int64_t align = int64_t{1} << model.unet.num_down;
  for (int64_t size : {train.crop, tiling.window}) {
    if (size % (2 * N) != 0 || size % align != 0) {
      throw ConfigError("train.crop and tiling.window must be multiples of 2N and 2^num_down");
    }
  }
  if (tiling.overlap_fraction != 0.0 && tiling.overlap_fraction != 0.5) {
    throw ConfigError("tiling.overlap_fraction must be 0 or 0.5");
  }
  positive(evaluation.feature_dim, "evaluation.feature_dim");
}

json to_json(const EngineConfig& c) {
  const auto& t = c.train;
  const auto& d = c.degradation;
  const auto& u = c.model.unet;
  return json{
      {"train",
       {{"learning_rate", t.learning_rate},
        {"epochs", t.epochs},
        {"grad_accum", t.grad_accum},
        {"batch_per_device", t.batch_per_device},
        {"device_count", t.device_count},
        {"seed", t.seed},
        {"max_steps", t.max_steps},
        {"crop", t.crop},
        {"weight_decay", t.weight_decay},
        {"hr_resolution", t.hr_resolution},
        {"snapshot_every", t.snapshot_every},
        {"validation_images", t.validation_images},
        {"float64", t.float64}}},
      {"schedule", {{"T", c.schedule.T}, {"beta_min", c.schedule.beta_min},
                    {"beta_max", c.schedule.beta_max}}},
      {"p2", {{"k", c.p2.k}, {"gamma", c.p2.gamma}}},
      {"degradation",
       {{"mode", to_string(d.mode)},
        {"order", d.order},
        {"kernel_size_min", d.kernel_size_min},
        {"kernel_size_max", d.kernel_size_max},
        {"blur_sigma_min", d.blur_sigma_min},
        {"blur_sigma_max", d.blur_sigma_max},
        {"iso_prob", d.iso_prob},
        {"sinc_prob", d.sinc_prob},
        {"scale_min", d.scale_min},
        {"scale_max", d.scale_max},
        {"gaussian_noise_prob", d.gaussian_noise_prob},
        {"gaussian_sigma_min", d.gaussian_sigma_min},
        {"gaussian_sigma_max", d.gaussian_sigma_max},
        {"poisson_scale_min", d.poisson_scale_min},
        {"poisson_scale_max", d.poisson_scale_max},
        {"gray_noise_prob", d.gray_noise_prob},
        {"jpeg_min", d.jpeg_min},
        {"jpeg_max", d.jpeg_max},
        {"blur_prob", d.blur_prob},
        {"noise_prob", d.noise_prob},
        {"jpeg_prob", d.jpeg_prob},
        {"final_scale", d.final_scale},
        {"seed", d.seed}}},
      {"frequency", {{"omega", c.model.frequency.omega}, {"n", c.model.frequency.n}}},
      {"encoder", {{"features", c.model.encoder.features}, {"growth", c.model.encoder.growth},
                   {"blocks", c.model.encoder.blocks},
                   {"scale_factor", c.model.encoder.scale_factor}}},
      {"unet", {{"base_channels", u.base_channels}, {"channel_mults", u.channel_mults},
                {"num_res_blocks", u.num_res_blocks}, {"attention_levels", u.attention_levels},
                {"num_down", u.num_down}, {"cond_channels", u.cond_channels},
                {"embed_dim", u.embed_dim}, {"use_attention", u.use_attention}}},
      {"sampler",
       {{"eta", c.sampler.eta}, {"num_steps", c.sampler.num_steps}, {"clip_x0", c.sampler.clip_x0}}},
      {"tiling", {{"window", c.tiling.window}, {"overlap_fraction", c.tiling.overlap_fraction},
                  {"noise_mode", to_string(c.tiling.noise_mode)},
                  {"stitch_mode", to_string(c.tiling.stitch_mode)}, {"seed", c.tiling.seed}}},
      {"evaluation", {{"extractor_seed", c.evaluation.extractor_seed},
                      {"feature_dim", c.evaluation.feature_dim}}},
  };
}

EngineConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : doc.items()) {
    if (!kSections.count(k)) throw ConfigError("unknown config section '" + k + "'");
  }
  EngineConfig c;
  {
    Section s(doc, "train");
    auto& t = c.train;
    s.get("learning_rate", t.learning_rate);
    s.get("epochs", t.epochs);
    s.get("grad_accum", t.grad_accum);
    s.get("batch_per_device", t.batch_per_device);
    s.get("device_count", t.device_count);
    s.get("seed", t.seed);
    s.get("max_steps", t.max_steps);
    s.get("crop", t.crop);
    s.get("weight_decay", t.weight_decay);
    s.get("hr_resolution", t.hr_resolution);
    s.get("snapshot_every", t.snapshot_every);
    s.get("validation_images", t.validation_images);
    s.get("float64", t.float64);
    s.finish();
  }
  {
    Section s(doc, "schedule");
    s.get("T", c.schedule.T);
    s.get("beta_min", c.schedule.beta_min);
    s.get("beta_max", c.schedule.beta_max);
    s.finish();
  }
  {
    Section s(doc, "p2");
    s.get("k", c.p2.k);
    s.get("gamma", c.p2.gamma);
    s.finish();
  }
  {
    Section s(doc, "degradation");
    auto& d = c.degradation;
    s.get_enum("mode", d.mode, parse_degradation_mode);
    s.get("order", d.order);
    s.get("kernel_size_min", d.kernel_size_min);
    s.get("kernel_size_max", d.kernel_size_max);
    s.get("blur_sigma_min", d.blur_sigma_min);
    s.get("blur_sigma_max", d.blur_sigma_max);
    s.get("iso_prob", d.iso_prob);
    s.get("sinc_prob", d.sinc_prob);
    s.get("scale_min", d.scale_min);
    s.get("scale_max", d.scale_max);
    s.get("gaussian_noise_prob", d.gaussian_noise_prob);
    s.get("gaussian_sigma_min", d.gaussian_sigma_min);
    s.get("gaussian_sigma_max", d.gaussian_sigma_max);
    s.get("poisson_scale_min", d.poisson_scale_min);
    s.get("poisson_scale_max", d.poisson_scale_max);
    s.get("gray_noise_prob", d.gray_noise_prob);
    s.get("jpeg_min", d.jpeg_min);
    s.get("jpeg_max", d.jpeg_max);
    s.get("blur_prob", d.blur_prob);
    s.get("noise_prob", d.noise_prob);
    s.get("jpeg_prob", d.jpeg_prob);
    s.get("final_scale", d.final_scale);
    s.get("seed", d.seed);
    s.finish();
  }
  {
    Section s(doc, "frequency");
    s.get("omega", c.model.frequency.omega);
    s.get("n", c.model.frequency.n);
    s.finish();
  }
  {
    Section s(doc, "encoder");
    s.get("features", c.model.encoder.features);
    s.get("growth", c.model.encoder.growth);
    s.get("blocks", c.model.encoder.blocks);
    s.get("scale_factor", c.model.encoder.scale_factor);
    s.finish();
  }
  {
    Section s(doc, "unet");
    auto& u = c.model.unet;
    s.get("base_channels", u.base_channels);
    s.get("channel_mults", u.channel_mults);
    s.get("num_res_blocks", u.num_res_blocks);
    s.get("attention_levels", u.attention_levels);
    s.get("num_down", u.num_down);
    s.get("cond_channels", u.cond_channels);
    s.get("embed_dim", u.embed_dim);
    s.get("use_attention", u.use_attention);
    s.finish();
  }
  {
    Section s(doc, "sampler");
    s.get("eta", c.sampler.eta);
    s.get("num_steps", c.sampler.num_steps);
    s.get("clip_x0", c.sampler.clip_x0);
    s.finish();
  }
  {
    Section s(doc, "tiling");
    s.get("window", c.tiling.window);
    s.get("overlap_fraction", c.tiling.overlap_fraction);
    s.get_enum("noise_mode", c.tiling.noise_mode, parse_noise_mode);
    s.get_enum("stitch_mode", c.tiling.stitch_mode, parse_stitch_mode);
    s.get("seed", c.tiling.seed);
    s.finish();
  }
  {
    Section s(doc, "evaluation");
    s.get("extractor_seed", c.evaluation.extractor_seed);
    s.get("feature_dim", c.evaluation.feature_dim);
    s.finish();
  }
  c.validate();
  return c;
}

EngineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& ex) {
    throw ConfigError(path.string() + ": " + ex.what());
  }
  return config_from_json(doc);
}

void save_config(const fs::path& path, const EngineConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config: " + path.string());
  out << to_json(cfg).dump(2) << '\n';
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 ||
      dot + 1 == eq) {
    throw ConfigError("override must look like section.key=value: " + assignment);
  }
  const std::string section = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  if (!doc.is_object()) doc = json::object();
  doc[section][key] = value;
}

std::string config_hash(const json& doc) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// Checkpoints ----------------------------------------------------------------

CascadeDenoiser build_model(const ModelConfig& cfg, uint64_t seed, torch::Dtype dtype) {
  torch::manual_seed(seed);
  CascadeDenoiser model(cfg);
  model->to(dtype);
  return model;
}

void save_checkpoint(const fs::path& path, CascadeDenoiser& model, const EngineConfig& cfg,
                     int64_t step, torch::optim::Optimizer* optimizer) {
  torch::serialize::OutputArchive archive;
  archive.write("format_version", torch::tensor(kCheckpointFormatVersion));
  archive.write("config", c10::IValue(to_json(cfg).dump()));
  archive.write("step", torch::tensor(step));
  torch::serialize::OutputArchive weights;
  model->save(weights);
  archive.write("model", weights);
  if (optimizer) {
    torch::serialize::OutputArchive opt;
    optimizer->save(opt);
    archive.write("optimizer", opt);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  Checkpoint ck;
  torch::Tensor version;
  archive.read("format_version", version);
  ck.format_version = version.item<int64_t>();
  if (ck.format_version != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format_version " +
                             std::to_string(ck.format_version));
  }
  c10::IValue cfg_text;
  archive.read("config", cfg_text);
  ck.config = config_from_json(json::parse(cfg_text.toStringRef()));
  torch::Tensor step;
  archive.read("step", step);
  ck.step = step.item<int64_t>();
  ck.model = CascadeDenoiser(ck.config.model);
  ck.model->to(ck.config.train.float64 ? torch::kFloat64 : torch::kFloat32);
  torch::serialize::InputArchive weights;
  archive.read("model", weights);
  ck.model->load(weights);
  torch::serialize::InputArchive opt;
  ck.has_optimizer_state = archive.try_read("optimizer", opt);
  return ck;
}

bool load_optimizer_state(const fs::path& path, torch::optim::Optimizer& optimizer) {
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  torch::serialize::InputArchive opt;
  if (!archive.try_read("optimizer", opt)) return false;
  optimizer.load(opt);
  return true;
}

// Training -------------------------------------------------------------------

TrainingSet::TrainingSet(std::vector<TrainingImage> images) : images_(std::move(images)) {
  for (const auto& im : images_) {
    if (im.rgb.type() != CV_8UC3) throw std::invalid_argument("TrainingSet: expected 8-bit RGB");
    if (!(im.resolution > 0.0)) throw std::invalid_argument("TrainingSet: bad resolution");
  }
}

TrainingSet TrainingSet::from_manifest(const DatasetManifest& manifest, const std::string& split,
                                       std::optional<double> resolution) {
  std::vector<TrainingImage> images;
  for (const auto& e : manifest.select(split, resolution)) {
    images.push_back({load_rgb(e.path), e.resolution, e.path});
  }
  if (images.empty()) throw std::invalid_argument("no images in split '" + split + "'");
  return TrainingSet(std::move(images));
}

namespace {

enum : uint64_t { kTagImage = 1, kTagCrop = 2, kTagDegrade = 3, kTagNoise = 4, kTagTime = 5 };

size_t pick_image(size_t n, uint64_t seed, uint64_t index) {
  const uint64_t epoch = index / n;
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  std::mt19937_64 rng(mix_seed(seed, kTagImage, epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[index % n];
}

}  // namespace

TrainExample make_example(const TrainingSet& data, const EngineConfig& cfg, uint64_t index) {
  if (data.size() == 0) throw std::runtime_error("training split is empty");
  const auto& img = data.at(pick_image(data.size(), cfg.train.seed, index));
  const int crop = static_cast<int>(cfg.train.crop);
  if (img.rgb.rows < crop || img.rgb.cols < crop) {
    throw std::runtime_error("training image smaller than crop: " + img.id);
  }
  std::mt19937_64 rng(mix_seed(cfg.train.seed, kTagCrop, index));
  const int y = std::uniform_int_distribution<int>(0, img.rgb.rows - crop)(rng);
  const int x = std::uniform_int_distribution<int>(0, img.rgb.cols - crop)(rng);
  cv::Mat patch = img.rgb(cv::Rect(x, y, crop, crop)).clone();
  if (rng() & 1) cv::flip(patch, patch, 1);
  if (rng() & 1) cv::flip(patch, patch, 0);

  DegradationConfig dcfg = cfg.degradation;
  dcfg.final_scale = static_cast<int>(cfg.model.encoder.scale_factor);
  const auto pair =
      degrade_pair(patch, dcfg, mix_seed(image_seed(dcfg.seed, img.id), kTagDegrade, index));

  TrainExample ex;
  ex.x_hr = to_tensor(pair.hr);
  ex.x_lr = to_tensor(pair.lr);
  ex.s_lr = img.resolution * static_cast<double>(dcfg.final_scale);
  std::mt19937_64 trng(mix_seed(cfg.train.seed, kTagTime, index));
  ex.t = std::uniform_int_distribution<int64_t>(1, cfg.schedule.T)(trng);
  auto gen = at::detail::createCPUGenerator(mix_seed(cfg.train.seed, kTagNoise, index));
  ex.eps = torch::randn(ex.x_hr.sizes(), gen, torch::kFloat32);
  return ex;
}

torch::Tensor batch_loss(CascadeDenoiser& model, const std::vector<TrainExample>& batch,
                         const NoiseSchedule& sched, const P2Config& p2) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const auto dtype = model->unet->parameters().front().scalar_type();
  std::vector<torch::Tensor> hr, lr, eps;
  std::vector<int64_t> t;
  std::vector<double> s;
  for (const auto& ex : batch) {
    hr.push_back(ex.x_hr);
    lr.push_back(ex.x_lr);
    eps.push_back(ex.eps);
    t.push_back(ex.t);
    s.push_back(ex.s_lr);
  }
  auto x0 = torch::cat(hr).to(dtype);
  auto noise = torch::cat(eps).to(dtype);
  auto x_t = q_sample(x0, t, noise, sched);
  auto tv = torch::tensor(std::vector<double>(t.begin(), t.end()), torch::kFloat64);
  auto sv = torch::tensor(s, torch::kFloat64);
  auto pred = model->forward(x_t, torch::cat(lr).to(dtype), sv, tv);
  return training_loss(noise, pred, t, sched, p2);
}

Trainer::Trainer(EngineConfig cfg, CascadeDenoiser model, TrainingSet data)
    : cfg_(std::move(cfg)),
      model_(std::move(model)),
      data_(std::move(data)),
      sched_(cfg_.schedule.make()) {
  cfg_.validate();
  if (data_.size() == 0) throw std::runtime_error("training split is empty");
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(),
      torch::optim::AdamWOptions(cfg_.train.learning_rate).weight_decay(cfg_.train.weight_decay));
}

int64_t Trainer::steps_per_epoch() const {
  const int64_t eff = cfg_.train.effective_batch();
  return std::max<int64_t>(1, (static_cast<int64_t>(data_.size()) + eff - 1) / eff);
}

int64_t Trainer::total_steps() const {
  if (cfg_.train.max_steps > 0) return cfg_.train.max_steps;
  return cfg_.train.epochs * steps_per_epoch();
}

double Trainer::step() {
  model_->train();
  optimizer_->zero_grad();
  const int64_t B = cfg_.train.batch_per_device;
  const int64_t accum = cfg_.train.grad_accum;
  const uint64_t base = static_cast<uint64_t>(step_ * cfg_.train.effective_batch());
  double total = 0.0;
  for (int64_t m = 0; m < accum; ++m) {
    std::vector<TrainExample> batch;
    for (int64_t b = 0; b < B; ++b) {
      batch.push_back(make_example(data_, cfg_, base + static_cast<uint64_t>(m * B + b)));
    }
    auto loss = batch_loss(model_, batch, sched_, cfg_.p2);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      optimizer_->zero_grad();
      throw NonFiniteLoss("non-finite loss at step " + std::to_string(step_));
    }
    (loss / static_cast<double>(accum)).backward();
    total += value;
  }
  optimizer_->step();
  ++step_;
  return total / static_cast<double>(accum);
}

double validation_fid(CascadeDenoiser& model, const TrainingSet& data, const EngineConfig& cfg,
                      int64_t count) {
  if (count < 2 || data.size() < 2) {
    throw std::invalid_argument("validation_fid: need at least 2 images");
  }
  const auto sched = cfg.schedule.make();
  DenoiserPredictor predictor(model);
  RandomConvExtractor extractor(cfg.evaluation.extractor_seed, cfg.evaluation.feature_dim);
  std::vector<torch::Tensor> real, fake;
  for (int64_t i = 0; i < count; ++i) {
    auto ex = make_example(data, cfg, (uint64_t{1} << 62) + static_cast<uint64_t>(i));
    auto gen = at::detail::createCPUGenerator(mix_seed(cfg.train.seed, 0x7a1, i));
    auto noise = torch::randn(ex.x_hr.sizes(), gen, torch::kFloat32);
    real.push_back(ex.x_hr);
    fake.push_back(generate_window(ex.x_lr, ex.s_lr, noise, predictor, sched, cfg.sampler)
                       .clamp(-1.0, 1.0));
  }
  model->train();
  return fid(extract_features(real, extractor), extract_features(fake, extractor));
}

TrainReport train(Trainer& trainer, const TrainOptions& opts) {
  TrainReport report;
  const auto& cfg = trainer.config();
  std::ofstream log;
  if (!opts.run_dir.empty()) {
    fs::create_directories(opts.run_dir);
    log.open(opts.run_dir / "loss.jsonl", std::ios::app);
  }
  auto snapshot = [&](const std::string& name) {
    if (opts.run_dir.empty()) return fs::path{};
    auto p = opts.run_dir / name;
    save_checkpoint(p, trainer.model(), cfg, trainer.step_count(), &trainer.optimizer());
    return p;
  };

  auto finite_parameters = [&] {
    torch::NoGradGuard ng;
    for (const auto& p : trainer.model()->parameters()) {
      if (!torch::isfinite(p).all().item<bool>()) return false;
    }
    return true;
  };

  const int64_t total = trainer.total_steps();
  const int64_t per_epoch = trainer.steps_per_epoch();
  fs::path last_snapshot;
  while (trainer.step_count() < total) {
    double loss = 0.0;
    try {
      loss = trainer.step();
    } catch (const NonFiniteLoss& ex) {
      report.aborted = true;
      report.message = ex.what();
      report.checkpoint = finite_parameters() ? snapshot("last_good.pt") : last_snapshot;
      break;
    }
    const int64_t step = trainer.step_count();
    report.losses.push_back(loss);
    if (log.is_open()) log << json{{"step", step}, {"loss", loss}}.dump() << '\n' << std::flush;
    if (opts.on_step) opts.on_step(step, loss);
    if (step % cfg.train.snapshot_every == 0) {
      if (finite_parameters()) last_snapshot = snapshot("snapshot-" + std::to_string(step) + ".pt");
    }
    if (opts.validation && cfg.train.validation_images > 0 && step % per_epoch == 0) {
      const double f =
          validation_fid(trainer.model(), *opts.validation, cfg, cfg.train.validation_images);
      report.validation_fid.push_back(f);
      if (log.is_open()) log << json{{"step", step}, {"val_fid", f}}.dump() << '\n';
    }
  }
  report.steps = trainer.step_count();
  if (!report.aborted) report.checkpoint = snapshot("checkpoint.pt");
  return report;
}

TrainReport train(const DatasetManifest& manifest, const EngineConfig& cfg,
                  const TrainOptions& opts) {
  manifest.validate();
  std::optional<double> level;
  if (cfg.train.hr_resolution > 0.0) level = cfg.train.hr_resolution;
  auto data = TrainingSet::from_manifest(manifest, "train", level);
  if (data.size() == 0) throw std::runtime_error("manifest has no train entries at this level");
  auto model = build_model(cfg.model, cfg.train.seed,
                           cfg.train.float64 ? torch::kFloat64 : torch::kFloat32);
  Trainer trainer(cfg, model, std::move(data));
  TrainOptions o = opts;
  if (!o.validation && cfg.train.validation_images > 0) {
    auto val = TrainingSet::from_manifest(manifest, "val", level);
    if (val.size() >= 2) o.validation = std::move(val);
  }
  return train(trainer, o);
}

// Generation helpers ---------------------------------------------------------

TilingOptions tiling_options(const EngineConfig& cfg) {
  return TilingOptions{cfg.tiling.noise_mode, cfg.tiling.stitch_mode, cfg.tiling.seed};
}

StageSpec make_stage(const EngineConfig& cfg, int64_t k, double s_in) {
  StageSpec s;
  s.k = k;
  s.s_in = s_in;
  s.N = cfg.model.encoder.scale_factor;
  s.window = cfg.tiling.window;
  s.overlap_fraction = cfg.tiling.overlap_fraction;
  return s;
}

json to_json(const TileGrid& g) {
  return json{{"canvas_h", g.canvas_h}, {"canvas_w", g.canvas_w}, {"window", g.window},
              {"stride", g.stride},     {"rows", g.rows},         {"cols", g.cols}};
}

TileGrid grid_from_json(const json& j) {
  return plan_tiles(j.at("canvas_h").get<int64_t>(), j.at("canvas_w").get<int64_t>(),
                    j.at("window").get<int64_t>(), j.at("stride").get<int64_t>());
}

json stage_sidecar(const StageResult& r, StitchMode stitch) {
  return json{{"stage", r.stage.k},
              {"s_in", r.stage.s_in},
              {"s_out", r.stage.s_out()},
              {"canvas", {r.canvas.size(2), r.canvas.size(3)}},
              {"grid", to_json(r.grid)},
              {"noise_mode", to_string(r.noise_mode)},
              {"stitch_mode", to_string(stitch)},
              {"seed", r.seed},
              {"overlap_rms", r.overlap_rms}};
}

cv::Mat regenerate(const cv::Mat& rgb, double resolution, NoisePredictor& model,
                   const EngineConfig& cfg, uint64_t seed) {
  const int N = static_cast<int>(model.scale_factor());
  const int h = rgb.rows / N * N, w = rgb.cols / N * N;
  if (h == 0 || w == 0) throw std::invalid_argument("regenerate: image smaller than N");
  cv::Mat lr;
  cv::resize(rgb(cv::Rect(0, 0, w, h)), lr, cv::Size(w / N, h / N), 0, 0, cv::INTER_AREA);
  auto stage = make_stage(cfg, 0, resolution * N);
  auto opts = tiling_options(cfg);
  opts.seed = seed;
  auto r = run_stage(to_tensor(lr), stage, opts, model, cfg.schedule.make(), cfg.sampler);
  return to_image(r.canvas);
}

// Synthetic corpus -----------------------------------------------------------

namespace {

cv::Mat smooth_field(int size, int cells, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  cv::Mat g(cells + 3, cells + 3, CV_32F);
  for (int y = 0; y < g.rows; ++y) {
    for (int x = 0; x < g.cols; ++x) g.at<float>(y, x) = nd(rng);
  }
  const int big = size * (cells + 3) / (cells + 1);
  cv::Mat up;
  cv::resize(g, up, cv::Size(big, big), 0, 0, cv::INTER_CUBIC);
  const int off = (big - size) / 2;
  return up(cv::Rect(off, off, size, size)).clone();
}

cv::Mat fractal(int size, int base_cells, int octaves, double persistence, std::mt19937_64& rng) {
  cv::Mat acc = cv::Mat::zeros(size, size, CV_32F);
  double amp = 1.0;
  int cells = base_cells;
  for (int o = 0; o < octaves && cells <= size; ++o) {
    acc += smooth_field(size, cells, rng) * amp;
    amp *= persistence;
    cells *= 2;
  }
  return acc;
}

}  // namespace

cv::Mat make_texture(int size, uint64_t seed) {
  if (size < 8) throw std::invalid_argument("make_texture: size too small");
  std::mt19937_64 rng(mix_seed(seed, 0x7e7));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  cv::Mat elev = fractal(size, 2, 6, 0.55, rng);
  cv::Mat moist = fractal(size, 3, 5, 0.5, rng);
  cv::Mat grain = fractal(size, std::max(4, size / 8), 2, 0.6, rng);
  const double water_level = -0.9 + 0.6 * u(rng);

  // Agricultural parcels: a jittered grid of flat-colored, striped rectangles.
  const int parcels = 3 + static_cast<int>(u(rng) * 5);
  cv::Mat parcel_id(size, size, CV_32S);
  std::vector<int> xs{0}, ys{0};
  for (int i = 1; i < parcels; ++i) {
    xs.push_back(static_cast<int>(size * (i + 0.6 * (u(rng) - 0.5)) / parcels));
    ys.push_back(static_cast<int>(size * (i + 0.6 * (u(rng) - 0.5)) / parcels));
  }
  xs.push_back(size);
  ys.push_back(size);
  std::vector<cv::Vec3f> parcel_color;
  std::vector<double> parcel_angle;
  for (int i = 0; i < parcels * parcels; ++i) {
    parcel_color.emplace_back(static_cast<float>(0.35 + 0.35 * u(rng)),
                              static_cast<float>(0.45 + 0.35 * u(rng)),
                              static_cast<float>(0.2 + 0.25 * u(rng)));
    parcel_angle.push_back(u(rng) * CV_PI);
  }
  for (int gy = 0; gy < parcels; ++gy) {
    for (int gx = 0; gx < parcels; ++gx) {
      parcel_id(cv::Rect(xs[gx], ys[gy], xs[gx + 1] - xs[gx], ys[gy + 1] - ys[gy])) =
          gy * parcels + gx;
    }
  }
  const double stripe_freq = 0.5 + 1.0 * u(rng);

  cv::Mat out(size, size, CV_32FC3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const float e = elev.at<float>(y, x);
      const float m = moist.at<float>(y, x);
      const float g = grain.at<float>(y, x);
      cv::Vec3f c;
      if (e < water_level) {
        const float depth = std::min(1.0f, static_cast<float>(water_level - e));
        c = cv::Vec3f(0.12f, 0.25f + 0.1f * (1 - depth), 0.35f + 0.15f * (1 - depth));
      } else if (m > 0.3f) {
        c = cv::Vec3f(0.12f, 0.32f + 0.1f * m, 0.1f);  // forest
        c *= 0.8f + 0.35f * g;
      } else if (e > 1.1f) {
        c = cv::Vec3f(0.55f, 0.52f, 0.48f);  // rock
        c *= 0.75f + 0.3f * g;
      } else {
        const int id = parcel_id.at<int>(y, x);
        const double a = parcel_angle[id];
        const double stripe = std::cos((x * std::cos(a) + y * std::sin(a)) * stripe_freq);
        c = parcel_color[id] * static_cast<float>(0.85 + 0.12 * stripe);
        c *= 0.9f + 0.15f * g;
      }
      out.at<cv::Vec3f>(y, x) = c;
    }
  }

  // Roads: a few straight segments.
  const int roads = static_cast<int>(u(rng) * 4);
  for (int i = 0; i < roads; ++i) {
    cv::Point a(static_cast<int>(u(rng) * size), 0), b(static_cast<int>(u(rng) * size), size - 1);
    if (u(rng) < 0.5) {
      a = {0, a.x};
      b = {size - 1, b.x};
    }
    cv::line(out, a, b, cv::Scalar(0.7, 0.68, 0.62), 1 + static_cast<int>(u(rng) * 2),
             cv::LINE_AA);
  }
  // Buildings: small bright rectangles.
  const int houses = static_cast<int>(u(rng) * size / 8);
  for (int i = 0; i < houses; ++i) {
    const int x = static_cast<int>(u(rng) * (size - 4)), y = static_cast<int>(u(rng) * (size - 4));
    const int w = 2 + static_cast<int>(u(rng) * 3), h = 2 + static_cast<int>(u(rng) * 3);
    const float v = static_cast<float>(0.6 + 0.35 * u(rng));
    cv::rectangle(out, cv::Rect(x, y, w, h), cv::Scalar(v, v * 0.95, v * 0.9), cv::FILLED);
  }

  cv::Mat rgb8;
  out.convertTo(rgb8, CV_8UC3, 255.0);
  return rgb8;
}

std::vector<ManifestEntry> write_texture_corpus(const fs::path& dir, int count, int size,
                                                double resolution, uint64_t seed) {
  fs::create_directories(dir);
  std::mt19937_64 rng(mix_seed(seed, 0xc0));
  std::uniform_real_distribution<double> lat(-60.0, 70.0), lng(-180.0, 180.0);
  std::vector<ManifestEntry> out;
  for (int i = 0; i < count; ++i) {
    ManifestEntry e;
    e.lat = std::round(lat(rng) * 1e4) / 1e4;
    e.lng = std::round(lng(rng) * 1e4) / 1e4;
    e.resolution = resolution;
    std::ostringstream name;
    name << std::setprecision(10) << e.lat << '_' << e.lng << '_' << resolution << ".png";
    const fs::path p = dir / name.str();
    save_rgb(p, make_texture(size, mix_seed(seed, static_cast<uint64_t>(i))));
    e.path = p.lexically_normal().string();
    out.push_back(e);
  }
  return out;
}

// Run directories ------------------------------------------------------------

fs::path make_run_dir(const fs::path& base, const std::string& command, const json& config) {
  fs::create_directories(base);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream stem;
  stem << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << command << '-'
       << config_hash(config).substr(0, 8);
  for (int n = 0;; ++n) {
    fs::path dir = base / (n == 0 ? stem.str() : stem.str() + "-" + std::to_string(n));
    if (fs::create_directory(dir)) return dir;
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (fs::exists(path)) throw std::runtime_error("refusing to overwrite " + path.string());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace geocascade
