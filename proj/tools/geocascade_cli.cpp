// Command-line front end: training, generation, tiling, evaluation.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "geocascade/engine.hpp"
#include "geocascade/image_io.hpp"

namespace gc = geocascade;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "runs";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON configuration file");
  cmd->add_option("--set", c.sets, "Override, section.key=value (repeatable)");
  cmd->add_option("--out", c.out, "Base directory for run directories");
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw gc::ConfigError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw gc::ConfigError(p.string() + ": " + ex.what());
  }
}

// Defaults, then the config file, then --set overrides.
json user_doc(const Common& c, json base = gc::to_json(gc::EngineConfig{})) {
  if (!c.config.empty()) base.merge_patch(read_json(c.config));
  for (const auto& s : c.sets) gc::apply_override(base, s);
  return base;
}

struct Loaded {
  gc::EngineConfig cfg;
  gc::Checkpoint ck;
};

Loaded load_model(const Common& c, const std::string& checkpoint) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  Loaded l;
  l.ck = gc::load_checkpoint(checkpoint);
  const json saved = gc::to_json(l.ck.config);
  json doc = user_doc(c, saved);
  for (const char* section : {"frequency", "encoder", "unet"}) {
    if (doc[section] != saved[section]) {
      throw gc::ConfigError(std::string("section '") + section + "' differs from the checkpoint");
    }
  }
  l.cfg = gc::config_from_json(doc);
  return l;
}

void save_with_sidecar(const fs::path& png, const cv::Mat& rgb, const json& sidecar) {
  gc::save_rgb(png, rgb);
  fs::path side = png;
  side.replace_extension(".json");
  gc::write_json_file(side, sidecar);
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& it : fs::recursive_directory_iterator(dir)) {
    auto ext = it.path().extension().string();
    if (it.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) {
      out.push_back(it.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

fs::path start_run(const Common& c, const std::string& command, const gc::EngineConfig& cfg) {
  const json doc = gc::to_json(cfg);
  auto dir = gc::make_run_dir(c.out, command, doc);
  gc::write_json_file(dir / "config.json", doc);
  return dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Resolution-guided cascaded diffusion for overhead imagery"};
  app.require_subcommand(1);

  // synth
  Common synth_c;
  std::string synth_dir;
  int synth_count = 16, synth_size = 128;
  double synth_res = 4.0;
  uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Write a procedural texture corpus");
  synth->add_option("--dir", synth_dir, "Output directory")->required();
  synth->add_option("--count", synth_count);
  synth->add_option("--size", synth_size);
  synth->add_option("--resolution", synth_res, "m/pixel recorded in file names");
  synth->add_option("--seed", synth_seed);

  // manifest
  std::string man_root, man_out, man_rule = "auto";
  std::vector<double> man_levels{64.0, 16.0, 4.0};
  auto* manifest = app.add_subcommand("manifest", "Build a JSON-lines dataset manifest");
  manifest->add_option("--root", man_root)->required();
  manifest->add_option("--output", man_out)->required();
  manifest->add_option("--rule", man_rule)->check(CLI::IsMember({"auto", "sidecar", "filename"}));
  manifest->add_option("--levels", man_levels)->delimiter(',');

  // train
  Common train_c;
  std::string train_manifest, train_resume;
  auto* train = app.add_subcommand("train", "Train the denoiser");
  add_common(train, train_c);
  train->add_option("--manifest", train_manifest)->required();
  train->add_option("--resume", train_resume, "Checkpoint to continue from");

  // generate
  Common gen_c;
  std::string gen_ck, gen_lr;
  double gen_s = 0.0;
  uint64_t gen_seed = 0;
  auto* generate = app.add_subcommand("generate", "Generate one window from a low-res condition");
  add_common(generate, gen_c);
  generate->add_option("--checkpoint", gen_ck)->required();
  generate->add_option("--lr", gen_lr, "Condition image, window/N pixels square")->required();
  generate->add_option("--s", gen_s, "Resolution of the condition image, m/pixel")->required();
  generate->add_option("--seed", gen_seed);

  // cascade
  Common cas_c;
  std::string cas_ck, cas_seed_image;
  double cas_s0 = 64.0;
  int64_t cas_stages = 1;
  auto* cascade = app.add_subcommand("cascade", "Self-cascading generation");
  add_common(cascade, cas_c);
  cascade->add_option("--checkpoint", cas_ck)->required();
  cascade->add_option("--seed-image", cas_seed_image)->required();
  cascade->add_option("--s0", cas_s0);
  cascade->add_option("--stages", cas_stages)->check(CLI::NonNegativeNumber);

  // tile
  Common tile_c;
  std::string tile_ck, tile_input;
  double tile_s = 0.0;
  auto* tile = app.add_subcommand("tile", "One sliding-window stage over an arbitrary canvas");
  add_common(tile, tile_c);
  tile->add_option("--checkpoint", tile_ck)->required();
  tile->add_option("--input", tile_input)->required();
  tile->add_option("--s", tile_s, "Resolution of the input, m/pixel")->required();

  // evaluate
  Common eval_c;
  std::string eval_real, eval_fake;
  auto* evaluate = app.add_subcommand("evaluate", "FID and seam metrics");
  add_common(evaluate, eval_c);
  evaluate->add_option("--real", eval_real)->required();
  evaluate->add_option("--fake", eval_fake)->required();

  // augment
  Common aug_c;
  std::string aug_ck, aug_in;
  int64_t aug_times = 1;
  auto* augment = app.add_subcommand("augment", "Downsample then regenerate a corpus");
  add_common(augment, aug_c);
  augment->add_option("--checkpoint", aug_ck)->required();
  augment->add_option("--in", aug_in)->required();
  augment->add_option("--times", aug_times)->check(CLI::PositiveNumber);

  // info
  Common info_c;
  auto* info = app.add_subcommand("info", "Print the resolved config and parameter count");
  add_common(info, info_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      auto entries = gc::write_texture_corpus(synth_dir, synth_count, synth_size, synth_res,
                                              synth_seed);
      std::cout << "wrote " << entries.size() << " images to " << synth_dir << "\n";
    } else if (*manifest) {
      auto built = gc::build_manifest(man_root, gc::parse_metadata_rule(man_rule), man_levels);
      gc::write_manifest(man_out, built.manifest);
      json report{{"entries", built.manifest.entries.size()}, {"errors", json::array()}};
      for (const auto& e : built.errors) {
        report["errors"].push_back({{"path", e.path}, {"message", e.message}});
      }
      std::cout << report.dump(2) << "\n";
    } else if (*train) {
      auto cfg = gc::config_from_json(user_doc(train_c));
      auto m = gc::read_manifest(train_manifest);
      auto dir = start_run(train_c, "train", cfg);
      gc::TrainOptions opts;
      opts.run_dir = dir;
      opts.on_step = [](int64_t step, double loss) {
        std::printf("step %lld loss %.6f\n", static_cast<long long>(step), loss);
        std::fflush(stdout);
      };
      gc::TrainReport report;
      if (train_resume.empty()) {
        report = gc::train(m, cfg, opts);
      } else {
        auto ck = gc::load_checkpoint(train_resume);
        if (gc::to_json(ck.config)["unet"] != gc::to_json(cfg)["unet"]) {
          throw gc::ConfigError("--resume: model config differs from the checkpoint");
        }
        std::optional<double> level;
        if (cfg.train.hr_resolution > 0.0) level = cfg.train.hr_resolution;
        gc::Trainer trainer(cfg, ck.model, gc::TrainingSet::from_manifest(m, "train", level));
        gc::load_optimizer_state(train_resume, trainer.optimizer());
        trainer.set_step(ck.step);
        report = gc::train(trainer, opts);
      }
      std::cout << json{{"run_dir", dir.string()}, {"steps", report.steps},
                        {"checkpoint", report.checkpoint.string()},
                        {"aborted", report.aborted}, {"message", report.message}}
                       .dump(2)
                << "\n";
      if (report.aborted) return 2;
    } else if (*generate) {
      auto l = load_model(gen_c, gen_ck);
      gc::DenoiserPredictor model(l.ck.model);
      auto x_lr = gc::to_tensor(gc::load_rgb(gen_lr));
      const int64_t N = model.scale_factor();
      if (x_lr.size(2) != x_lr.size(3)) throw UsageError("--lr must be square");
      auto gen = at::detail::createCPUGenerator(gen_seed);
      auto noise = torch::randn({1, 3, x_lr.size(2) * N, x_lr.size(3) * N}, gen, torch::kFloat32);
      auto out = gc::generate_window(x_lr, gen_s, noise, model, l.cfg.schedule.make(),
                                     l.cfg.sampler)
                     .clamp(-1.0, 1.0);
      auto dir = start_run(gen_c, "generate", l.cfg);
      save_with_sidecar(dir / "window.png", gc::to_image(out),
                        json{{"s_in", gen_s}, {"s_out", gen_s / N}, {"seed", gen_seed},
                             {"canvas", {out.size(2), out.size(3)}}, {"source", gen_lr}});
      std::cout << (dir / "window.png").string() << "\n";
    } else if (*cascade) {
      auto l = load_model(cas_c, cas_ck);
      gc::DenoiserPredictor model(l.ck.model);
      auto seed_image = gc::to_tensor(gc::load_rgb(cas_seed_image));
      std::vector<gc::StageSpec> stages;
      double s = cas_s0;
      for (int64_t k = 0; k < cas_stages; ++k) {
        stages.push_back(gc::make_stage(l.cfg, k, s));
        s = stages.back().s_out();
      }
      auto dir = start_run(cas_c, "cascade", l.cfg);
      auto opts = gc::tiling_options(l.cfg);
      gc::run_cascade(seed_image, cas_s0, stages, opts, model, l.cfg.schedule.make(),
                      l.cfg.sampler, [&](const gc::CascadeLevel& level) {
                        if (!level.stage) return;
                        const auto& r = *level.stage;
                        auto name = "stage" + std::to_string(r.stage.k) + "_" +
                                    std::to_string(static_cast<int>(r.stage.s_out())) + "m.png";
                        save_with_sidecar(dir / name, gc::to_image(r.canvas),
                                          gc::stage_sidecar(r, opts.stitch_mode));
                        std::cout << (dir / name).string() << "\n";
                      });
    } else if (*tile) {
      auto l = load_model(tile_c, tile_ck);
      gc::DenoiserPredictor model(l.ck.model);
      auto input = gc::to_tensor(gc::load_rgb(tile_input));
      auto opts = gc::tiling_options(l.cfg);
      auto r = gc::run_stage(input, gc::make_stage(l.cfg, 0, tile_s), opts, model,
                             l.cfg.schedule.make(), l.cfg.sampler);
      auto dir = start_run(tile_c, "tile", l.cfg);
      save_with_sidecar(dir / "canvas.png", gc::to_image(r.canvas),
                        gc::stage_sidecar(r, opts.stitch_mode));
      std::cout << (dir / "canvas.png").string() << "\n";
    } else if (*evaluate) {
      auto cfg = gc::config_from_json(user_doc(eval_c));
      gc::RandomConvExtractor extractor(cfg.evaluation.extractor_seed,
                                        cfg.evaluation.feature_dim);
      auto load_all = [](const std::vector<fs::path>& files) {
        std::vector<torch::Tensor> out;
        for (const auto& f : files) out.push_back(gc::to_tensor(gc::load_rgb(f)));
        return out;
      };
      const auto real_files = list_images(eval_real);
      const auto fake_files = list_images(eval_fake);
      const double f = gc::fid(gc::extract_features(load_all(real_files), extractor),
                               gc::extract_features(load_all(fake_files), extractor));
      json report{{"fid", f},
                  {"n_images", {{"real", real_files.size()}, {"fake", fake_files.size()}}},
                  {"extractor_id", extractor.id()},
                  {"seam_horizontal", nullptr},
                  {"seam_vertical", nullptr},
                  {"seam_average", nullptr}};
      double sh = 0.0, sv = 0.0, sa = 0.0;
      int64_t seamed = 0;
      for (const auto& file : fake_files) {
        fs::path side = file;
        side.replace_extension(".json");
        if (!fs::exists(side)) continue;
        const json j = read_json(side);
        if (!j.contains("grid")) continue;
        const auto grid = gc::grid_from_json(j.at("grid"));
        auto intensity = gc::to_intensity(gc::to_tensor(gc::load_rgb(file)));
        if (intensity.size(1) != grid.canvas_h || intensity.size(2) != grid.canvas_w) {
          continue;
        }
        const auto g = gc::seam_gradient(intensity, grid);
        sh += g.horizontal;
        sv += g.vertical;
        sa += g.average;
        ++seamed;
      }
      if (seamed > 0) {
        report["seam_horizontal"] = sh / seamed;
        report["seam_vertical"] = sv / seamed;
        report["seam_average"] = sa / seamed;
      }
      auto dir = start_run(eval_c, "evaluate", cfg);
      gc::write_json_file(dir / "report.json", report);
      std::cout << report.dump(2) << "\n";
    } else if (*augment) {
      auto l = load_model(aug_c, aug_ck);
      gc::DenoiserPredictor model(l.ck.model);
      auto built = gc::build_manifest(aug_in);
      for (const auto& e : built.errors) {
        std::cerr << "skipped " << e.path << ": " << e.message << "\n";
      }
      auto dir = start_run(aug_c, "augment", l.cfg);
      int64_t written = 0;
      for (const auto& e : built.manifest.entries) {
        const auto rgb = gc::load_rgb(e.path);
        for (int64_t k = 0; k < aug_times; ++k) {
          const uint64_t seed = gc::mix_seed(l.cfg.tiling.seed, gc::image_seed(0, e.path),
                                             static_cast<uint64_t>(k));
          auto out = gc::regenerate(rgb, e.resolution, model, l.cfg, seed);
          auto name = fs::path(e.path).stem().string() + "_aug" + std::to_string(k) + ".png";
          save_with_sidecar(dir / name, out,
                            json{{"source", e.path}, {"repetition", k}, {"seed", seed},
                                 {"lat", e.lat}, {"lng", e.lng}, {"resolution", e.resolution},
                                 {"split", e.split}});
          ++written;
        }
      }
      std::cout << json{{"run_dir", dir.string()}, {"sources", built.manifest.entries.size()},
                        {"written", written}}
                       .dump(2)
                << "\n";
    } else if (*info) {
      auto cfg = gc::config_from_json(user_doc(info_c));
      std::cout << json{{"config", gc::to_json(cfg)},
                        {"parameters", gc::count_parameters(cfg.model)}}
                       .dump(2)
                << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const gc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
