// protoxplain: dataset generation, training, evaluation, alpha sweeps and
// Grad-CAM panels from the command line.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
// 4 training aborted on a non-finite loss.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "protoxplain/protoxplain.hpp"

namespace px = protoxplain;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kIoError = 3, kTrainingAborted = 4 };

/// Flags that were given on the command line, keyed like the config file.
class Overrides {
 public:
  template <class T>
  void add(const std::string& key, const std::optional<T>& v) {
    if (!v) return;
    if constexpr (std::is_arithmetic_v<T>) {
      kv_.set_number(key, *v);
    } else {
      kv_.set(key, *v);
    }
  }
  const px::KeyValues& kv() const { return kv_; }

 private:
  px::KeyValues kv_;
};

/// Config file entries, with PROTOXPLAIN_SEED filling `seed_key` when neither
/// the file nor a flag sets it.
px::KeyValues base_config(const std::optional<std::string>& path, const std::string& seed_key) {
  px::KeyValues kv = path ? px::load_config_file(*path) : px::KeyValues{};
  if (!kv.contains(seed_key)) {
    if (const char* env = std::getenv("PROTOXPLAIN_SEED"); env && *env) kv.set(seed_key, env);
  }
  return kv;
}

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw px::IoError("cannot create " + out.string() + ": " + ec.message());
}

std::vector<double> parse_alphas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = std::string(px::trim(item));
    if (t.empty()) continue;
    out.push_back(px::KeyValues::parse_double(t, "alpha"));
  }
  if (out.empty()) throw px::ConfigError("--alphas is empty");
  return out;
}

void print_warnings(const px::Dataset& ds) {
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << '\n';
}

/// Backbone input size follows the dataset unless configured explicitly.
void fit_input_size(px::TrainConfig& cfg, const px::KeyValues& given, const px::Dataset& ds) {
  if (ds.samples.empty()) throw px::DataError("dataset is empty");
  const auto& img = ds.samples.front()->image;
  if (!given.contains("backbone.input_height")) cfg.backbone.input_height = img.height;
  if (!given.contains("backbone.input_width")) cfg.backbone.input_width = img.width;
}

struct TrainFlags {
  std::optional<double> alpha;
  std::optional<long long> epochs;
  std::optional<long long> episodes;
  std::optional<long long> n_way;
  std::optional<long long> k_shot;
  std::optional<long long> queries;
  std::optional<double> lr;
  std::optional<std::string> optimizer;
  std::optional<long long> seed;
  std::optional<std::string> second_order;
  std::optional<std::string> cam_target;
  std::optional<std::string> cam_layer;
  std::optional<long long> embedding_dim;
  std::optional<long long> blocks;
  std::optional<long long> input_channels;
  std::optional<std::string> pretrained;

  void attach(CLI::App* cmd) {
    cmd->add_option("--alpha", alpha, "Explanation weight alpha (0 selects the baseline objective)");
    cmd->add_option("--epochs", epochs, "Training epochs");
    cmd->add_option("--episodes", episodes, "Episodes per epoch");
    cmd->add_option("--n-way", n_way, "Classes per episode");
    cmd->add_option("--k-shot", k_shot, "Support samples per class");
    cmd->add_option("--queries", queries, "Query samples per class");
    cmd->add_option("--lr", lr, "Learning rate");
    cmd->add_option("--optimizer", optimizer, "adam or sgd");
    cmd->add_option("--seed", seed, "Training seed");
    cmd->add_option("--second-order", second_order, "full or stop_grad_weights");
    cmd->add_option("--cam-target", cam_target, "prototype_logit or neg_sq_distance");
    cmd->add_option("--cam-layer", cam_layer, "Grad-CAM block, e.g. block4");
    cmd->add_option("--embedding-dim", embedding_dim, "Embedding dimension");
    cmd->add_option("--blocks", blocks, "Number of conv blocks");
    cmd->add_option("--input-channels", input_channels, "Input channels");
    cmd->add_option("--pretrained", pretrained, "Initial weights checkpoint");
  }

  Overrides overrides() const {
    Overrides o;
    o.add("alpha", alpha);
    o.add("epochs", epochs);
    o.add("episodes_per_epoch", episodes);
    o.add("n_way", n_way);
    o.add("k_shot", k_shot);
    o.add("q_per_class", queries);
    o.add("learning_rate", lr);
    o.add("optimizer", optimizer);
    o.add("seed", seed);
    o.add("second_order", second_order);
    o.add("cam_target", cam_target);
    o.add("backbone.cam_layer", cam_layer);
    o.add("backbone.embedding_dim", embedding_dim);
    o.add("backbone.blocks", blocks);
    o.add("backbone.input_channels", input_channels);
    o.add("backbone.pretrained_source", pretrained);
    return o;
  }
};

/// Resolves flags > config file > PROTOXPLAIN_SEED > defaults. Without an
/// explicit objective, alpha = 0 trains the baseline.
px::TrainConfig resolve_train(const px::KeyValues& file, const Overrides& flags, const std::string& objective,
                              px::KeyValues& merged) {
  merged = file;
  for (const auto& [k, v] : flags.kv().entries()) merged.set(k, v);
  if (objective != "auto") merged.set("objective", objective);
  auto cfg = px::TrainConfig::from_key_values(merged);
  if (!merged.contains("objective")) cfg.objective = cfg.alpha == 0.0 ? px::Objective::baseline : px::Objective::guided;
  return cfg;
}

int cmd_gen_synth(const std::optional<std::string>& config, const std::string& out, const Overrides& flags) {
  auto kv = base_config(config, "seed");
  for (const auto& [k, v] : flags.kv().entries()) kv.set(k, v);
  const auto cfg = px::SynthConfig::from_key_values(kv);
  cfg.validate();
  prepare_out(out);
  px::RunManifest m{"gen-synth", config.value_or(""), cfg.to_key_values(), cfg.seed, out};
  const auto idx = px::generate(cfg, out);
  m.write();
  std::cout << "wrote " << idx.train.entries.size() << " train and " << idx.test.entries.size() << " test samples to "
            << out << '\n';
  return kOk;
}

int cmd_train(const std::optional<std::string>& config, const std::string& data, const std::string& out,
              const TrainFlags& flags, const std::string& objective) {
  px::KeyValues merged;
  auto cfg = resolve_train(base_config(config, "seed"), flags.overrides(), objective, merged);
  const auto ds = px::load_dataset(data, cfg.backbone.input_channels);
  print_warnings(ds);
  fit_input_size(cfg, merged, ds);
  cfg.validate();
  prepare_out(out);
  px::RunManifest m{"train", config.value_or(""), cfg.to_key_values(), cfg.seed, out};
  m.config.set("data", data);
  const auto result = px::train(ds, cfg);
  const auto ck = (fs::path(out) / "checkpoint.pxw").string();
  px::save_checkpoint(ck, result.model, result.report.config_echo);
  px::write_report_csv((fs::path(out) / "report.csv").string(), result.report);
  {
    std::ofstream echo(fs::path(out) / "config.echo");
    echo << result.report.config_echo.to_string();
    if (!echo) throw px::IoError("cannot write " + (fs::path(out) / "config.echo").string());
  }
  m.write();
  const auto& last = result.report.records.back();
  std::cout << "trained " << result.report.records.size() << " episodes (" << px::to_string(cfg.objective)
            << ", alpha " << cfg.alpha << ") in " << result.report.wall_clock_seconds << " s; last l_total "
            << last.l_total << "; checkpoint " << ck << '\n';
  return kOk;
}

struct EvalFlags {
  std::optional<long long> episodes;
  std::optional<long long> n_way;
  std::optional<long long> k_shot;
  std::optional<long long> queries;
  std::optional<long long> seed;
  std::optional<double> threshold;
  std::optional<std::string> cam_target;

  void attach(CLI::App* cmd, const std::string& prefix) {
    cmd->add_option("--" + prefix + "episodes", episodes, "Evaluation episodes");
    cmd->add_option("--" + prefix + "seed", seed, "Evaluation episode seed");
    cmd->add_option("--threshold", threshold, "Heatmap binarization threshold for alignment Dice");
    if (prefix.empty()) {
      cmd->add_option("--n-way", n_way, "Classes per episode");
      cmd->add_option("--k-shot", k_shot, "Support samples per class");
      cmd->add_option("--queries", queries, "Query samples per class");
      cmd->add_option("--cam-target", cam_target, "prototype_logit or neg_sq_distance");
    }
  }

  Overrides overrides() const {
    Overrides o;
    o.add("eval_episodes", episodes);
    o.add("n_way", n_way);
    o.add("k_shot", k_shot);
    o.add("q_per_class", queries);
    o.add("eval_seed", seed);
    o.add("binarize_threshold", threshold);
    o.add("cam_target", cam_target);
    return o;
  }
};

int cmd_eval(const std::optional<std::string>& config, const std::string& checkpoint, const std::string& data,
             const std::string& out, const EvalFlags& flags) {
  auto kv = base_config(config, "eval_seed");
  const auto ck = px::load_checkpoint(checkpoint);
  if (!kv.contains("cam_target")) {
    if (auto t = ck.metadata.get("cam_target")) kv.set("cam_target", *t);
  }
  const auto given = flags.overrides();
  for (const auto& [k, v] : given.kv().entries()) kv.set(k, v);
  const auto cfg = px::EvalConfig::from_key_values(kv);
  cfg.validate();
  const auto ds = px::load_dataset(data, ck.model.config().input_channels);
  print_warnings(ds);
  prepare_out(out);
  px::RunManifest m{"eval", config.value_or(""), cfg.to_key_values(), cfg.seed, out};
  m.config.set("checkpoint", checkpoint);
  m.config.set("data", data);
  const auto rep = px::evaluate(ck.model, ds, cfg);
  px::write_eval_csv((fs::path(out) / "eval.csv").string(), rep);
  m.write();
  std::cout << "accuracy " << rep.overall_accuracy << "  alignment_dice " << rep.mean_alignment_dice << '\n';
  for (std::size_t c = 0; c < rep.classes.size(); ++c) {
    std::cout << "f1 " << rep.classes[c] << ' ' << rep.per_class_f1[c] << '\n';
  }
  return kOk;
}

int cmd_sweep(const std::optional<std::string>& config, const std::string& data, const std::string& test,
              const std::string& out, const std::string& alphas_text, const TrainFlags& tflags,
              const EvalFlags& eflags) {
  const auto alphas = parse_alphas(alphas_text);
  px::KeyValues merged;
  auto tcfg = resolve_train(base_config(config, "seed"), tflags.overrides(), "guided", merged);
  auto ekv = config ? px::load_config_file(*config) : px::KeyValues{};
  const auto given = eflags.overrides();
  for (const auto& [k, v] : given.kv().entries()) ekv.set(k, v);
  // Episode shape is shared by training and evaluation.
  for (const char* key : {"n_way", "k_shot", "q_per_class", "cam_target"}) {
    if (auto v = merged.get(key)) ekv.set(key, *v);
  }
  const auto ecfg = px::EvalConfig::from_key_values(ekv);
  ecfg.validate();
  const auto train_ds = px::load_dataset(data, tcfg.backbone.input_channels);
  const auto test_ds = px::load_dataset(test, tcfg.backbone.input_channels);
  print_warnings(train_ds);
  print_warnings(test_ds);
  fit_input_size(tcfg, merged, train_ds);
  tcfg.alpha = 0.0;
  tcfg.objective = px::Objective::baseline;
  tcfg.validate();
  prepare_out(out);

  px::KeyValues echo = tcfg.to_key_values();
  echo.set("alpha", alphas_text);
  echo.set("objective", "baseline when alpha = 0, guided otherwise");
  const auto eval_echo = ecfg.to_key_values();
  for (const auto& [k, v] : eval_echo.entries()) echo.set(k, v);
  echo.set("data", data);
  echo.set("test", test);
  px::RunManifest m{"sweep", config.value_or(""), echo, tcfg.seed, out};
  const auto sweep = px::alpha_sweep(train_ds, test_ds, tcfg, alphas, ecfg);
  px::write_sweep_csv((fs::path(out) / "sweep.csv").string(), sweep);
  px::write_png((fs::path(out) / "sweep.png").string(), px::sweep_plot(sweep));
  m.write();
  for (const auto& r : sweep.rows) {
    std::cout << "alpha " << r.alpha << "  accuracy " << r.accuracy << "  alignment " << r.alignment << '\n';
  }
  std::cout << "best alpha " << sweep.best_alpha << '\n';
  return kOk;
}

/// Prototypes are the mean embeddings of every other sample of each class,
/// so the explained sample never contributes to its own prototype.
int cmd_explain(const std::vector<std::string>& checkpoints, const std::string& data, const std::string& out,
                const std::vector<std::string>& sample_ids, int zoom) {
  if (checkpoints.empty() || checkpoints.size() > 2) throw px::ConfigError("explain takes one or two checkpoints");
  std::vector<px::Checkpoint> models;
  for (const auto& c : checkpoints) models.push_back(px::load_checkpoint(c));
  const auto& bc = models.front().model.config();
  for (const auto& m : models) {
    const auto& o = m.model.config();
    if (o.input_channels != bc.input_channels || o.input_height != bc.input_height || o.input_width != bc.input_width) {
      throw px::ContractError("checkpoints expect different input shapes");
    }
  }
  const auto ds = px::load_dataset(data, bc.input_channels);
  print_warnings(ds);

  std::vector<std::size_t> chosen;
  if (sample_ids.empty()) {
    for (std::size_t c = 0; c < ds.num_classes(); ++c) {
      const auto members = ds.members(c);
      if (!members.empty()) chosen.push_back(members.front());
    }
  } else {
    for (const auto& id : sample_ids) {
      const auto i = ds.find(id);
      if (!i) throw px::ConfigError("unknown sample_id " + id);
      chosen.push_back(*i);
    }
  }
  prepare_out(out);
  px::KeyValues echo;
  for (std::size_t j = 0; j < checkpoints.size(); ++j) echo.set("checkpoint" + std::to_string(j + 1), checkpoints[j]);
  echo.set("data", data);
  std::string ids;
  for (auto i : chosen) ids += (ids.empty() ? "" : ",") + ds.samples[i]->sample_id;
  echo.set("samples", ids);
  echo.set_number("zoom", zoom);
  px::RunManifest m{"explain", "", echo, 0, out};

  std::vector<std::vector<px::EmbeddingOutput>> outputs(models.size());
  for (std::size_t j = 0; j < models.size(); ++j) {
    const auto& model = models[j].model;
    for (const auto& s : ds.samples) {
      if (s->image.channels != bc.input_channels || s->image.height != bc.input_height ||
          s->image.width != bc.input_width) {
        throw px::ContractError("checkpoint expects inputs " +
                                px::shape_string(bc.input_channels, bc.input_height, bc.input_width) + ", sample " +
                                s->sample_id + " is " + s->image.shape());
      }
      outputs[j].push_back(model.forward(s->image, px::PassMode::inference));
    }
  }

  for (auto i : chosen) {
    const auto& sample = *ds.samples[i];
    std::vector<px::Grid> heats;
    for (std::size_t j = 0; j < models.size(); ++j) {
      std::vector<std::vector<px::Vector>> by_class(ds.num_classes());
      for (std::size_t k = 0; k < ds.samples.size(); ++k) {
        if (k != i) by_class[ds.samples[k]->label_index].push_back(outputs[j][k].embedding);
      }
      for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].empty()) {
          throw px::CapacityError("class " + ds.index.class_catalog[c] + " needs another sample to form a prototype");
        }
      }
      const auto protos = px::compute_prototypes(by_class);
      const auto pred = px::classify_query(outputs[j][i].embedding, protos).argmax();
      const auto target = px::parse_cam_target(models[j].metadata.get_or("cam_target", "prototype_logit"));
      const auto heat =
          px::gradcam_heatmap(models[j].model, outputs[j][i], protos, pred, px::TargetKind::predicted_label, target);
      const auto stem = sample.sample_id + "_model" + std::to_string(j + 1) + ".png";
      px::write_gray_png((fs::path(out) / ("heatmap_" + stem)).string(), heat.values);
      px::write_png((fs::path(out) / ("overlay_" + stem)).string(), px::heatmap_overlay(sample.image, heat.values));
      std::cout << sample.sample_id << " model" << j + 1 << ": true " << sample.label << ", predicted "
                << ds.index.class_catalog[pred];
      if (sample.has_mask()) {
        std::cout << ", alignment Dice " << px::alignment_dice(heat.values, sample.roi_mask, 0.5);
      }
      std::cout << '\n';
      heats.push_back(heat.values);
    }
    px::write_png((fs::path(out) / ("panel_" + sample.sample_id + ".png")).string(),
                  px::explain_panel(sample.image, sample.roi_mask, heats, zoom));
  }
  m.write();
  return kOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Expert-guided explainable few-shot learning"};
  app.require_subcommand(1);

  std::optional<std::string> config;
  std::string out;

  auto* gen = app.add_subcommand("gen-synth", "Generate the synthetic benchmark");
  std::optional<long long> g_seed, g_classes, g_per_class, g_size, g_rmin, g_rmax;
  std::optional<double> g_spurious, g_noise;
  gen->add_option("--out", out, "Output root (train/ and test/ are created)")->required();
  gen->add_option("--config", config, "key=value config file");
  gen->add_option("--seed", g_seed, "Generator seed");
  gen->add_option("--n-classes", g_classes, "Number of classes (2 or 3)");
  gen->add_option("--samples-per-class", g_per_class, "Samples per class and split");
  gen->add_option("--image-size", g_size, "Square image side in pixels");
  gen->add_option("--radius-min", g_rmin, "Smallest lesion radius");
  gen->add_option("--radius-max", g_rmax, "Largest lesion radius");
  gen->add_option("--spurious-strength", g_spurious, "Probability of a class marker in training images");
  gen->add_option("--noise-sigma", g_noise, "Gaussian noise level");

  auto* tr = app.add_subcommand("train", "Train a guided or baseline model");
  std::string data;
  std::string objective = "auto";
  TrainFlags tflags;
  tr->add_option("--data", data, "Training dataset root")->required();
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_option("--config", config, "key=value config file or a previous manifest");
  tr->add_option("--objective", objective, "auto, guided or baseline")
      ->check(CLI::IsMember({"auto", "guided", "baseline"}));
  tflags.attach(tr);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string checkpoint;
  EvalFlags eflags;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", data, "Evaluation dataset root")->required();
  ev->add_option("--out", out, "Run directory")->required();
  ev->add_option("--config", config, "key=value config file or a previous manifest");
  eflags.attach(ev, "");

  auto* sw = app.add_subcommand("sweep", "Train and evaluate one model per alpha");
  std::string test;
  std::string alphas = "0,0.05,0.10,0.25,0.50,1.0";
  TrainFlags sflags;
  EvalFlags seflags;
  sw->add_option("--data", data, "Training dataset root")->required();
  sw->add_option("--test", test, "Evaluation dataset root")->required();
  sw->add_option("--out", out, "Run directory")->required();
  sw->add_option("--config", config, "key=value config file");
  sw->add_option("--alphas", alphas, "Comma separated alpha grid");
  sflags.attach(sw);
  seflags.attach(sw, "eval-");

  auto* ex = app.add_subcommand("explain", "Render Grad-CAM panels");
  std::vector<std::string> checkpoints;
  std::vector<std::string> samples;
  int zoom = 4;
  ex->add_option("--checkpoint", checkpoints, "Guided checkpoint, then optionally the baseline")->required();
  ex->add_option("--data", data, "Dataset root holding the samples")->required();
  ex->add_option("--out", out, "Output directory")->required();
  ex->add_option("--samples", samples, "Sample ids (default: first sample of each class)")->delimiter(',');
  ex->add_option("--zoom", zoom, "Pixel zoom of each panel tile")->check(CLI::Range(1, 16));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return kConfigError;
  }

  if (*gen) {
    Overrides o;
    o.add("seed", g_seed);
    o.add("n_classes", g_classes);
    o.add("samples_per_class", g_per_class);
    o.add("image_height", g_size);
    o.add("image_width", g_size);
    o.add("radius_min", g_rmin);
    o.add("radius_max", g_rmax);
    o.add("spurious_strength", g_spurious);
    o.add("noise_sigma", g_noise);
    return cmd_gen_synth(config, out, o);
  }
  if (*tr) return cmd_train(config, data, out, tflags, objective);
  if (*ev) return cmd_eval(config, checkpoint, data, out, eflags);
  if (*sw) return cmd_sweep(config, data, test, out, alphas, sflags, seflags);
  return cmd_explain(checkpoints, data, out, samples, zoom);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const px::TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kTrainingAborted;
  } catch (const px::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const px::ContractError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const px::CapacityError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const px::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kIoError;
  } catch (const px::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const px::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
