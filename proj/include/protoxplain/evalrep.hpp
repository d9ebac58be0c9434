#pragma once

// Evaluation over a deterministic episode stream and the alpha sweep.

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "protoxplain/backbone.hpp"
#include "protoxplain/episodic.hpp"
#include "protoxplain/explain.hpp"
#include "protoxplain/protohead.hpp"
#include "protoxplain/trainer.hpp"

namespace protoxplain {

struct EvalConfig {
  std::size_t n_episodes = 200;
  EpisodeSpec episode_spec;
  std::uint64_t seed = 2;
  double alignment_threshold = 0.5;
  CamTarget cam_target = CamTarget::prototype_logit;

  void validate() const {
    if (n_episodes < 1) throw ConfigError("n_episodes must be >= 1");
    if (!(alignment_threshold > 0.0 && alignment_threshold < 1.0)) {
      throw ConfigError("alignment_threshold must be in (0,1)");
    }
    episode_spec.validate();
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set_number("eval_episodes", n_episodes);
    kv.set_number("n_way", episode_spec.n_way);
    kv.set_number("k_shot", episode_spec.k_shot);
    kv.set_number("q_per_class", episode_spec.q_per_class);
    kv.set_number("eval_seed", seed);
    kv.set_number("binarize_threshold", alignment_threshold);
    kv.set("cam_target", to_string(cam_target));
    return kv;
  }

  /// Overrides the fields of `base` named in `kv`; other keys are ignored.
  static EvalConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, EvalConfig{}); }
  static EvalConfig from_key_values(const KeyValues& kv, EvalConfig base) {
    auto count = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.integer(key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(key + " must be >= 0");
      return static_cast<std::size_t>(v);
    };
    base.n_episodes = count("eval_episodes", base.n_episodes);
    base.episode_spec.n_way = count("n_way", base.episode_spec.n_way);
    base.episode_spec.k_shot = count("k_shot", base.episode_spec.k_shot);
    base.episode_spec.q_per_class = count("q_per_class", base.episode_spec.q_per_class);
    base.seed = count("eval_seed", base.seed);
    base.alignment_threshold = kv.number("binarize_threshold", base.alignment_threshold);
    if (auto v = kv.get("cam_target")) base.cam_target = parse_cam_target(*v);
    return base;
  }
};

struct QueryPrediction {
  std::size_t episode = 0;
  std::size_t true_class = 0;  // global
  std::size_t predicted_class = 0;
  bool has_mask = false;
  double alignment = 0.0;
};

struct EvalReport {
  double overall_accuracy = 0.0;
  std::vector<std::string> classes;
  std::vector<double> per_class_f1;
  double mean_alignment_dice = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted], global classes
  std::size_t n_episodes = 0;
  std::size_t n_queries = 0;
  std::size_t n_aligned = 0;
  std::vector<double> episode_accuracy;
  std::vector<QueryPrediction> predictions;
};

/// 2tp / (2tp + fp + fn), 0 when undefined.
inline double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const auto den = 2 * tp + fp + fn;
  return den == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(den);
}

inline std::vector<double> f1_from_confusion(const std::vector<std::vector<std::size_t>>& confusion) {
  const auto n = confusion.size();
  std::vector<double> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t row = 0;
    std::size_t col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += confusion[c][k];
      col += confusion[k][c];
    }
    const auto tp = confusion[c][c];
    out[c] = f1_score(tp, col - tp, row - tp);
  }
  return out;
}

/// Query heatmaps target the predicted class. Embeddings are computed once
/// per sample since the model is fixed during evaluation.
template <BackboneModel M>
EvalReport evaluate(const M& model, const Dataset& data, const EvalConfig& config) {
  config.validate();
  const auto& bc = model.config();
  if (!data.samples.empty()) {
    const auto& img = data.samples.front()->image;
    if (img.channels != bc.input_channels || img.height != bc.input_height || img.width != bc.input_width) {
      throw ContractError("checkpoint expects inputs " +
                          shape_string(bc.input_channels, bc.input_height, bc.input_width) + ", dataset has " +
                          img.shape());
    }
  }
  auto spec = config.episode_spec;
  spec.seed = config.seed;
  check_capacity(data, spec);

  std::unordered_map<const AnnotatedSample*, std::size_t> slot;
  std::vector<EmbeddingOutput> outputs;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    slot[data.samples[i].get()] = i;
    outputs.push_back(model.forward(data.samples[i]->image, PassMode::inference));
  }

  EvalReport r;
  r.classes = data.index.class_catalog;
  const auto n_classes = r.classes.size();
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  std::size_t correct = 0;
  double alignment_sum = 0.0;
  for (std::size_t e = 0; e < config.n_episodes; ++e) {
    const auto ep = sample_episode(data, spec, e);
    std::vector<std::vector<Vector>> by_class(ep.class_map.size());
    for (const auto& item : ep.support) by_class[item.label].push_back(outputs[slot.at(item.sample.get())].embedding);
    const auto protos = compute_prototypes(by_class);
    std::size_t ep_correct = 0;
    for (const auto& item : ep.query) {
      const auto& out = outputs[slot.at(item.sample.get())];
      const auto pred = classify_query(out.embedding, protos).argmax();
      QueryPrediction qp{e, ep.class_map.at(item.label), ep.class_map.at(pred), item.sample->has_mask(), 0.0};
      if (qp.true_class >= n_classes || qp.predicted_class >= n_classes) {
        throw ContractError("episode class map points outside the class catalog");
      }
      ++r.confusion[qp.true_class][qp.predicted_class];
      ep_correct += pred == item.label;
      if (qp.has_mask) {
        const auto heat = gradcam_heatmap(model, out, protos, pred, TargetKind::predicted_label, config.cam_target);
        qp.alignment = alignment_dice(heat.values, item.sample->roi_mask, config.alignment_threshold);
        alignment_sum += qp.alignment;
        ++r.n_aligned;
      }
      r.predictions.push_back(qp);
    }
    correct += ep_correct;
    r.n_queries += ep.query.size();
    r.episode_accuracy.push_back(static_cast<double>(ep_correct) / static_cast<double>(ep.query.size()));
  }
  r.n_episodes = config.n_episodes;
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.n_queries);
  r.per_class_f1 = f1_from_confusion(r.confusion);
  r.mean_alignment_dice = r.n_aligned > 0 ? alignment_sum / static_cast<double>(r.n_aligned) : 0.0;
  return r;
}

inline void write_eval_csv(const std::string& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "metric,class,value\n";
  out << "accuracy,," << format_number(r.overall_accuracy) << '\n';
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    out << "f1," << r.classes[c] << ',' << format_number(r.per_class_f1[c]) << '\n';
  }
  out << "alignment_dice,," << format_number(r.mean_alignment_dice) << '\n';
  out << "n_episodes,," << r.n_episodes << '\n';
  out << "n_queries,," << r.n_queries << '\n';
  if (!out) throw IoError("failed writing " + path);
}

struct SweepRow {
  double alpha = 0.0;
  double accuracy = 0.0;
  double alignment = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double best_alpha = 0.0;  // highest accuracy, first on ties
};

inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid{0.0, 0.05, 0.10, 0.25, 0.50, 1.0};
  return grid;
}

/// One training run per alpha under identical seeds; alpha = 0 runs the
/// baseline objective.
inline SweepResult alpha_sweep(const Dataset& train_data, const Dataset& test_data, const TrainConfig& base,
                               const std::vector<double>& alphas, const EvalConfig& eval) {
  if (alphas.empty()) throw ConfigError("alpha sweep needs at least one alpha");
  for (double a : alphas) {
    if (!(a >= 0.0)) throw ConfigError("alpha values must be >= 0");
  }
  SweepResult out;
  for (double a : alphas) {
    auto cfg = base;
    cfg.alpha = a;
    cfg.objective = a == 0.0 ? Objective::baseline : Objective::guided;
    const auto trained = train(train_data, cfg);
    const auto rep = evaluate(trained.model, test_data, eval);
    out.rows.push_back({a, rep.overall_accuracy, rep.mean_alignment_dice});
  }
  const SweepRow* best = &out.rows.front();
  for (const auto& row : out.rows) {
    if (row.accuracy > best->accuracy) best = &row;
  }
  out.best_alpha = best->alpha;
  return out;
}

inline void write_sweep_csv(const std::string& path, const SweepResult& s) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "alpha,accuracy,alignment\n";
  for (const auto& r : s.rows) {
    out << format_number(r.alpha) << ',' << format_number(r.accuracy) << ',' << format_number(r.alignment) << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace protoxplain
