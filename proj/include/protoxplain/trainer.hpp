#pragma once

// Episodic training on L_total = L_proto + alpha * L_exp.
//
// Both terms are back-propagated in one reverse pass per episode: the
// explanation cotangents (direct dL/dA, dL/de and dL/dc_k) are added to the
// prototypical ones before each image's backbone backward call.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoxplain/backbone.hpp"
#include "protoxplain/episodic.hpp"
#include "protoxplain/explain.hpp"
#include "protoxplain/protohead.hpp"

namespace protoxplain {

enum class OptimizerKind { sgd, adam };
/// `baseline` never touches the explanation code; `guided` does whenever alpha > 0.
enum class Objective { guided, baseline };

inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::sgd ? "sgd" : "adam"; }
inline std::string to_string(Objective o) { return o == Objective::guided ? "guided" : "baseline"; }

inline Objective parse_objective(const std::string& s) {
  if (s == "guided") return Objective::guided;
  if (s == "baseline") return Objective::baseline;
  throw ConfigError("objective must be guided or baseline, got " + s);
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("optimizer must be sgd or adam, got " + s);
}

struct TrainConfig {
  double alpha = 0.10;
  std::size_t epochs = 7;
  std::size_t episodes_per_epoch = 60;
  EpisodeSpec episode_spec;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 1;
  ExplanationConfig explanation;
  BackboneConfig backbone;
  Objective objective = Objective::guided;

  std::size_t total_steps() const { return epochs * episodes_per_epoch; }

  void validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be a finite value >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (objective == Objective::baseline && alpha != 0.0) {
      throw ConfigError("the baseline objective requires alpha = 0");
    }
    episode_spec.validate();
    explanation.validate();
    backbone.validate();
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set_number("alpha", alpha);
    kv.set_number("epochs", epochs);
    kv.set_number("episodes_per_epoch", episodes_per_epoch);
    kv.set_number("n_way", episode_spec.n_way);
    kv.set_number("k_shot", episode_spec.k_shot);
    kv.set_number("q_per_class", episode_spec.q_per_class);
    kv.set_number("learning_rate", learning_rate);
    kv.set("optimizer", to_string(optimizer));
    kv.set_number("seed", seed);
    kv.set_number("epsilon", explanation.epsilon);
    kv.set("second_order", to_string(explanation.second_order));
    kv.set_number("binarize_threshold", explanation.binarize_threshold);
    kv.set("cam_target", to_string(explanation.target));
    kv.set("objective", to_string(objective));
    const auto arch = backbone.to_key_values();
    for (const auto& [k, v] : arch.entries()) kv.set("backbone." + k, v);
    return kv;
  }

  /// Overrides the fields of `base` named in `kv`; other keys are ignored.
  static TrainConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, TrainConfig{}); }
  static TrainConfig from_key_values(const KeyValues& kv, TrainConfig base) {
    auto count = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.integer(key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(key + " must be >= 0");
      return static_cast<std::size_t>(v);
    };
    base.alpha = kv.number("alpha", base.alpha);
    base.epochs = count("epochs", base.epochs);
    base.episodes_per_epoch = count("episodes_per_epoch", base.episodes_per_epoch);
    base.episode_spec.n_way = count("n_way", base.episode_spec.n_way);
    base.episode_spec.k_shot = count("k_shot", base.episode_spec.k_shot);
    base.episode_spec.q_per_class = count("q_per_class", base.episode_spec.q_per_class);
    base.learning_rate = kv.number("learning_rate", base.learning_rate);
    if (auto v = kv.get("optimizer")) base.optimizer = parse_optimizer(*v);
    base.seed = count("seed", base.seed);
    base.explanation.epsilon = kv.number("epsilon", base.explanation.epsilon);
    if (auto v = kv.get("second_order")) base.explanation.second_order = parse_second_order(*v);
    base.explanation.binarize_threshold = kv.number("binarize_threshold", base.explanation.binarize_threshold);
    if (auto v = kv.get("cam_target")) base.explanation.target = parse_cam_target(*v);
    if (auto v = kv.get("objective")) base.objective = parse_objective(*v);
    auto& b = base.backbone;
    b.input_channels = count("backbone.input_channels", b.input_channels);
    b.input_height = count("backbone.input_height", b.input_height);
    b.input_width = count("backbone.input_width", b.input_width);
    b.embedding_dim = count("backbone.embedding_dim", b.embedding_dim);
    b.blocks = count("backbone.blocks", b.blocks);
    b.cam_layer = kv.get_or("backbone.cam_layer", b.cam_layer);
    if (auto v = kv.get("backbone.pretrained_source")) b.pretrained_source = *v;
    return base;
  }
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpisodeLosses {
  double l_proto = 0.0;
  double l_exp = 0.0;
  double l_total = 0.0;
  double accuracy = 0.0;
  std::size_t explained = 0;  // queries that contributed to l_exp
  std::size_t skipped = 0;    // queries without a mask
  std::vector<std::size_t> predictions;
};

/// Weights of the two loss terms in one reverse pass.
struct LossWeights {
  double proto = 1.0;
  double explanation = 0.0;
};

namespace detail {

struct EpisodeForward {
  std::vector<EmbeddingOutput> support;
  std::vector<EmbeddingOutput> query;
  PrototypeSet prototypes;
};

template <BackboneModel M>
EpisodeForward forward_episode(const Episode& ep, const M& model, std::size_t n_way, PassMode mode) {
  EpisodeForward f;
  std::vector<std::vector<Vector>> by_class(n_way);
  for (const auto& item : ep.support) {
    f.support.push_back(model.forward(item.sample->image, mode));
    by_class.at(item.label).push_back(f.support.back().embedding);
  }
  for (const auto& item : ep.query) f.query.push_back(model.forward(item.sample->image, mode));
  f.prototypes = compute_prototypes(by_class);
  return f;
}

struct Cotangents {
  std::vector<Vector> d_support;
  std::vector<Vector> d_query;
  std::vector<Tensor3> d_query_cam;
  std::vector<Vector> d_prototypes;
};

inline Cotangents zero_cotangents(const EpisodeForward& f) {
  const auto d = f.prototypes.dim();
  Cotangents c;
  c.d_support.assign(f.support.size(), Vector::Zero(d));
  c.d_query.assign(f.query.size(), Vector::Zero(d));
  c.d_query_cam.resize(f.query.size());
  c.d_prototypes.assign(f.prototypes.size(), Vector::Zero(d));
  return c;
}

/// Mean prototypical loss over the queries; adds weight-scaled cotangents.
inline void proto_term(const Episode& ep, const EpisodeForward& f, double weight, EpisodeLosses& out,
                       Cotangents* cot) {
  const double inv_q = 1.0 / static_cast<double>(ep.query.size());
  std::size_t correct = 0;
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const auto dist = classify_query(f.query[q].embedding, f.prototypes);
    out.l_proto += proto_loss(dist, ep.query[q].label) * inv_q;
    const auto pred = dist.argmax();
    out.predictions.push_back(pred);
    correct += pred == ep.query[q].label;
    if (cot != nullptr && weight != 0.0) {
      const auto g = proto_loss_grad(f.query[q].embedding, f.prototypes, ep.query[q].label);
      cot->d_query[q] += weight * inv_q * g.d_query;
      for (std::size_t k = 0; k < g.d_prototypes.size(); ++k) cot->d_prototypes[k] += weight * inv_q * g.d_prototypes[k];
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

template <BackboneModel M>
void explanation_term(const Episode& ep, const EpisodeForward& f, const M& model, const ExplanationConfig& cfg,
                      double weight, EpisodeLosses& out, Cotangents* cot, std::span<double> grads) {
  std::size_t eligible = 0;
  for (const auto& item : ep.query) eligible += item.sample->has_mask();
  out.skipped = ep.query.size() - eligible;
  out.explained = eligible;
  if (eligible == 0) return;
  const double inv = 1.0 / static_cast<double>(eligible);
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const auto& item = ep.query[q];
    if (!item.sample->has_mask()) continue;
    const auto term =
        explanation_loss_for_query(model, f.query[q], item.sample->roi_mask, f.prototypes, item.label, cfg);
    out.l_exp += term.loss * inv;
    if (cot == nullptr || weight == 0.0) continue;
    auto c = explanation_backward(model, f.query[q], item.sample->roi_mask, term, cfg, weight * inv, grads);
    cot->d_query[q] += c.d_embedding;
    cot->d_prototypes[item.label] += c.d_prototype;
    cot->d_query_cam[q] = std::move(c.d_activations);
  }
}

template <BackboneModel M>
void backward_episode(const Episode& ep, const EpisodeForward& f, const M& model, Cotangents& cot,
                      std::span<double> grads) {
  std::vector<std::size_t> shots(f.prototypes.size(), 0);
  for (const auto& item : ep.support) ++shots[item.label];
  for (std::size_t s = 0; s < ep.support.size(); ++s) {
    const auto label = ep.support[s].label;
    cot.d_support[s] += cot.d_prototypes[label] / static_cast<double>(shots[label]);
    model.backward(f.support[s], cot.d_support[s], nullptr, grads);
  }
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const Tensor3* d_cam = cot.d_query_cam[q].size() > 0 ? &cot.d_query_cam[q] : nullptr;
    model.backward(f.query[q], cot.d_query[q], d_cam, grads);
  }
}

}  // namespace detail

/// Loss terms of one episode under explicit weights; when `grads` is non-null
/// the gradient of proto*L_proto + explanation*L_exp is added to it. The
/// explanation path runs only for a positive weight.
template <BackboneModel M>
EpisodeLosses weighted_episode_losses(const Episode& ep, const M& model, const LossWeights& weights,
                                      const ExplanationConfig& cfg, std::vector<double>* grads) {
  EpisodeLosses out;
  const auto f = detail::forward_episode(ep, model, ep.class_map.size(),
                                         grads != nullptr ? PassMode::train : PassMode::inference);
  auto cot = detail::zero_cotangents(f);
  auto* cot_ptr = grads != nullptr ? &cot : nullptr;
  std::span<double> g = grads != nullptr ? std::span<double>(*grads) : std::span<double>{};
  detail::proto_term(ep, f, weights.proto, out, cot_ptr);
  if (weights.explanation > 0.0) detail::explanation_term(ep, f, model, cfg, weights.explanation, out, cot_ptr, g);
  out.l_total = weights.proto * out.l_proto + weights.explanation * out.l_exp;
  if (grads != nullptr) detail::backward_episode(ep, f, model, cot, g);
  return out;
}

/// L_proto, L_exp and L_total for one episode of the guided objective.
template <BackboneModel M>
EpisodeLosses episode_losses(const Episode& ep, const M& model, const TrainConfig& config,
                             std::vector<double>* grads = nullptr) {
  return weighted_episode_losses(ep, model, LossWeights{1.0, config.alpha}, config.explanation, grads);
}

/// Prototypical loss only; shares no code with the explanation path.
template <BackboneModel M>
EpisodeLosses baseline_episode_losses(const Episode& ep, const M& model, std::vector<double>* grads = nullptr) {
  EpisodeLosses out;
  const auto f = detail::forward_episode(ep, model, ep.class_map.size(),
                                         grads != nullptr ? PassMode::train : PassMode::inference);
  auto cot = detail::zero_cotangents(f);
  detail::proto_term(ep, f, 1.0, out, grads != nullptr ? &cot : nullptr);
  out.l_total = out.l_proto;
  if (grads != nullptr) detail::backward_episode(ep, f, model, cot, std::span<double>(*grads));
  return out;
}

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) or SGD with momentum 0.9.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t size)
      : kind_(kind), lr_(lr), m_(size, 0.0), v_(kind == OptimizerKind::adam ? size : 0, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads) {
    ++t_;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = kMomentum * m_[i] + grads[i];
        params[i] -= lr_ * m_[i];
      }
      return;
    }
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grads[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grads[i] * grads[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  static constexpr double kMomentum = 0.9;

  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

struct EpisodeRecord {
  std::size_t epoch = 0;
  std::size_t episode = 0;
  double l_proto = 0.0;
  double l_exp = 0.0;
  double l_total = 0.0;
  double accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpisodeRecord> records;
  std::string checkpoint;
  KeyValues config_echo;
  double wall_clock_seconds = 0.0;
};

struct TrainResult {
  TrainReport report;
  ReferenceCnn model;
};

inline std::uint64_t init_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ULL + 0x5851F42DULL; }

/// Runs epochs * episodes_per_epoch optimizer steps. Episode i of the stream
/// is sample_episode(train, spec with seed = config.seed, i).
inline TrainResult train(const Dataset& data, const TrainConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  auto spec = config.episode_spec;
  spec.seed = config.seed;
  check_capacity(data, spec);

  ReferenceCnn model = reference_cnn(config.backbone, init_seed(config.seed));
  Optimizer opt(config.optimizer, config.learning_rate, model.parameters().size());
  TrainReport report;
  report.config_echo = config.to_key_values();
  std::vector<double> grads(model.parameters().size());

  std::uint64_t counter = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t e = 0; e < config.episodes_per_epoch; ++e, ++counter) {
      const auto ep = sample_episode(data, spec, counter);
      std::fill(grads.begin(), grads.end(), 0.0);
      const auto losses = config.objective == Objective::baseline ? baseline_episode_losses(ep, model, &grads)
                                                                  : episode_losses(ep, model, config, &grads);
      if (!std::isfinite(losses.l_proto) || !std::isfinite(losses.l_exp) || !std::isfinite(losses.l_total)) {
        std::ostringstream msg;
        msg << "non-finite loss at episode " << counter << " (epoch " << epoch << ", episode " << e
            << "): l_proto=" << losses.l_proto << " l_exp=" << losses.l_exp << " l_total=" << losses.l_total;
        throw TrainingAborted(msg.str());
      }
      opt.step(model.parameters().values(), grads);
      report.records.push_back({epoch, e, losses.l_proto, losses.l_exp, losses.l_total, losses.accuracy});
    }
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(report), std::move(model)};
}

inline std::string format_number(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline void write_report_csv(const std::string& path, const TrainReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,episode,l_proto,l_exp,l_total,acc\n";
  for (const auto& r : report.records) {
    out << r.epoch << ',' << r.episode << ',' << format_number(r.l_proto) << ',' << format_number(r.l_exp) << ','
        << format_number(r.l_total) << ',' << format_number(r.accuracy) << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace protoxplain
