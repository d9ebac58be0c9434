#pragma once

// Grad-CAM heatmaps for a metric head and the soft-Dice explanation loss.
//
// Two scalars can sit behind the heatmap for class k:
//   prototype_logit  s_k = 2 c_k.f(x) - ||c_k||^2   (default)
//   neg_sq_distance  s_k = -||f(x) - c_k||^2
// Both give the same class probabilities since they differ by ||f(x)||^2,
// which is shared by all classes. Their Grad-CAM weights differ: the first is
// driven by c_k, the second by c_k - f(x).
//
// The explanation loss is differentiated through the Grad-CAM channel weights
// as well as through the activations (`SecondOrder::full`), so it reaches every
// backbone parameter and both the query and prototype embeddings.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "protoxplain/backbone.hpp"
#include "protoxplain/protohead.hpp"
#include "protoxplain/tensor.hpp"

namespace protoxplain {

enum class TargetKind { true_label, predicted_label };
enum class SecondOrder { full, stop_grad_weights };
enum class CamTarget { prototype_logit, neg_sq_distance };

inline std::string to_string(TargetKind k) { return k == TargetKind::true_label ? "true_label" : "predicted_label"; }
inline std::string to_string(SecondOrder s) { return s == SecondOrder::full ? "full" : "stop_grad_weights"; }
inline SecondOrder parse_second_order(const std::string& s) {
  if (s == "full") return SecondOrder::full;
  if (s == "stop_grad_weights") return SecondOrder::stop_grad_weights;
  throw ConfigError("second_order must be full or stop_grad_weights, got " + s);
}
inline std::string to_string(CamTarget t) {
  return t == CamTarget::prototype_logit ? "prototype_logit" : "neg_sq_distance";
}
inline CamTarget parse_cam_target(const std::string& s) {
  if (s == "prototype_logit") return CamTarget::prototype_logit;
  if (s == "neg_sq_distance") return CamTarget::neg_sq_distance;
  throw ConfigError("cam_target must be prototype_logit or neg_sq_distance, got " + s);
}

struct Heatmap {
  Grid values;  // [0,1], image resolution
  std::string source_layer;
  std::size_t target_class = 0;
  TargetKind target_kind = TargetKind::predicted_label;
};

struct ExplanationConfig {
  double epsilon = 1e-6;
  SecondOrder second_order = SecondOrder::full;
  double binarize_threshold = 0.5;
  CamTarget target = CamTarget::prototype_logit;

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("explanation epsilon must be positive");
    if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0)) {
      throw ConfigError("binarize_threshold must be in (0,1)");
    }
  }
};

namespace detail {
inline void check_target(const Vector& query, const PrototypeSet& protos, std::size_t k) {
  if (k >= protos.size()) throw ContractError("cam_target_score: class out of range");
  if (query.size() != static_cast<Eigen::Index>(protos.dim())) throw ContractError("cam_target_score: dims differ");
}
}  // namespace detail

inline double cam_target_score(const Vector& query, const PrototypeSet& protos, std::size_t k,
                               CamTarget target = CamTarget::neg_sq_distance) {
  detail::check_target(query, protos, k);
  const auto& c = protos.prototypes[k];
  if (target == CamTarget::prototype_logit) return 2.0 * c.dot(query) - c.squaredNorm();
  return -(query - c).squaredNorm();
}

/// d s_k / d query.
inline Vector cam_target_score_grad(const Vector& query, const PrototypeSet& protos, std::size_t k,
                                    CamTarget target = CamTarget::neg_sq_distance) {
  detail::check_target(query, protos, k);
  if (target == CamTarget::prototype_logit) return 2.0 * protos.prototypes[k];
  return -2.0 * (query - protos.prototypes[k]);
}

/// Spatial mean of each gradient channel.
inline Vector gradcam_channel_weights(const Tensor3& grads) { return grads.matrix().rowwise().mean(); }

/// Channel-weighted activation sum before rectification.
inline Grid gradcam_weighted_sum(const Tensor3& activations, const Vector& weights) {
  Grid out(activations.height, activations.width);
  Eigen::Map<Eigen::RowVectorXd>(out.data(), static_cast<Eigen::Index>(activations.plane())) =
      weights.transpose() * activations.matrix();
  return out;
}

inline Grid gradcam_raw(const Tensor3& activations, const Tensor3& grads) {
  if (!activations.same_shape(grads)) {
    throw ContractError("gradcam_raw: activations " + activations.shape() + " vs grads " + grads.shape());
  }
  return gradcam_weighted_sum(activations, gradcam_channel_weights(grads)).max(0.0);
}

namespace detail {

// Half-pixel bilinear resampling along one axis with edge clamping; rows are
// output samples.
inline RowMatrix bilinear_axis(std::size_t out_size, std::size_t in_size) {
  RowMatrix r = RowMatrix::Zero(static_cast<Eigen::Index>(out_size), static_cast<Eigen::Index>(in_size));
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  for (std::size_t i = 0; i < out_size; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::size_t>(std::floor(src));
    double frac = src - static_cast<double>(i0);
    if (i0 >= in_size - 1) {
      i0 = in_size - 1;
      frac = 0.0;
    }
    const auto i1 = std::min(i0 + 1, in_size - 1);
    r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i0)) += 1.0 - frac;
    r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i1)) += frac;
  }
  return r;
}

}  // namespace detail

inline Grid bilinear_resize(const Grid& in, std::size_t out_h, std::size_t out_w) {
  const RowMatrix ry = detail::bilinear_axis(out_h, static_cast<std::size_t>(in.rows()));
  const RowMatrix rx = detail::bilinear_axis(out_w, static_cast<std::size_t>(in.cols()));
  return (ry * in.matrix() * rx.transpose()).array();
}

inline Grid bilinear_resize_adjoint(const Grid& g, std::size_t in_h, std::size_t in_w) {
  const RowMatrix ry = detail::bilinear_axis(static_cast<std::size_t>(g.rows()), in_h);
  const RowMatrix rx = detail::bilinear_axis(static_cast<std::size_t>(g.cols()), in_w);
  return (ry.transpose() * g.matrix() * rx).array();
}

/// Bilinear upsampling followed by division by the global maximum.
inline Heatmap normalize_upsample(const Grid& raw, std::size_t out_h, std::size_t out_w) {
  if (raw.rows() < 1 || raw.cols() < 1) throw ContractError("normalize_upsample: empty map");
  Heatmap h;
  h.values = bilinear_resize(raw, out_h, out_w);
  const double peak = h.values.maxCoeff();
  if (peak > 0.0) h.values /= peak;
  return h;
}

inline double dice_explanation_loss(const Grid& heat, const Grid& mask, double epsilon) {
  if (heat.rows() != mask.rows() || heat.cols() != mask.cols()) {
    throw ContractError("dice_explanation_loss: heatmap " + std::to_string(heat.rows()) + "x" +
                        std::to_string(heat.cols()) + " vs mask " + std::to_string(mask.rows()) + "x" +
                        std::to_string(mask.cols()));
  }
  const double inter = (heat * mask).sum();
  return 1.0 - (2.0 * inter + epsilon) / (heat.sum() + mask.sum() + epsilon);
}

inline double dice_explanation_loss(const Heatmap& heat, const Grid& mask, double epsilon) {
  return dice_explanation_loss(heat.values, mask, epsilon);
}

/// d loss / d heat.
inline Grid dice_explanation_loss_grad(const Grid& heat, const Grid& mask, double epsilon) {
  const double num = 2.0 * (heat * mask).sum() + epsilon;
  const double den = heat.sum() + mask.sum() + epsilon;
  return -(2.0 * mask * den - num) / (den * den);
}

/// Hard Dice between a heatmap binarized at `threshold` and a mask; used for
/// reporting only.
inline double alignment_dice(const Grid& heat, const Grid& mask, double threshold) {
  const Grid bin = (heat >= threshold).cast<double>();
  const double den = bin.sum() + mask.sum();
  if (den == 0.0) return 1.0;
  return 2.0 * (bin * mask).sum() / den;
}

/// Forward Grad-CAM computation with the values its reverse pass needs.
struct CamTrace {
  std::size_t target = 0;
  CamTarget score = CamTarget::prototype_logit;
  ActivationGrad activation_grad;
  Vector channel_weights;
  Grid weighted_sum;
  Grid upsampled;
  double peak = 0.0;
  Eigen::Index peak_row = 0;
  Eigen::Index peak_col = 0;
  Heatmap heatmap;
};

template <BackboneModel M>
CamTrace trace_gradcam(const M& model, const EmbeddingOutput& out, const PrototypeSet& protos, std::size_t target,
                       TargetKind kind, CamTarget score = CamTarget::prototype_logit) {
  CamTrace t;
  t.target = target;
  t.score = score;
  t.activation_grad = model.activation_grad(out, cam_target_score_grad(out.embedding, protos, target, score));
  t.channel_weights = gradcam_channel_weights(t.activation_grad.grad);
  t.weighted_sum = gradcam_weighted_sum(out.cam_activations, t.channel_weights);
  const auto& cfg = model.config();
  t.upsampled = bilinear_resize(t.weighted_sum.max(0.0), cfg.input_height, cfg.input_width);
  t.peak = t.upsampled.maxCoeff(&t.peak_row, &t.peak_col);
  t.heatmap.values = t.peak > 0.0 ? Grid(t.upsampled / t.peak) : Grid(t.upsampled);
  t.heatmap.source_layer = cfg.cam_layer_name();
  t.heatmap.target_class = target;
  t.heatmap.target_kind = kind;
  return t;
}

template <BackboneModel M>
Heatmap gradcam_heatmap(const M& model, const EmbeddingOutput& out, const PrototypeSet& protos, std::size_t target,
                        TargetKind kind = TargetKind::predicted_label,
                        CamTarget score = CamTarget::prototype_logit) {
  return trace_gradcam(model, out, protos, target, kind, score).heatmap;
}

struct ExplanationTerm {
  double loss = 0.0;
  bool skipped = false;
  CamTrace trace;
};

/// Explanation loss for one query against its true class. Empty masks are
/// skipped and contribute 0.
template <BackboneModel M>
ExplanationTerm explanation_loss_for_query(const M& model, const EmbeddingOutput& out, const Grid& mask,
                                           const PrototypeSet& protos, std::size_t true_label,
                                           const ExplanationConfig& config) {
  ExplanationTerm term;
  if (!(mask.sum() > 0.0)) {
    term.skipped = true;
    return term;
  }
  term.trace = trace_gradcam(model, out, protos, true_label, TargetKind::true_label, config.target);
  term.loss = dice_explanation_loss(term.trace.heatmap.values, mask, config.epsilon);
  return term;
}

struct ExplanationCotangent {
  Tensor3 d_activations;
  Vector d_embedding;
  Vector d_prototype;  // for the target class only
};

/// Reverse pass of `scale * term.loss`. Head parameter gradients reached
/// through the channel weights are added to `grads`; the returned cotangents
/// still have to be pushed through the backbone and prototype means.
template <BackboneModel M>
ExplanationCotangent explanation_backward(const M& model, const EmbeddingOutput& out, const Grid& mask,
                                          const ExplanationTerm& term, const ExplanationConfig& config, double scale,
                                          std::span<double> grads) {
  const auto& tr = term.trace;
  const auto& act = out.cam_activations;
  const auto d = out.embedding.size();
  ExplanationCotangent cot{Tensor3(act.channels, act.height, act.width), Vector::Zero(d), Vector::Zero(d)};
  if (term.skipped || tr.peak <= 0.0) return cot;

  const Grid d_heat = scale * dice_explanation_loss_grad(tr.heatmap.values, mask, config.epsilon);
  // heat = up / max(up)
  Grid d_up = d_heat / tr.peak;
  d_up(tr.peak_row, tr.peak_col) -= (d_heat * tr.upsampled).sum() / (tr.peak * tr.peak);
  Grid d_sum = bilinear_resize_adjoint(d_up, act.height, act.width);
  d_sum = (tr.weighted_sum > 0.0).select(d_sum, 0.0);

  const Eigen::Map<const Eigen::RowVectorXd> d_sum_flat(d_sum.data(), static_cast<Eigen::Index>(act.plane()));
  cot.d_activations.matrix().noalias() = tr.channel_weights * d_sum_flat;
  if (config.second_order == SecondOrder::stop_grad_weights) return cot;

  // weights_c = mean_p dS/dA[c, p]
  const Vector d_weights = act.matrix() * d_sum_flat.transpose();
  Tensor3 d_grad(act.channels, act.height, act.width);
  d_grad.matrix().colwise() = d_weights / static_cast<double>(act.plane());
  const Vector d_score_grad = model.activation_grad_vjp(out, tr.activation_grad, d_grad, grads);
  // dS/de is 2 c_k, or -2 (e - c_k)
  cot.d_prototype = 2.0 * d_score_grad;
  if (tr.score == CamTarget::neg_sq_distance) cot.d_embedding = -2.0 * d_score_grad;
  return cot;
}

}  // namespace protoxplain
