#pragma once

// Prototypes, distance softmax and the prototypical loss.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "protoxplain/tensor.hpp"

namespace protoxplain {

inline constexpr double kProbabilityFloor = 1e-12;

struct PrototypeSet {
  std::vector<Vector> prototypes;  // indexed by episode-local class

  std::size_t size() const { return prototypes.size(); }
  std::size_t dim() const { return prototypes.empty() ? 0 : static_cast<std::size_t>(prototypes.front().size()); }
};

struct ClassDistribution {
  std::vector<double> probs;

  /// Ties go to the lowest class index.
  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
};

inline PrototypeSet compute_prototypes(const std::vector<std::vector<Vector>>& support_by_class) {
  PrototypeSet out;
  if (support_by_class.empty()) throw ContractError("compute_prototypes: no classes");
  const auto d = support_by_class.front().empty() ? 0 : support_by_class.front().front().size();
  for (std::size_t k = 0; k < support_by_class.size(); ++k) {
    const auto& members = support_by_class[k];
    if (members.empty()) throw ContractError("compute_prototypes: class " + std::to_string(k) + " has no support");
    Vector sum = Vector::Zero(d);
    for (const auto& v : members) {
      if (v.size() != d) throw ContractError("compute_prototypes: inconsistent embedding dimension");
      sum += v;
    }
    out.prototypes.push_back(sum / static_cast<double>(members.size()));
  }
  return out;
}

inline std::vector<double> squared_distances(const Vector& query, const PrototypeSet& protos) {
  if (static_cast<std::size_t>(query.size()) != protos.dim()) {
    throw ContractError("query dimension " + std::to_string(query.size()) + " != prototype dimension " +
                        std::to_string(protos.dim()));
  }
  std::vector<double> d(protos.size());
  for (std::size_t k = 0; k < protos.size(); ++k) d[k] = (query - protos.prototypes[k]).squaredNorm();
  return d;
}

/// softmax_k(-||q - c_k||^2 / temperature), max-subtracted.
inline ClassDistribution classify_query(const Vector& query, const PrototypeSet& protos, double temperature = 1.0) {
  const auto d = squared_distances(query, protos);
  std::vector<double> logits(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) logits[k] = -d[k] / temperature;
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  ClassDistribution out;
  out.probs.resize(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) z += (out.probs[k] = std::exp(logits[k] - top));
  for (auto& p : out.probs) p /= z;
  return out;
}

inline double proto_loss(const ClassDistribution& dist, std::size_t true_label) {
  if (true_label >= dist.probs.size()) throw ContractError("proto_loss: label out of range");
  return -std::log(std::max(dist.probs[true_label], kProbabilityFloor));
}

/// Gradient of proto_loss with respect to the query embedding and each prototype.
struct ProtoLossGrad {
  Vector d_query;
  std::vector<Vector> d_prototypes;
};

inline ProtoLossGrad proto_loss_grad(const Vector& query, const PrototypeSet& protos, std::size_t true_label,
                                     double temperature = 1.0) {
  const auto dist = classify_query(query, protos, temperature);
  ProtoLossGrad g{Vector::Zero(query.size()), std::vector<Vector>(protos.size(), Vector::Zero(query.size()))};
  // Inside the clamp the loss is constant.
  if (dist.probs[true_label] < kProbabilityFloor) return g;
  for (std::size_t k = 0; k < protos.size(); ++k) {
    const double dlogit = dist.probs[k] - (k == true_label ? 1.0 : 0.0);
    // logit_k = -||q - c_k||^2 / T
    const Vector diff = (query - protos.prototypes[k]) * (2.0 / temperature);
    g.d_query -= dlogit * diff;
    g.d_prototypes[k] += dlogit * diff;
  }
  return g;
}

}  // namespace protoxplain
