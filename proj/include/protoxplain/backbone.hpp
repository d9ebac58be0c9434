#pragma once

// Feature-extractor contract and the reference convolutional network.
//
// A backbone maps an image to a d-dimensional embedding and exposes the
// activations A of one designated layer (the Grad-CAM target). Besides the
// usual reverse pass it provides the two primitives that Grad-CAM training
// needs:
//
//   activation_grad(out, dS/de)          -> dS/dA
//   activation_grad_vjp(out, ag, v, g)   -> d<v, dS/dA>/d(dS/de), and the
//                                           parameter gradient of <v, dS/dA>
//
// The second one is what lets a loss built on Grad-CAM channel weights train
// the layers between A and the embedding.

#include <algorithm>
#include <array>
#include <bit>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protoxplain/keyvalue.hpp"
#include "protoxplain/tensor.hpp"

namespace protoxplain {

struct BackboneConfig {
  std::size_t input_channels = 3;
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t embedding_dim = 64;
  /// Number of conv blocks; every block but the last halves the resolution.
  std::size_t blocks = 4;
  /// "block<i>" (1-based). Empty selects the deepest block.
  std::string cam_layer;
  std::optional<std::string> pretrained_source;

  std::size_t downsampling() const { return std::size_t{1} << (blocks - 1); }

  std::vector<std::size_t> block_channels() const {
    std::vector<std::size_t> out(blocks);
    for (std::size_t i = 0; i < blocks; ++i) {
      out[i] = std::max<std::size_t>(1, embedding_dim >> (blocks - 1 - i));
    }
    return out;
  }

  /// 0-based index of the Grad-CAM block.
  std::size_t cam_block() const {
    if (cam_layer.empty()) return blocks - 1;
    if (cam_layer.rfind("block", 0) != 0) throw ConfigError("cam_layer must look like block<i>: " + cam_layer);
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(cam_layer.substr(5), &used);
      if (used + 5 != cam_layer.size()) throw ConfigError("");
    } catch (const std::exception&) {
      throw ConfigError("cam_layer must look like block<i>: " + cam_layer);
    }
    if (idx < 1 || idx > blocks) {
      throw ConfigError("cam_layer " + cam_layer + " out of range 1.." + std::to_string(blocks));
    }
    return idx - 1;
  }

  std::string cam_layer_name() const { return "block" + std::to_string(cam_block() + 1); }

  void validate() const {
    if (input_channels == 0) throw ConfigError("input_channels must be positive");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (blocks == 0 || blocks > 8) throw ConfigError("blocks must be in 1..8");
    if (input_height == 0 || input_width == 0) throw ConfigError("input_size must be positive");
    if (input_height % downsampling() != 0 || input_width % downsampling() != 0) {
      throw ConfigError("input_size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                        " not divisible by downsampling factor " + std::to_string(downsampling()));
    }
    (void)cam_block();
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set_number("input_channels", input_channels);
    kv.set_number("input_height", input_height);
    kv.set_number("input_width", input_width);
    kv.set_number("embedding_dim", embedding_dim);
    kv.set_number("blocks", blocks);
    kv.set("cam_layer", cam_layer_name());
    return kv;
  }

  static BackboneConfig from_key_values(const KeyValues& kv) {
    BackboneConfig c;
    c.input_channels = static_cast<std::size_t>(kv.integer("input_channels", 3));
    c.input_height = static_cast<std::size_t>(kv.integer("input_height", 64));
    c.input_width = static_cast<std::size_t>(kv.integer("input_width", 64));
    c.embedding_dim = static_cast<std::size_t>(kv.integer("embedding_dim", 64));
    c.blocks = static_cast<std::size_t>(kv.integer("blocks", 4));
    c.cam_layer = kv.get_or("cam_layer", "");
    c.validate();
    return c;
  }
};

struct ParamBlock {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

/// Flat parameter vector with named, shaped views.
class ParameterSet {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    blocks_.push_back({std::move(name), std::move(shape), values_.size(), count});
    values_.resize(values_.size() + count, 0.0);
    return blocks_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  std::span<double> view(std::size_t block) {
    return {values_.data() + blocks_[block].offset, blocks_[block].count};
  }
  std::span<const double> view(std::size_t block) const {
    return {values_.data() + blocks_[block].offset, blocks_[block].count};
  }

  const ParamBlock* find(const std::string& name) const {
    for (const auto& b : blocks_) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }

 private:
  std::vector<double> values_;
  std::vector<ParamBlock> blocks_;
};

namespace detail {

// 3x3 kernel, zero padding 1, stride 1. Rows are (c, ky, kx), columns are pixels.
inline RowMatrix im2col(const Tensor3& x) {
  const auto h = static_cast<long>(x.height);
  const auto w = static_cast<long>(x.width);
  RowMatrix col(static_cast<Eigen::Index>(x.channels * 9), h * w);
  for (std::size_t c = 0; c < x.channels; ++c) {
    const double* src = x.data.data() + c * x.plane();
    for (long ky = 0; ky < 3; ++ky) {
      for (long kx = 0; kx < 3; ++kx) {
        double* dst = col.row(static_cast<Eigen::Index>(c * 9 + ky * 3 + kx)).data();
        for (long y = 0; y < h; ++y) {
          const long sy = y + ky - 1;
          double* row = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          for (long xx = 0; xx < w; ++xx) {
            const long sx = xx + kx - 1;
            row[xx] = (sx < 0 || sx >= w) ? 0.0 : src[sy * w + sx];
          }
        }
      }
    }
  }
  return col;
}

inline Tensor3 col2im(const RowMatrix& col, std::size_t channels, std::size_t height, std::size_t width) {
  Tensor3 x(channels, height, width);
  const auto h = static_cast<long>(height);
  const auto w = static_cast<long>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    double* dst = x.data.data() + c * x.plane();
    for (long ky = 0; ky < 3; ++ky) {
      for (long kx = 0; kx < 3; ++kx) {
        const double* src = col.row(static_cast<Eigen::Index>(c * 9 + ky * 3 + kx)).data();
        for (long y = 0; y < h; ++y) {
          const long sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (long xx = 0; xx < w; ++xx) {
            const long sx = xx + kx - 1;
            if (sx >= 0 && sx < w) dst[sy * w + sx] += src[y * w + xx];
          }
        }
      }
    }
  }
  return x;
}

inline Tensor3 avg_pool2(const Tensor3& a) {
  Tensor3 y(a.channels, a.height / 2, a.width / 2);
  for (std::size_t c = 0; c < a.channels; ++c) {
    for (std::size_t i = 0; i < y.height; ++i) {
      for (std::size_t j = 0; j < y.width; ++j) {
        y.at(c, i, j) = 0.25 * (a.at(c, 2 * i, 2 * j) + a.at(c, 2 * i, 2 * j + 1) + a.at(c, 2 * i + 1, 2 * j) +
                                a.at(c, 2 * i + 1, 2 * j + 1));
      }
    }
  }
  return y;
}

inline Tensor3 avg_pool2_adjoint(const Tensor3& g, std::size_t height, std::size_t width) {
  Tensor3 a(g.channels, height, width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.height; ++i) {
      for (std::size_t j = 0; j < g.width; ++j) {
        const double v = 0.25 * g.at(c, i, j);
        a.at(c, 2 * i, 2 * j) = v;
        a.at(c, 2 * i, 2 * j + 1) = v;
        a.at(c, 2 * i + 1, 2 * j) = v;
        a.at(c, 2 * i + 1, 2 * j + 1) = v;
      }
    }
  }
  return a;
}

}  // namespace detail

/// Per-block values retained by a forward pass.
struct BlockCache {
  RowMatrix col;                      // im2col of the block input; empty in inference mode
  std::vector<unsigned char> active;  // ReLU mask of the conv output
  std::size_t height = 0;             // conv resolution (before pooling)
  std::size_t width = 0;
};

/// Embedding, Grad-CAM activations, and what the backbone needs to
/// differentiate through them.
struct EmbeddingOutput {
  Vector embedding;
  Tensor3 cam_activations;
  std::vector<BlockCache> caches;
  bool trainable = false;
};

/// dS/dA for one scalar S, plus the head-side intermediates it was built from.
struct ActivationGrad {
  Tensor3 grad;
  Vector d_embedding;
  std::vector<Tensor3> head_pre_grads;  // dS/dz for blocks after the cam block
};

enum class PassMode { train, inference };

template <class M>
concept BackboneModel = requires(const M& m, const Tensor3& image, const EmbeddingOutput& out, const Vector& v,
                                 const ActivationGrad& ag, const Tensor3& t, std::span<double> grads) {
  { m.config() } -> std::convertible_to<const BackboneConfig&>;
  { m.parameters() } -> std::convertible_to<const ParameterSet&>;
  { m.forward(image, PassMode::train) } -> std::same_as<EmbeddingOutput>;
  { m.activation_grad(out, v) } -> std::same_as<ActivationGrad>;
  { m.activation_grad_vjp(out, ag, t, grads) } -> std::same_as<Vector>;
  { m.backward(out, v, &t, grads) } -> std::same_as<void>;
};

/// conv3x3 -> ReLU -> 2x2 average pool per block; the last block skips the pool
/// and is global-average-pooled into the embedding.
class ReferenceCnn {
 public:
  explicit ReferenceCnn(BackboneConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    cam_block_ = config_.cam_block();
    const auto channels = config_.block_channels();
    std::size_t in = config_.input_channels;
    for (std::size_t i = 0; i < config_.blocks; ++i) {
      const std::string prefix = "block" + std::to_string(i + 1);
      weight_ids_.push_back(params_.add(prefix + ".weight", {channels[i], in, 3, 3}));
      bias_ids_.push_back(params_.add(prefix + ".bias", {channels[i]}));
      in_channels_.push_back(in);
      out_channels_.push_back(channels[i]);
      in = channels[i];
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x70786e6eU};
    std::mt19937_64 rng(seq);
    for (std::size_t i = 0; i < config_.blocks; ++i) {
      std::normal_distribution<double> he(0.0, std::sqrt(2.0 / static_cast<double>(in_channels_[i] * 9)));
      for (double& v : params_.view(weight_ids_[i])) v = he(rng);
    }
  }

  const BackboneConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t cam_block() const { return cam_block_; }

  std::array<std::size_t, 3> cam_shape() const {
    std::size_t h = config_.input_height;
    std::size_t w = config_.input_width;
    for (std::size_t i = 0; i < cam_block_; ++i) {
      h /= 2;
      w /= 2;
    }
    if (cam_block_ + 1 < config_.blocks) {
      h /= 2;
      w /= 2;
    }
    return {out_channels_[cam_block_], h, w};
  }

  EmbeddingOutput forward(const Tensor3& image, PassMode mode = PassMode::train) const {
    if (image.channels != config_.input_channels || image.height != config_.input_height ||
        image.width != config_.input_width) {
      throw ContractError("backbone input shape mismatch: expected " +
                          shape_string(config_.input_channels, config_.input_height, config_.input_width) +
                          ", got " + image.shape());
    }
    EmbeddingOutput out;
    out.trainable = mode == PassMode::train;
    out.caches.resize(config_.blocks);
    Tensor3 x = image;
    for (std::size_t i = 0; i < config_.blocks; ++i) {
      auto& cache = out.caches[i];
      cache.height = x.height;
      cache.width = x.width;
      RowMatrix col = detail::im2col(x);
      Tensor3 a(out_channels_[i], x.height, x.width);
      a.matrix().noalias() = weight(i) * col;
      a.matrix().colwise() += bias(i);
      cache.active.resize(a.size());
      for (std::size_t k = 0; k < a.size(); ++k) {
        cache.active[k] = a.data[k] > 0.0;
        if (!cache.active[k] && !std::isnan(a.data[k])) a.data[k] = 0.0;  // NaN propagates
      }
      if (out.trainable) cache.col = std::move(col);
      x = pooled(i) ? detail::avg_pool2(a) : std::move(a);
      if (i == cam_block_) out.cam_activations = x;
    }
    out.embedding = x.matrix().rowwise().mean();
    return out;
  }

  std::vector<EmbeddingOutput> forward(std::span<const Tensor3> images, PassMode mode = PassMode::train) const {
    std::vector<EmbeddingOutput> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(forward(img, mode));
    return out;
  }

  ActivationGrad activation_grad(const EmbeddingOutput& out, const Vector& d_embedding) const {
    ActivationGrad ag;
    ag.d_embedding = d_embedding;
    Tensor3 g = spread_embedding_grad(out, d_embedding);
    for (std::size_t i = config_.blocks - 1; i > cam_block_; --i) {
      Tensor3 dz = pre_activation_grad(out, i, g);
      g = input_grad(out, i, dz);
      ag.head_pre_grads.insert(ag.head_pre_grads.begin(), std::move(dz));
    }
    ag.grad = std::move(g);
    return ag;
  }

  /// Pulls a cotangent on dS/dA back to dS/de (returned) and adds the
  /// parameter gradient of <cotangent, dS/dA> into `grads`.
  ///
  /// ReLU and average pooling are piecewise linear, so dS/dA has no
  /// derivative with respect to A itself; only the head weights and dS/de
  /// carry the second-order signal.
  Vector activation_grad_vjp(const EmbeddingOutput& out, const ActivationGrad& ag, const Tensor3& cotangent,
                             std::span<double> grads) const {
    check_grads(grads);
    Tensor3 t = cotangent;
    for (std::size_t i = cam_block_ + 1; i < config_.blocks; ++i) {
      const auto& cache = out.caches[i];
      const RowMatrix col = detail::im2col(t);
      const Tensor3& dz = ag.head_pre_grads[i - cam_block_ - 1];
      weight_grad(grads, i).noalias() += dz.matrix() * col.transpose();
      Tensor3 tz(out_channels_[i], cache.height, cache.width);
      tz.matrix().noalias() = weight(i) * col;
      for (std::size_t k = 0; k < tz.size(); ++k) {
        if (!cache.active[k]) tz.data[k] = 0.0;
      }
      t = pooled(i) ? detail::avg_pool2(tz) : std::move(tz);
    }
    return t.matrix().rowwise().mean();
  }

  /// Reverse pass for dL/de plus an optional direct dL/dA term; parameter
  /// gradients are accumulated into `grads`.
  void backward(const EmbeddingOutput& out, const Vector& d_embedding, const Tensor3* d_cam,
                std::span<double> grads) const {
    if (!out.trainable) throw ContractError("backward requires a forward pass in train mode");
    check_grads(grads);
    Tensor3 g = spread_embedding_grad(out, d_embedding);
    for (std::size_t i = config_.blocks; i-- > 0;) {
      if (i == cam_block_ && d_cam != nullptr) {
        if (!d_cam->same_shape(g)) throw ContractError("cam gradient shape mismatch: " + d_cam->shape());
        for (std::size_t k = 0; k < g.size(); ++k) g.data[k] += d_cam->data[k];
      }
      Tensor3 dz = pre_activation_grad(out, i, g);
      weight_grad(grads, i).noalias() += dz.matrix() * out.caches[i].col.transpose();
      auto db = bias_grad(grads, i);
      db += dz.matrix().rowwise().sum();
      if (i > 0) g = input_grad(out, i, dz);
    }
  }

 private:
  bool pooled(std::size_t i) const { return i + 1 < config_.blocks; }

  Eigen::Map<const RowMatrix> weight(std::size_t i) const {
    return {params_.view(weight_ids_[i]).data(), static_cast<Eigen::Index>(out_channels_[i]),
            static_cast<Eigen::Index>(in_channels_[i] * 9)};
  }
  Eigen::Map<const Vector> bias(std::size_t i) const {
    return {params_.view(bias_ids_[i]).data(), static_cast<Eigen::Index>(out_channels_[i])};
  }
  Eigen::Map<RowMatrix> weight_grad(std::span<double> grads, std::size_t i) const {
    return {grads.data() + params_.blocks()[weight_ids_[i]].offset, static_cast<Eigen::Index>(out_channels_[i]),
            static_cast<Eigen::Index>(in_channels_[i] * 9)};
  }
  Eigen::Map<Vector> bias_grad(std::span<double> grads, std::size_t i) const {
    return {grads.data() + params_.blocks()[bias_ids_[i]].offset, static_cast<Eigen::Index>(out_channels_[i])};
  }

  void check_grads(std::span<double> grads) const {
    if (grads.size() != params_.size()) {
      throw ContractError("gradient buffer has " + std::to_string(grads.size()) + " entries, expected " +
                          std::to_string(params_.size()));
    }
  }

  Tensor3 spread_embedding_grad(const EmbeddingOutput& out, const Vector& d_embedding) const {
    const auto& last = out.caches.back();
    if (static_cast<std::size_t>(d_embedding.size()) != out_channels_.back()) {
      throw ContractError("embedding gradient has length " + std::to_string(d_embedding.size()) + ", expected " +
                          std::to_string(out_channels_.back()));
    }
    Tensor3 g(out_channels_.back(), last.height, last.width);
    const double inv = 1.0 / static_cast<double>(g.plane());
    g.matrix().colwise() = d_embedding * inv;
    return g;
  }

  Tensor3 pre_activation_grad(const EmbeddingOutput& out, std::size_t i, const Tensor3& g) const {
    const auto& cache = out.caches[i];
    Tensor3 dz = pooled(i) ? detail::avg_pool2_adjoint(g, cache.height, cache.width) : g;
    for (std::size_t k = 0; k < dz.size(); ++k) {
      if (!cache.active[k]) dz.data[k] = 0.0;
    }
    return dz;
  }

  Tensor3 input_grad(const EmbeddingOutput& out, std::size_t i, const Tensor3& dz) const {
    const RowMatrix dcol = weight(i).transpose() * dz.matrix();
    return detail::col2im(dcol, in_channels_[i], out.caches[i].height, out.caches[i].width);
  }

  BackboneConfig config_;
  std::size_t cam_block_ = 0;
  ParameterSet params_;
  std::vector<std::size_t> weight_ids_;
  std::vector<std::size_t> bias_ids_;
  std::vector<std::size_t> in_channels_;
  std::vector<std::size_t> out_channels_;
};

static_assert(BackboneModel<ReferenceCnn>);

// Checkpoint layout (little-endian):
//   "PXW1" | u32 header bytes | header (key=value text) | u32 block count |
//   per block: u16 name bytes, name, u32 rank, u32 dims[rank], f64 values[prod(dims)]
inline constexpr char kCheckpointMagic[4] = {'P', 'X', 'W', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint " + path);
  return v;
}

}  // namespace detail

/// `metadata` keys are stored next to the architecture echo in the header.
inline void save_checkpoint(const std::string& path, const ReferenceCnn& model, const KeyValues& metadata = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  KeyValues header = model.config().to_key_values();
  for (const auto& [k, v] : metadata.entries()) header.set("meta." + k, v);
  const std::string text = header.to_string();
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = model.parameters();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.blocks().size()));
  for (std::size_t b = 0; b < params.blocks().size(); ++b) {
    const auto& block = params.blocks()[b];
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(block.name.size()));
    os.write(block.name.data(), static_cast<std::streamsize>(block.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(block.shape.size()));
    for (auto d : block.shape) detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : params.view(b)) detail::put<double>(os, v);
  }
  if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

struct Checkpoint {
  ReferenceCnn model;
  KeyValues metadata;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(path + ": not a PXW1 checkpoint");
  }
  const auto header_len = detail::take<std::uint32_t>(is, path);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), header_len)) throw CheckpointError("truncated checkpoint " + path);
  const KeyValues header = KeyValues::parse(text, path);
  KeyValues metadata;
  for (const auto& [k, v] : header.entries()) {
    if (k.rfind("meta.", 0) == 0) metadata.set(k.substr(5), v);
  }
  ReferenceCnn model(BackboneConfig::from_key_values(header));
  auto& params = model.parameters();
  const auto count = detail::take<std::uint32_t>(is, path);
  if (count != params.blocks().size()) throw CheckpointError(path + ": parameter block count mismatch");
  for (std::uint32_t b = 0; b < count; ++b) {
    const auto name_len = detail::take<std::uint16_t>(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError("truncated checkpoint " + path);
    const auto& block = params.blocks()[b];
    if (name != block.name) throw CheckpointError(path + ": unexpected parameter block " + name);
    const auto rank = detail::take<std::uint32_t>(is, path);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = detail::take<std::uint32_t>(is, path);
    if (shape != block.shape) throw CheckpointError(path + ": shape mismatch for " + name);
    for (double& v : params.view(b)) v = detail::take<double>(is, path);
  }
  return {std::move(model), std::move(metadata)};
}

/// Reference CNN for `config`, seeded or loaded from config.pretrained_source.
inline ReferenceCnn reference_cnn(const BackboneConfig& config, std::uint64_t seed) {
  if (config.pretrained_source) {
    auto ck = load_checkpoint(*config.pretrained_source);
    if (ck.model.config().to_key_values().to_string() != config.to_key_values().to_string()) {
      throw ConfigError("pretrained weights in " + *config.pretrained_source + " do not match the configuration");
    }
    return std::move(ck.model);
  }
  return ReferenceCnn(config, seed);
}

}  // namespace protoxplain
