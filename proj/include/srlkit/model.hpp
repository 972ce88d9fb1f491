// Encoder construction: convolutional waveform front-end followed by a
// post-norm transformer stack with a convolutional positional embedding.
// The same configuration space realizes the toy models used for training
// experiments and the full-size reference models used for parameter counts.

#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "srlkit/ops.hpp"
#include "srlkit/rng.hpp"
#include "srlkit/tensor.hpp"

namespace srlkit {

struct ConvLayerSpec {
  Index channels = 0;
  Index kernel = 0;
  Index stride = 0;
  bool operator==(const ConvLayerSpec&) const = default;
};

struct PosConvSpec {
  Index kernel = 0;
  Index groups = 0;
  bool operator==(const PosConvSpec&) const = default;
};

struct ModelConfig {
  std::vector<ConvLayerSpec> conv_layers;
  Index model_dim = 0;
  Index num_transformer_layers = 0;
  Index num_heads = 0;
  Index ffn_dim = 0;
  PosConvSpec pos_conv;
  double dropout = 0.0;

  void validate() const {
    if (conv_layers.empty())
      throw ConfigError("model: at least one conv layer required");
    for (const auto& c : conv_layers)
      if (c.channels < 1 || c.kernel < 1 || c.stride < 1)
        throw ConfigError("model: conv layer extents must be positive");
    if (model_dim < 1) throw ConfigError("model: model_dim must be positive");
    if (num_transformer_layers < 1)
      throw ConfigError("model: num_transformer_layers must be >= 1");
    if (num_heads < 1 || model_dim % num_heads != 0)
      throw ConfigError("model: model_dim must be divisible by num_heads");
    if (ffn_dim < 1) throw ConfigError("model: ffn_dim must be positive");
    if (pos_conv.kernel < 1 || pos_conv.groups < 1 ||
        model_dim % pos_conv.groups != 0)
      throw ConfigError("model: pos_conv groups must divide model_dim");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("model: dropout must lie in [0, 1)");
  }

  // Frame count after the conv stack for a given sample count.
  Index frames_for_samples(Index samples) const {
    Index t = samples;
    for (const auto& c : conv_layers) {
      if (t < c.kernel) return 0;
      t = (t - c.kernel) / c.stride + 1;
    }
    return t;
  }

  // Minimum number of input samples that produces one output frame.
  Index receptive_field() const {
    Index t = 1;
    for (auto it = conv_layers.rbegin(); it != conv_layers.rend(); ++it)
      t = (t - 1) * it->stride + it->kernel;
    return t;
  }
};

// Parameter store with deterministic enumeration order (creation order, which
// follows the forward dataflow and is documented in the README).
template <typename S>
class EncoderModel {
 public:
  ModelConfig config;

  EncoderModel() = default;

  void add_param(const std::string& name, Tensor<S> t) {
    if (index_.count(name))
      throw ConfigError("model: duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
  }

  Tensor<S>& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ConfigError("model: unknown parameter " + name);
    return params_[it->second].second;
  }
  const Tensor<S>& param(const std::string& name) const {
    return const_cast<EncoderModel*>(this)->param(name);
  }
  bool has_param(const std::string& name) const { return index_.count(name); }

  std::vector<std::pair<std::string, Tensor<S>>>& parameters() {
    return params_;
  }
  const std::vector<std::pair<std::string, Tensor<S>>>& parameters() const {
    return params_;
  }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) {
    frozen_ = f;
    for (auto& [name, t] : params_) t.set_requires_grad(!f);
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

namespace detail {

// Scaled uniform on [-sqrt(3)*stddev, sqrt(3)*stddev], i.e. the uniform
// distribution with the requested standard deviation.
template <typename S>
Tensor<S> init_uniform(Shape shape, std::uint64_t seed, const std::string& name,
                       double stddev) {
  Rng rng(derive_seed(seed, name));
  return Tensor<S>::rand_uniform(std::move(shape), rng, 1.7320508075688772 * stddev,
                                 /*requires_grad=*/true);
}

}  // namespace detail

// Deterministic initialization: every parameter draws from its own stream
// derived from (seed, parameter name), so values do not depend on creation
// order. Linear and conv weights use 1/sqrt(fan_in) scaling; norm gains are
// one, biases zero.
template <typename S>
EncoderModel<S> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  EncoderModel<S> m;
  m.config = cfg;
  const Index dim = cfg.model_dim;

  auto init = [&](const std::string& name, Shape shape, double stddev) {
    m.add_param(name, detail::init_uniform<S>(std::move(shape), seed, name, stddev));
  };
  auto norm_pair = [&](const std::string& prefix, Index n) {
    m.add_param(prefix + ".gain", Tensor<S>::full({n}, S(1), true));
    m.add_param(prefix + ".bias", Tensor<S>::zeros({n}, true));
  };

  // Conv front-end (bias-free), layer norm over channels after the first
  // block, gelu after every block.
  Index in_ch = 1;
  for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
    const auto& c = cfg.conv_layers[i];
    const std::string name = "feature.conv" + std::to_string(i) + ".weight";
    init(name, {c.channels, in_ch, c.kernel},
           1.0 / std::sqrt(static_cast<double>(in_ch * c.kernel)));
    if (i == 0) norm_pair("feature.norm0", c.channels);
    in_ch = c.channels;
  }

  // Projection from conv channels to the transformer width.
  norm_pair("post.norm", in_ch);
  init("post.proj.weight", {in_ch, dim},
         1.0 / std::sqrt(static_cast<double>(in_ch)));
  m.add_param("post.proj.bias", Tensor<S>::zeros({dim}, true));

  // Grouped convolutional positional embedding, one weight/bias per group.
  const Index group_dim = dim / cfg.pos_conv.groups;
  for (Index g = 0; g < cfg.pos_conv.groups; ++g) {
    const std::string prefix = "pos.g" + std::to_string(g);
    init(prefix + ".weight", {group_dim, group_dim, cfg.pos_conv.kernel},
           1.0 / std::sqrt(static_cast<double>(group_dim * cfg.pos_conv.kernel)));
    m.add_param(prefix + ".bias", Tensor<S>::zeros({group_dim}, true));
  }
  norm_pair("enc.norm", dim);

  const double lin_std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Index l = 0; l < cfg.num_transformer_layers; ++l) {
    const std::string lp = "layer" + std::to_string(l);
    for (const char* part : {"q", "k", "v", "out"}) {
      init(lp + ".attn." + part + ".weight", {dim, dim}, lin_std);
      m.add_param(lp + ".attn." + std::string(part) + ".bias",
                  Tensor<S>::zeros({dim}, true));
    }
    norm_pair(lp + ".norm1", dim);
    init(lp + ".ffn.w1.weight", {dim, cfg.ffn_dim}, lin_std);
    m.add_param(lp + ".ffn.w1.bias", Tensor<S>::zeros({cfg.ffn_dim}, true));
    init(lp + ".ffn.w2.weight", {cfg.ffn_dim, dim},
           1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim)));
    m.add_param(lp + ".ffn.w2.bias", Tensor<S>::zeros({dim}, true));
    norm_pair(lp + ".norm2", dim);
  }
  return m;
}

template <typename S>
Index count_parameters(const EncoderModel<S>& m) {
  Index n = 0;
  for (const auto& [name, t] : m.parameters()) n += t.numel();
  return n;
}

// Per-forward context: dropout is active only during training and draws from
// the supplied stream.
struct ForwardContext {
  Rng* rng = nullptr;
  bool train = false;
};

namespace detail {

template <typename S>
Tensor<S> maybe_dropout(const Tensor<S>& x, double p, const ForwardContext* ctx) {
  if (!ctx || !ctx->train || p == 0.0 || !ctx->rng) return x;
  return dropout(x, p, *ctx->rng, true);
}

// Positional embedding: grouped conv over time with same-length padding,
// gelu, added to the input resolution.
template <typename S>
Tensor<S> pos_conv_embedding(EncoderModel<S>& m, const Tensor<S>& x) {
  const auto& cfg = m.config;
  const Index dim = cfg.model_dim;
  const Index frames = x.dim(0);
  const Index k = cfg.pos_conv.kernel;
  const Index group_dim = dim / cfg.pos_conv.groups;
  Tensor<S> xt = transpose(x);  // [D x T]
  const Index pad = k / 2;
  std::vector<Tensor<S>> padded_parts;
  if (pad > 0) padded_parts.push_back(Tensor<S>::zeros({dim, pad}));
  padded_parts.push_back(xt);
  if (pad > 0) padded_parts.push_back(Tensor<S>::zeros({dim, pad}));
  Tensor<S> xp = padded_parts.size() > 1 ? concat(padded_parts, 1) : xt;

  std::vector<Tensor<S>> group_outs;
  std::vector<Tensor<S>> group_biases;
  for (Index g = 0; g < cfg.pos_conv.groups; ++g) {
    const std::string prefix = "pos.g" + std::to_string(g);
    Tensor<S> xg = slice(xp, 0, g * group_dim, group_dim);
    group_outs.push_back(conv1d(xg, m.param(prefix + ".weight"), 1));
    group_biases.push_back(m.param(prefix + ".bias"));
  }
  Tensor<S> conv_out =
      group_outs.size() > 1 ? concat(group_outs, 0) : group_outs[0];
  // Even kernels overshoot the input length by one frame.
  if (conv_out.dim(1) > frames) conv_out = slice(conv_out, 1, 0, frames);
  Tensor<S> pos = transpose(conv_out);
  Tensor<S> bias = group_biases.size() > 1 ? concat(group_biases, 0)
                                           : group_biases[0];
  return gelu(add(pos, bias));
}

template <typename S>
Tensor<S> transformer_block(EncoderModel<S>& m, const std::string& lp,
                            const Tensor<S>& x, const ForwardContext* ctx) {
  const auto& cfg = m.config;
  const Index dim = cfg.model_dim;
  const Index head_dim = dim / cfg.num_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor<S> q = add(matmul(x, m.param(lp + ".attn.q.weight")),
                    m.param(lp + ".attn.q.bias"));
  Tensor<S> k = add(matmul(x, m.param(lp + ".attn.k.weight")),
                    m.param(lp + ".attn.k.bias"));
  Tensor<S> v = add(matmul(x, m.param(lp + ".attn.v.weight")),
                    m.param(lp + ".attn.v.bias"));
  std::vector<Tensor<S>> heads;
  for (Index h = 0; h < cfg.num_heads; ++h) {
    Tensor<S> qh = slice(q, 1, h * head_dim, head_dim);
    Tensor<S> kh = slice(k, 1, h * head_dim, head_dim);
    Tensor<S> vh = slice(v, 1, h * head_dim, head_dim);
    Tensor<S> scores = scale(matmul(qh, transpose(kh)), att_scale);
    heads.push_back(matmul(softmax(scores), vh));
  }
  Tensor<S> attended = heads.size() > 1 ? concat(heads, 1) : heads[0];
  Tensor<S> attn_out = add(matmul(attended, m.param(lp + ".attn.out.weight")),
                           m.param(lp + ".attn.out.bias"));
  attn_out = maybe_dropout(attn_out, cfg.dropout, ctx);
  Tensor<S> h1 = layer_norm(add(x, attn_out), m.param(lp + ".norm1.gain"),
                            m.param(lp + ".norm1.bias"));

  Tensor<S> ff = gelu(add(matmul(h1, m.param(lp + ".ffn.w1.weight")),
                          m.param(lp + ".ffn.w1.bias")));
  ff = add(matmul(ff, m.param(lp + ".ffn.w2.weight")),
           m.param(lp + ".ffn.w2.bias"));
  ff = maybe_dropout(ff, cfg.dropout, ctx);
  return layer_norm(add(h1, ff), m.param(lp + ".norm2.gain"),
                    m.param(lp + ".norm2.bias"));
}

}  // namespace detail

// Runs the encoder on a raw waveform up to `upto_layer` transformer layers
// and returns hidden states at every depth: index 0 holds the post-CNN
// features projected to model width, index i the output of layer i. All
// returned states have shape [T' x model_dim] and are checked finite.
template <typename S>
std::vector<Tensor<S>> forward_hidden(EncoderModel<S>& m, const Tensor<S>& wave,
                                      Index upto_layer,
                                      const ForwardContext* ctx = nullptr) {
  const auto& cfg = m.config;
  if (upto_layer < 0 || upto_layer > cfg.num_transformer_layers)
    throw ShapeError("forward_hidden: layer index " +
                     std::to_string(upto_layer) + " outside [0, " +
                     std::to_string(cfg.num_transformer_layers) + "]");
  if (wave.rank() != 1)
    throw ShapeError("forward_hidden: expected rank-1 waveform, got " +
                     shape_str(wave.shape()));
  if (wave.dim(0) < cfg.receptive_field())
    throw ShapeError("forward_hidden: input of " + std::to_string(wave.dim(0)) +
                     " samples is shorter than the receptive field of " +
                     std::to_string(cfg.receptive_field()));

  Tensor<S> x = reshape(wave, {1, wave.dim(0)});
  for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
    const auto& c = cfg.conv_layers[i];
    x = conv1d(x, m.param("feature.conv" + std::to_string(i) + ".weight"),
               c.stride);
    if (i == 0) {
      x = transpose(layer_norm(transpose(x), m.param("feature.norm0.gain"),
                               m.param("feature.norm0.bias")));
    }
    x = gelu(x);
  }
  x = transpose(x);  // [T' x C]
  x = layer_norm(x, m.param("post.norm.gain"), m.param("post.norm.bias"));
  x = add(matmul(x, m.param("post.proj.weight")), m.param("post.proj.bias"));
  x = add(x, detail::pos_conv_embedding(m, x));
  x = layer_norm(x, m.param("enc.norm.gain"), m.param("enc.norm.bias"));

  std::vector<Tensor<S>> hidden;
  hidden.reserve(static_cast<std::size_t>(upto_layer) + 1);
  x.check_finite("forward_hidden");
  hidden.push_back(x);
  for (Index l = 0; l < upto_layer; ++l) {
    x = detail::transformer_block(m, "layer" + std::to_string(l), x, ctx);
    x.check_finite("forward_hidden");
    hidden.push_back(x);
  }
  return hidden;
}

}  // namespace srlkit
