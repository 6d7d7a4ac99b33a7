#pragma once

// U-Net fusion autoencoder.
//
// Encoder block i (0-based) maps to base_channels * 2^i channels with two
// conv3x3-BN-ReLU layers. Blocks 0..L-1 are followed by the configured pooling
// (L = decoder_blocks); block L is the bottleneck. Decoder stage j upsamples by
// a 2x2/2 transpose convolution, concatenates the pre-pool activation of
// encoder block L-1-j and applies another conv block. A final 1x1 convolution
// and sigmoid produce the fused channel.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "wpfuse/layers.hpp"
#include "wpfuse/tensor.hpp"
#include "wpfuse/wdepp.hpp"

namespace wpfuse {

enum class PoolingMode { kWdepp, kMax, kAverage };

std::string_view to_string(PoolingMode mode);
PoolingMode parse_pooling_mode(std::string_view text);

struct NetworkConfig {
  Index base_channels = 32;
  Index encoder_blocks = 4;
  Index decoder_blocks = 3;
  Index input_channels = 2;
  Index output_channels = 1;
  PoolingMode pooling_mode = PoolingMode::kWdepp;

  /// Throws ConfigError when the channel plan is inconsistent.
  void validate() const;

  Index block_channels(Index block) const { return base_channels << block; }
  /// Input sizes must be multiples of this.
  Index size_multiple() const { return Index(1) << decoder_blocks; }

  bool operator==(const NetworkConfig&) const = default;
};

template <typename Scalar>
struct ConvBlock {
  Conv3x3<Scalar> conv1;
  BatchNorm<Scalar> bn1;
  Conv3x3<Scalar> conv2;
  BatchNorm<Scalar> bn2;

  static ConvBlock init(Index in, Index out, Rng& rng) {
    auto conv1 = Conv3x3<Scalar>::init(in, out, rng);
    auto conv2 = Conv3x3<Scalar>::init(out, out, rng);
    return {std::move(conv1), BatchNorm<Scalar>::init(out), std::move(conv2), BatchNorm<Scalar>::init(out)};
  }
  static ConvBlock zeros(Index in, Index out) {
    return {Conv3x3<Scalar>::zeros(in, out), BatchNorm<Scalar>::zeros(out), Conv3x3<Scalar>::zeros(out, out),
            BatchNorm<Scalar>::zeros(out)};
  }
};

template <typename Scalar>
struct DecoderStage {
  TransConv2x2<Scalar> up;
  ConvBlock<Scalar> block;
};

/// All learned parameters and normalization statistics of one network.
template <typename Scalar>
struct ModelState {
  NetworkConfig config;
  std::vector<ConvBlock<Scalar>> encoder;
  std::vector<WdeppParams<Scalar>> pools;  // empty unless pooling_mode == kWdepp
  std::vector<DecoderStage<Scalar>> decoder;
  Conv1x1<Scalar> head;
  std::uint64_t training_step = 0;
  std::uint64_t seed = 0;

  /// Same shapes, all tensors zero. Used for gradients and optimizer moments.
  static ModelState zeros_like(const NetworkConfig& cfg);

  template <typename Other>
  ModelState<Other> cast() const;
};

enum class TensorKind { kParameter, kBuffer };

namespace detail {

template <typename F, typename... Blocks>
void visit_conv_block(F& f, const std::string& prefix, Blocks&... b) {
  f(prefix + ".conv1.weight", TensorKind::kParameter, b.conv1.weight...);
  f(prefix + ".bn1.gamma", TensorKind::kParameter, b.bn1.gamma...);
  f(prefix + ".bn1.beta", TensorKind::kParameter, b.bn1.beta...);
  f(prefix + ".bn1.running_mean", TensorKind::kBuffer, b.bn1.running_mean...);
  f(prefix + ".bn1.running_var", TensorKind::kBuffer, b.bn1.running_var...);
  f(prefix + ".conv2.weight", TensorKind::kParameter, b.conv2.weight...);
  f(prefix + ".bn2.gamma", TensorKind::kParameter, b.bn2.gamma...);
  f(prefix + ".bn2.beta", TensorKind::kParameter, b.bn2.beta...);
  f(prefix + ".bn2.running_mean", TensorKind::kBuffer, b.bn2.running_mean...);
  f(prefix + ".bn2.running_var", TensorKind::kBuffer, b.bn2.running_var...);
}

template <typename F, typename... Layers>
void visit_linear(F& f, const std::string& prefix, Layers&... l) {
  f(prefix + ".weight", TensorKind::kParameter, l.weight...);
  f(prefix + ".bias", TensorKind::kParameter, l.bias...);
}

}  // namespace detail

/// Visits every tensor of one or more same-shaped ModelStates in a fixed
/// order: f(name, kind, tensor_of_state_1, tensor_of_state_2, ...).
/// Names are stable and used as checkpoint keys.
template <typename F, typename First, typename... Rest>
void for_each_tensor(F&& f, First& first, Rest&... rest) {
  for (std::size_t i = 0; i < first.encoder.size(); ++i)
    detail::visit_conv_block(f, "encoder." + std::to_string(i), first.encoder[i], rest.encoder[i]...);
  for (std::size_t i = 0; i < first.pools.size(); ++i) {
    const std::string p = "pool." + std::to_string(i);
    detail::visit_linear(f, p + ".squeeze", first.pools[i].sqex.squeeze, rest.pools[i].sqex.squeeze...);
    detail::visit_linear(f, p + ".excite", first.pools[i].sqex.excite, rest.pools[i].sqex.excite...);
    detail::visit_linear(f, p + ".projection", first.pools[i].projection, rest.pools[i].projection...);
  }
  for (std::size_t i = 0; i < first.decoder.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    detail::visit_linear(f, p + ".up", first.decoder[i].up, rest.decoder[i].up...);
    detail::visit_conv_block(f, p, first.decoder[i].block, rest.decoder[i].block...);
  }
  detail::visit_linear(f, "head", first.head, rest.head...);
}

namespace detail {

template <typename Scalar, bool kZero>
ModelState<Scalar> make_model(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelState<Scalar> m;
  m.config = cfg;
  m.seed = seed;
  auto block = [&](Index in, Index out) {
    if constexpr (kZero) return ConvBlock<Scalar>::zeros(in, out);
    else return ConvBlock<Scalar>::init(in, out, rng);
  };
  Index in = cfg.input_channels;
  for (Index b = 0; b < cfg.encoder_blocks; ++b) {
    const Index out = cfg.block_channels(b);
    m.encoder.push_back(block(in, out));
    if (b < cfg.decoder_blocks && cfg.pooling_mode == PoolingMode::kWdepp) {
      if constexpr (kZero) m.pools.push_back(WdeppParams<Scalar>::zeros(out));
      else m.pools.push_back(WdeppParams<Scalar>::init(out, rng));
    }
    in = out;
  }
  for (Index j = 0; j < cfg.decoder_blocks; ++j) {
    const Index deep = cfg.block_channels(cfg.decoder_blocks - j);
    const Index skip = cfg.block_channels(cfg.decoder_blocks - 1 - j);
    DecoderStage<Scalar> stage;
    if constexpr (kZero) stage.up = TransConv2x2<Scalar>::zeros(deep, skip);
    else stage.up = TransConv2x2<Scalar>::init(deep, skip, rng);
    stage.block = block(2 * skip, skip);
    m.decoder.push_back(std::move(stage));
  }
  if constexpr (kZero) m.head = Conv1x1<Scalar>::zeros(cfg.base_channels, cfg.output_channels);
  else m.head = Conv1x1<Scalar>::init(cfg.base_channels, cfg.output_channels, rng);
  return m;
}

}  // namespace detail

/// Deterministic initialization: identical (cfg, seed) give bit-identical states.
template <typename Scalar>
ModelState<Scalar> build_model(const NetworkConfig& cfg, std::uint64_t seed) {
  return detail::make_model<Scalar, false>(cfg, seed);
}

template <typename Scalar>
ModelState<Scalar> ModelState<Scalar>::zeros_like(const NetworkConfig& cfg) {
  return detail::make_model<Scalar, true>(cfg, 0);
}

template <typename Scalar>
template <typename Other>
ModelState<Other> ModelState<Scalar>::cast() const {
  ModelState<Other> out = ModelState<Other>::zeros_like(config);
  out.training_step = training_step;
  out.seed = seed;
  for_each_tensor([](const std::string&, TensorKind, auto& dst, const auto& src) {
    dst = src.template cast<Other>();
  }, out, *this);
  return out;
}

/// Number of learned scalars (normalization running statistics excluded).
template <typename Scalar>
Index parameter_count(const ModelState<Scalar>& m) {
  Index total = 0;
  for_each_tensor([&](const std::string&, TensorKind kind, const auto& t) {
    if (kind == TensorKind::kParameter) total += t.size();
  }, m);
  return total;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
struct ConvBlockCache {
  FeatureMap<Scalar> input;
  BatchNormCache<Scalar> bn1, bn2;
  FeatureMap<Scalar> act1, act2;  // post-ReLU
};

/// Intermediate values of one forward pass, consumed by backward().
template <typename Scalar>
struct ForwardTape {
  bool training = false;
  std::vector<ConvBlockCache<Scalar>> encoder;
  std::vector<WdeppCache<Scalar>> wdepp;
  std::vector<MaxPoolCache<Scalar>> maxpool;
  std::vector<FeatureMap<Scalar>> up_inputs;
  std::vector<ConvBlockCache<Scalar>> decoder;
  FeatureMap<Scalar> head_input;
  FeatureMap<Scalar> output;
};

namespace detail {

template <typename Scalar>
FeatureMap<Scalar> conv_block_forward(const FeatureMap<Scalar>& x, const ConvBlock<Scalar>& p, bool training,
                                      ConvBlockCache<Scalar>& c) {
  c.input = x;
  c.act1 = relu_forward(batchnorm_forward(conv3x3_forward(x, p.conv1), p.bn1, training, c.bn1));
  c.act2 = relu_forward(batchnorm_forward(conv3x3_forward(c.act1, p.conv2), p.bn2, training, c.bn2));
  return c.act2;
}

template <typename Scalar>
FeatureMap<Scalar> conv_block_backward(const ConvBlock<Scalar>& p, const ConvBlockCache<Scalar>& c,
                                       const FeatureMap<Scalar>& dout, ConvBlock<Scalar>& g) {
  FeatureMap<Scalar> d = batchnorm_backward(p.bn2, c.bn2, relu_backward(c.act2, dout), g.bn2);
  d = conv3x3_backward(c.act1, p.conv2, d, g.conv2);
  d = batchnorm_backward(p.bn1, c.bn1, relu_backward(c.act1, d), g.bn1);
  return conv3x3_backward(c.input, p.conv1, d, g.conv1);
}

template <typename Scalar>
void update_running(ConvBlock<Scalar>& p, const ConvBlockCache<Scalar>& c) {
  batchnorm_update_running(p.bn1, c.bn1);
  batchnorm_update_running(p.bn2, c.bn2);
}

}  // namespace detail

template <typename Scalar>
void check_input(const NetworkConfig& cfg, const FeatureMap<Scalar>& input) {
  if (input.channels() != cfg.input_channels)
    throw DimensionError("forward: expected " + std::to_string(cfg.input_channels) + " input channels, got " +
                         std::to_string(input.channels()));
  const Index k = cfg.size_multiple();
  if (input.height < k || input.width < k || input.height % k || input.width % k)
    throw DimensionError("forward: spatial size " + shape_string(input.height, input.width) +
                         " must be a positive multiple of " + std::to_string(k));
}

/// Runs the network on a batch of stacked source pairs (N x H x W x 2).
/// Returns N x H x W x 1 values in (0,1). When `training`, normalization uses
/// batch statistics; running statistics are only updated by train_forward().
template <typename Scalar>
FeatureMap<Scalar> forward(const ModelState<Scalar>& m, const FeatureMap<Scalar>& input, bool training,
                           ForwardTape<Scalar>* tape = nullptr) {
  const NetworkConfig& cfg = m.config;
  check_input(cfg, input);
  ForwardTape<Scalar> local;
  ForwardTape<Scalar>& t = tape ? *tape : local;
  t = ForwardTape<Scalar>{};
  t.training = training;
  t.encoder.resize(cfg.encoder_blocks);
  t.decoder.resize(cfg.decoder_blocks);
  if (cfg.pooling_mode == PoolingMode::kWdepp) t.wdepp.resize(cfg.decoder_blocks);
  if (cfg.pooling_mode == PoolingMode::kMax) t.maxpool.resize(cfg.decoder_blocks);

  FeatureMap<Scalar> x = input;
  for (Index b = 0; b < cfg.encoder_blocks; ++b) {
    x = detail::conv_block_forward(x, m.encoder[b], training, t.encoder[b]);
    if (b >= cfg.decoder_blocks) break;
    switch (cfg.pooling_mode) {
      case PoolingMode::kWdepp: x = wdepp_forward(x, m.pools[b], t.wdepp[b]); break;
      case PoolingMode::kMax: x = maxpool2_forward(x, t.maxpool[b]); break;
      case PoolingMode::kAverage: x = avgpool2_forward(x); break;
    }
  }
  for (Index j = 0; j < cfg.decoder_blocks; ++j) {
    t.up_inputs.push_back(x);
    const FeatureMap<Scalar> up = transconv2x2_forward(x, m.decoder[j].up);
    const FeatureMap<Scalar>& skip = t.encoder[cfg.decoder_blocks - 1 - j].act2;
    x = detail::conv_block_forward(concat_channels(up, skip), m.decoder[j].block, training, t.decoder[j]);
  }
  t.head_input = x;
  t.output = sigmoid_forward(conv1x1_forward(x, m.head));
  return t.output;
}

/// Training-mode forward that also advances the normalization running statistics.
template <typename Scalar>
FeatureMap<Scalar> train_forward(ModelState<Scalar>& m, const FeatureMap<Scalar>& input, ForwardTape<Scalar>& tape) {
  FeatureMap<Scalar> out = forward(m, input, true, &tape);
  for (std::size_t b = 0; b < tape.encoder.size(); ++b) detail::update_running(m.encoder[b], tape.encoder[b]);
  for (std::size_t j = 0; j < tape.decoder.size(); ++j) detail::update_running(m.decoder[j].block, tape.decoder[j]);
  return out;
}

/// Inference-mode forward of one source pair; returns the fused image.
template <typename Scalar>
Image<Scalar> fuse(const ModelState<Scalar>& m, const Image<Scalar>& a, const Image<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("fuse: source shapes differ (" + shape_string(a.rows(), a.cols()) + " vs " +
                         shape_string(b.rows(), b.cols()) + ")");
  const FeatureMap<Scalar> out = forward(m, stack_channels<Scalar>({&a, &b}), false);
  return out.channel(0);
}

/// Backpropagates d(loss)/d(output) through the taped pass. Parameter
/// gradients are accumulated into `grad` (shaped by ModelState::zeros_like);
/// returns d(loss)/d(input).
template <typename Scalar>
FeatureMap<Scalar> backward(const ModelState<Scalar>& m, const ForwardTape<Scalar>& t,
                            const FeatureMap<Scalar>& doutput, ModelState<Scalar>& grad) {
  const NetworkConfig& cfg = m.config;
  FeatureMap<Scalar> d = sigmoid_backward(t.output, doutput);
  d = conv1x1_backward(t.head_input, m.head, d, grad.head);

  std::vector<FeatureMap<Scalar>> dskip(cfg.decoder_blocks);
  for (Index j = cfg.decoder_blocks - 1; j >= 0; --j) {
    const FeatureMap<Scalar> dcat = detail::conv_block_backward(m.decoder[j].block, t.decoder[j], d, grad.decoder[j].block);
    const Index skip_channels = cfg.block_channels(cfg.decoder_blocks - 1 - j);
    dskip[cfg.decoder_blocks - 1 - j] = slice_channels(dcat, skip_channels, skip_channels);
    d = transconv2x2_backward(t.up_inputs[j], m.decoder[j].up, slice_channels(dcat, 0, skip_channels),
                              grad.decoder[j].up);
  }
  for (Index b = cfg.encoder_blocks - 1; b >= 0; --b) {
    if (b < cfg.decoder_blocks) {
      switch (cfg.pooling_mode) {
        case PoolingMode::kWdepp: d = wdepp_backward(m.pools[b], t.wdepp[b], d, grad.pools[b]); break;
        case PoolingMode::kMax: d = maxpool2_backward(t.maxpool[b], d); break;
        case PoolingMode::kAverage: d = avgpool2_backward(d); break;
      }
      d.data += dskip[b].data;
    }
    d = detail::conv_block_backward(m.encoder[b], t.encoder[b], d, grad.encoder[b]);
  }
  return d;
}

/// Hash of every ReLU on/off state and max-pool winner in a taped pass. Two
/// passes with equal signatures lie on the same piecewise-smooth region.
template <typename Scalar>
std::uint64_t activation_signature(const ForwardTape<Scalar>& t) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  auto relu_bits = [&](const FeatureMap<Scalar>& a) {
    for (Index i = 0; i < a.data.size(); ++i) mix(a.data.data()[i] > Scalar(0) ? 1 : 2);
  };
  auto conv_block = [&](const ConvBlockCache<Scalar>& c) {
    relu_bits(c.act1);
    relu_bits(c.act2);
  };
  for (const auto& c : t.encoder) conv_block(c);
  for (const auto& c : t.decoder) conv_block(c);
  for (const auto& w : t.wdepp) {
    relu_bits(w.projected);
    for (Index i = 0; i < w.attention.hidden.size(); ++i) mix(w.attention.hidden.data()[i] > Scalar(0) ? 3 : 4);
    for (Index i = 0; i < w.pool.argmax.size(); ++i) mix(w.pool.argmax.data()[i] + 5);
  }
  for (const auto& p : t.maxpool)
    for (Index i = 0; i < p.argmax.size(); ++i) mix(p.argmax.data()[i] + 5);
  return h;
}

}  // namespace wpfuse
