#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapterlab/ops.hpp"
#include "adapterlab/positions.hpp"
#include "adapterlab/tensor.hpp"

namespace adapterlab {

struct UNetConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 16;
  std::size_t base_channels = 16;
  std::vector<std::size_t> channel_mult = {1, 2};
  std::size_t cond_dim = 16;        // d_c
  std::size_t ffn_mult = 4;         // d_m = ffn_mult * d
  std::size_t time_dim = 16;        // sinusoidal features
  std::size_t time_embed_dim = 32;  // MLP width
  std::size_t groups = 4;           // GroupNorm groups (clamped to a divisor per layer)
  std::size_t heads = 1;
  std::size_t timesteps = 1000;
  /// Levels that carry a transformer block; empty means every level.
  std::vector<std::size_t> transformer_levels;

  void validate() const;
  bool has_transformer(std::size_t level) const;
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON dump.
  std::uint64_t hash() const;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Largest divisor of `channels` that does not exceed `preferred`.
std::size_t group_count_for(std::size_t channels, std::size_t preferred);

/// softmax(Q K^T / sqrt(d_k)) V.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// ReLU(x W1 + b1) W2 + b2.
Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2);

/// Sinusoidal features of a (possibly fractional) timestep, shape [1 x dim].
Tensor timestep_embedding(double t, std::size_t dim);

/// Observer of named activations. `tap` may return a modified value, which
/// replaces the activation on the main path.
class TapSink {
 public:
  virtual ~TapSink() = default;
  /// Called on block entry. `condition` is the block's c for transformer blocks.
  virtual void begin_block(BlockKind /*kind*/, std::size_t /*block*/, const Tensor* /*condition*/) {}
  virtual Tensor tap(PositionId pos, std::size_t block, const Tensor& value) = 0;
};

struct ActivationTap {
  PositionId position;
  std::size_t block;
  Tensor value;
};

/// Records every tap without modifying it.
class TapRecorder final : public TapSink {
 public:
  Tensor tap(PositionId pos, std::size_t block, const Tensor& value) override {
    taps.push_back({pos, block, value});
    return value;
  }
  std::vector<ActivationTap> taps;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  Tensor operator()(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }
};

struct TransformerBlock {
  std::size_t dim = 0;
  std::size_t cond_dim = 0;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  Tensor sa_q, sa_k, sa_v, sa_o;
  Tensor ca_q, ca_k, ca_v, ca_o;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;

  /// x: [n x d] tokens, c: [m x d_c].
  Tensor forward(const Tensor& x, const Tensor& c, std::size_t index, TapSink* sink) const;
};

struct ResidualBlock {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t groups_in = 1, groups_out = 1;
  Tensor gn1_g, gn1_b, conv1_w, conv1_b;
  Linear time_proj;
  Tensor gn2_g, gn2_b, conv2_w, conv2_b;
  std::optional<Tensor> skip_w, skip_b;  // 1x1 conv when channels change

  /// x: [C x H x W], temb: [1 x time_embed_dim].
  Tensor forward(const Tensor& x, const Tensor& temb, std::size_t index, TapSink* sink) const;
};

/// Miniature conditional U-Net: encoder levels, a middle block and decoder
/// levels with skip concatenation. Every basic block is a residual block
/// followed (optionally) by a transformer block.
class UNet {
 public:
  UNet(UNetConfig config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }

  /// x_t: [C x H x W], t in [0, T], c: [m x d_c]. Returns the raw network output;
  /// model_predictor() turns it into a noise prediction.
  Tensor forward(const Tensor& x_t, double t, const Tensor& c, TapSink* sink = nullptr) const;

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void set_trainable(bool on);

  std::size_t transformer_count() const { return transformers_.size(); }
  std::size_t residual_count() const { return residuals_.size(); }
  const TransformerBlock& transformer(std::size_t i) const { return transformers_.at(i); }
  const ResidualBlock& residual(std::size_t i) const { return residuals_.at(i); }
  /// Spatial side length at which residual / transformer block `i` runs.
  std::size_t residual_resolution(std::size_t i) const { return residual_res_.at(i); }
  std::size_t transformer_resolution(std::size_t i) const { return transformer_res_.at(i); }

  /// Deep copy with independent storage.
  UNet clone() const;
  /// Copies values from `other` (same config) into this model's parameters.
  void copy_parameters_from(const UNet& other);
  /// FNV-1a over the raw parameter bytes; used to audit frozen weights.
  std::uint64_t checksum() const;

 private:
  Tensor add_param(const std::string& name, Tensor t);
  TransformerBlock make_transformer(const std::string& prefix, std::size_t dim, class Rng& rng);
  ResidualBlock make_residual(const std::string& prefix, std::size_t cin, std::size_t cout,
                              class Rng& rng);

  UNetConfig config_;
  std::vector<NamedTensor> params_;
  Linear time_mlp1_, time_mlp2_;
  Tensor conv_in_w_, conv_in_b_, out_gn_g_, out_gn_b_, conv_out_w_, conv_out_b_;
  std::size_t out_groups_ = 1;
  std::vector<ResidualBlock> residuals_;
  std::vector<TransformerBlock> transformers_;
  std::vector<std::size_t> residual_res_, transformer_res_;
  /// Per basic block: transformer index, or -1 when the level has none.
  std::vector<long> block_transformer_;
};

}  // namespace adapterlab
