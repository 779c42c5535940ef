#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "adapterlab/ops.hpp"
#include "adapterlab/positions.hpp"
#include "adapterlab/unet.hpp"

namespace adapterlab {

/// One adapter configuration: where it reads, where it writes, and its function form.
struct DesignPoint {
  PositionId input = PositionId::CA_out;
  OutputClass output = OutputClass::FFN_in;
  Activation act = Activation::identity;
  double scale = 1.0;
  /// Low-rank width (transformer form) or mid channels (residual form).
  std::size_t rank = 4;
  /// Targeted block indices of the matching kind; empty means all of them.
  std::vector<std::size_t> blocks;

  BlockKind kind() const { return kind_of(input); }

  /// `in=<pos>,out=<class>,act=<kind>,s=<scale>,r=<rank>` (plus `,blocks=i|j` when restricted).
  std::string to_string() const;
  static DesignPoint parse(std::string_view text);

  /// Throws ConstraintError naming the violated rule.
  void validate() const;

  bool operator==(const DesignPoint&) const = default;
};

/// Same sub-block kind, and the output stage is not before the input stage.
bool is_valid_pair(PositionId input, OutputClass output);

/// The class with the smallest legal stage for `input` (its own class).
OutputClass nearest_output_class(PositionId input);

/// Every valid (input, output) pair crossed with the option sets, in a fixed order:
/// input positions, then output classes, then activations, then scales.
std::vector<DesignPoint> enumerate_design_space(const std::vector<Activation>& activations,
                                                const std::vector<double>& scales,
                                                std::size_t rank = 4);

struct TransformerAdapterWeights {
  Tensor down;  // [d_in x r]
  Tensor up;    // [r x d_out]
};

struct ResidualAdapterWeights {
  std::size_t groups = 1;
  Tensor gn_g, gn_b;     // [C_in]
  Tensor down_w, down_b;  // [c_mid x C_in x 3 x 3], [c_mid]
  Tensor up_w, up_b;      // [C_out x c_mid x 3 x 3], [C_out]
};

/// s * act(x W_down) W_up for x: [n x d_in].
Tensor transformer_adapter_apply(const Tensor& x, const TransformerAdapterWeights& w,
                                 Activation act, double s);

/// s * Conv_up(act(Conv_down(GN(x)))) for x: [C_in x H x W].
Tensor residual_adapter_apply(const Tensor& x, const ResidualAdapterWeights& w, Activation act,
                              double s);

/// Instantiated adapters for one design point, one unshared parameter group
/// per targeted block. Installed into a forward pass as its TapSink.
class AdapterBank final : public TapSink {
 public:
  /// `write_site` overrides the physical member of the output class written to;
  /// it must fire no earlier than the input read.
  AdapterBank(const UNet& model, DesignPoint design, std::uint64_t seed,
              std::optional<PositionId> write_site = std::nullopt);

  const DesignPoint& design() const { return design_; }
  PositionId write_site() const { return write_site_; }
  const std::vector<std::size_t>& blocks() const { return blocks_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Per-block weights, indexed by position in blocks().
  std::vector<TransformerAdapterWeights>& transformer_weights() { return transformer_; }
  std::vector<ResidualAdapterWeights>& residual_weights() { return residual_; }

  void begin_block(BlockKind kind, std::size_t block, const Tensor* condition) override;
  Tensor tap(PositionId pos, std::size_t block, const Tensor& value) override;

  /// Copies parameter values from another bank with the same design and model.
  void copy_parameters_from(const AdapterBank& other);

 private:
  long slot_of(std::size_t block) const;
  Tensor compute(std::size_t slot, const Tensor& input) const;

  DesignPoint design_;
  PositionId write_site_;
  std::vector<std::size_t> blocks_;
  std::vector<long> slot_for_block_;
  std::vector<TransformerAdapterWeights> transformer_;
  std::vector<ResidualAdapterWeights> residual_;
  std::vector<NamedTensor> params_;
  std::optional<Tensor> pending_;
};

/// Validates the design point, freezes the backbone and builds a zero-initialised bank.
AdapterBank inject(UNet& model, const DesignPoint& design, std::uint64_t seed,
                   std::optional<PositionId> write_site = std::nullopt);

struct ParameterCounts {
  std::size_t backbone = 0;
  std::size_t adapter = 0;
  double fraction = 0.0;  // adapter / backbone
};

ParameterCounts count_parameters(const UNet& model, const AdapterBank* bank);

/// Parameter count of `design` on `model` without instantiating it.
std::size_t adapter_parameter_count(const UNet& model, const DesignPoint& design);

/// Largest rank whose adapter/backbone fraction stays within `budget_fraction`.
/// Throws ConfigError when rank 1 already exceeds the budget.
std::size_t solve_rank_for_budget(const UNet& model, const DesignPoint& design,
                                  double budget_fraction);

}  // namespace adapterlab
