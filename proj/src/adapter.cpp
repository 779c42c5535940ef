#include "adapterlab/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "adapterlab/rng.hpp"

namespace adapterlab {

namespace {

constexpr double kDownInitStd = 0.02;

std::string format_scale(double s) {
  std::ostringstream os;
  os.precision(15);
  os << s;
  return os.str();
}

std::vector<std::size_t> all_blocks(const UNet& model, BlockKind kind) {
  const std::size_t n =
      kind == BlockKind::transformer ? model.transformer_count() : model.residual_count();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

std::vector<std::size_t> target_blocks(const UNet& model, const DesignPoint& d) {
  if (d.blocks.empty()) return all_blocks(model, d.kind());
  const std::size_t n =
      d.kind() == BlockKind::transformer ? model.transformer_count() : model.residual_count();
  for (auto b : d.blocks) {
    if (b >= n) {
      throw ConfigError("design point targets " + std::string(to_string(d.kind())) + " block " +
                        std::to_string(b) + " but the model has " + std::to_string(n));
    }
  }
  return d.blocks;
}

/// Feature width at a transformer-block site.
std::size_t transformer_site_dim(const UNet& model, std::size_t block, PositionId pos) {
  return is_condition_site(pos) ? model.config().cond_dim : model.transformer(block).dim;
}

std::size_t residual_site_channels(const UNet& model, std::size_t block, PositionId pos) {
  const auto& r = model.residual(block);
  return pos == PositionId::Res_in ? r.in_channels : r.out_channels;
}

std::size_t block_adapter_count(const UNet& model, const DesignPoint& d, std::size_t block,
                                std::size_t rank) {
  const PositionId site = canonical_site(d.output);
  if (d.kind() == BlockKind::transformer) {
    return rank * (transformer_site_dim(model, block, d.input) +
                   transformer_site_dim(model, block, site));
  }
  const std::size_t cin = residual_site_channels(model, block, d.input);
  const std::size_t cout = residual_site_channels(model, block, site);
  return 9 * cin * rank + rank + 9 * rank * cout + cout + 2 * cin;
}

}  // namespace

std::string DesignPoint::to_string() const {
  std::string s = "in=" + std::string(adapterlab::to_string(input)) +
                  ",out=" + adapterlab::to_string(output) +
                  ",act=" + std::string(adapterlab::to_string(act)) + ",s=" + format_scale(scale) +
                  ",r=" + std::to_string(rank);
  if (!blocks.empty()) {
    s += ",blocks=";
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (i) s += '|';
      s += std::to_string(blocks[i]);
    }
  }
  return s;
}

DesignPoint DesignPoint::parse(std::string_view text) {
  DesignPoint d;
  bool has_in = false, has_out = false;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const auto field = text.substr(pos, comma - pos);
    pos = comma + 1;
    if (field.empty()) {
      if (comma == text.size()) break;
      continue;
    }
    const auto eq = field.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("design point field '" + std::string(field) + "' lacks '='");
    }
    const auto key = field.substr(0, eq);
    const std::string value(field.substr(eq + 1));
    try {
      if (key == "in") {
        d.input = parse_position(value);
        has_in = true;
      } else if (key == "out") {
        d.output = parse_output_class(value);
        has_out = true;
      } else if (key == "act") {
        d.act = parse_activation(value);
      } else if (key == "s") {
        std::size_t used = 0;
        d.scale = std::stod(value, &used);
        if (used != value.size()) throw ConfigError("bad scale");
      } else if (key == "r") {
        std::size_t used = 0;
        const long r = std::stol(value, &used);
        if (used != value.size() || r < 0) throw ConfigError("bad rank");
        d.rank = static_cast<std::size_t>(r);
      } else if (key == "blocks") {
        std::size_t p = 0;
        while (p < value.size()) {
          const auto bar = std::min(value.find('|', p), value.size());
          d.blocks.push_back(static_cast<std::size_t>(std::stoul(value.substr(p, bar - p))));
          p = bar + 1;
        }
      } else {
        throw ConfigError("unknown design point key '" + std::string(key) + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("cannot parse design point field '" + std::string(field) + "'");
    }
  }
  if (!has_in || !has_out) {
    throw ConfigError("design point '" + std::string(text) + "' needs both in= and out=");
  }
  d.validate();
  return d;
}

void DesignPoint::validate() const {
  std::string problems;
  if (kind_of(input) != kind_of(output)) {
    problems += "input " + std::string(adapterlab::to_string(input)) + " and output " +
                adapterlab::to_string(output) + " belong to different sub-block kinds";
  }
  if (stage_of(output) < stage_of(input)) {
    if (!problems.empty()) problems += "; ";
    problems += "output " + adapterlab::to_string(output) + " is placed before input " +
                std::string(adapterlab::to_string(input));
  }
  if (!std::isfinite(scale)) {
    if (!problems.empty()) problems += "; ";
    problems += "scale must be finite";
  }
  if (!problems.empty()) throw ConstraintError("invalid design point: " + problems);
}

bool is_valid_pair(PositionId input, OutputClass output) {
  return kind_of(input) == kind_of(output) && stage_of(output) >= stage_of(input);
}

OutputClass nearest_output_class(PositionId input) { return class_of(input); }

std::vector<DesignPoint> enumerate_design_space(const std::vector<Activation>& activations,
                                                const std::vector<double>& scales,
                                                std::size_t rank) {
  std::vector<DesignPoint> out;
  for (auto in : kAllPositions)
    for (auto cls : kAllOutputClasses) {
      if (!is_valid_pair(in, cls)) continue;
      for (auto act : activations)
        for (double s : scales) {
          DesignPoint d;
          d.input = in;
          d.output = cls;
          d.act = act;
          d.scale = s;
          d.rank = rank;
          out.push_back(d);
        }
    }
  return out;
}

Tensor transformer_adapter_apply(const Tensor& x, const TransformerAdapterWeights& w,
                                 Activation act, double s) {
  if (x.rank() != 2 || x.dim(1) != w.down.dim(0)) {
    throw DimensionError("transformer adapter: input " + shape_string(x.shape()) +
                         " does not match W_down " + shape_string(w.down.shape()));
  }
  return scale(matmul(activation(matmul(x, w.down), act), w.up), s);
}

Tensor residual_adapter_apply(const Tensor& x, const ResidualAdapterWeights& w, Activation act,
                              double s) {
  if (x.rank() != 3 || x.dim(0) != w.down_w.dim(1)) {
    throw DimensionError("residual adapter: input " + shape_string(x.shape()) +
                         " does not match Conv_down " + shape_string(w.down_w.shape()));
  }
  const Tensor h = group_norm(x, w.groups, w.gn_g, w.gn_b);
  return scale(conv2d(activation(conv2d(h, w.down_w, w.down_b), act), w.up_w, w.up_b), s);
}

AdapterBank::AdapterBank(const UNet& model, DesignPoint design, std::uint64_t seed,
                         std::optional<PositionId> write_site)
    : design_(std::move(design)) {
  design_.validate();
  write_site_ = write_site.value_or(canonical_site(design_.output));
  if (class_of(write_site_) != design_.output) {
    throw ConstraintError("write site " + std::string(to_string(write_site_)) +
                          " is not a member of output class " + to_string(design_.output));
  }
  if (tap_order(write_site_) < read_order(design_.input)) {
    throw ConstraintError("write site " + std::string(to_string(write_site_)) +
                          " fires before input " + std::string(to_string(design_.input)) +
                          " is read");
  }
  blocks_ = target_blocks(model, design_);
  const std::size_t total = design_.kind() == BlockKind::transformer ? model.transformer_count()
                                                                     : model.residual_count();
  slot_for_block_.assign(total, -1);

  Rng rng(seed);
  const std::size_t r = design_.rank;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::size_t b = blocks_[i];
    slot_for_block_[b] = static_cast<long>(i);
    const std::string prefix = "adapter.b" + std::to_string(b);
    if (design_.kind() == BlockKind::transformer) {
      const std::size_t din = transformer_site_dim(model, b, design_.input);
      const std::size_t dout = transformer_site_dim(model, b, write_site_);
      if (r > std::min(din, dout)) {
        throw ConfigError("adapter rank " + std::to_string(r) + " exceeds feature width " +
                          std::to_string(std::min(din, dout)));
      }
      TransformerAdapterWeights w;
      w.down = rng.normal_tensor({din, r}, kDownInitStd);
      w.up = Tensor({r, dout}, 0.0);
      params_.push_back({prefix + ".down", w.down});
      params_.push_back({prefix + ".up", w.up});
      transformer_.push_back(std::move(w));
    } else {
      const std::size_t cin = residual_site_channels(model, b, design_.input);
      const std::size_t cout = residual_site_channels(model, b, write_site_);
      ResidualAdapterWeights w;
      w.groups = group_count_for(cin, model.config().groups);
      w.gn_g = Tensor({cin}, 1.0);
      w.gn_b = Tensor({cin}, 0.0);
      w.down_w = rng.normal_tensor({r, cin, 3, 3}, kDownInitStd);
      w.down_b = Tensor({r}, 0.0);
      w.up_w = Tensor({cout, r, 3, 3}, 0.0);
      w.up_b = Tensor({cout}, 0.0);
      params_.push_back({prefix + ".gn.gamma", w.gn_g});
      params_.push_back({prefix + ".gn.beta", w.gn_b});
      params_.push_back({prefix + ".down.w", w.down_w});
      params_.push_back({prefix + ".down.b", w.down_b});
      params_.push_back({prefix + ".up.w", w.up_w});
      params_.push_back({prefix + ".up.b", w.up_b});
      residual_.push_back(std::move(w));
    }
  }
  for (auto& p : params_) p.value.set_requires_grad(true);
}

std::size_t AdapterBank::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

long AdapterBank::slot_of(std::size_t block) const {
  return block < slot_for_block_.size() ? slot_for_block_[block] : -1;
}

Tensor AdapterBank::compute(std::size_t slot, const Tensor& input) const {
  if (design_.kind() == BlockKind::transformer) {
    return transformer_adapter_apply(input, transformer_[slot], design_.act, design_.scale);
  }
  return residual_adapter_apply(input, residual_[slot], design_.act, design_.scale);
}

void AdapterBank::begin_block(BlockKind kind, std::size_t block, const Tensor* condition) {
  if (kind != design_.kind()) return;
  pending_.reset();
  const long slot = slot_of(block);
  if (slot < 0) return;
  if (design_.input == PositionId::CA_c) {
    if (condition == nullptr) throw ContractError("CA_c adapter entered a block without condition");
    pending_ = compute(static_cast<std::size_t>(slot), *condition);
  }
}

Tensor AdapterBank::tap(PositionId pos, std::size_t block, const Tensor& value) {
  if (kind_of(pos) != design_.kind()) return value;
  const long slot = slot_of(block);
  if (slot < 0) return value;
  if (pos == design_.input && design_.input != PositionId::CA_c) {
    pending_ = compute(static_cast<std::size_t>(slot), value);
  }
  if (pos != write_site_) return value;
  if (!pending_) throw ContractError("adapter write at " + std::string(to_string(pos)) +
                                     " before its input was read");
  Tensor delta = std::move(*pending_);
  pending_.reset();
  if (is_condition_site(design_.input) != is_condition_site(write_site_)) {
    // Image tokens and condition tokens have different row counts.
    delta = broadcast_rows(mean_rows(delta), value.dim(0));
  }
  return add(value, delta);
}

void AdapterBank::copy_parameters_from(const AdapterBank& other) {
  if (other.design_ != design_ || other.params_.size() != params_.size()) {
    throw DimensionError("copy_parameters_from: adapter banks differ");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto src = other.params_[i].value.data();
    auto dst = params_[i].value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

AdapterBank inject(UNet& model, const DesignPoint& design, std::uint64_t seed,
                   std::optional<PositionId> write_site) {
  model.set_trainable(false);
  return AdapterBank(model, design, seed, write_site);
}

ParameterCounts count_parameters(const UNet& model, const AdapterBank* bank) {
  ParameterCounts c;
  c.backbone = model.parameter_count();
  c.adapter = bank ? bank->parameter_count() : 0;
  c.fraction = static_cast<double>(c.adapter) / static_cast<double>(c.backbone);
  return c;
}

std::size_t adapter_parameter_count(const UNet& model, const DesignPoint& design) {
  std::size_t n = 0;
  for (auto b : target_blocks(model, design)) n += block_adapter_count(model, design, b, design.rank);
  return n;
}

std::size_t solve_rank_for_budget(const UNet& model, const DesignPoint& design,
                                  double budget_fraction) {
  if (!(budget_fraction > 0.0 && budget_fraction < 1.0)) {
    throw ConfigError("budget fraction must lie in (0, 1)");
  }
  design.validate();
  // a budget given exactly at some rank's fraction must admit that rank despite rounding
  const double budget =
      budget_fraction * static_cast<double>(model.parameter_count()) * (1.0 + 1e-12);
  std::size_t cap = 1u << 20;
  if (design.kind() == BlockKind::transformer) {
    const PositionId site = canonical_site(design.output);
    for (auto b : target_blocks(model, design)) {
      cap = std::min({cap, transformer_site_dim(model, b, design.input),
                      transformer_site_dim(model, b, site)});
    }
  }
  DesignPoint probe = design;
  probe.rank = 1;
  if (static_cast<double>(adapter_parameter_count(model, probe)) > budget) {
    throw ConfigError("budget " + format_scale(budget_fraction) + " (" +
                      std::to_string(static_cast<std::size_t>(budget)) +
                      " parameters) is below the rank-1 cost of " +
                      std::to_string(adapter_parameter_count(model, probe)) + " for " +
                      design.to_string());
  }
  std::size_t best = 1;
  for (std::size_t r = 2; r <= cap; ++r) {
    probe.rank = r;
    if (static_cast<double>(adapter_parameter_count(model, probe)) > budget) break;
    best = r;
  }
  return best;
}

}  // namespace adapterlab
