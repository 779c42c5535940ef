#include "adapterlab/unet.hpp"

#include <cmath>
#include <cstring>

#include "adapterlab/rng.hpp"

namespace adapterlab {

void UNetConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string("UNetConfig: ") + what + " must be positive");
  };
  positive(in_channels, "in_channels");
  positive(image_size, "image_size");
  positive(base_channels, "base_channels");
  positive(cond_dim, "cond_dim");
  positive(ffn_mult, "ffn_mult");
  positive(time_dim, "time_dim");
  positive(time_embed_dim, "time_embed_dim");
  positive(groups, "groups");
  positive(timesteps, "timesteps");
  if (channel_mult.empty()) throw ConfigError("UNetConfig: channel_mult is empty");
  for (auto m : channel_mult) positive(m, "channel multiplier");
  if (heads != 1) throw ConfigError("UNetConfig: only single-head attention is supported");
  if (time_dim % 2 != 0) throw ConfigError("UNetConfig: time_dim must be even");
  const std::size_t down = std::size_t{1} << (channel_mult.size() - 1);
  if (image_size % down != 0) {
    throw ConfigError("UNetConfig: image_size " + std::to_string(image_size) +
                      " not divisible by 2^(levels-1)");
  }
  for (auto l : transformer_levels) {
    if (l >= channel_mult.size()) throw ConfigError("UNetConfig: transformer level out of range");
  }
}

bool UNetConfig::has_transformer(std::size_t level) const {
  if (transformer_levels.empty()) return true;
  for (auto l : transformer_levels)
    if (l == level) return true;
  return false;
}

nlohmann::json UNetConfig::to_json() const {
  return {{"in_channels", in_channels},   {"image_size", image_size},
          {"base_channels", base_channels}, {"channel_mult", channel_mult},
          {"cond_dim", cond_dim},         {"ffn_mult", ffn_mult},
          {"time_dim", time_dim},         {"time_embed_dim", time_embed_dim},
          {"groups", groups},             {"heads", heads},
          {"timesteps", timesteps},       {"transformer_levels", transformer_levels}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("in_channels", c.in_channels);
  get("image_size", c.image_size);
  get("base_channels", c.base_channels);
  get("channel_mult", c.channel_mult);
  get("cond_dim", c.cond_dim);
  get("ffn_mult", c.ffn_mult);
  get("time_dim", c.time_dim);
  get("time_embed_dim", c.time_embed_dim);
  get("groups", c.groups);
  get("heads", c.heads);
  get("timesteps", c.timesteps);
  get("transformer_levels", c.transformer_levels);
  c.validate();
  return c;
}

std::uint64_t UNetConfig::hash() const { return fnv1a(to_json().dump()); }

std::size_t group_count_for(std::size_t channels, std::size_t preferred) {
  for (std::size_t g = std::min(channels, preferred); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: incompatible Q " + shape_string(q.shape()) + ", K " +
                         shape_string(k.shape()) + ", V " + shape_string(v.shape()));
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), inv)), v);
}

Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
           const Tensor& b2) {
  return add_row_bias(matmul(activation(add_row_bias(matmul(x, w1), b1), Activation::relu), w2),
                      b2);
}

Tensor timestep_embedding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                 static_cast<double>(half));
    v[i] = std::sin(t * freq);
    v[half + i] = std::cos(t * freq);
  }
  return Tensor({1, dim}, std::move(v));
}

namespace {

Tensor tap_or_pass(TapSink* sink, PositionId pos, std::size_t block, const Tensor& value) {
  return sink ? sink->tap(pos, block, value) : value;
}

}  // namespace

Tensor TransformerBlock::forward(const Tensor& x_in, const Tensor& c_in, std::size_t index,
                                 TapSink* sink) const {
  if (c_in.rank() != 2 || c_in.dim(1) != cond_dim) {
    throw DimensionError("transformer block: condition must be [m x " + std::to_string(cond_dim) +
                         "], got " + shape_string(c_in.shape()));
  }
  if (sink) sink->begin_block(BlockKind::transformer, index, &c_in);

  const Tensor x = tap_or_pass(sink, PositionId::SA_in, index, x_in);
  const Tensor n1 = layer_norm(x, ln1_g, ln1_b);
  Tensor sa = matmul(attention(matmul(n1, sa_q), matmul(n1, sa_k), matmul(n1, sa_v)), sa_o);
  sa = tap_or_pass(sink, PositionId::SA_out, index, sa);

  const Tensor h1 = tap_or_pass(sink, PositionId::CA_in, index, add(x, sa));
  const Tensor c = tap_or_pass(sink, PositionId::CA_c, index, c_in);
  const Tensor n2 = layer_norm(h1, ln2_g, ln2_b);
  Tensor ca = matmul(attention(matmul(n2, ca_q), matmul(c, ca_k), matmul(c, ca_v)), ca_o);
  ca = tap_or_pass(sink, PositionId::CA_out, index, ca);

  const Tensor h2 = tap_or_pass(sink, PositionId::FFN_in, index, add(h1, ca));
  Tensor f = ffn(layer_norm(h2, ln3_g, ln3_b), ff_w1, ff_b1, ff_w2, ff_b2);
  f = tap_or_pass(sink, PositionId::FFN_out, index, f);

  return tap_or_pass(sink, PositionId::Trans_out, index, add(h2, f));
}

Tensor ResidualBlock::forward(const Tensor& x_in, const Tensor& temb, std::size_t index,
                              TapSink* sink) const {
  if (x_in.rank() != 3 || x_in.dim(0) != in_channels) {
    throw DimensionError("residual block: expected " + std::to_string(in_channels) +
                         " input channels, got " + shape_string(x_in.shape()));
  }
  if (sink) sink->begin_block(BlockKind::residual, index, nullptr);

  const Tensor x = tap_or_pass(sink, PositionId::Res_in, index, x_in);
  Tensor h = conv2d(activation(group_norm(x, groups_in, gn1_g, gn1_b), Activation::silu), conv1_w,
                    conv1_b);
  h = add_channel_bias(h, time_proj(activation(temb, Activation::silu)));
  h = conv2d(activation(group_norm(h, groups_out, gn2_g, gn2_b), Activation::silu), conv2_w,
             conv2_b);
  const Tensor skip = skip_w ? conv2d(x, *skip_w, *skip_b) : x;
  return tap_or_pass(sink, PositionId::Res_out, index, add(h, skip));
}

Tensor UNet::add_param(const std::string& name, Tensor t) {
  params_.push_back({name, t});
  return t;
}

TransformerBlock UNet::make_transformer(const std::string& p, std::size_t dim, Rng& rng) {
  TransformerBlock b;
  b.dim = dim;
  b.cond_dim = config_.cond_dim;
  const std::size_t dm = config_.ffn_mult * dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  const double sc = 1.0 / std::sqrt(static_cast<double>(config_.cond_dim));
  const double sm = 1.0 / std::sqrt(static_cast<double>(dm));
  auto ones = [](std::size_t n) { return Tensor({n}, 1.0); };
  auto zeros = [](std::size_t n) { return Tensor({n}, 0.0); };
  b.ln1_g = add_param(p + ".ln1.gamma", ones(dim));
  b.ln1_b = add_param(p + ".ln1.beta", zeros(dim));
  b.sa_q = add_param(p + ".sa.wq", rng.normal_tensor({dim, dim}, sd));
  b.sa_k = add_param(p + ".sa.wk", rng.normal_tensor({dim, dim}, sd));
  b.sa_v = add_param(p + ".sa.wv", rng.normal_tensor({dim, dim}, sd));
  b.sa_o = add_param(p + ".sa.wo", rng.normal_tensor({dim, dim}, sd));
  b.ln2_g = add_param(p + ".ln2.gamma", ones(dim));
  b.ln2_b = add_param(p + ".ln2.beta", zeros(dim));
  b.ca_q = add_param(p + ".ca.wq", rng.normal_tensor({dim, dim}, sd));
  b.ca_k = add_param(p + ".ca.wk", rng.normal_tensor({config_.cond_dim, dim}, sc));
  b.ca_v = add_param(p + ".ca.wv", rng.normal_tensor({config_.cond_dim, dim}, sc));
  b.ca_o = add_param(p + ".ca.wo", rng.normal_tensor({dim, dim}, sd));
  b.ln3_g = add_param(p + ".ln3.gamma", ones(dim));
  b.ln3_b = add_param(p + ".ln3.beta", zeros(dim));
  b.ff_w1 = add_param(p + ".ffn.w1", rng.normal_tensor({dim, dm}, sd));
  b.ff_b1 = add_param(p + ".ffn.b1", zeros(dm));
  b.ff_w2 = add_param(p + ".ffn.w2", rng.normal_tensor({dm, dim}, sm));
  b.ff_b2 = add_param(p + ".ffn.b2", zeros(dim));
  return b;
}

ResidualBlock UNet::make_residual(const std::string& p, std::size_t cin, std::size_t cout,
                                  Rng& rng) {
  ResidualBlock b;
  b.in_channels = cin;
  b.out_channels = cout;
  b.groups_in = group_count_for(cin, config_.groups);
  b.groups_out = group_count_for(cout, config_.groups);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(cin * 9));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(cout * 9));
  const double st = 1.0 / std::sqrt(static_cast<double>(config_.time_embed_dim));
  b.gn1_g = add_param(p + ".gn1.gamma", Tensor({cin}, 1.0));
  b.gn1_b = add_param(p + ".gn1.beta", Tensor({cin}, 0.0));
  b.conv1_w = add_param(p + ".conv1.w", rng.normal_tensor({cout, cin, 3, 3}, s1));
  b.conv1_b = add_param(p + ".conv1.b", Tensor({cout}, 0.0));
  b.time_proj.weight =
      add_param(p + ".time_proj.w", rng.normal_tensor({config_.time_embed_dim, cout}, st));
  b.time_proj.bias = add_param(p + ".time_proj.b", Tensor({cout}, 0.0));
  b.gn2_g = add_param(p + ".gn2.gamma", Tensor({cout}, 1.0));
  b.gn2_b = add_param(p + ".gn2.beta", Tensor({cout}, 0.0));
  b.conv2_w = add_param(p + ".conv2.w", rng.normal_tensor({cout, cout, 3, 3}, s2));
  b.conv2_b = add_param(p + ".conv2.b", Tensor({cout}, 0.0));
  if (cin != cout) {
    b.skip_w = add_param(p + ".skip.w",
                         rng.normal_tensor({cout, cin, 1, 1}, 1.0 / std::sqrt(double(cin))));
    b.skip_b = add_param(p + ".skip.b", Tensor({cout}, 0.0));
  }
  return b;
}

UNet::UNet(UNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  const std::size_t te = c.time_embed_dim;
  time_mlp1_.weight = add_param("time.mlp1.w", rng.normal_tensor({c.time_dim, te},
                                                                 1.0 / std::sqrt(double(c.time_dim))));
  time_mlp1_.bias = add_param("time.mlp1.b", Tensor({te}, 0.0));
  time_mlp2_.weight = add_param("time.mlp2.w", rng.normal_tensor({te, te}, 1.0 / std::sqrt(double(te))));
  time_mlp2_.bias = add_param("time.mlp2.b", Tensor({te}, 0.0));

  const std::size_t c0 = c.base_channels * c.channel_mult[0];
  conv_in_w_ = add_param("conv_in.w", rng.normal_tensor({c0, c.in_channels, 3, 3},
                                                        1.0 / std::sqrt(double(c.in_channels * 9))));
  conv_in_b_ = add_param("conv_in.b", Tensor({c0}, 0.0));

  const std::size_t levels = c.channel_mult.size();
  std::vector<std::size_t> ch(levels);
  for (std::size_t l = 0; l < levels; ++l) ch[l] = c.base_channels * c.channel_mult[l];

  auto add_block = [&](const std::string& name, std::size_t cin, std::size_t cout,
                       std::size_t level) {
    const std::size_t res = c.image_size >> level;
    residuals_.push_back(make_residual(name + ".res", cin, cout, rng));
    residual_res_.push_back(res);
    if (c.has_transformer(level)) {
      block_transformer_.push_back(static_cast<long>(transformers_.size()));
      transformers_.push_back(make_transformer(name + ".trans", cout, rng));
      transformer_res_.push_back(res);
    } else {
      block_transformer_.push_back(-1);
    }
  };

  std::size_t prev = c0;
  for (std::size_t l = 0; l < levels; ++l) {
    add_block("enc" + std::to_string(l), prev, ch[l], l);
    prev = ch[l];
  }
  add_block("mid", prev, prev, levels - 1);
  for (std::size_t l = levels; l-- > 0;) {
    add_block("dec" + std::to_string(l), prev + ch[l], ch[l], l);
    prev = ch[l];
  }

  out_groups_ = group_count_for(prev, c.groups);
  out_gn_g_ = add_param("out.gn.gamma", Tensor({prev}, 1.0));
  out_gn_b_ = add_param("out.gn.beta", Tensor({prev}, 0.0));
  conv_out_w_ = add_param("conv_out.w", rng.normal_tensor({c.in_channels, prev, 3, 3},
                                                          0.1 / std::sqrt(double(prev * 9))));
  conv_out_b_ = add_param("conv_out.b", Tensor({c.in_channels}, 0.0));
}

Tensor UNet::forward(const Tensor& x_t, double t, const Tensor& c, TapSink* sink) const {
  const auto& cfg = config_;
  if (x_t.shape() != Shape{cfg.in_channels, cfg.image_size, cfg.image_size}) {
    throw DimensionError("unet: input must be " +
                         shape_string({cfg.in_channels, cfg.image_size, cfg.image_size}) +
                         ", got " + shape_string(x_t.shape()));
  }
  if (!(t >= 0.0 && t <= static_cast<double>(cfg.timesteps))) {
    throw ConfigError("unet: timestep " + std::to_string(t) + " outside [0, " +
                      std::to_string(cfg.timesteps) + "]");
  }
  if (c.rank() != 2 || c.dim(1) != cfg.cond_dim) {
    throw DimensionError("unet: condition must be [m x " + std::to_string(cfg.cond_dim) +
                         "], got " + shape_string(c.shape()));
  }

  const Tensor temb =
      time_mlp2_(activation(time_mlp1_(timestep_embedding(t, cfg.time_dim)), Activation::silu));

  std::size_t block = 0;
  auto run_block = [&](const Tensor& x) {
    Tensor h = residuals_[block].forward(x, temb, block, sink);
    const long ti = block_transformer_[block];
    if (ti >= 0) {
      const std::size_t side = h.dim(1), width = h.dim(2);
      h = from_tokens(transformers_[static_cast<std::size_t>(ti)].forward(
                          to_tokens(h), c, static_cast<std::size_t>(ti), sink),
                      side, width);
    }
    ++block;
    return h;
  };

  const std::size_t levels = cfg.channel_mult.size();
  Tensor h = conv2d(x_t, conv_in_w_, conv_in_b_);
  std::vector<Tensor> skips;
  for (std::size_t l = 0; l < levels; ++l) {
    h = run_block(h);
    skips.push_back(h);
    if (l + 1 < levels) h = avg_pool2(h);
  }
  h = run_block(h);
  for (std::size_t l = levels; l-- > 0;) {
    h = run_block(concat_channels(h, skips[l]));
    if (l > 0) h = upsample2(h);
  }
  h = activation(group_norm(h, out_groups_, out_gn_g_, out_gn_b_), Activation::silu);
  return conv2d(h, conv_out_w_, conv_out_b_);
}

std::size_t UNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void UNet::set_trainable(bool on) {
  for (auto& p : params_) p.value.set_requires_grad(on);
}

UNet UNet::clone() const {
  UNet copy(config_, 0);
  copy.copy_parameters_from(*this);
  return copy;
}

void UNet::copy_parameters_from(const UNet& other) {
  if (other.params_.size() != params_.size()) {
    throw DimensionError("copy_parameters_from: parameter lists differ");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = params_[i].value.mutable_data();
    const auto src = other.params_[i].value.data();
    if (dst.size() != src.size() || params_[i].name != other.params_[i].name) {
      throw DimensionError("copy_parameters_from: mismatch at " + params_[i].name);
    }
    std::copy(src.begin(), src.end(), dst.begin());
    params_[i].value.set_requires_grad(other.params_[i].value.requires_grad());
  }
}

std::uint64_t UNet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    for (double v : p.value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace adapterlab
