#include <gtest/gtest.h>

#include <map>
#include <set>
#include <string>

#include "adapterlab/adapter.hpp"
#include "adapterlab/sweep.hpp"
#include "support.hpp"

using namespace adapterlab;
using testing_support::bit_equal;
using testing_support::max_abs_diff;
using testing_support::random_tensor;
using testing_support::tiny_config;

namespace {

const std::vector<Activation> kActs = {Activation::relu, Activation::sigmoid, Activation::silu,
                                       Activation::identity};
const std::vector<double> kScales = {0.5, 1.0, 2.0, 4.0};

/// Stage table and classes written out independently of the library.
struct OraclePos {
  std::string name;
  bool transformer;
  int stage;
};
const std::vector<OraclePos> kOraclePositions = {
    {"SA_in", true, 0},  {"SA_out", true, 1},  {"CA_in", true, 1},     {"CA_c", true, 1},
    {"CA_out", true, 2}, {"FFN_in", true, 2},  {"FFN_out", true, 3},   {"Trans_out", true, 3},
    {"Res_in", false, 0}, {"Res_out", false, 1},
};
const std::vector<std::vector<std::string>> kOracleClasses = {
    {"SA_in"}, {"SA_out", "CA_in"}, {"CA_c"}, {"CA_out", "FFN_in"}, {"FFN_out", "Trans_out"},
    {"Res_in"}, {"Res_out"},
};

const OraclePos& oracle(const std::string& name) {
  for (const auto& p : kOraclePositions)
    if (p.name == name) return p;
  throw std::logic_error(name);
}

std::size_t brute_force_pair_count() {
  std::size_t n = 0;
  for (const auto& in : kOraclePositions) {
    for (const auto& cls : kOracleClasses) {
      const auto& out = oracle(cls.front());
      if (out.transformer == in.transformer && out.stage >= in.stage) ++n;
    }
  }
  return n;
}

/// Gives every up-projection nonzero values so the adapter actually acts.
void randomize(AdapterBank& bank, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : bank.parameters())
    for (auto& v : p.value.mutable_data()) v = 0.3 * rng.normal();
}

struct Inputs {
  Tensor x, c;
  double t;
};
Inputs sample_inputs(const UNetConfig& cfg, std::uint64_t seed) {
  return {random_tensor({cfg.in_channels, cfg.image_size, cfg.image_size}, seed),
          random_tensor({5, cfg.cond_dim}, seed + 1), 250.0};
}

}  // namespace

TEST(Positions, TaxonomySizes) {
  EXPECT_EQ(kAllPositions.size(), 10u);
  EXPECT_EQ(kAllOutputClasses.size(), 7u);
  std::size_t members_total = 0;
  for (auto c : kAllOutputClasses) members_total += members(c).size();
  EXPECT_EQ(members_total, 10u);
  for (auto p : kAllPositions) {
    EXPECT_EQ(parse_position(to_string(p)), p);
    const auto& o = oracle(std::string(to_string(p)));
    EXPECT_EQ(stage_of(p), o.stage) << to_string(p);
    EXPECT_EQ(kind_of(p) == BlockKind::transformer, o.transformer);
  }
  EXPECT_EQ(parse_output_class("CA_out/FFN_in"), OutputClass::FFN_in);
  EXPECT_EQ(parse_output_class("FFN_in/CA_out"), OutputClass::FFN_in);
  EXPECT_EQ(parse_output_class("SA_out"), OutputClass::CA_in);
  EXPECT_THROW(parse_output_class("SA_in/CA_c"), ConfigError);
  EXPECT_THROW(parse_position("MLP_in"), ConfigError);
}

TEST(DesignSpace, PairCountMatchesBruteForce) {
  std::set<std::pair<PositionId, OutputClass>> pairs;
  for (const auto& d : enumerate_design_space(kActs, kScales)) pairs.insert({d.input, d.output});
  EXPECT_EQ(pairs.size(), brute_force_pair_count());
  EXPECT_EQ(pairs.size(), 26u);
  EXPECT_EQ(enumerate_design_space(kActs, kScales).size(), 26u * 16u);
  for (auto in : kAllPositions) {
    for (auto out : kAllOutputClasses) {
      const auto& oi = oracle(std::string(to_string(in)));
      const auto& oo = oracle(std::string(to_string(canonical_site(out))));
      EXPECT_EQ(is_valid_pair(in, out), oi.transformer == oo.transformer && oo.stage >= oi.stage);
    }
  }
}

TEST(DesignSpace, ExcludedPairsAndOrder) {
  EXPECT_FALSE(is_valid_pair(PositionId::Trans_out, OutputClass::SA_in));
  EXPECT_FALSE(is_valid_pair(PositionId::Res_out, OutputClass::FFN_in));
  const auto all = enumerate_design_space({Activation::relu}, {1.0});
  EXPECT_EQ(all.front().input, PositionId::SA_in);
  EXPECT_EQ(all.back().input, PositionId::Res_out);
  for (auto p : kAllPositions) EXPECT_TRUE(is_valid_pair(p, nearest_output_class(p)));
  EXPECT_EQ(nearest_output_class(PositionId::CA_out), OutputClass::FFN_in);
}

TEST(DesignPoint, StringRoundTripAndValidation) {
  for (const auto& d : enumerate_design_space(kActs, kScales, 3)) {
    EXPECT_EQ(DesignPoint::parse(d.to_string()), d) << d.to_string();
  }
  auto d = DesignPoint::parse("in=CA_out,out=FFN_in/CA_out,act=identity,s=1,r=4");
  EXPECT_EQ(d.input, PositionId::CA_out);
  EXPECT_EQ(d.rank, 4u);
  d.blocks = {0, 2};
  EXPECT_EQ(DesignPoint::parse(d.to_string()), d);
  EXPECT_THROW(DesignPoint::parse("in=Trans_out,out=SA_in,act=relu,s=1,r=2"), ConstraintError);
  EXPECT_THROW(DesignPoint::parse("in=Res_out,out=FFN_in,act=relu,s=1,r=2"), ConstraintError);
  EXPECT_THROW(DesignPoint::parse("in=CA_out,out=FFN_in,act=relu,s=1,r=x"), ConfigError);
  EXPECT_THROW(DesignPoint::parse("in=CA_out,out=FFN_in,act=gelu,s=1,r=2"), ConfigError);
}

TEST(TransformerAdapter, ZeroUpScaleAndFormula) {
  const Tensor x = random_tensor({3, 4}, 1);
  TransformerAdapterWeights w{random_tensor({4, 2}, 2), Tensor({2, 4})};
  EXPECT_EQ(max_abs_diff(transformer_adapter_apply(x, w, Activation::silu, 2.0), Tensor({3, 4})), 0.0);

  w.up = random_tensor({2, 4}, 3);
  const Tensor one = transformer_adapter_apply(x, w, Activation::identity, 1.0);
  const Tensor two = transformer_adapter_apply(x, w, Activation::identity, 2.0);
  EXPECT_TRUE(bit_equal(two, scale(matmul(matmul(x, w.down), w.up), 2.0)));
  EXPECT_LT(max_abs_diff(two, scale(one, 2.0)), 1e-12);

  const Tensor out = transformer_adapter_apply(x, w, Activation::sigmoid, 0.5);
  for (std::size_t i = 0; i < 3; ++i) {
    double h[2] = {0, 0};
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t a = 0; a < 4; ++a) h[r] += x[i * 4 + a] * w.down[a * 2 + r];
      h[r] = 1.0 / (1.0 + std::exp(-h[r]));
    }
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_NEAR(out[i * 4 + c], 0.5 * (h[0] * w.up[c] + h[1] * w.up[4 + c]), 1e-12);
  }
  EXPECT_THROW(transformer_adapter_apply(random_tensor({3, 5}, 4), w, Activation::relu, 1.0),
               DimensionError);
}

TEST(ResidualAdapter, ZeroUpAndSpatialSize) {
  for (std::size_t hw : {4u, 8u, 16u}) {
    ResidualAdapterWeights w{2, Tensor({4}, 1.0), Tensor({4}), random_tensor({3, 4, 3, 3}, 5),
                             random_tensor({3}, 6), Tensor({4, 3, 3, 3}), Tensor({4})};
    const Tensor x = random_tensor({4, hw, hw}, 7);
    const Tensor y = residual_adapter_apply(x, w, Activation::relu, 1.0);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(max_abs_diff(y, Tensor(x.shape())), 0.0);
  }
  ResidualAdapterWeights w{2, Tensor({4}, 1.0), Tensor({4}), random_tensor({3, 4, 3, 3}, 5),
                           random_tensor({3}, 6), Tensor({4, 3, 3, 3}), Tensor({4})};
  EXPECT_THROW(residual_adapter_apply(random_tensor({3, 4, 4}, 1), w, Activation::relu, 1.0),
               DimensionError);
}

TEST(ResidualAdapter, ConstantInputFollowsBiasPath) {
  // GN of a constant plane is zero (0.75 keeps the mean exact), so Conv_down emits its bias;
  // Conv_up then sums act(bias) over the in-bounds taps of each pixel.
  const std::size_t cin = 4, mid = 3, cout = 2, hw = 4;
  const ResidualAdapterWeights w{2, Tensor({cin}, 1.0), Tensor({cin}), random_tensor({mid, cin, 3, 3}, 8),
                                 random_tensor({mid}, 9), random_tensor({cout, mid, 3, 3}, 10),
                                 random_tensor({cout}, 11)};
  const double s = 2.0;
  const Tensor y = residual_adapter_apply(Tensor({cin, hw, hw}, 0.75), w, Activation::silu, s);
  auto silu = [](double v) { return v / (1.0 + std::exp(-v)); };
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t i = 0; i < hw; ++i) {
      for (std::size_t j = 0; j < hw; ++j) {
        double acc = w.up_b[o];
        for (std::size_t m = 0; m < mid; ++m)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
              if (ii < 0 || jj < 0 || ii >= static_cast<long>(hw) || jj >= static_cast<long>(hw)) continue;
              acc += w.up_w[((o * mid + m) * 3 + (di + 1)) * 3 + (dj + 1)] * silu(w.down_b[m]);
            }
        EXPECT_NEAR(y[(o * hw + i) * hw + j], s * acc, 1e-12);
      }
    }
  }
}

TEST(Inject, ZeroInitIsBitExactNoOpForEveryDesignPoint) {
  const auto cfg = tiny_config();
  UNet model(cfg, 1);
  const auto in = sample_inputs(cfg, 20);
  const Tensor base = model.forward(in.x, in.t, in.c);
  for (const auto& d : enumerate_design_space(kActs, kScales, 2)) {
    AdapterBank bank = inject(model, d, 3);
    ASSERT_TRUE(bit_equal(model.forward(in.x, in.t, in.c, &bank), base)) << d.to_string();
  }
}

TEST(Inject, DownProjectionsSeededUpProjectionsZero) {
  UNet model(tiny_config(), 1);
  const auto d = DesignPoint::parse("in=SA_in,out=FFN_in,act=relu,s=1,r=2");
  AdapterBank a = inject(model, d, 5), b = inject(model, d, 5), c = inject(model, d, 6);
  EXPECT_TRUE(bit_equal(a.transformer_weights()[0].down, b.transformer_weights()[0].down));
  EXPECT_FALSE(bit_equal(a.transformer_weights()[0].down, c.transformer_weights()[0].down));
  for (const auto& w : a.transformer_weights()) {
    for (double v : w.up.data()) EXPECT_EQ(v, 0.0);
    double ss = 0;
    for (double v : w.down.data()) ss += v * v;
    EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.down.numel())), 0.02, 0.015);
  }
  EXPECT_EQ(a.blocks().size(), model.transformer_count());
  EXPECT_THROW(inject(model, DesignPoint{PositionId::Trans_out, OutputClass::SA_in}, 1), ConstraintError);
}

TEST(Inject, EquivalentWriteSitesGiveIdenticalOutputs) {
  const auto cfg = tiny_config();
  UNet model(cfg, 2);
  const auto in = sample_inputs(cfg, 30);
  const std::vector<std::pair<PositionId, PositionId>> pairs = {
      {PositionId::SA_out, PositionId::CA_in},
      {PositionId::CA_out, PositionId::FFN_in},
      {PositionId::FFN_out, PositionId::Trans_out},
  };
  for (auto input : {PositionId::SA_in, PositionId::CA_c}) {
    for (const auto& [first, second] : pairs) {
      DesignPoint d{input, class_of(first), Activation::silu, 2.0, 2, {}};
      if (!is_valid_pair(d.input, d.output)) continue;
      AdapterBank a(model, d, 7, first), b(model, d, 7, second);
      randomize(a, 8);
      b.copy_parameters_from(a);
      const Tensor ya = model.forward(in.x, in.t, in.c, &a);
      const Tensor yb = model.forward(in.x, in.t, in.c, &b);
      EXPECT_LT(max_abs_diff(ya, yb), 1e-12) << to_string(first) << " vs " << to_string(second);
      EXPECT_GT(max_abs_diff(ya, model.forward(in.x, in.t, in.c)), 1e-6);
    }
  }
}

TEST(Inject, BackboneFrozenAndOnlyBankTrains) {
  const auto cfg = tiny_config();
  UNet model(cfg, 3);
  const auto before = model.checksum();
  for (const auto& text : {"in=CA_out,out=FFN_in,act=identity,s=1,r=2", "in=Res_in,out=Res_out,act=relu,s=1,r=1",
                           "in=CA_c,out=CA_c,act=silu,s=1,r=2"}) {
    AdapterBank bank = inject(model, DesignPoint::parse(text), 4);
    std::vector<Tensor> params;
    std::vector<Tensor> snapshot;
    for (auto& p : bank.parameters()) {
      params.push_back(p.value);
      snapshot.push_back(p.value.clone());
    }
    const auto in = sample_inputs(cfg, 40);
    GradTape tape;
    {
      TapeScope scope(tape);
      tape.backward(mse(model.forward(in.x, in.t, in.c, &bank), Tensor(in.x.shape())));
    }
    double backbone_grad = 0.0;
    for (const auto& p : model.parameters())
      for (double g : p.value.grad()) backbone_grad = std::max(backbone_grad, std::abs(g));
    EXPECT_EQ(backbone_grad, 0.0);

    AdamW opt(params, 1e-2, 0.0);
    opt.step();
    EXPECT_EQ(model.checksum(), before);
    bool moved = false;
    for (std::size_t i = 0; i < params.size(); ++i) moved |= !bit_equal(params[i], snapshot[i]);
    EXPECT_TRUE(moved) << text;
  }
}

TEST(Inject, ConditionAdapterHandlesRowMismatch) {
  // CA_c is [m x d_c]; writing into image tokens needs the row reconciliation.
  const auto cfg = tiny_config();
  UNet model(cfg, 4);
  AdapterBank bank(model, DesignPoint::parse("in=CA_c,out=FFN_in,act=identity,s=1,r=2"), 5);
  randomize(bank, 6);
  const auto in = sample_inputs(cfg, 50);
  const Tensor y = model.forward(in.x, in.t, in.c, &bank);
  EXPECT_EQ(y.shape(), in.x.shape());
  EXPECT_GT(max_abs_diff(y, model.forward(in.x, in.t, in.c)), 1e-6);
}

TEST(Counting, TransformerAndResidualForms) {
  const UNet model(ExperimentConfig::default_model(), 1);
  auto d = DesignPoint::parse("in=SA_in,out=SA_in,act=identity,s=1,r=3");
  std::size_t expect = 0;
  for (std::size_t i = 0; i < model.transformer_count(); ++i) expect += 2 * model.transformer(i).dim * 3;
  EXPECT_EQ(adapter_parameter_count(model, d), expect);

  for (const auto& text : {"in=SA_in,out=SA_in,act=identity,s=1,r=3", "in=CA_c,out=FFN_in,act=relu,s=1,r=2",
                           "in=Res_in,out=Res_out,act=relu,s=1,r=2"}) {
    UNet m = model.clone();
    AdapterBank bank = inject(m, DesignPoint::parse(text), 1);
    std::size_t numel = 0;
    for (const auto& p : bank.parameters()) numel += p.value.numel();
    const auto counts = count_parameters(m, &bank);
    EXPECT_EQ(counts.adapter, numel) << text;
    EXPECT_EQ(counts.adapter, adapter_parameter_count(m, DesignPoint::parse(text)));
    EXPECT_EQ(counts.backbone, m.parameter_count());
    EXPECT_DOUBLE_EQ(counts.fraction, static_cast<double>(numel) / static_cast<double>(m.parameter_count()));
  }
  EXPECT_EQ(count_parameters(model, nullptr).adapter, 0u);
}

TEST(Counting, RankZero) {
  const UNet model(ExperimentConfig::default_model(), 1);
  EXPECT_EQ(adapter_parameter_count(model, DesignPoint::parse("in=SA_in,out=FFN_in,act=relu,s=1,r=0")), 0u);
  // residual form keeps its GroupNorm affine and the up-projection bias
  std::size_t expect = 0;
  for (std::size_t i = 0; i < model.residual_count(); ++i)
    expect += 2 * model.residual(i).in_channels + model.residual(i).in_channels;
  EXPECT_EQ(adapter_parameter_count(model, DesignPoint::parse("in=Res_in,out=Res_in,act=relu,s=1,r=0")), expect);
}

TEST(Budget, RankThreeBoundaryAndErrors) {
  const UNet model(ExperimentConfig::default_model(), 1);
  auto d = DesignPoint::parse("in=CA_out,out=FFN_in,act=identity,s=1,r=3");
  const double backbone = static_cast<double>(model.parameter_count());
  const double at3 = static_cast<double>(adapter_parameter_count(model, d)) / backbone;
  EXPECT_EQ(solve_rank_for_budget(model, d, at3), 3u);
  d.rank = 4;
  const double at4 = static_cast<double>(adapter_parameter_count(model, d)) / backbone;
  EXPECT_EQ(solve_rank_for_budget(model, d, 0.5 * (at3 + at4)), 3u);
  EXPECT_EQ(solve_rank_for_budget(model, d, at3 * (1 - 1e-6)), 2u);
  d.rank = 1;
  const double at1 = static_cast<double>(adapter_parameter_count(model, d)) / backbone;
  EXPECT_THROW(solve_rank_for_budget(model, d, 0.5 * at1), ConfigError);
  EXPECT_THROW(solve_rank_for_budget(model, d, 0.0), ConfigError);
  EXPECT_THROW(solve_rank_for_budget(model, d, 1.0), ConfigError);
  // residual adapters cannot fit a 1% budget on the small default model
  EXPECT_THROW(solve_rank_for_budget(model, DesignPoint::parse("in=Res_in,out=Res_in,act=relu,s=1,r=1"), 0.01),
               ConfigError);
}

TEST(Budget, MonotoneInBudget) {
  const UNet model(ExperimentConfig::default_model(), 1);
  for (const auto& d : enumerate_design_space({Activation::identity}, {1.0})) {
    if (d.kind() != BlockKind::transformer) continue;
    std::size_t prev = 0;
    for (double b : {0.005, 0.01, 0.02, 0.04, 0.08}) {
      DesignPoint p = d;
      p.rank = solve_rank_for_budget(model, d, b);
      const std::size_t n = adapter_parameter_count(model, p);
      EXPECT_GE(n, prev) << d.to_string();
      EXPECT_LE(static_cast<double>(n), b * static_cast<double>(model.parameter_count()) * (1 + 1e-12));
      prev = n;
    }
  }
}

TEST(Budget, DefaultBudgetLandsBetweenPointOneAndOnePercent) {
  const UNet model(ExperimentConfig::default_model(), 1);
  const ExperimentConfig cfg;
  for (const auto& d : enumerate_design_space({Activation::identity}, {1.0})) {
    if (d.kind() != BlockKind::transformer) continue;
    DesignPoint p = d;
    p.rank = solve_rank_for_budget(model, d, cfg.budget);
    const double f = static_cast<double>(adapter_parameter_count(model, p)) /
                     static_cast<double>(model.parameter_count());
    EXPECT_GE(f, 0.001) << d.to_string();
    EXPECT_LE(f, 0.01) << d.to_string();
  }
}
