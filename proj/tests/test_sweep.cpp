#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "adapterlab/sweep.hpp"
#include "support.hpp"

using namespace adapterlab;
using testing_support::temp_dir;

namespace {

/// Minutes-scale protocol shrunk to seconds: tiny model, few steps, few samples.
ExperimentConfig small_config() {
  ExperimentConfig c;
  c.model = testing_support::tiny_config();
  c.seed = 11;
  c.pretrain_steps = 150;
  c.pretrain_batch = 4;
  c.regularization_count = 8;
  c.outputs = OutputMode::nearest;
  c.activations = {Activation::identity};
  c.scales = {1.0};
  c.seeds = 2;
  c.steps = 4;
  c.eval_at = {2, 4};
  c.window_start = 2;
  c.batch = 2;
  c.eval_samples = 2;
  c.sampler.steps = 3;
  c.diff.t_set = {500};
  c.diff.seeds = {0};
  c.diff.max_images = 2;
  return c;
}

const Fixture& small_fixture() {
  static const Fixture f = pretrain_fixture(small_config());
  return f;
}

const TaskContext& small_context() {
  static const TaskContext ctx = make_task_context(small_config(), small_fixture().encoder_seed);
  return ctx;
}

bool same_records(std::vector<RunRecord> a, std::vector<RunRecord> b) {
  auto by_key = [](const RunRecord& x, const RunRecord& y) { return x.key() < y.key(); };
  std::sort(a.begin(), a.end(), by_key);
  std::sort(b.begin(), b.end(), by_key);
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].same_content(b[i])) return false;
  }
  return true;
}

RunRecord summary_record(const std::string& design, std::uint64_t seed, const std::string& task,
                         const std::string& metric, double value) {
  RunRecord r;
  r.design = design;
  r.seed = seed;
  r.task = task;
  r.summary[metric] = value;
  return r;
}

}  // namespace

TEST(Records, JsonRoundTrip) {
  RunRecord r;
  r.design = "in=CA_out,out=FFN_in/CA_out,act=identity,s=1,r=4";
  r.seed = 2;
  r.task = "personalization:pentagon:seed=1";
  r.steps = 10;
  r.checkpoints = {5, 10};
  r.metrics["similarity"] = {0.5, 0.625};
  r.summary["similarity"] = 0.5625;
  r.losses = {0.3, 0.2};
  r.backbone_params = 1000;
  r.trainable_params = 7;
  r.fraction = 0.007;
  r.rank = 4;
  r.wall_time = 1.5;
  const RunRecord back = RunRecord::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_TRUE(back.same_content(r));
  EXPECT_EQ(back.key(), "in=CA_out,out=FFN_in/CA_out,act=identity,s=1,r=4#2");
  RunRecord slower = back;
  slower.wall_time = 99.0;
  EXPECT_TRUE(slower.same_content(r));
  slower.summary["similarity"] = 0.5;
  EXPECT_FALSE(slower.same_content(r));
  EXPECT_THROW(RunRecord::from_json(nlohmann::json{{"design", "in=nowhere"}}), DataError);
}

TEST(Records, TornLastLineIsSkipped) {
  const auto dir = temp_dir("records");
  RunRecord r = summary_record("in=SA_in,out=SA_in,act=relu,s=1,r=1", 0, "t", "similarity", 0.1);
  {
    std::ofstream out(dir + "/r.jsonl");
    out << r.to_json().dump() << '\n' << r.to_json().dump().substr(0, 20);
  }
  std::size_t skipped = 0;
  const auto recs = read_records(dir + "/r.jsonl", &skipped);
  EXPECT_EQ(recs.size(), 1u);
  EXPECT_EQ(skipped, 1u);
}

TEST(Config, ParsesSubsetAndApplies) {
  const auto kv = parse_config_text(R"(# comment
seed = 5
[grid]
activations = ["relu", "identity"]  # trailing
scales = [0.5, 2]
outputs = "nearest"
[train]
steps = 12
eval_at = [6, 12]
window_start = 6
lr = 1e-3
[eval]
diff_score = false
)");
  EXPECT_EQ(kv.at("seed"), 5);
  EXPECT_EQ(kv.at("grid.scales"), (nlohmann::json{0.5, 2}));
  ExperimentConfig c;
  c.apply(kv);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.activations, (std::vector<Activation>{Activation::relu, Activation::identity}));
  EXPECT_EQ(c.scales, (std::vector<double>{0.5, 2.0}));
  EXPECT_EQ(c.outputs, OutputMode::nearest);
  EXPECT_EQ(c.steps, 12u);
  EXPECT_DOUBLE_EQ(c.lr, 1e-3);
  EXPECT_FALSE(c.eval_diff_score);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config_text("[grid\n"), ConfigError);
  EXPECT_THROW(parse_config_text("steps 4\n"), ConfigError);
  EXPECT_THROW(parse_config_text("x = [1, 2\n"), ConfigError);
  ExperimentConfig c;
  EXPECT_THROW(c.apply({{"train.nonsense", 1}}), ConfigError);
  EXPECT_THROW(c.apply({{"train.steps", "many"}}), ConfigError);
  c = ExperimentConfig{};
  c.eval_at = {c.steps + 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.seeds = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.scales.clear();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Fixture, DeterministicAndLearns) {
  ExperimentConfig c = small_config();
  c.pretrain_steps = 20;
  const Fixture a = pretrain_fixture(c), b = pretrain_fixture(c);
  EXPECT_EQ(a.model.checksum(), b.model.checksum());
  EXPECT_EQ(a.encoder_seed, b.encoder_seed);
  const auto& curve = small_fixture().loss_curve;
  ASSERT_GE(curve.size(), 2u);
  EXPECT_LT(curve.back(), curve.front());
}

TEST(Fixture, SaveLoadRoundTrip) {
  const auto dir = temp_dir("fixture");
  save_fixture(dir, small_fixture(), small_config());
  const Fixture back = load_fixture(dir);
  EXPECT_EQ(back.model.checksum(), small_fixture().model.checksum());
  EXPECT_EQ(back.encoder_seed, small_fixture().encoder_seed);
  EXPECT_EQ(back.loss_curve, small_fixture().loss_curve);
}

TEST(Fixture, SamplesBeatNoiseOnFrechet) {
  const ExperimentConfig c = small_config();
  const auto& fx = small_fixture();
  const auto& ctx = small_context();
  const std::size_t n = 80;
  Rng rng(3);
  std::vector<Tensor> real, generated, noise;
  SamplerConfig sc;
  sc.steps = 10;
  const auto predictor = model_predictor(fx.model, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = general_sample(8, rng);
    real.push_back(s.image);
    generated.push_back(sample(predictor, ctx.schedule, {3, 8, 8}, ctx.encoder.encode(s.prompt),
                               ctx.encoder.empty(), sc, 1000 + i));
    noise.push_back(clamp_unit(rng.normal_tensor({3, 8, 8}, 0.6)));
  }
  const auto ref = GaussianStats::from_samples(ctx.extractor.features(real));
  const double d_gen = frechet_distance(GaussianStats::from_samples(ctx.extractor.features(generated)), ref);
  const double d_noise = frechet_distance(GaussianStats::from_samples(ctx.extractor.features(noise)), ref);
  EXPECT_LT(d_gen, d_noise);
  (void)c;
}

TEST(TrainOne, ZeroStepsMatchesFrozenBaseline) {
  ExperimentConfig c = small_config();
  c.steps = 0;
  c.eval_at = {0};
  c.window_start = 0;
  const auto& ctx = small_context();
  const auto base = evaluate(model_predictor(small_fixture().model, nullptr), ctx, c);
  for (const char* d : {"in=CA_c,out=CA_c,act=identity,s=1,r=2", "in=Res_in,out=Res_out,act=silu,s=2,r=1"}) {
    const auto out = train_one(d, small_fixture().model, ctx, c, 0);
    ASSERT_FALSE(out.record.failed) << out.record.error;
    for (const auto& [k, v] : base.values) EXPECT_EQ(out.record.summary.at(k), v) << k;
  }
}

TEST(TrainOne, WindowAggregation) {
  ExperimentConfig c = small_config();
  c.steps = 3;
  c.eval_at = {1, 2, 3};
  c.window_start = 2;
  const auto out = train_one("in=CA_out,out=FFN_in,act=identity,s=1,r=2", small_fixture().model,
                             small_context(), c, 1);
  const auto& r = out.record;
  ASSERT_FALSE(r.failed) << r.error;
  EXPECT_EQ(r.checkpoints, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(r.losses.size(), 3u);
  for (const auto& [name, series] : r.metrics) {
    ASSERT_EQ(series.size(), 3u);
    EXPECT_DOUBLE_EQ(r.summary.at(name), (series[1] + series[2]) / 2.0) << name;
  }
}

TEST(TrainOne, FinetuneSummaryIsWindowMinimum) {
  ExperimentConfig c = small_config();
  c.task = TaskKind::finetune;
  c.flowers_per_class = 2;
  c.eval_samples = 10;
  c.steps = 3;
  c.eval_at = {1, 2, 3};
  c.window_start = 2;
  const auto ctx = make_task_context(c, small_fixture().encoder_seed);
  const auto r = train_one("in=CA_out,out=FFN_in,act=identity,s=1,r=2", small_fixture().model, ctx, c, 0).record;
  ASSERT_FALSE(r.failed) << r.error;
  const auto& f = r.metrics.at("frechet");
  EXPECT_EQ(r.summary.at("frechet"), std::min(f[1], f[2]));
  EXPECT_EQ(r.task.rfind("finetune", 0), 0u);
}

TEST(TrainOne, AdapterArmLeavesBackboneAlone) {
  const auto out = train_one("in=CA_c,out=CA_c,act=relu,s=1,r=2", small_fixture().model,
                             small_context(), small_config(), 0);
  ASSERT_FALSE(out.record.failed) << out.record.error;
  EXPECT_EQ(out.model->checksum(), small_fixture().model.checksum());
  EXPECT_GT(out.record.trainable_params, 0u);
  EXPECT_NEAR(out.record.fraction,
              static_cast<double>(out.record.trainable_params) / out.record.backbone_params, 1e-15);
}

TEST(TrainOne, FullArmTouchesEveryParameter) {
  // Only FFN units whose ReLU never fires get no gradient. The tiny model's
  // 8-unit layers lose whole units that way, so the audit uses the default
  // architecture.
  ExperimentConfig audit = small_config();
  audit.model = ExperimentConfig::default_model();
  audit.batch = 8;
  UNet model(audit.model, 12);
  EXPECT_GE(gradient_coverage(model, make_task_context(audit, 13), audit, 5), 0.99);
  ExperimentConfig c = small_config();
  c.steps = 2;
  c.eval_at = {2};
  const auto out = train_one(kFullFinetune, small_fixture().model, small_context(), c, 0);
  ASSERT_FALSE(out.record.failed) << out.record.error;
  EXPECT_NE(out.model->checksum(), small_fixture().model.checksum());
  EXPECT_EQ(out.record.trainable_params, out.record.backbone_params);
}

TEST(TrainOne, BadDesignIsRecordedNotThrown) {
  const auto r = train_one("in=Res_in,out=CA_c,act=relu,s=1,r=2", small_fixture().model,
                           small_context(), small_config(), 0).record;
  EXPECT_TRUE(r.failed);
  EXPECT_FALSE(r.error.empty());
}

TEST(Sweep, DesignGrid) {
  ExperimentConfig c = small_config();
  EXPECT_EQ(sweep_designs(c, small_fixture().model).size(), 10u);
  c.outputs = OutputMode::all;
  c.activations = {Activation::relu, Activation::sigmoid, Activation::silu, Activation::identity};
  c.scales = {0.5, 1.0, 2.0, 4.0};
  c.include_full = true;
  const auto all = sweep_designs(c, small_fixture().model);
  EXPECT_EQ(all.size(), 416u + 1u);
  EXPECT_EQ(all.back(), kFullFinetune);
  c.inputs = {PositionId::CA_out};
  c.include_full = false;
  for (const auto& d : sweep_designs(c, small_fixture().model)) {
    EXPECT_EQ(DesignPoint::parse(d).input, PositionId::CA_out);
  }
}

TEST(Sweep, CountResumeAndWorkers) {
  const ExperimentConfig c = small_config();
  const auto dir = temp_dir("sweep");
  const auto& fx = small_fixture().model;
  const auto& ctx = small_context();

  const auto one = run_sweep(c, fx, ctx, dir + "/one.jsonl");
  EXPECT_EQ(one.records.size(), sweep_designs(c, fx).size() * c.seeds);
  EXPECT_EQ(one.trained, one.records.size());
  for (const auto& r : one.records) EXPECT_FALSE(r.failed) << r.key() << ": " << r.error;

  const auto again = run_sweep(c, fx, ctx, dir + "/one.jsonl");
  EXPECT_EQ(again.trained, 0u);
  EXPECT_EQ(again.skipped, one.records.size());

  SweepOptions four;
  four.workers = 4;
  const auto par = run_sweep(c, fx, ctx, dir + "/four.jsonl", four);
  EXPECT_TRUE(same_records(one.records, par.records));

  SweepOptions half;
  half.max_new_jobs = one.records.size() / 2;
  const auto first = run_sweep(c, fx, ctx, dir + "/resumed.jsonl", half);
  EXPECT_EQ(first.trained, half.max_new_jobs);
  const auto rest = run_sweep(c, fx, ctx, dir + "/resumed.jsonl");
  EXPECT_EQ(rest.trained, one.records.size() - half.max_new_jobs);
  EXPECT_TRUE(same_records(one.records, rest.records));
  EXPECT_TRUE(same_records(one.records, read_records(dir + "/resumed.jsonl")));
}

TEST(Analyze, WritesPanelsAndPicksBest) {
  const std::string task = "personalization:pentagon:seed=1";
  std::vector<RunRecord> recs;
  const std::vector<std::pair<std::string, double>> means = {
      {"in=CA_c,out=CA_c,act=identity,s=1,r=2", 0.8},
      {"in=CA_out,out=FFN_in/CA_out,act=identity,s=1,r=2", 0.7},
      {"in=Res_in,out=Res_in,act=identity,s=1,r=1", 0.5},
      {"in=Res_out,out=Res_out,act=identity,s=1,r=1", 0.4}};
  for (const auto& [d, m] : means) {
    for (std::uint64_t s = 0; s < 3; ++s) {
      recs.push_back(summary_record(d, s, task, "similarity", m + 0.01 * static_cast<double>(s)));
    }
  }
  recs.push_back(summary_record(kFullFinetune, 0, task, "similarity", 0.9));
  RunRecord broken = summary_record("in=SA_in,out=SA_in,act=identity,s=1,r=2", 0, task, "similarity", 0);
  broken.failed = true;
  recs.push_back(broken);

  const auto dir = temp_dir("analyze");
  const auto rep = analyze(recs, dir);
  EXPECT_EQ(rep.metric, "similarity");
  ASSERT_TRUE(rep.best_design.has_value());
  EXPECT_EQ(DesignPoint::parse(*rep.best_design).input, PositionId::CA_c);
  for (const char* f : {"heatmap.svg", "anova.csv", "anova.svg", "best_vs_full.svg", "summary.md"}) {
    EXPECT_TRUE(std::filesystem::exists(dir + "/" + f)) << f;
  }
  std::ifstream heat(dir + "/heatmap.svg");
  const std::string svg((std::istreambuf_iterator<char>(heat)), std::istreambuf_iterator<char>());
  EXPECT_NE(svg.find("#eeeeee"), std::string::npos);  // invalid pairs left blank
  EXPECT_EQ(rep.notices.size(), 1u);  // the failed record

  // lower is better on the fine-tune metric
  std::vector<RunRecord> ft;
  for (const auto& [d, m] : means) {
    ft.push_back(summary_record(d, 0, "finetune:flowers:seed=1", "frechet", m));
  }
  const auto rep2 = analyze(ft, temp_dir("analyze_ft"));
  EXPECT_EQ(rep2.metric, "frechet");
  EXPECT_EQ(DesignPoint::parse(*rep2.best_design).input, PositionId::Res_out);
  EXPECT_EQ(std::count_if(rep2.notices.begin(), rep2.notices.end(),
                          [](const std::string& n) { return n.find("best-vs-full") != std::string::npos; }),
            1);
  EXPECT_THROW(analyze({}, dir), DataError);
}
