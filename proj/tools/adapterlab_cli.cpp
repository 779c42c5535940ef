// adapterlab command line: pretrain, sweep, train-one, analyze, sample, diffmap, anova.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "adapterlab/adapter.hpp"
#include "adapterlab/checkpoint.hpp"
#include "adapterlab/imageio.hpp"
#include "adapterlab/metrics.hpp"
#include "adapterlab/stats.hpp"
#include "adapterlab/sweep.hpp"

namespace al = adapterlab;

namespace {

/// Bad user input detected after argv parsing; maps to exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::size_t workers = 1;
  std::string config;
  std::vector<std::string> overrides;  // key=value
};

al::ExperimentConfig build_config(const Globals& g) {
  al::ExperimentConfig cfg;
  if (!g.config.empty()) cfg.apply(al::load_config_file(g.config));
  std::map<std::string, nlohmann::json> kv;
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
    const auto parsed = al::parse_config_text(o.substr(0, eq) + " = " + o.substr(eq + 1));
    kv.insert(parsed.begin(), parsed.end());
  }
  cfg.apply(kv);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw al::DataError("cannot write '" + path + "'");
}

std::string fixture_path(const std::string& given, const Globals& g) {
  return given.empty() ? g.out + "/fixture" : given;
}

/// Fixture model with an optional trained adapter bank loaded from `adapter_dir`.
struct LoadedModel {
  al::Fixture fixture;
  std::unique_ptr<al::AdapterBank> bank;
};

LoadedModel load_model(const std::string& fixture_dir, const std::string& adapter_dir) {
  LoadedModel m{al::load_fixture(fixture_dir), nullptr};
  if (!adapter_dir.empty()) {
    auto loaded = al::load_tensors(adapter_dir);
    const auto design = al::DesignPoint::parse(loaded.manifest.at("design").get<std::string>());
    m.bank = std::make_unique<al::AdapterBank>(al::inject(m.fixture.model, design, 0));
    al::assign_tensors(m.bank->parameters(), loaded.tensors);
  }
  return m;
}

int cmd_pretrain(const Globals& g) {
  const auto cfg = build_config(g);
  const std::string dir = g.out + "/fixture";
  std::cout << "pretraining " << cfg.pretrain_steps << " steps, model "
            << al::UNet(cfg.model, 0).parameter_count() << " parameters\n";
  const auto fx = al::pretrain_fixture(cfg, [](std::size_t step, double loss) {
    std::cout << "  step " << step << "  loss " << loss << '\n';
  });
  al::save_fixture(dir, fx, cfg);
  std::cout << "fixture written to " << dir << '\n';
  return 0;
}

int cmd_sweep(const Globals& g, const std::string& fixture_dir, std::size_t max_jobs) {
  const auto cfg = build_config(g);
  const auto fx = al::load_fixture(fixture_path(fixture_dir, g));
  const auto ctx = al::make_task_context(cfg, fx.encoder_seed);
  al::ensure_directory(g.out);
  write_json(g.out + "/sweep_config.json", cfg.to_json());
  al::SweepOptions opt;
  opt.workers = g.workers;
  opt.max_new_jobs = max_jobs;
  const std::string metric = al::primary_metric(cfg.task);
  opt.on_record = [&metric](const al::RunRecord& r) {
    std::cout << (r.failed ? "FAILED " : "done   ") << r.key();
    if (r.summary.count(metric)) std::cout << "  " << metric << "=" << r.summary.at(metric);
    if (r.failed) std::cout << "  (" << r.error << ")";
    std::cout << '\n';
  };
  const auto res = al::run_sweep(cfg, fx.model, ctx, g.out + "/records.jsonl", opt);
  std::cout << "trained " << res.trained << ", skipped " << res.skipped << ", total "
            << res.records.size() << " records in " << g.out << "/records.jsonl\n";
  return 0;
}

int cmd_train_one(const Globals& g, const std::string& fixture_dir, const std::string& design,
                  std::uint64_t replicate) {
  const auto cfg = build_config(g);
  if (design != al::kFullFinetune) al::DesignPoint::parse(design);
  const auto fx = al::load_fixture(fixture_path(fixture_dir, g));
  const auto ctx = al::make_task_context(cfg, fx.encoder_seed);
  auto outcome = al::train_one(design, fx.model, ctx, cfg, replicate);
  al::ensure_directory(g.out);
  write_json(g.out + "/record.json", outcome.record.to_json());
  if (outcome.record.failed) {
    std::cerr << "training failed: " << outcome.record.error << '\n';
    return 2;
  }
  if (outcome.bank) {
    al::save_tensors(g.out + "/adapter", outcome.bank->parameters(), {{"design", design}});
  } else if (outcome.model) {
    al::save_fixture(g.out + "/model", al::Fixture{outcome.model->clone(), fx.encoder_seed, {}}, cfg);
  }
  std::cout << "design " << design << " (" << outcome.record.trainable_params << " trainable, "
            << outcome.record.fraction * 100.0 << "% of backbone)\n";
  for (const auto& [k, v] : outcome.record.summary) std::cout << "  " << k << " = " << v << '\n';
  return 0;
}

std::vector<al::RunRecord> load_records_or_fail(const std::string& in) {
  if (in.empty()) throw UsageError("--in is required");
  std::size_t skipped = 0;
  auto recs = al::read_records(in, &skipped);
  if (skipped) std::cerr << "warning: skipped " << skipped << " malformed line(s)\n";
  return recs;
}

int cmd_analyze(const Globals& g, const std::string& in, const std::string& metric) {
  const auto recs = load_records_or_fail(in);
  const auto rep = al::analyze(recs, g.out, metric);
  std::cout << "metric " << rep.metric << '\n';
  if (rep.best_design) std::cout << "best design point: " << *rep.best_design << '\n';
  for (const auto& f : rep.files) std::cout << "  wrote " << g.out << '/' << f << '\n';
  for (const auto& n : rep.notices) std::cout << "  notice: " << n << '\n';
  return 0;
}

int cmd_anova(const Globals& g, const std::string& in, const std::string& metric_in) {
  const auto recs = load_records_or_fail(in);
  if (recs.empty()) throw al::DataError("no records in '" + in + "'");
  const std::string metric =
      metric_in.empty() ? (recs.front().task.rfind("finetune", 0) == 0 ? "frechet" : "similarity")
                        : metric_in;
  const auto rows = al::anova_report(recs, metric);
  al::write_anova_csv(std::cout, rows);
  al::ensure_directory(g.out);
  std::ofstream csv(g.out + "/anova.csv");
  al::write_anova_csv(csv, rows);
  std::ofstream(g.out + "/anova.svg") << al::anova_svg(rows, "F statistic per factor (" + metric + ")");
  return 0;
}

int cmd_sample(const Globals& g, const std::string& fixture_dir, const std::string& adapter_dir,
               const std::string& prompt, std::size_t count) {
  const auto cfg = build_config(g);
  auto m = load_model(fixture_path(fixture_dir, g), adapter_dir);
  const al::PromptEncoder enc(m.fixture.model.config().cond_dim, m.fixture.encoder_seed);
  const auto schedule = al::NoiseSchedule::linear(m.fixture.model.config().timesteps);
  const auto pred = al::model_predictor(m.fixture.model, m.bank.get());
  const auto& mc = m.fixture.model.config();
  const al::Tensor cond = enc.encode(prompt), uncond = enc.empty();
  al::ensure_directory(g.out);
  for (std::size_t i = 0; i < count; ++i) {
    const auto img = al::sample(pred, schedule, {mc.in_channels, mc.image_size, mc.image_size}, cond,
                                uncond, cfg.sampler, al::derive_seed(cfg.seed, "sample", i));
    const std::string path = g.out + "/sample_" + std::to_string(i) + ".ppm";
    al::write_ppm(path, img);
    std::cout << "wrote " << path << '\n';
  }
  return 0;
}

int cmd_diffmap(const Globals& g, const std::string& fixture_dir, const std::string& adapter_dir,
                const std::string& prompts, std::vector<std::size_t> ts, std::size_t seeds,
                std::size_t images) {
  const auto bar = prompts.find('|');
  if (bar == std::string::npos) throw UsageError("--prompts expects \"prompt a|prompt b\"");
  const std::string pa = prompts.substr(0, bar), pb = prompts.substr(bar + 1);
  auto cfg = build_config(g);
  auto m = load_model(fixture_path(fixture_dir, g), adapter_dir);
  cfg.model = m.fixture.model.config();
  const auto ctx = al::make_task_context(cfg, m.fixture.encoder_seed);
  if (!ctx.personalization) throw UsageError("diffmap needs the personalization task");
  const auto pred = al::model_predictor(m.fixture.model, m.bank.get());
  if (ts.empty()) ts = cfg.diff.t_set;
  al::ensure_directory(g.out);
  const auto& reg = ctx.personalization->regularization;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < std::min(images, reg.size()); ++i) {
    for (auto t : ts) {
      for (std::size_t s = 0; s < seeds; ++s) {
        const auto map = al::noise_diff_map(pred, ctx.schedule, ctx.encoder, reg[i], t, pa, pb,
                                            al::derive_seed(cfg.seed, "diffmap-cli", s));
        const std::string path = g.out + "/diff_img" + std::to_string(i) + "_t" +
                                 std::to_string(t) + "_s" + std::to_string(s) + ".pgm";
        al::write_pgm(path, map);
        double mean = 0.0;
        for (double v : map.data()) mean += v;
        total += mean / static_cast<double>(map.numel());
        ++n;
      }
    }
  }
  std::cout << "wrote " << n << " maps to " << g.out << ", mean difference "
            << (n ? total / static_cast<double>(n) : 0.0) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adapterlab: adapter design-space experiments on a toy diffusion U-Net"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "global seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--workers", g.workers, "parallel workers")->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "TOML-style config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");

  std::string fixture, adapter, design = "in=CA_out,out=FFN_in/CA_out,act=identity,s=1,r=4";
  std::string in, metric, prompt = "a photo of [V] pentagon", prompts;
  std::uint64_t replicate = 0;
  std::size_t count = 4, max_jobs = std::numeric_limits<std::size_t>::max(), seeds = 1, images = 4;
  std::vector<std::size_t> ts;

  auto* pretrain = app.add_subcommand("pretrain", "train the backbone fixture");
  auto* sweep = app.add_subcommand("sweep", "train every design point in the grid");
  sweep->add_option("--fixture", fixture, "fixture directory (default <out>/fixture)");
  sweep->add_option("--max-jobs", max_jobs, "stop after this many new jobs");
  auto* train = app.add_subcommand("train-one", "train and evaluate one design point");
  train->add_option("--fixture", fixture, "fixture directory");
  train->add_option("--design", design, "design string or 'full'")->capture_default_str();
  train->add_option("--replicate", replicate, "replicate index");
  auto* analyze = app.add_subcommand("analyze", "heatmap, ANOVA and summary from records");
  analyze->add_option("--in", in, "records.jsonl")->required();
  analyze->add_option("--metric", metric, "summary metric");
  auto* sample = app.add_subcommand("sample", "sample images from the fixture (+ adapter)");
  sample->add_option("--fixture", fixture, "fixture directory");
  sample->add_option("--adapter", adapter, "adapter directory from train-one");
  sample->add_option("--prompt", prompt, "prompt")->capture_default_str();
  sample->add_option("--count", count, "number of images")->capture_default_str();
  auto* diffmap = app.add_subcommand("diffmap", "noise-prediction difference maps");
  diffmap->add_option("--fixture", fixture, "fixture directory");
  diffmap->add_option("--adapter", adapter, "adapter directory from train-one");
  diffmap->add_option("--prompts", prompts, "\"prompt a|prompt b\"")->required();
  diffmap->add_option("--t", ts, "timesteps");
  diffmap->add_option("--seeds", seeds, "noise seeds per (image, t)")->capture_default_str();
  diffmap->add_option("--images", images, "regularization images")->capture_default_str();
  auto* anova = app.add_subcommand("anova", "one-way ANOVA per design factor");
  anova->add_option("--in", in, "records.jsonl")->required();
  anova->add_option("--metric", metric, "summary metric");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (seed_opt->count()) g.seed = seed_value;

  try {
    if (*pretrain) return cmd_pretrain(g);
    if (*sweep) return cmd_sweep(g, fixture, max_jobs);
    if (*train) return cmd_train_one(g, fixture, design, replicate);
    if (*analyze) return cmd_analyze(g, in, metric);
    if (*sample) return cmd_sample(g, fixture, adapter, prompt, count);
    if (*diffmap) return cmd_diffmap(g, fixture, adapter, prompts, ts, seeds, images);
    if (*anova) return cmd_anova(g, in, metric);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const al::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const al::ConstraintError& e) {
    std::cerr << "invalid design point: " << e.what() << '\n';
    return 1;
  } catch (const al::VocabularyError& e) {
    std::cerr << "vocabulary error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
