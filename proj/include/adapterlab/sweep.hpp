#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapterlab/adapter.hpp"
#include "adapterlab/diffusion.hpp"
#include "adapterlab/metrics.hpp"
#include "adapterlab/records.hpp"
#include "adapterlab/tasks.hpp"
#include "adapterlab/unet.hpp"

namespace adapterlab {

enum class TaskKind { personalization, finetune };
std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

/// How output classes are chosen for each input position in a sweep.
enum class OutputMode { all, nearest };

/// Everything one experiment needs: model shape, pretraining, task, grid,
/// training protocol and evaluation protocol.
struct ExperimentConfig {
  UNetConfig model = default_model();
  std::uint64_t seed = 0;

  // pretraining
  std::size_t pretrain_steps = 8000;
  std::size_t pretrain_batch = 8;
  double pretrain_lr = 2e-3;
  double cond_dropout = 0.1;

  // task
  TaskKind task = TaskKind::personalization;
  std::size_t personalization_count = 5;
  std::size_t regularization_count = 200;
  std::size_t flowers_per_class = 40;
  double personal_fraction = 0.5;

  // grid
  std::vector<PositionId> inputs;  // empty = all ten
  OutputMode outputs = OutputMode::all;
  std::vector<Activation> activations = {Activation::relu, Activation::sigmoid, Activation::silu,
                                         Activation::identity};
  std::vector<double> scales = {0.5, 1.0, 2.0, 4.0};
  std::size_t seeds = 3;
  bool include_full = false;  // add the full fine-tune arm

  // training
  std::size_t steps = 1000;
  std::vector<std::size_t> eval_at = {600, 800, 1000};
  std::size_t window_start = 600;  // checkpoints >= this enter the summary
  std::size_t batch = 8;
  double lr = 3e-3;
  double full_lr = 1e-4;
  double weight_decay = 0.01;
  double budget = 0.01;   // adapter / backbone parameter fraction
  std::size_t rank = 0;   // fixed rank; 0 = solve from the budget

  // evaluation
  SamplerConfig sampler;
  std::size_t eval_samples = 16;
  bool eval_diff_score = true;
  DiffScoreConfig diff;
  std::uint64_t extractor_seed = 7;

  static UNetConfig default_model();
  void validate() const;
  nlohmann::json to_json() const;
  /// Applies flat `section.key` overrides; unknown keys raise ConfigError.
  void apply(const std::map<std::string, nlohmann::json>& values);
};

/// Parses the small TOML subset used for config files: `[section]` headers,
/// `key = value` with numbers, booleans, "strings" and flat [arrays], and #
/// comments. Keys come back as `section.key`.
std::map<std::string, nlohmann::json> parse_config_text(const std::string& text);
std::map<std::string, nlohmann::json> load_config_file(const std::string& path);

struct Fixture {
  UNet model;
  std::uint64_t encoder_seed = 0;
  std::vector<double> loss_curve;  // mean loss per logging window
};

/// Trains the backbone on the general synthetic distribution with condition
/// dropout (empty prompt) so guidance has an unconditional branch.
Fixture pretrain_fixture(const ExperimentConfig& config,
                         const std::function<void(std::size_t, double)>& progress = {});
void save_fixture(const std::string& dir, const Fixture& fixture, const ExperimentConfig& config);
Fixture load_fixture(const std::string& dir);

/// Shared, read-only evaluation context for every run of one experiment.
struct TaskContext {
  TaskKind kind = TaskKind::personalization;
  NoiseSchedule schedule;
  PromptEncoder encoder;
  FeatureExtractor extractor;
  std::optional<PersonalizationTask> personalization;
  std::optional<FinetuneTask> finetune;
  std::vector<std::vector<double>> reference_features;
  std::optional<GaussianStats> reference_stats;

  std::string task_id() const;
};

TaskContext make_task_context(const ExperimentConfig& config, std::uint64_t encoder_seed);

/// Metric name per checkpoint series: "similarity" (personalization) or
/// "frechet" (fine-tune); "diff_score" is added for personalization.
std::string primary_metric(TaskKind kind);
/// True when larger values of `metric` are better.
bool higher_is_better(const std::string& metric);

struct EvalResult {
  std::map<std::string, double> values;
};

/// Samples `config.eval_samples` images with common per-index seeds and scores them.
EvalResult evaluate(const NoisePredictor& predictor, const TaskContext& ctx,
                    const ExperimentConfig& config);

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);
  void step();
  void zero_grad();
  std::size_t steps_taken() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  double lr_, wd_, b1_, b2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Mean training loss over one batch, recorded on the active tape.
Tensor batch_loss(const NoisePredictor& predictor, const TaskContext& ctx, const Batch& batch,
                  Rng& rng);

/// Fraction of parameter scalars that receive a nonzero gradient from at least
/// one of `batches` training batches. A single small batch can leave whole
/// ReLU units of the FFN inactive, so one batch undercounts.
double gradient_coverage(UNet& model, const TaskContext& ctx, const ExperimentConfig& config,
                         std::uint64_t seed, std::size_t batches = 8);

/// Per-run RNG seed; a function of the global seed, design and replicate only.
std::uint64_t run_seed(std::uint64_t global_seed, const std::string& design, std::uint64_t seed);

struct TrainOutcome {
  RunRecord record;
  std::unique_ptr<AdapterBank> bank;  // null for the full fine-tune arm
  std::unique_ptr<UNet> model;
};

/// Trains one design point (or kFullFinetune) from the fixture and evaluates
/// it at every checkpoint. Failures are captured in the record.
TrainOutcome train_one(const std::string& design, const UNet& fixture, const TaskContext& ctx,
                       const ExperimentConfig& config, std::uint64_t replicate);

/// Design strings of the sweep grid, in deterministic order.
std::vector<std::string> sweep_designs(const ExperimentConfig& config, const UNet& fixture);

struct SweepOptions {
  std::size_t workers = 1;
  /// Stop after this many newly trained jobs (simulates an interruption).
  std::size_t max_new_jobs = std::numeric_limits<std::size_t>::max();
  std::function<void(const RunRecord&)> on_record;
};

struct SweepResult {
  std::vector<RunRecord> records;  // every record in the store after the run
  std::size_t trained = 0;
  std::size_t skipped = 0;
};

/// Appends one JSON line per finished job to `records_path`, skipping keys already there.
SweepResult run_sweep(const ExperimentConfig& config, const UNet& fixture, const TaskContext& ctx,
                      const std::string& records_path, const SweepOptions& options = {});

struct AnalysisReport {
  std::string metric;
  std::optional<std::string> best_design;
  std::vector<std::string> files;
  std::vector<std::string> notices;
};

/// Heatmap, ANOVA CSV + chart, best-vs-full scatter and a markdown summary.
AnalysisReport analyze(const std::vector<RunRecord>& records, const std::string& out_dir,
                       const std::string& metric = "");

/// Mean summary metric per design over successful records.
std::map<std::string, double> design_means(const std::vector<RunRecord>& records,
                                           const std::string& metric);

}  // namespace adapterlab
