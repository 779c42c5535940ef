#include "adapterlab/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "adapterlab/checkpoint.hpp"
#include "adapterlab/imageio.hpp"
#include "adapterlab/stats.hpp"
#include "adapterlab/svg.hpp"

namespace adapterlab {

// ---------------------------------------------------------------- config

std::string_view to_string(TaskKind k) {
  return k == TaskKind::personalization ? "personalization" : "finetune";
}

TaskKind parse_task_kind(std::string_view s) {
  if (s == "personalization") return TaskKind::personalization;
  if (s == "finetune") return TaskKind::finetune;
  throw ConfigError("unknown task '" + std::string(s) + "' (personalization | finetune)");
}

UNetConfig ExperimentConfig::default_model() {
  UNetConfig c;
  c.image_size = 8;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.cond_dim = 16;
  c.time_dim = 16;
  c.time_embed_dim = 32;
  c.groups = 4;
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  if (model.image_size % 8 != 0) throw ConfigError("image size must be a multiple of 8");
  if (activations.empty() || scales.empty()) throw ConfigError("factor grids must be nonempty");
  if (seeds < 1) throw ConfigError("seeds must be >= 1");
  if (batch < 1 || pretrain_batch < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(lr > 0.0) || !(full_lr > 0.0) || !(pretrain_lr > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) throw ConfigError("cond_dropout must lie in [0, 1)");
  if (!(budget > 0.0 && budget < 1.0)) throw ConfigError("budget must lie in (0, 1)");
  if (eval_samples < 2) throw ConfigError("eval samples must be >= 2");
  if (personalization_count < 1 || personalization_count > 10) {
    throw ConfigError("personalization count must lie in 1..10");
  }
  for (auto t : diff.t_set) {
    if (t < 1 || t > model.timesteps) throw ConfigError("diff t outside [1, T]");
  }
  for (auto s : eval_at) {
    if (s > steps) throw ConfigError("eval checkpoint " + std::to_string(s) + " beyond steps");
  }
  sampler.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  std::vector<std::string> ins, acts;
  for (auto p : inputs) ins.emplace_back(to_string(p));
  for (auto a : activations) acts.emplace_back(to_string(a));
  return {
      {"model", model.to_json()},
      {"seed", seed},
      {"pretrain",
       {{"steps", pretrain_steps}, {"batch", pretrain_batch}, {"lr", pretrain_lr},
        {"cond_dropout", cond_dropout}}},
      {"task",
       {{"kind", to_string(task)}, {"personalization_count", personalization_count},
        {"regularization_count", regularization_count}, {"flowers_per_class", flowers_per_class},
        {"personal_fraction", personal_fraction}}},
      {"grid",
       {{"inputs", ins}, {"outputs", outputs == OutputMode::all ? "all" : "nearest"},
        {"activations", acts}, {"scales", scales}, {"seeds", seeds}, {"include_full", include_full}}},
      {"train",
       {{"steps", steps}, {"eval_at", eval_at}, {"window_start", window_start}, {"batch", batch},
        {"lr", lr}, {"full_lr", full_lr}, {"weight_decay", weight_decay}, {"budget", budget},
        {"rank", rank}}},
      {"eval",
       {{"samples", eval_samples}, {"steps", sampler.steps}, {"cfg_scale", sampler.cfg_scale},
        {"order", sampler.order}, {"clip_x0", sampler.clip_x0}, {"diff_score", eval_diff_score}, {"diff_t", diff.t_set},
        {"diff_seeds", diff.seeds}, {"diff_images", diff.max_images},
        {"extractor_seed", extractor_seed}}},
  };
}

void ExperimentConfig::apply(const std::map<std::string, nlohmann::json>& values) {
  using Setter = std::function<void(const nlohmann::json&)>;
  auto num = [](auto& field) {
    return Setter([&field](const nlohmann::json& v) { v.get_to(field); });
  };
  const std::map<std::string, Setter> setters = {
      {"seed", num(seed)},
      {"model.image_size", num(model.image_size)},
      {"model.base_channels", num(model.base_channels)},
      {"model.channel_mult", num(model.channel_mult)},
      {"model.cond_dim", num(model.cond_dim)},
      {"model.ffn_mult", num(model.ffn_mult)},
      {"model.time_dim", num(model.time_dim)},
      {"model.time_embed_dim", num(model.time_embed_dim)},
      {"model.groups", num(model.groups)},
      {"model.timesteps", num(model.timesteps)},
      {"model.transformer_levels", num(model.transformer_levels)},
      {"pretrain.steps", num(pretrain_steps)},
      {"pretrain.batch", num(pretrain_batch)},
      {"pretrain.lr", num(pretrain_lr)},
      {"pretrain.cond_dropout", num(cond_dropout)},
      {"task.kind", [this](const nlohmann::json& v) { task = parse_task_kind(v.get<std::string>()); }},
      {"task.personalization_count", num(personalization_count)},
      {"task.regularization_count", num(regularization_count)},
      {"task.flowers_per_class", num(flowers_per_class)},
      {"task.personal_fraction", num(personal_fraction)},
      {"grid.inputs",
       [this](const nlohmann::json& v) {
         inputs.clear();
         for (const auto& s : v) inputs.push_back(parse_position(s.get<std::string>()));
       }},
      {"grid.outputs",
       [this](const nlohmann::json& v) {
         const auto s = v.get<std::string>();
         if (s == "all") {
           outputs = OutputMode::all;
         } else if (s == "nearest") {
           outputs = OutputMode::nearest;
         } else {
           throw ConfigError("grid.outputs must be 'all' or 'nearest'");
         }
       }},
      {"grid.activations",
       [this](const nlohmann::json& v) {
         activations.clear();
         for (const auto& s : v) activations.push_back(parse_activation(s.get<std::string>()));
       }},
      {"grid.scales", num(scales)},
      {"grid.seeds", num(seeds)},
      {"grid.include_full", num(include_full)},
      {"train.steps", num(steps)},
      {"train.eval_at", num(eval_at)},
      {"train.window_start", num(window_start)},
      {"train.batch", num(batch)},
      {"train.lr", num(lr)},
      {"train.full_lr", num(full_lr)},
      {"train.weight_decay", num(weight_decay)},
      {"train.budget", num(budget)},
      {"train.rank", num(rank)},
      {"eval.samples", num(eval_samples)},
      {"eval.steps", num(sampler.steps)},
      {"eval.cfg_scale", num(sampler.cfg_scale)},
      {"eval.order", num(sampler.order)},
      {"eval.clip_x0", num(sampler.clip_x0)},
      {"eval.diff_score", num(eval_diff_score)},
      {"eval.diff_t", num(diff.t_set)},
      {"eval.diff_seeds", num(diff.seeds)},
      {"eval.diff_images", num(diff.max_images)},
      {"eval.extractor_seed", num(extractor_seed)},
  };
  for (const auto& [key, value] : values) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type: " + value.dump());
    }
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Drops a trailing # comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

nlohmann::json parse_scalar(const std::string& text, std::size_t lineno) {
  if (text.size() >= 2 && text.front() == '"' && text.back() == '"') {
    return text.substr(1, text.size() - 2);
  }
  if (text == "true") return true;
  if (text == "false") return false;
  try {
    std::size_t used = 0;
    if (text.find_first_of(".eE") == std::string::npos) {
      const long long v = std::stoll(text, &used);
      if (used == text.size()) {
        if (v >= 0) return static_cast<std::uint64_t>(v);
        return v;
      }
    }
    const double d = std::stod(text, &used);
    if (used == text.size()) return d;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("config line " + std::to_string(lineno) + ": cannot parse value '" + text + "'");
}

}  // namespace

std::map<std::string, nlohmann::json> parse_config_text(const std::string& text) {
  std::map<std::string, nlohmann::json> out;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    }
    nlohmann::json v;
    if (value.front() == '[') {
      if (value.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unclosed array");
      v = nlohmann::json::array();
      std::string item;
      std::istringstream items(value.substr(1, value.size() - 2));
      while (std::getline(items, item, ',')) {
        item = trim(item);
        if (!item.empty()) v.push_back(parse_scalar(item, lineno));
      }
    } else {
      v = parse_scalar(value, lineno);
    }
    out[section.empty() ? key : section + "." + key] = v;
  }
  return out;
}

std::map<std::string, nlohmann::json> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------- optimiser

AdamW::AdamW(std::vector<Tensor> params, double lr, double weight_decay, double beta1,
             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      w[k] -= lr_ * (update + wd_ * w[k]);
      if (!std::isfinite(w[k])) throw NumericError("optimizer produced a non-finite parameter");
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------- training helpers

Tensor batch_loss(const NoisePredictor& predictor, const TaskContext& ctx, const Batch& batch,
                  Rng& rng) {
  if (batch.images.empty()) throw ContractError("batch_loss on an empty batch");
  std::optional<Tensor> total;
  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    const Tensor c = ctx.encoder.encode(batch.prompts[i]);
    Tensor l = training_loss(predictor, ctx.schedule, batch.images[i], c, rng).loss;
    total = total ? add(*total, l) : l;
  }
  return scale(*total, 1.0 / static_cast<double>(batch.images.size()));
}

namespace {

Batch draw_batch(const TaskContext& ctx, const ExperimentConfig& config, Rng& rng) {
  if (ctx.personalization) {
    return training_batch(*ctx.personalization, rng, config.batch, config.personal_fraction);
  }
  return training_batch(*ctx.finetune, rng, config.batch);
}

}  // namespace

double gradient_coverage(UNet& model, const TaskContext& ctx, const ExperimentConfig& config,
                         std::uint64_t seed, std::size_t batches) {
  model.set_trainable(true);
  Rng rng(seed);
  const auto predictor = model_predictor(model, nullptr);
  std::vector<std::vector<bool>> touched;
  for (auto& p : model.parameters()) touched.emplace_back(p.value.numel(), false);
  for (std::size_t k = 0; k < batches; ++k) {
    const Batch b = draw_batch(ctx, config, rng);
    GradTape tape;
    {
      TapeScope scope(tape);
      tape.backward(batch_loss(predictor, ctx, b, rng));
    }
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto g = params[i].value.grad();
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (g[j] != 0.0) touched[i][j] = true;
      }
      params[i].value.zero_grad();
    }
  }
  std::size_t nonzero = 0, total = 0;
  for (const auto& t : touched) {
    nonzero += static_cast<std::size_t>(std::count(t.begin(), t.end(), true));
    total += t.size();
  }
  return static_cast<double>(nonzero) / static_cast<double>(total);
}

std::uint64_t run_seed(std::uint64_t global_seed, const std::string& design, std::uint64_t seed) {
  return derive_seed(global_seed, design, seed);
}

// ---------------------------------------------------------------- pretraining

Fixture pretrain_fixture(const ExperimentConfig& config,
                         const std::function<void(std::size_t, double)>& progress) {
  config.validate();
  Fixture fx{UNet(config.model, derive_seed(config.seed, "init", 0)),
             derive_seed(config.seed, "encoder", 0), {}};
  const PromptEncoder encoder(config.model.cond_dim, fx.encoder_seed);
  const auto schedule = NoiseSchedule::linear(config.model.timesteps);
  Rng rng(derive_seed(config.seed, "pretrain", 0));
  fx.model.set_trainable(true);
  std::vector<Tensor> params;
  for (auto& p : fx.model.parameters()) params.push_back(p.value);
  AdamW opt(params, config.pretrain_lr, config.weight_decay);
  const auto predictor = model_predictor(fx.model, nullptr);
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(100, config.pretrain_steps));
  double acc = 0.0;
  std::size_t in_window = 0;
  for (std::size_t step = 1; step <= config.pretrain_steps; ++step) {
    GradTape tape;
    double value = 0.0;
    {
      TapeScope scope(tape);
      std::optional<Tensor> total;
      for (std::size_t i = 0; i < config.pretrain_batch; ++i) {
        const auto s = general_sample(config.model.image_size, rng);
        const bool drop = rng.uniform() < config.cond_dropout;
        const Tensor c = encoder.encode(drop ? "" : s.prompt);
        Tensor l = training_loss(predictor, schedule, s.image, c, rng).loss;
        total = total ? add(*total, l) : l;
      }
      const Tensor loss = scale(*total, 1.0 / static_cast<double>(config.pretrain_batch));
      value = loss.item();
      tape.backward(loss);
    }
    // cosine decay to a tenth of the base rate
    const double progress_frac = static_cast<double>(step - 1) / static_cast<double>(config.pretrain_steps);
    opt.set_lr(config.pretrain_lr * (0.1 + 0.45 * (1.0 + std::cos(M_PI * progress_frac))));
    opt.step();
    opt.zero_grad();
    acc += value;
    if (++in_window == window || step == config.pretrain_steps) {
      fx.loss_curve.push_back(acc / static_cast<double>(in_window));
      if (progress) progress(step, fx.loss_curve.back());
      acc = 0.0;
      in_window = 0;
    }
  }
  fx.model.set_trainable(false);
  return fx;
}

void save_fixture(const std::string& dir, const Fixture& fixture, const ExperimentConfig& config) {
  nlohmann::json extra = {{"kind", "fixture"},
                          {"encoder_seed", fixture.encoder_seed},
                          {"loss_curve", fixture.loss_curve},
                          {"experiment", config.to_json()}};
  save_checkpoint(dir, fixture.model, extra);
}

Fixture load_fixture(const std::string& dir) {
  nlohmann::json manifest;
  UNet model = load_checkpoint(dir, &manifest);
  if (!manifest.contains("encoder_seed")) {
    throw DataError("checkpoint '" + dir + "' is not a fixture (no encoder_seed)");
  }
  model.set_trainable(false);
  return Fixture{std::move(model), manifest["encoder_seed"].get<std::uint64_t>(),
                 manifest.value("loss_curve", std::vector<double>{})};
}

// ---------------------------------------------------------------- tasks and evaluation

std::string TaskContext::task_id() const {
  std::ostringstream os;
  if (personalization) {
    os << "personalization:" << personalization->class_spec.shape << ":seed="
       << personalization->seed;
  } else {
    os << "finetune:flowers:seed=" << finetune->seed;
  }
  return os.str();
}

TaskContext make_task_context(const ExperimentConfig& config, std::uint64_t encoder_seed) {
  TaskContext ctx{config.task,
                  NoiseSchedule::linear(config.model.timesteps),
                  PromptEncoder(config.model.cond_dim, encoder_seed),
                  FeatureExtractor(config.extractor_seed, config.model.in_channels),
                  std::nullopt,
                  std::nullopt,
                  {},
                  std::nullopt};
  const std::uint64_t task_seed = derive_seed(config.seed, "task", 0);
  if (config.task == TaskKind::personalization) {
    ClassSpec cs;
    cs.count = config.regularization_count;
    TargetSpec ts;
    ts.count = config.personalization_count;
    ctx.personalization = build_personalization_task(task_seed, config.model.image_size, cs, ts);
    ctx.reference_features = ctx.extractor.features(ctx.personalization->personalization);
  } else {
    ctx.finetune = build_finetune_task(task_seed, config.model.image_size, config.flowers_per_class);
    ctx.reference_features = ctx.extractor.features(ctx.finetune->images);
    ctx.reference_stats = GaussianStats::from_samples(ctx.reference_features);
  }
  return ctx;
}

std::string primary_metric(TaskKind kind) {
  return kind == TaskKind::personalization ? "similarity" : "frechet";
}

bool higher_is_better(const std::string& metric) { return metric != "frechet"; }

EvalResult evaluate(const NoisePredictor& predictor, const TaskContext& ctx,
                    const ExperimentConfig& config) {
  EvalResult r;
  const std::size_t n = config.model.image_size;
  const Shape shape{config.model.in_channels, n, n};
  const Tensor uncond = ctx.encoder.empty();
  std::vector<Tensor> samples;
  if (ctx.personalization) {
    const Tensor cond = ctx.encoder.encode(ctx.personalization->personal_prompt());
    for (std::size_t i = 0; i < config.eval_samples; ++i) {
      samples.push_back(sample(predictor, ctx.schedule, shape, cond, uncond, config.sampler,
                               derive_seed(config.seed, "eval-sample", i)));
    }
    r.values["similarity"] = clip_similarity(ctx.extractor.features(samples), ctx.reference_features);
    double attr = 0.0;
    for (const auto& s : samples) attr += target_attribute(s);
    r.values["target_attribute"] = attr / static_cast<double>(samples.size());
    if (config.eval_diff_score) {
      r.values["diff_score"] =
          diff_score(predictor, ctx.schedule, ctx.encoder, *ctx.personalization, config.diff);
    }
  } else {
    const auto& classes = flower_classes();
    std::map<std::string, Tensor> conds;
    for (const auto& c : classes) conds.emplace(c, ctx.encoder.encode(class_prompt(c)));
    for (std::size_t i = 0; i < config.eval_samples; ++i) {
      samples.push_back(sample(predictor, ctx.schedule, shape, conds.at(classes[i % classes.size()]),
                               uncond, config.sampler, derive_seed(config.seed, "eval-sample", i)));
    }
    const auto stats = GaussianStats::from_samples(ctx.extractor.features(samples));
    r.values["frechet"] = frechet_distance(stats, *ctx.reference_stats);
  }
  return r;
}

// ---------------------------------------------------------------- one run

TrainOutcome train_one(const std::string& design, const UNet& fixture, const TaskContext& ctx,
                       const ExperimentConfig& config, std::uint64_t replicate) {
  const auto start = std::chrono::steady_clock::now();
  TrainOutcome out;
  RunRecord& rec = out.record;
  rec.design = design;
  rec.seed = replicate;
  rec.task = ctx.task_id();
  rec.steps = config.steps;
  for (auto s : config.eval_at) {
    if (s <= config.steps) rec.checkpoints.push_back(s);
  }
  std::sort(rec.checkpoints.begin(), rec.checkpoints.end());
  rec.checkpoints.erase(std::unique(rec.checkpoints.begin(), rec.checkpoints.end()),
                        rec.checkpoints.end());
  if (rec.checkpoints.empty()) rec.checkpoints.push_back(config.steps);

  try {
    out.model = std::make_unique<UNet>(fixture.clone());
    UNet& model = *out.model;
    const std::uint64_t rs = run_seed(config.seed, design, replicate);
    std::vector<Tensor> params;
    double lr = config.lr;
    rec.backbone_params = model.parameter_count();
    if (rec.is_full_finetune()) {
      model.set_trainable(true);
      for (auto& p : model.parameters()) params.push_back(p.value);
      rec.trainable_params = rec.backbone_params;
      lr = config.full_lr;
    } else {
      const DesignPoint dp = DesignPoint::parse(design);
      out.bank = std::make_unique<AdapterBank>(inject(model, dp, derive_seed(rs, "adapter-init", 0)));
      for (auto& p : out.bank->parameters()) params.push_back(p.value);
      rec.trainable_params = out.bank->parameter_count();
      rec.rank = dp.rank;
    }
    rec.fraction = static_cast<double>(rec.trainable_params) / static_cast<double>(rec.backbone_params);
    const std::uint64_t frozen_sum = model.checksum();
    const auto predictor = model_predictor(model, out.bank.get());
    AdamW opt(params, lr, config.weight_decay);
    Rng rng(derive_seed(rs, "train", 0));

    auto record_eval = [&] {
      const auto e = evaluate(predictor, ctx, config);
      for (const auto& [k, v] : e.values) rec.metrics[k].push_back(v);
    };
    std::size_t next = 0;
    if (rec.checkpoints[next] == 0) {
      record_eval();
      ++next;
    }
    double acc = 0.0;
    std::size_t in_window = 0;
    for (std::size_t step = 1; step <= config.steps; ++step) {
      GradTape tape;
      {
        TapeScope scope(tape);
        const Tensor loss = batch_loss(predictor, ctx, draw_batch(ctx, config, rng), rng);
        acc += loss.item();
        tape.backward(loss);
      }
      opt.step();
      opt.zero_grad();
      ++in_window;
      if (next < rec.checkpoints.size() && rec.checkpoints[next] == step) {
        rec.losses.push_back(acc / static_cast<double>(in_window));
        acc = 0.0;
        in_window = 0;
        record_eval();
        ++next;
      }
    }
    if (out.bank && model.checksum() != frozen_sum) {
      throw ContractError("backbone parameters changed during adapter training");
    }
  } catch (const std::exception& e) {
    rec.failed = true;
    rec.error = e.what();
  }

  for (const auto& [name, series] : rec.metrics) {
    std::vector<double> window;
    for (std::size_t i = 0; i < series.size() && i < rec.checkpoints.size(); ++i) {
      if (rec.checkpoints[i] >= config.window_start) window.push_back(series[i]);
    }
    if (window.empty()) window = series;
    if (window.empty()) continue;
    if (name == "frechet") {
      rec.summary[name] = *std::min_element(window.begin(), window.end());
    } else {
      double s = 0.0;
      for (double v : window) s += v;
      rec.summary[name] = s / static_cast<double>(window.size());
    }
  }
  rec.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------- sweep

std::vector<std::string> sweep_designs(const ExperimentConfig& config, const UNet& fixture) {
  std::vector<PositionId> inputs = config.inputs;
  if (inputs.empty()) inputs.assign(std::begin(kAllPositions), std::end(kAllPositions));
  std::vector<std::string> out;
  for (auto in : kAllPositions) {
    if (std::find(inputs.begin(), inputs.end(), in) == inputs.end()) continue;
    for (auto cls : kAllOutputClasses) {
      if (!is_valid_pair(in, cls)) continue;
      if (config.outputs == OutputMode::nearest && cls != nearest_output_class(in)) continue;
      for (auto act : config.activations) {
        for (double s : config.scales) {
          DesignPoint d;
          d.input = in;
          d.output = cls;
          d.act = act;
          d.scale = s;
          if (config.rank > 0) {
            d.rank = config.rank;
          } else {
            try {
              d.rank = solve_rank_for_budget(fixture, d, config.budget);
            } catch (const ConfigError&) {
              d.rank = 1;  // the smallest adapter still exceeds the budget
            }
          }
          out.push_back(d.to_string());
        }
      }
    }
  }
  if (config.include_full) out.emplace_back(kFullFinetune);
  return out;
}

SweepResult run_sweep(const ExperimentConfig& config, const UNet& fixture, const TaskContext& ctx,
                      const std::string& records_path, const SweepOptions& options) {
  config.validate();
  SweepResult result;
  std::set<std::string> done;
  if (std::filesystem::exists(records_path)) {
    result.records = read_records(records_path);
    for (const auto& r : result.records) done.insert(r.key());
  } else {
    const auto parent = std::filesystem::path(records_path).parent_path();
    if (!parent.empty()) ensure_directory(parent.string());
  }

  struct Job {
    std::string design;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& d : sweep_designs(config, fixture)) {
    for (std::uint64_t s = 0; s < config.seeds; ++s) {
      RunRecord probe;
      probe.design = d;
      probe.seed = s;
      if (done.count(probe.key())) {
        ++result.skipped;
      } else if (jobs.size() < options.max_new_jobs) {
        jobs.push_back({d, s});
      }
    }
  }

  std::mutex sink;
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr fatal;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= jobs.size()) return;
      RunRecord rec = train_one(jobs[i].design, fixture, ctx, config, jobs[i].seed).record;
      std::lock_guard<std::mutex> lock(sink);
      try {
        std::ofstream out(records_path, std::ios::app);
        out << rec.to_json().dump() << '\n';
        out.flush();
        if (!out) throw DataError("cannot append to '" + records_path + "'");
      } catch (...) {
        if (!fatal) fatal = std::current_exception();
        cursor = jobs.size();
        return;
      }
      ++result.trained;
      if (options.on_record) options.on_record(rec);
      result.records.push_back(std::move(rec));
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(options.workers, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);
  std::sort(result.records.begin(), result.records.end(),
            [](const RunRecord& a, const RunRecord& b) { return a.key() < b.key(); });
  return result;
}

// ---------------------------------------------------------------- analysis

std::map<std::string, double> design_means(const std::vector<RunRecord>& records,
                                           const std::string& metric) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    if (r.failed) continue;
    const auto it = r.summary.find(metric);
    if (it == r.summary.end()) continue;
    auto& a = acc[r.design];
    a.first += it->second;
    ++a.second;
  }
  std::map<std::string, double> out;
  for (const auto& [d, a] : acc) out[d] = a.first / static_cast<double>(a.second);
  return out;
}

namespace {

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
  if (!out) throw DataError("cannot write '" + path + "'");
}

std::string heatmap_svg(const std::vector<RunRecord>& records, const std::string& metric) {
  std::map<std::pair<int, int>, std::pair<double, std::size_t>> cells;
  for (const auto& r : records) {
    if (r.failed || r.is_full_finetune()) continue;
    const auto it = r.summary.find(metric);
    if (it == r.summary.end()) continue;
    const auto d = DesignPoint::parse(r.design);
    auto& c = cells[{static_cast<int>(d.input), static_cast<int>(d.output)}];
    c.first += it->second;
    ++c.second;
  }
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [k, c] : cells) {
    const double m = c.first / static_cast<double>(c.second);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  const double cw = 70, ch = 26, left = 90, top = 110;
  const std::size_t nin = std::size(kAllPositions), nout = std::size(kAllOutputClasses);
  Svg svg(left + cw * static_cast<double>(nout) + 30, top + ch * static_cast<double>(nin) + 40);
  svg.text(10, 20, "mean " + metric + " by input (rows) and output (columns)", 13);
  for (std::size_t j = 0; j < nout; ++j) {
    svg.text(left + cw * (static_cast<double>(j) + 0.5), top - 8, to_string(kAllOutputClasses[j]),
             10, "start", -40);
  }
  for (std::size_t i = 0; i < nin; ++i) {
    const PositionId in = kAllPositions[i];
    const double y = top + ch * static_cast<double>(i);
    svg.text(left - 6, y + ch * 0.65, to_string(in), 10, "end");
    for (std::size_t j = 0; j < nout; ++j) {
      const OutputClass out = kAllOutputClasses[j];
      const double x = left + cw * static_cast<double>(j);
      if (!is_valid_pair(in, out)) {
        svg.rect(x, y, cw, ch, "#eeeeee", "#ffffff");
        continue;
      }
      const auto it = cells.find({static_cast<int>(in), static_cast<int>(out)});
      if (it == cells.end()) {
        svg.rect(x, y, cw, ch, "#ffffff", "#cccccc");
        svg.text(x + cw / 2, y + ch * 0.65, "-", 10, "middle");
        continue;
      }
      const double m = it->second.first / static_cast<double>(it->second.second);
      double t = hi > lo ? (m - lo) / (hi - lo) : 0.5;
      if (!higher_is_better(metric)) t = 1.0 - t;
      svg.rect(x, y, cw, ch, ramp_color(t), "#ffffff");
      svg.text(x + cw / 2, y + ch * 0.65, fmt(m), 10, "middle");
    }
  }
  return svg.str();
}

std::string scatter_svg(const std::vector<RunRecord>& records, const std::string& best,
                        const std::string& metric) {
  struct Pt {
    double x, y;
    bool full;
  };
  std::vector<Pt> pts;
  for (const auto& r : records) {
    if (r.failed || (r.design != best && !r.is_full_finetune())) continue;
    const auto it = r.metrics.find(metric);
    if (it == r.metrics.end()) continue;
    for (std::size_t i = 0; i < it->second.size() && i < r.checkpoints.size(); ++i) {
      pts.push_back({static_cast<double>(r.checkpoints[i]), it->second[i], r.is_full_finetune()});
    }
  }
  double x0 = 0, x1 = 1, y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (const auto& p : pts) {
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.08 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double w = 520, h = 340, left = 70, top = 40, pw = 420, ph = 240;
  Svg svg(w, h);
  svg.text(w / 2, 22, metric + ": best adapter vs full fine-tune", 13, "middle");
  svg.line(left, top + ph, left + pw, top + ph);
  svg.line(left, top, left, top + ph);
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0, yy = top + ph - ph * i / 4.0;
    svg.text(left - 6, yy + 4, fmt(yv, 3), 9, "end");
    const double xv = x0 + (x1 - x0) * i / 4.0, xx = left + pw * i / 4.0;
    svg.text(xx, top + ph + 16, fmt(xv, 4), 9, "middle");
  }
  svg.text(left + pw / 2, h - 8, "training step", 11, "middle");
  for (const auto& p : pts) {
    const double px = left + pw * (p.x - x0) / (x1 - x0);
    const double py = top + ph - ph * (p.y - y0) / (y1 - y0);
    svg.circle(px, py, 4, p.full ? "#d95f02" : "#1b9e77");
  }
  svg.circle(left + 10, top + 8, 4, "#1b9e77");
  svg.text(left + 18, top + 12, "adapter: " + best, 9);
  svg.circle(left + 10, top + 22, 4, "#d95f02");
  svg.text(left + 18, top + 26, "full fine-tune", 9);
  return svg.str();
}

}  // namespace

AnalysisReport analyze(const std::vector<RunRecord>& records, const std::string& out_dir,
                       const std::string& metric_in) {
  if (records.empty()) throw DataError("analyze needs at least one record");
  ensure_directory(out_dir);
  AnalysisReport rep;
  rep.metric = metric_in;
  if (rep.metric.empty()) {
    rep.metric = records.front().task.rfind("finetune", 0) == 0 ? "frechet" : "similarity";
  }
  const auto means = design_means(records, rep.metric);
  std::vector<RunRecord> adapters;
  std::size_t failed = 0;
  for (const auto& r : records) {
    if (r.failed) {
      ++failed;
      continue;
    }
    if (!r.is_full_finetune() && r.summary.count(rep.metric)) adapters.push_back(r);
  }
  if (failed) rep.notices.push_back(std::to_string(failed) + " failed record(s) excluded");

  // (a) heatmap
  if (adapters.empty()) {
    rep.notices.push_back("heatmap skipped: no adapter records with metric " + rep.metric);
  } else {
    write_file(out_dir + "/heatmap.svg", heatmap_svg(adapters, rep.metric));
    rep.files.push_back("heatmap.svg");
  }

  // (b) ANOVA
  std::vector<AnovaRow> rows;
  if (adapters.size() < 3) {
    rep.notices.push_back("ANOVA skipped: fewer than 3 adapter records");
  } else {
    rows = anova_report(adapters, rep.metric);
    std::ofstream csv(out_dir + "/anova.csv");
    write_anova_csv(csv, rows);
    write_file(out_dir + "/anova.svg", anova_svg(rows, "F statistic per factor (" + rep.metric + ")"));
    rep.files.push_back("anova.csv");
    rep.files.push_back("anova.svg");
  }

  // best design
  const bool up = higher_is_better(rep.metric);
  for (const auto& [d, m] : means) {
    if (d == kFullFinetune) continue;
    if (!rep.best_design || (up ? m > means.at(*rep.best_design) : m < means.at(*rep.best_design))) {
      rep.best_design = d;
    }
  }

  // (c) best vs full
  const bool has_full = means.count(kFullFinetune) > 0;
  if (!rep.best_design || !has_full) {
    rep.notices.push_back("best-vs-full panel skipped: needs both adapter and full fine-tune records");
  } else {
    write_file(out_dir + "/best_vs_full.svg", scatter_svg(records, *rep.best_design, rep.metric));
    rep.files.push_back("best_vs_full.svg");
  }

  // (d) summary
  std::ostringstream md;
  md << "# Sweep summary\n\n";
  md << "- records: " << records.size() << " (" << failed << " failed)\n";
  md << "- metric: " << rep.metric << (up ? " (higher is better)" : " (lower is better)") << "\n";
  if (rep.best_design) {
    md << "- best design point: `" << *rep.best_design << "` (mean " << fmt(means.at(*rep.best_design), 6)
       << ")\n";
  }
  if (has_full) md << "- full fine-tune mean: " << fmt(means.at(kFullFinetune), 6) << "\n";
  if (!rows.empty()) {
    md << "\n## One-way ANOVA\n\n| factor | k | N | F | p |\n|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      md << "| " << to_string(r.factor) << " | ";
      if (!r.analyzable) {
        md << " | | " << r.note << " | |\n";
        continue;
      }
      md << r.result.k << " | " << r.result.n << " | "
         << (r.result.f_infinite ? "inf" : fmt(r.result.f, 4)) << " | "
         << (r.result.p ? fmt(*r.result.p, 3) : "") << " |\n";
    }
  }
  std::vector<std::pair<std::string, double>> ranked(means.begin(), means.end());
  std::sort(ranked.begin(), ranked.end(), [up](const auto& a, const auto& b) {
    return up ? a.second > b.second : a.second < b.second;
  });
  md << "\n## Ranking\n\n| rank | design | mean |\n|---|---|---|\n";
  for (std::size_t i = 0; i < ranked.size() && i < 10; ++i) {
    md << "| " << i + 1 << " | `" << ranked[i].first << "` | " << fmt(ranked[i].second, 6) << " |\n";
  }
  if (!rep.notices.empty()) {
    md << "\n## Notices\n\n";
    for (const auto& n : rep.notices) md << "- " << n << "\n";
  }
  write_file(out_dir + "/summary.md", md.str());
  rep.files.push_back("summary.md");
  return rep;
}

}  // namespace adapterlab
