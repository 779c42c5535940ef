#include "adapterlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "adapterlab/imageio.hpp"

namespace adapterlab {

namespace {

constexpr std::size_t kSupersample = 4;
constexpr double kPositionStd = 0.5;

double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  return a < 0.0 ? a + two_pi : a;
}

/// Inside test for a regular n-gon of unit circumradius centred at the origin.
bool inside_polygon(double x, double y, int sides, double rotation) {
  const double r = std::hypot(x, y);
  if (r == 0.0) return true;
  const double sector = 2.0 * std::numbers::pi / sides;
  const double a = wrap_angle(std::atan2(y, x) - rotation);
  const double local = std::fmod(a, sector) - sector / 2.0;
  return r * std::cos(local) <= std::cos(std::numbers::pi / sides);
}

bool inside_star(double x, double y, double rotation) {
  const double r = std::hypot(x, y);
  const double sector = 2.0 * std::numbers::pi / 5.0;
  const double a = std::fmod(wrap_angle(std::atan2(y, x) - rotation), sector) / sector;
  const double frac = std::abs(a - 0.5) * 2.0;  // 1 at tips, 0 between them
  const double inner = 0.45;
  return r <= inner + (1.0 - inner) * frac;
}

bool inside_rect(double x, double y, double x0, double y0, double x1, double y1) {
  return x >= x0 && x <= x1 && y >= y0 && y <= y1;
}

/// Side-view silhouette: body, head, ears, four legs. Unit box coordinates.
bool inside_dog(double x, double y) {
  const double bx = (x + 0.15) / 0.6, by = y / 0.32;
  if (bx * bx + by * by <= 1.0) return true;
  if (std::hypot(x - 0.55, y + 0.35) <= 0.28) return true;
  if (inside_rect(x, y, 0.45, -0.8, 0.6, -0.5)) return true;
  for (double lx : {-0.6, -0.35, 0.05, 0.3}) {
    if (inside_rect(x, y, lx, 0.15, lx + 0.15, 0.85)) return true;
  }
  return false;
}

bool inside_shape(const std::string& shape, double x, double y, double rotation) {
  if (shape == "circle") return x * x + y * y <= 1.0;
  if (shape == "square") return inside_polygon(x, y, 4, rotation + std::numbers::pi / 4.0);
  if (shape == "triangle") return inside_polygon(x, y, 3, rotation - std::numbers::pi / 2.0);
  if (shape == "pentagon") return inside_polygon(x, y, 5, rotation - std::numbers::pi / 2.0);
  if (shape == "hexagon") return inside_polygon(x, y, 6, rotation);
  if (shape == "star") return inside_star(x, y, rotation - std::numbers::pi / 2.0);
  if (shape == "dog") {
    const double c = std::cos(-rotation), s = std::sin(-rotation);
    return inside_dog(c * x - s * y, s * x + c * y);
  }
  throw ConfigError("unknown shape '" + shape + "'");
}

Tensor background(std::size_t n, double level, double noise, Rng& rng) {
  std::vector<double> v(3 * n * n);
  for (auto& e : v) e = std::clamp(level + noise * rng.normal(), -1.0, 1.0);
  return Tensor({3, n, n}, std::move(v));
}

/// Alpha-blends `color` where `coverage(x, y)` holds, x and y in [0, 1).
template <typename Inside>
void paint(std::vector<double>& img, std::size_t n, const Color& color, Inside inside) {
  const double sub = 1.0 / static_cast<double>(kSupersample);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t hits = 0;
      for (std::size_t a = 0; a < kSupersample; ++a) {
        for (std::size_t b = 0; b < kSupersample; ++b) {
          const double y = (static_cast<double>(i) + (a + 0.5) * sub) / static_cast<double>(n);
          const double x = (static_cast<double>(j) + (b + 0.5) * sub) / static_cast<double>(n);
          if (inside(x, y)) ++hits;
        }
      }
      if (hits == 0) continue;
      const double alpha = static_cast<double>(hits) / (kSupersample * kSupersample);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double& px = img[(ch * n + i) * n + j];
        px = (1.0 - alpha) * px + alpha * color[ch];
      }
    }
  }
}

Color hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h / 60.0, 6.0);
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  return {2.0 * (r + m) - 1.0, 2.0 * (g + m) - 1.0, 2.0 * (b + m) - 1.0};
}

Color jitter(const Color& c, double amount, Rng& rng) {
  Color out;
  for (std::size_t i = 0; i < 3; ++i) out[i] = std::clamp(c[i] + amount * rng.normal(), -1.0, 1.0);
  return out;
}

nlohmann::json color_json(const Color& c) { return nlohmann::json::array({c[0], c[1], c[2]}); }

std::string image_name(const std::string& prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << '_';
  os.width(4);
  os.fill('0');
  os << i << ".ppm";
  return os.str();
}

}  // namespace

const std::vector<std::string>& shape_classes() {
  static const std::vector<std::string> v = {"circle", "square",  "triangle", "pentagon",
                                             "hexagon", "star", "dog"};
  return v;
}

const std::vector<std::string>& flower_classes() {
  static const std::vector<std::string> v = {"rose", "daisy", "tulip", "iris", "lily"};
  return v;
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> w = {"a", "photo", "of", std::string(kRareToken)};
    for (const auto& s : shape_classes()) w.push_back(s);
    for (const auto& s : flower_classes()) w.push_back(s);
    w.emplace_back(kPadToken);
    return w;
  }();
  return v;
}

std::string class_prompt(std::string_view cls, bool rare) {
  std::string out = "a photo of ";
  if (rare) {
    out += kRareToken;
    out += ' ';
  }
  out += cls;
  return out;
}

PromptEncoder::PromptEncoder(std::size_t cond_dim, std::uint64_t seed, std::size_t max_len)
    : cond_dim_(cond_dim), max_len_(max_len), seed_(seed) {
  if (cond_dim == 0 || max_len == 0) throw ConfigError("prompt encoder needs positive sizes");
  Rng rng(derive_seed(seed, "prompt-encoder", 0));
  table_ = rng.normal_tensor({vocabulary().size(), cond_dim});
  positions_ = rng.normal_tensor({max_len, cond_dim}, kPositionStd);
}

std::vector<std::size_t> PromptEncoder::tokenize(std::string_view text) const {
  const auto& vocab = vocabulary();
  std::vector<std::size_t> ids;
  std::istringstream is{std::string(text)};
  std::string word;
  while (is >> word) {
    auto it = std::find(vocab.begin(), vocab.end(), word);
    if (it == vocab.end() || word == kPadToken) {
      throw VocabularyError("unknown prompt word '" + word + "'");
    }
    ids.push_back(static_cast<std::size_t>(it - vocab.begin()));
  }
  if (ids.size() > max_len_) {
    throw VocabularyError("prompt has " + std::to_string(ids.size()) + " words, limit is " +
                          std::to_string(max_len_));
  }
  return ids;
}

Tensor PromptEncoder::encode(std::string_view text) const {
  const auto ids = tokenize(text);
  const std::size_t pad = vocabulary().size() - 1;
  std::vector<double> out(max_len_ * cond_dim_);
  for (std::size_t i = 0; i < max_len_; ++i) {
    const bool real = i < ids.size();
    const std::size_t id = real ? ids[i] : pad;
    for (std::size_t k = 0; k < cond_dim_; ++k) {
      out[i * cond_dim_ + k] =
          table_[id * cond_dim_ + k] + (real ? positions_[i * cond_dim_ + k] : 0.0);
    }
  }
  return Tensor({max_len_, cond_dim_}, std::move(out));
}

Tensor render_shape(const ShapeStyle& style, std::size_t image_size, Rng& rng) {
  if (image_size < 4) throw ConfigError("image size must be at least 4");
  Tensor bg = background(image_size, style.background, style.noise, rng);
  std::vector<double> img(bg.data().begin(), bg.data().end());
  paint(img, image_size, style.color, [&](double x, double y) {
    return inside_shape(style.shape, (x - style.cx) / style.radius, (y - style.cy) / style.radius,
                        style.rotation);
  });
  return Tensor({3, image_size, image_size}, std::move(img));
}

Color warm_color(Rng& rng) {
  return hsv_to_rgb(rng.uniform(0.0, 150.0), rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0));
}

ShapeStyle random_style(const std::string& shape, Rng& rng) {
  ShapeStyle s;
  s.shape = shape;
  s.color = warm_color(rng);
  s.radius = rng.uniform(0.28, 0.4);
  s.cx = 0.5 + rng.uniform(-0.08, 0.08);
  s.cy = 0.5 + rng.uniform(-0.08, 0.08);
  s.rotation = rng.uniform(-0.3, 0.3);
  s.background = rng.uniform(-0.9, -0.5);
  return s;
}

LabeledImage general_sample(std::size_t image_size, Rng& rng) {
  const auto& classes = shape_classes();
  const auto& cls = classes[rng.index(classes.size())];
  const ShapeStyle style = random_style(cls, rng);
  return {render_shape(style, image_size, rng), class_prompt(cls)};
}

nlohmann::json PersonalizationTask::manifest() const {
  return {{"kind", "personalization"},
          {"seed", seed},
          {"image_size", image_size},
          {"class", class_spec.shape},
          {"regularization_count", regularization.size()},
          {"personalization_count", personalization.size()},
          {"target_color", color_json(target_spec.color)},
          {"target_radius", target_spec.radius},
          {"personal_prompt", personal_prompt()},
          {"class_prompt", class_prompt_text()}};
}

PersonalizationTask build_personalization_task(std::uint64_t seed, std::size_t image_size,
                                               const ClassSpec& class_spec,
                                               const TargetSpec& target_spec) {
  if (target_spec.count == 0 || target_spec.count > 10) {
    throw ConfigError("personalization set must hold 1..10 images");
  }
  if (class_spec.count == 0) throw ConfigError("regularization set must be nonempty");
  inside_shape(class_spec.shape, 0.0, 0.0, 0.0);  // rejects unknown shapes early

  PersonalizationTask task;
  task.seed = seed;
  task.image_size = image_size;
  task.class_spec = class_spec;
  task.target_spec = target_spec;

  Rng prng(derive_seed(seed, "personal", 0));
  for (std::size_t i = 0; i < target_spec.count; ++i) {
    ShapeStyle s;
    s.shape = class_spec.shape;
    s.color = target_spec.color;
    s.radius = target_spec.radius * prng.uniform(0.95, 1.05);
    s.cx = 0.5 + prng.uniform(-0.04, 0.04);
    s.cy = 0.5 + prng.uniform(-0.04, 0.04);
    s.rotation = prng.uniform(-0.1, 0.1);
    s.background = -0.7;
    task.personalization.push_back(render_shape(s, image_size, prng));
  }
  Rng rrng(derive_seed(seed, "regularization", 0));
  for (std::size_t i = 0; i < class_spec.count; ++i) {
    task.regularization.push_back(
        render_shape(random_style(class_spec.shape, rrng), image_size, rrng));
  }
  return task;
}

double target_attribute(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("target_attribute expects [3 x H x W], got " + shape_string(image.shape()));
  }
  const std::size_t hw = image.dim(1) * image.dim(2);
  double acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) acc += image[2 * hw + i] - image[i];
  return acc / static_cast<double>(hw);
}

double attribute_separation(const PersonalizationTask& task) {
  auto stats = [](const std::vector<Tensor>& set) {
    double m = 0.0, m2 = 0.0;
    for (const auto& img : set) {
      const double a = target_attribute(img);
      m += a;
      m2 += a * a;
    }
    const double n = static_cast<double>(set.size());
    m /= n;
    return std::pair{m, std::sqrt(std::max(0.0, m2 / n - m * m))};
  };
  const auto [mp, sp] = stats(task.personalization);
  const auto [mr, sr] = stats(task.regularization);
  (void)sp;
  return std::abs(mp - mr) / std::max(sr, 1e-12);
}

const std::vector<FlowerSpec>& flower_specs() {
  static const std::vector<FlowerSpec> v = {
      {"rose", 8, {0.9, -0.6, -0.5}, {0.4, -0.8, -0.6}},
      {"daisy", 10, {0.9, 0.9, 0.9}, {0.9, 0.7, -0.8}},
      {"tulip", 3, {0.9, 0.2, -0.6}, {-0.2, 0.5, -0.6}},
      {"iris", 3, {0.1, -0.5, 0.8}, {0.9, 0.8, -0.6}},
      {"lily", 6, {0.9, 0.3, 0.5}, {0.9, 0.2, -0.7}},
  };
  return v;
}

Tensor render_flower(const FlowerSpec& spec, std::size_t image_size, Rng& rng) {
  if (image_size < 4) throw ConfigError("image size must be at least 4");
  Tensor bg = background(image_size, rng.uniform(-0.5, -0.2), 0.05, rng);
  std::vector<double> img(bg.data().begin(), bg.data().end());
  const double R = rng.uniform(0.35, 0.45);
  const double cx = 0.5 + rng.uniform(-0.05, 0.05), cy = 0.5 + rng.uniform(-0.05, 0.05);
  const double rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const Color petal = jitter(spec.petal_color, 0.05, rng);
  const double step = 2.0 * std::numbers::pi / static_cast<double>(spec.petals);
  const double petal_r = std::min(0.45 * R, 0.9 * R * std::sin(step / 2.0) + 0.15 * R);
  paint(img, image_size, petal, [&](double x, double y) {
    for (std::size_t p = 0; p < spec.petals; ++p) {
      const double a = rot + step * static_cast<double>(p);
      if (std::hypot(x - cx - 0.6 * R * std::cos(a), y - cy - 0.6 * R * std::sin(a)) <= petal_r) {
        return true;
      }
    }
    return false;
  });
  paint(img, image_size, jitter(spec.center_color, 0.05, rng),
        [&](double x, double y) { return std::hypot(x - cx, y - cy) <= 0.28 * R; });
  return Tensor({3, image_size, image_size}, std::move(img));
}

nlohmann::json FinetuneTask::manifest() const {
  return {{"kind", "finetune"},
          {"seed", seed},
          {"image_size", image_size},
          {"classes", flower_classes()},
          {"count", images.size()}};
}

FinetuneTask build_finetune_task(std::uint64_t seed, std::size_t image_size,
                                 std::size_t per_class) {
  if (per_class == 0) throw ConfigError("fine-tune task needs at least one image per class");
  FinetuneTask task;
  task.seed = seed;
  task.image_size = image_size;
  Rng rng(derive_seed(seed, "flowers", 0));
  for (const auto& spec : flower_specs()) {
    for (std::size_t i = 0; i < per_class; ++i) {
      task.images.push_back(render_flower(spec, image_size, rng));
      task.prompts.push_back(class_prompt(spec.name));
    }
  }
  return task;
}

Batch training_batch(const PersonalizationTask& task, Rng& rng, std::size_t batch_size,
                     double personal_fraction) {
  if (!(personal_fraction >= 0.0 && personal_fraction <= 1.0)) {
    throw ConfigError("personal fraction must lie in [0, 1]");
  }
  Batch b;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const bool personal = rng.uniform() < personal_fraction;
    const auto& set = personal ? task.personalization : task.regularization;
    b.images.push_back(set[rng.index(set.size())]);
    b.prompts.push_back(personal ? task.personal_prompt() : task.class_prompt_text());
    b.personal.push_back(personal);
  }
  return b;
}

Batch training_batch(const FinetuneTask& task, Rng& rng, std::size_t batch_size) {
  Batch b;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t k = rng.index(task.images.size());
    b.images.push_back(task.images[k]);
    b.prompts.push_back(task.prompts[k]);
    b.personal.push_back(false);
  }
  return b;
}

void write_task(const std::string& dir, const PersonalizationTask& task) {
  ensure_directory(dir);
  nlohmann::json m = task.manifest();
  m["files"] = nlohmann::json::object();
  for (std::size_t i = 0; i < task.personalization.size(); ++i) {
    const auto name = image_name("personal", i);
    write_ppm(dir + "/" + name, task.personalization[i]);
    m["files"]["personal"].push_back(name);
  }
  for (std::size_t i = 0; i < task.regularization.size(); ++i) {
    const auto name = image_name("reg", i);
    write_ppm(dir + "/" + name, task.regularization[i]);
    m["files"]["regularization"].push_back(name);
  }
  std::ofstream(dir + "/manifest.json") << m.dump(2) << '\n';
}

void write_task(const std::string& dir, const FinetuneTask& task) {
  ensure_directory(dir);
  nlohmann::json m = task.manifest();
  for (std::size_t i = 0; i < task.images.size(); ++i) {
    const auto name = image_name("img", i);
    write_ppm(dir + "/" + name, task.images[i]);
    m["files"].push_back({{"file", name}, {"prompt", task.prompts[i]}});
  }
  std::ofstream(dir + "/manifest.json") << m.dump(2) << '\n';
}

}  // namespace adapterlab
