#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapterlab/errors.hpp"
#include "adapterlab/rng.hpp"
#include "adapterlab/tensor.hpp"

namespace adapterlab {

/// A prompt word outside the fixed vocabulary.
class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::string_view kRareToken = "[V]";
inline constexpr std::string_view kPadToken = "<pad>";

/// Shape classes of the general synthetic distribution.
const std::vector<std::string>& shape_classes();
/// Flower names of the fine-tune task.
const std::vector<std::string>& flower_classes();
/// Template words, [V], shape classes, flower names, then the pad token.
const std::vector<std::string>& vocabulary();

/// "a photo of <cls>" or, with the rare token, "a photo of [V] <cls>".
std::string class_prompt(std::string_view cls, bool rare = false);

/// Frozen lookup-table text encoder. Real tokens get a fixed positional offset;
/// padding rows are the bare pad embedding.
class PromptEncoder {
 public:
  PromptEncoder(std::size_t cond_dim, std::uint64_t seed, std::size_t max_len = 8);

  std::size_t cond_dim() const { return cond_dim_; }
  std::size_t max_len() const { return max_len_; }
  std::uint64_t seed() const { return seed_; }

  /// Whitespace-split word ids. Throws VocabularyError for unknown words or
  /// prompts longer than max_len().
  std::vector<std::size_t> tokenize(std::string_view text) const;

  /// [max_len x cond_dim]; never tracked.
  Tensor encode(std::string_view text) const;
  /// Encoding of the empty prompt (all pad rows).
  Tensor empty() const { return encode(""); }

  const Tensor& table() const { return table_; }

 private:
  std::size_t cond_dim_;
  std::size_t max_len_;
  std::uint64_t seed_;
  Tensor table_;      // [vocab x d_c]
  Tensor positions_;  // [max_len x d_c]
};

using Color = std::array<double, 3>;  // RGB in [-1, 1]

struct ShapeStyle {
  std::string shape = "pentagon";
  Color color = {0.8, 0.3, -0.6};
  double radius = 0.32;  // fraction of the image side
  double cx = 0.5, cy = 0.5;
  double rotation = 0.0;  // radians
  double background = -0.7;
  double noise = 0.05;
};

/// Supersampled flat-shaded shape over a noisy grey background, [3 x N x N] in [-1, 1].
Tensor render_shape(const ShapeStyle& style, std::size_t image_size, Rng& rng);

/// Random warm colour (hue 0..150 degrees); blue never appears.
Color warm_color(Rng& rng);
/// Random pose and background for `shape` with a warm colour.
ShapeStyle random_style(const std::string& shape, Rng& rng);

/// Draw from the general synthetic distribution (pretraining data).
struct LabeledImage {
  Tensor image;
  std::string prompt;
};
LabeledImage general_sample(std::size_t image_size, Rng& rng);

struct ClassSpec {
  std::string shape = "pentagon";
  std::size_t count = 200;
};

struct TargetSpec {
  Color color = {-0.7, -0.3, 0.9};
  std::size_t count = 5;
  double radius = 0.34;
};

struct PersonalizationTask {
  std::uint64_t seed = 0;
  std::size_t image_size = 0;
  ClassSpec class_spec;
  TargetSpec target_spec;
  std::vector<Tensor> personalization;
  std::vector<Tensor> regularization;

  std::string personal_prompt() const { return class_prompt(class_spec.shape, true); }
  std::string class_prompt_text() const { return class_prompt(class_spec.shape, false); }
  nlohmann::json manifest() const;
};

PersonalizationTask build_personalization_task(std::uint64_t seed, std::size_t image_size,
                                               const ClassSpec& class_spec = {},
                                               const TargetSpec& target_spec = {});

/// Blue-minus-red channel mean of one image; the attribute that separates the two sets.
double target_attribute(const Tensor& image);
/// |mean(personal) - mean(reg)| / std(reg) of target_attribute.
double attribute_separation(const PersonalizationTask& task);

struct FlowerSpec {
  std::string name;
  std::size_t petals = 5;
  Color petal_color;
  Color center_color;
};

const std::vector<FlowerSpec>& flower_specs();
Tensor render_flower(const FlowerSpec& spec, std::size_t image_size, Rng& rng);

struct FinetuneTask {
  std::uint64_t seed = 0;
  std::size_t image_size = 0;
  std::vector<Tensor> images;
  std::vector<std::string> prompts;  // one caption per image

  nlohmann::json manifest() const;
};

FinetuneTask build_finetune_task(std::uint64_t seed, std::size_t image_size,
                                 std::size_t per_class = 40);

struct Batch {
  std::vector<Tensor> images;
  std::vector<std::string> prompts;
  std::vector<bool> personal;  // personalization sample flag
};

/// Each slot independently draws a personalization sample with probability
/// `personal_fraction` (paired with the [V] prompt), else a regularization one.
Batch training_batch(const PersonalizationTask& task, Rng& rng, std::size_t batch_size,
                     double personal_fraction = 0.5);
Batch training_batch(const FinetuneTask& task, Rng& rng, std::size_t batch_size);

/// Writes manifest.json plus one PPM per image under `dir`.
void write_task(const std::string& dir, const PersonalizationTask& task);
void write_task(const std::string& dir, const FinetuneTask& task);

}  // namespace adapterlab
