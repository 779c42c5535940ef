#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "adapterlab/diffusion.hpp"
#include "adapterlab/tasks.hpp"
#include "adapterlab/tensor.hpp"

namespace adapterlab {

/// Frozen random conv net: three (3x3 conv, SiLU, 2x2 average pool) stages,
/// then a global average over what is left of the spatial grid.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed, std::size_t in_channels = 3);

  static constexpr std::size_t kDim = 64;
  std::uint64_t seed() const { return seed_; }

  /// Image [C x H x W] with H, W divisible by 8.
  std::vector<double> features(const Tensor& image) const;
  std::vector<std::vector<double>> features(const std::vector<Tensor>& images) const;

 private:
  std::uint64_t seed_;
  std::vector<Tensor> weights_, biases_;
};

/// Mean cosine similarity over all (gen, ref) pairs. Throws DataError on an
/// empty set or a zero-norm feature vector.
double clip_similarity(const std::vector<std::vector<double>>& gen,
                       const std::vector<std::vector<double>>& ref);
double clip_similarity(const std::vector<Tensor>& gen, const std::vector<Tensor>& ref,
                       const FeatureExtractor& extractor);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
  std::size_t count = 0;

  /// At least as many samples as dimensions.
  bool well_conditioned() const { return count >= static_cast<std::size_t>(mean.size()); }

  static GaussianStats from_samples(const std::vector<std::vector<double>>& samples);
};

/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2). Eigenvalues
/// below -1e-8 (relative to the largest magnitude, floor 1) raise NumericError;
/// smaller negatives are clamped to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

/// Per-pixel channel L2 norm of eps(x_t, t, c_a) - eps(x_t, t, c_b), with
/// x_t = q_sample(image, t, eps(seed)). Returns [H x W].
Tensor noise_diff_map(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                      const PromptEncoder& encoder, const Tensor& image, std::size_t t,
                      const std::string& prompt_a, const std::string& prompt_b,
                      std::uint64_t seed);

struct DiffScoreConfig {
  std::vector<std::size_t> t_set = {250, 500, 750};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};
  std::size_t max_images = 32;
};

/// Mean of noise_diff_map means over regularization images x t_set x seeds,
/// comparing the [V] prompt against the plain class prompt.
double diff_score(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                  const PromptEncoder& encoder, const PersonalizationTask& task,
                  const DiffScoreConfig& config = {});

}  // namespace adapterlab
