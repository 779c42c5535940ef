#include "adapterlab/metrics.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "adapterlab/ops.hpp"

namespace adapterlab {

namespace {

constexpr std::size_t kStageChannels[3] = {16, 32, FeatureExtractor::kDim};

/// Symmetric eigendecomposition with the negative-eigenvalue policy applied.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> checked_eig(const Eigen::MatrixXd& m,
                                                           const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  if (eig.info() != Eigen::Success) throw NumericError(std::string(what) + ": eigensolver failed");
  const auto& ev = eig.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -tol) {
    throw NumericError(std::string(what) + " is not positive semidefinite (eigenvalue " +
                       std::to_string(ev.minCoeff()) + ")");
  }
  return eig;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

FeatureExtractor::FeatureExtractor(std::uint64_t seed, std::size_t in_channels) : seed_(seed) {
  Rng rng(derive_seed(seed, "feature-extractor", 0));
  std::size_t cin = in_channels;
  for (std::size_t cout : kStageChannels) {
    weights_.push_back(rng.normal_tensor({cout, cin, 3, 3}, std::sqrt(2.0 / (9.0 * cin))));
    biases_.push_back(rng.normal_tensor({cout}, 0.1));
    cin = cout;
  }
}

std::vector<double> FeatureExtractor::features(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0) {
    throw DimensionError("feature extractor expects [C x H x W] with H, W divisible by 8, got " +
                         shape_string(image.shape()));
  }
  Tensor h = image.detach();
  for (std::size_t s = 0; s < weights_.size(); ++s) {
    h = avg_pool2(activation(conv2d(h, weights_[s], biases_[s]), Activation::silu));
  }
  const std::size_t hw = h.dim(1) * h.dim(2);
  std::vector<double> f(kDim, 0.0);
  for (std::size_t c = 0; c < kDim; ++c) {
    for (std::size_t i = 0; i < hw; ++i) f[c] += h[c * hw + i];
    f[c] /= static_cast<double>(hw);
  }
  return f;
}

std::vector<std::vector<double>> FeatureExtractor::features(const std::vector<Tensor>& images) const {
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(features(img));
  return out;
}

double clip_similarity(const std::vector<std::vector<double>>& gen,
                       const std::vector<std::vector<double>>& ref) {
  if (gen.empty() || ref.empty()) throw DataError("similarity needs two nonempty sets");
  auto norms = [](const std::vector<std::vector<double>>& set) {
    std::vector<double> n;
    for (const auto& f : set) {
      const double v = std::sqrt(dot(f, f));
      if (v == 0.0) throw DataError("degenerate feature vector with zero norm");
      n.push_back(v);
    }
    return n;
  };
  const auto ng = norms(gen), nr = norms(ref);
  double acc = 0.0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    if (gen[i].size() != ref.front().size()) throw DimensionError("feature dimensions differ");
    for (std::size_t j = 0; j < ref.size(); ++j) acc += dot(gen[i], ref[j]) / (ng[i] * nr[j]);
  }
  return acc / static_cast<double>(gen.size() * ref.size());
}

double clip_similarity(const std::vector<Tensor>& gen, const std::vector<Tensor>& ref,
                       const FeatureExtractor& extractor) {
  return clip_similarity(extractor.features(gen), extractor.features(ref));
}

GaussianStats GaussianStats::from_samples(const std::vector<std::vector<double>>& samples) {
  if (samples.size() < 2) throw DataError("Gaussian fit needs at least two samples");
  const auto d = static_cast<Eigen::Index>(samples.front().size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (static_cast<Eigen::Index>(samples[i].size()) != d) throw DimensionError("ragged samples");
    x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(samples[i].data(), d);
  }
  GaussianStats s;
  s.count = samples.size();
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(samples.size() - 1);
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows() ||
      a.cov.rows() != a.mean.size()) {
    throw DimensionError("Gaussian statistics have different dimensions");
  }
  const auto ea = checked_eig(a.cov, "covariance");
  const Eigen::VectorXd sqrt_ev = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd root_a =
      ea.eigenvectors() * sqrt_ev.asDiagonal() * ea.eigenvectors().transpose();
  const auto em = checked_eig(root_a * b.cov * root_a, "covariance product");
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

Tensor noise_diff_map(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                      const PromptEncoder& encoder, const Tensor& image, std::size_t t,
                      const std::string& prompt_a, const std::string& prompt_b,
                      std::uint64_t seed) {
  if (image.rank() != 3) throw DimensionError("noise_diff_map expects [C x H x W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (prompt_a == prompt_b) {
    schedule.alpha_bar(t);  // still validates t
    encoder.tokenize(prompt_a);
    return Tensor({h, w}, 0.0);
  }
  Rng rng(seed);
  const Tensor x_t = q_sample(schedule, image.detach(), t, rng.normal_tensor(image.shape()));
  const double td = static_cast<double>(t);
  const Tensor ea = predictor(x_t, td, encoder.encode(prompt_a));
  const Tensor eb = predictor(x_t, td, encoder.encode(prompt_b));
  std::vector<double> map(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) {
      const double d = ea[ch * h * w + i] - eb[ch * h * w + i];
      map[i] += d * d;
    }
  }
  for (auto& v : map) v = std::sqrt(v);
  return Tensor({h, w}, std::move(map));
}

double diff_score(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                  const PromptEncoder& encoder, const PersonalizationTask& task,
                  const DiffScoreConfig& config) {
  if (config.t_set.empty() || config.seeds.empty()) {
    throw ConfigError("diff_score needs nonempty t_set and seeds");
  }
  const std::size_t n = std::min(config.max_images, task.regularization.size());
  if (n == 0) throw ConfigError("diff_score needs at least one regularization image");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto t : config.t_set) {
      for (auto seed : config.seeds) {
        const Tensor m = noise_diff_map(predictor, schedule, encoder, task.regularization[i], t,
                                        task.personal_prompt(), task.class_prompt_text(),
                                        derive_seed(seed, "diffmap", i * 100003 + t));
        double s = 0.0;
        for (double v : m.data()) s += v;
        acc += s / static_cast<double>(m.numel());
        ++count;
      }
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace adapterlab
