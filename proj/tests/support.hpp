#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "adapterlab/rng.hpp"
#include "adapterlab/tensor.hpp"
#include "adapterlab/unet.hpp"

namespace testing_support {

using adapterlab::Tensor;

/// Small enough that finite differences over the whole model stay cheap.
inline adapterlab::UNetConfig tiny_config() {
  adapterlab::UNetConfig c;
  c.image_size = 8;
  c.base_channels = 4;
  c.channel_mult = {1, 2};
  c.cond_dim = 4;
  c.ffn_mult = 2;
  c.time_dim = 8;
  c.time_embed_dim = 8;
  c.groups = 2;
  return c;
}

inline Tensor random_tensor(adapterlab::Shape shape, std::uint64_t seed, double sd = 1.0) {
  adapterlab::Rng rng(seed);
  return rng.normal_tensor(std::move(shape), sd);
}

inline Tensor leaf(adapterlab::Shape shape, std::uint64_t seed, double sd = 1.0) {
  Tensor t = random_tensor(std::move(shape), seed, sd);
  t.set_requires_grad(true);
  return t;
}

/// Analytic gradient of scalar f with respect to each of `inputs`.
inline std::vector<std::vector<double>> analytic_grads(const std::function<Tensor()>& f,
                                                       std::vector<Tensor> inputs) {
  for (auto& t : inputs) t.zero_grad();
  adapterlab::GradTape tape;
  {
    adapterlab::TapeScope scope(tape);
    tape.backward(f());
  }
  std::vector<std::vector<double>> out;
  for (auto& t : inputs) out.push_back(t.grad());
  return out;
}

/// Central difference of f at coordinate i of t, evaluated without a tape.
inline double numeric_grad(const std::function<Tensor()>& f, Tensor t, std::size_t i,
                           double h = 1e-5) {
  auto d = t.mutable_data();
  const double keep = d[i];
  d[i] = keep + h;
  const double up = f().item();
  d[i] = keep - h;
  const double down = f().item();
  d[i] = keep;
  return (up - down) / (2.0 * h);
}

/// max |analytic - numeric| / max |numeric| over every coordinate of every input.
inline double gradient_error(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs) {
  const auto grads = analytic_grads(f, inputs);
  double worst = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double n = numeric_grad(f, inputs[k], i);
      worst = std::max(worst, std::abs(grads[k][i] - n));
      scale = std::max(scale, std::abs(n));
    }
  }
  return worst / std::max(scale, 1e-12);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

/// Fresh, empty directory under the system temp dir.
inline std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("adapterlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testing_support
