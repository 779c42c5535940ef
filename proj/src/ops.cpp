#include "adapterlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace adapterlab {

using detail::TensorNode;
using NodeList = std::vector<std::shared_ptr<TensorNode>>;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

std::string pair_shapes(const Tensor& a, const Tensor& b) {
  return shape_string(a.shape()) + " and " + shape_string(b.shape());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + pair_shapes(a, b));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_string(t.shape()));
}

/// Vector-like parameter of length n: [n] or [1 x n].
void require_vector(const Tensor& t, std::size_t n, const char* op) {
  const bool ok = (t.rank() == 1 && t.dim(0) == n) ||
                  (t.rank() == 2 && t.dim(0) == 1 && t.dim(1) == n);
  require(ok, std::string(op) + ": expected vector of length " + std::to_string(n) + ", got " +
                  shape_string(t.shape()));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::silu: return "silu";
    case Activation::identity: return "identity";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "silu") return Activation::silu;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const TensorNode& o, NodeList& in) {
                       for (auto& n : in) {
                         if (!n->tracked) continue;
                         auto& g = n->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                     },
                     "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const TensorNode& o, NodeList& in) {
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                       }
                     },
                     "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [](const TensorNode& o, NodeList& in) {
                       const auto& ad = in[0]->data;
                       const auto& bd = in[1]->data;
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bd[i];
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ad[i];
                       }
                     },
                     "mul");
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), {a},
                     [s](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
                     },
                     "scale");
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  require_vector(bias, d, "add_row_bias");
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xd[i * d + j] + bd[j];
  return make_result(x.shape(), std::move(out), {x, bias},
                     [n, d](const TensorNode& o, NodeList& in) {
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
                       }
                     },
                     "add_row_bias");
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 3, "add_channel_bias");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  require_vector(bias, c, "add_channel_bias");
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto bd = bias.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p) out[k * plane + p] = xd[k * plane + p] + bd[k];
  return make_result(x.shape(), std::move(out), {x, bias},
                     [c, plane](const TensorNode& o, NodeList& in) {
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t k = 0; k < c; ++k) {
                           double s = 0;
                           for (std::size_t p = 0; p < plane; ++p) s += o.grad[k * plane + p];
                           g[k] += s;
                         }
                       }
                     },
                     "add_channel_bias");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + pair_shapes(a, b));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = &bd[p * m];
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({n, m}, std::move(out), {a, b},
                     [n, k, m](const TensorNode& o, NodeList& in) {
                       const auto& ad = in[0]->data;
                       const auto& bd = in[1]->data;
                       const auto& go = o.grad;
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             double s = 0;
                             for (std::size_t j = 0; j < m; ++j) s += go[i * m + j] * bd[p * m + j];
                             g[i * k + p] += s;
                           }
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double av = ad[i * k + p];
                             if (av == 0.0) continue;
                             for (std::size_t j = 0; j < m; ++j) g[p * m + j] += av * go[i * m + j];
                           }
                       }
                     },
                     "matmul");
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(n * m);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = ad[i * m + j];
  return make_result({m, n}, std::move(out), {a},
                     [n, m](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) g[i * m + j] += o.grad[j * n + i];
                     },
                     "transpose");
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(n * m);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &xd[i * m];
    const double mx = *std::max_element(row, row + m);
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = std::exp(row[j] - mx);
      s += out[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= s;
  }
  return make_result(x.shape(), std::move(out), {x},
                     [n, m](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                         double dot = 0;
                         for (std::size_t j = 0; j < m; ++j)
                           dot += o.grad[i * m + j] * o.data[i * m + j];
                         for (std::size_t j = 0; j < m; ++j)
                           g[i * m + j] += o.data[i * m + j] * (o.grad[i * m + j] - dot);
                       }
                     },
                     "softmax_rows");
}

namespace {

/// Shared normalisation kernel: `segments` groups of `len` contiguous values,
/// each normalised on its own; affine parameters indexed by `affine_index(i)`.
/// Returns normalised values (pre-affine) and per-segment inverse std.
struct NormCache {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

NormCache normalize_segments(std::span<const double> x, std::size_t segments, std::size_t len,
                             double eps) {
  NormCache c;
  c.xhat.resize(x.size());
  c.inv_std.resize(segments);
  for (std::size_t s = 0; s < segments; ++s) {
    const double* v = &x[s * len];
    double mu = 0;
    for (std::size_t i = 0; i < len; ++i) mu += v[i];
    mu /= static_cast<double>(len);
    double var = 0;
    for (std::size_t i = 0; i < len; ++i) var += (v[i] - mu) * (v[i] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    c.inv_std[s] = is;
    for (std::size_t i = 0; i < len; ++i) c.xhat[s * len + i] = (v[i] - mu) * is;
  }
  return c;
}

/// dx for y = xhat over one segment given dxhat.
void normalize_backward(const double* dxhat, const double* xhat, double inv_std, std::size_t len,
                        double* dx) {
  double mean_d = 0, mean_dx = 0;
  for (std::size_t i = 0; i < len; ++i) {
    mean_d += dxhat[i];
    mean_dx += dxhat[i] * xhat[i];
  }
  mean_d /= static_cast<double>(len);
  mean_dx /= static_cast<double>(len);
  for (std::size_t i = 0; i < len; ++i) dx[i] += inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  require_vector(gamma, d, "layer_norm");
  require_vector(beta, d, "layer_norm");
  auto cache = std::make_shared<NormCache>(normalize_segments(x.data(), n, d, eps));
  std::vector<double> out(n * d);
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = cache->xhat[i * d + j] * gd[j] + bd[j];
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [n, d, cache](const TensorNode& o, NodeList& in) {
                       const auto& gd = in[1]->data;
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         std::vector<double> dxhat(d);
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < d; ++j) dxhat[j] = o.grad[i * d + j] * gd[j];
                           normalize_backward(dxhat.data(), &cache->xhat[i * d], cache->inv_std[i], d,
                                              &g[i * d]);
                         }
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j)
                             g[j] += o.grad[i * d + j] * cache->xhat[i * d + j];
                       }
                       if (in[2]->tracked) {
                         auto& g = in[2]->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
                       }
                     },
                     "layer_norm");
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_rank(x, 3, "group_norm");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  require_vector(gamma, c, "group_norm");
  require_vector(beta, c, "group_norm");
  const std::size_t len = (c / groups) * plane;
  auto cache = std::make_shared<NormCache>(normalize_segments(x.data(), groups, len, eps));
  std::vector<double> out(x.numel());
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p)
      out[k * plane + p] = cache->xhat[k * plane + p] * gd[k] + bd[k];
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [c, plane, groups, len, cache](const TensorNode& o, NodeList& in) {
        const auto& gd = in[1]->data;
        if (in[0]->tracked) {
          auto& g = in[0]->ensure_grad();
          std::vector<double> dxhat(o.grad.size());
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t p = 0; p < plane; ++p)
              dxhat[k * plane + p] = o.grad[k * plane + p] * gd[k];
          for (std::size_t s = 0; s < groups; ++s)
            normalize_backward(&dxhat[s * len], &cache->xhat[s * len], cache->inv_std[s], len,
                               &g[s * len]);
        }
        if (in[1]->tracked) {
          auto& g = in[1]->ensure_grad();
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t p = 0; p < plane; ++p)
              g[k] += o.grad[k * plane + p] * cache->xhat[k * plane + p];
        }
        if (in[2]->tracked) {
          auto& g = in[2]->ensure_grad();
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t p = 0; p < plane; ++p) g[k] += o.grad[k * plane + p];
        }
      },
      "group_norm");
}

Tensor activation(const Tensor& x, Activation kind) {
  if (kind == Activation::identity) {
    // Still recorded so taps and adapters see a distinct tensor.
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_result(x.shape(), std::move(out), {x},
                       [](const TensorNode& o, NodeList& in) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       },
                       "activation");
  }
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Activation::relu: out[i] = xd[i] > 0 ? xd[i] : 0.0; break;
      case Activation::sigmoid: out[i] = sigmoid(xd[i]); break;
      case Activation::silu: out[i] = xd[i] * sigmoid(xd[i]); break;
      case Activation::identity: break;
    }
  }
  return make_result(x.shape(), std::move(out), {x},
                     [kind](const TensorNode& o, NodeList& in) {
                       const auto& xd = in[0]->data;
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         double d = 0;
                         switch (kind) {
                           case Activation::relu: d = xd[i] > 0 ? 1.0 : 0.0; break;
                           case Activation::sigmoid: d = o.data[i] * (1.0 - o.data[i]); break;
                           case Activation::silu: {
                             const double sg = sigmoid(xd[i]);
                             d = sg + xd[i] * sg * (1.0 - sg);
                             break;
                           }
                           case Activation::identity: d = 1.0; break;
                         }
                         g[i] += o.grad[i] * d;
                       }
                     },
                     "activation");
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "conv2d: input has " + std::to_string(cin) +
                               " channels but kernel expects " + std::to_string(w.dim(1)) +
                               " (" + pair_shapes(x, w) + ")");
  require(k == w.dim(3) && (k == 1 || k == 3),
          "conv2d: kernel must be 1x1 or 3x3, got " + shape_string(w.shape()));
  require_vector(b, cout, "conv2d");
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(wd);
  const std::size_t plane = h * wd;

  // Visits every (co, ci, ky, kx) tap with the valid output row/col ranges.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
            const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
            fn(co, ci, ((co * cin + ci) * k + ky) * k + kx, dy, dx, y0, y1, x0, x1);
          }
  };

  std::vector<double> out(cout * plane);
  const auto xd = x.data();
  const auto wdv = w.data();
  const auto bd = b.data();
  for (std::size_t co = 0; co < cout; ++co)
    std::fill(out.begin() + static_cast<long>(co * plane),
              out.begin() + static_cast<long>((co + 1) * plane), bd[co]);
  for_each_tap([&](std::size_t co, std::size_t ci, std::size_t widx, long dy, long dx, long y0,
                   long y1, long x0, long x1) {
    const double wv = wdv[widx];
    if (wv == 0.0) return;
    double* o = &out[co * plane];
    const double* in = &xd[ci * plane];
    for (long y = y0; y < y1; ++y) {
      double* orow = o + y * W;
      const double* irow = in + (y + dy) * W + dx;
      for (long xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
    }
  });

  return make_result(
      {cout, h, wd}, std::move(out), {x, w, b},
      [for_each_tap, cout, plane, W](const TensorNode& o, NodeList& in) {
        const auto& xd = in[0]->data;
        const auto& wdv = in[1]->data;
        const auto& go = o.grad;
        const bool gx = in[0]->tracked, gw = in[1]->tracked;
        std::vector<double>* gxv = gx ? &in[0]->ensure_grad() : nullptr;
        std::vector<double>* gwv = gw ? &in[1]->ensure_grad() : nullptr;
        if (gx || gw) {
          for_each_tap([&](std::size_t co, std::size_t ci, std::size_t widx, long dy, long dx,
                           long y0, long y1, long x0, long x1) {
            const double* g = &go[co * plane];
            if (gx) {
              const double wv = wdv[widx];
              if (wv != 0.0) {
                double* dxp = &(*gxv)[ci * plane];
                for (long y = y0; y < y1; ++y) {
                  const double* grow = g + y * W;
                  double* drow = dxp + (y + dy) * W + dx;
                  for (long xx = x0; xx < x1; ++xx) drow[xx] += wv * grow[xx];
                }
              }
            }
            if (gw) {
              const double* xin = &xd[ci * plane];
              double s = 0;
              for (long y = y0; y < y1; ++y) {
                const double* grow = g + y * W;
                const double* irow = xin + (y + dy) * W + dx;
                for (long xx = x0; xx < x1; ++xx) s += grow[xx] * irow[xx];
              }
              (*gwv)[widx] += s;
            }
          });
        }
        if (in[2]->tracked) {
          auto& gb = in[2]->ensure_grad();
          for (std::size_t co = 0; co < cout; ++co) {
            double s = 0;
            for (std::size_t p = 0; p < plane; ++p) s += go[co * plane + p];
            gb[co] += s;
          }
        }
      },
      "conv2d");
}

Tensor avg_pool2(const Tensor& x) {
  require_rank(x, 3, "avg_pool2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h % 2 == 0 && w % 2 == 0, "avg_pool2: spatial size must be even, got " +
                                        shape_string(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> out(c * ho * wo);
  const auto xd = x.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const double* p = &xd[(k * h + 2 * y) * w + 2 * xx];
        out[(k * ho + y) * wo + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  return make_result({c, ho, wo}, std::move(out), {x},
                     [c, h, w, ho, wo](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t y = 0; y < ho; ++y)
                           for (std::size_t xx = 0; xx < wo; ++xx) {
                             const double v = 0.25 * o.grad[(k * ho + y) * wo + xx];
                             double* p = &g[(k * h + 2 * y) * w + 2 * xx];
                             p[0] += v;
                             p[1] += v;
                             p[w] += v;
                             p[w + 1] += v;
                           }
                     },
                     "avg_pool2");
}

Tensor upsample2(const Tensor& x) {
  require_rank(x, 3, "upsample2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<double> out(c * ho * wo);
  const auto xd = x.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(k * ho + y) * wo + xx] = xd[(k * h + y / 2) * w + xx / 2];
  return make_result({c, ho, wo}, std::move(out), {x},
                     [c, h, w, ho, wo](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t y = 0; y < ho; ++y)
                           for (std::size_t xx = 0; xx < wo; ++xx)
                             g[(k * h + y / 2) * w + xx / 2] += o.grad[(k * ho + y) * wo + xx];
                     },
                     "upsample2");
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  require(a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
          "concat_channels: spatial mismatch " + pair_shapes(a, b));
  const std::size_t na = a.numel();
  std::vector<double> out;
  out.reserve(na + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return make_result({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b},
                     [na](const TensorNode& o, NodeList& in) {
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[na + i];
                       }
                     },
                     "concat_channels");
}

Tensor to_tokens(const Tensor& x) {
  require_rank(x, 3, "to_tokens");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p) out[p * c + k] = xd[k * plane + p];
  return make_result({plane, c}, std::move(out), {x},
                     [c, plane](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t p = 0; p < plane; ++p) g[k * plane + p] += o.grad[p * c + k];
                     },
                     "to_tokens");
}

Tensor from_tokens(const Tensor& tokens, std::size_t height, std::size_t width) {
  require_rank(tokens, 2, "from_tokens");
  const std::size_t plane = height * width, c = tokens.dim(1);
  require(tokens.dim(0) == plane, "from_tokens: " + std::to_string(tokens.dim(0)) +
                                      " tokens cannot fill " + std::to_string(height) + "x" +
                                      std::to_string(width));
  std::vector<double> out(tokens.numel());
  const auto td = tokens.data();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p) out[k * plane + p] = td[p * c + k];
  return make_result({c, height, width}, std::move(out), {tokens},
                     [c, plane](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t p = 0; p < plane; ++p) g[p * c + k] += o.grad[k * plane + p];
                     },
                     "from_tokens");
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x},
                     [](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                     },
                     "reshape");
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(d, 0.0);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += xd[i * d + j];
  for (auto& v : out) v /= static_cast<double>(n);
  return make_result({1, d}, std::move(out), {x},
                     [n, d](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       const double inv = 1.0 / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) g[i * d + j] += o.grad[j] * inv;
                     },
                     "mean_rows");
}

Tensor broadcast_rows(const Tensor& row, std::size_t n) {
  require(row.rank() == 2 && row.dim(0) == 1,
          "broadcast_rows: expected [1 x d], got " + shape_string(row.shape()));
  const std::size_t d = row.dim(1);
  std::vector<double> out(n * d);
  const auto rd = row.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = rd[j];
  return make_result({n, d}, std::move(out), {row},
                     [n, d](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
                     },
                     "broadcast_rows");
}

Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x},
                     [](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (auto& v : g) v += o.grad[0];
                     },
                     "sum");
}

Tensor mean(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_result({}, {s * inv}, {x},
                     [inv](const TensorNode& o, NodeList& in) {
                       auto& g = in[0]->ensure_grad();
                       for (auto& v : g) v += o.grad[0] * inv;
                     },
                     "mean");
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_result({}, {s * inv}, {a, b},
                     [inv](const TensorNode& o, NodeList& in) {
                       const auto& ad = in[0]->data;
                       const auto& bd = in[1]->data;
                       const double k = 2.0 * inv * o.grad[0];
                       if (in[0]->tracked) {
                         auto& g = in[0]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (ad[i] - bd[i]);
                       }
                       if (in[1]->tracked) {
                         auto& g = in[1]->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (ad[i] - bd[i]);
                       }
                     },
                     "mse");
}

}  // namespace adapterlab
