#include "dtn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dtn/errors.hpp"

namespace dtn {

using detail::grad_target;
using detail::make_result;
using detail::Node;

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
}

std::size_t product(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

// Applies y = f(x) pointwise with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> pointwise(const char* op, const Tensor<T>& a, F f, DF df) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(op, a.shape(), std::move(out), {&a}, [df](Node<T>& self) {
    auto* ga = grad_target(*self.inputs[0]);
    if (!ga) return;
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * df(x[i], self.data[i]);
  });
}

}  // namespace

namespace kernels {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  // Transpose b once so the inner loop stays unit-stride.
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(a, bt.data(), c, m, n, k);
}

}  // namespace kernels

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (auto* ga = grad_target(an)) {
      kernels::gemm_nt(self.grad.data(), bn.data.data(), ga->data(), m, n, k);
    }
    if (auto* gb = grad_target(bn)) {
      kernels::gemm_tn(an.data.data(), self.grad.data(), gb->data(), m, k, n);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result<T>("transpose", {c, r}, std::move(out), {&a}, [r, c](Node<T>& self) {
    auto* ga = grad_target(*self.inputs[0]);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += self.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (auto* g = grad_target(*in))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    if (auto* g = grad_target(*self.inputs[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_target(*self.inputs[1]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (auto* g = grad_target(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bn.data[i];
    if (auto* g = grad_target(bn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * an.data[i];
  });
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias) {
  require_rank("add_rowwise", bias, 1);
  require(a.rank() >= 1 && a.shape().back() == bias.dim(0),
          "add_rowwise: bias " + shape_str(bias.shape()) + " does not match last axis of " +
              shape_str(a.shape()));
  const std::size_t c = bias.dim(0);
  const auto x = a.data(), b = bias.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + b[i % c];
  return make_result<T>("add_rowwise", a.shape(), std::move(out), {&a, &bias},
                        [c](Node<T>& self) {
                          if (auto* g = grad_target(*self.inputs[0]))
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                          if (auto* g = grad_target(*self.inputs[1]))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              (*g)[i % c] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return pointwise<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return pointwise<T>(
      "add_scalar", a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return pointwise<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return pointwise<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return pointwise<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return pointwise<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return pointwise<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return make_result<T>("sum", {1}, {total}, {&a}, [](Node<T>& self) {
    if (auto* g = grad_target(*self.inputs[0]))
      for (auto& v : *g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  const T n = static_cast<T>(a.numel());
  return make_result<T>("mean", {1}, {total / n}, {&a}, [n](Node<T>& self) {
    if (auto* g = grad_target(*self.inputs[0]))
      for (auto& v : *g) v += self.grad[0] / n;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {&a}, [](Node<T>& self) {
    if (auto* g = grad_target(*self.inputs[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    require(ok, "concat: incompatible part " + shape_str(s) + " vs " + shape_str(first) +
                    " along axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = product(first, 0, axis);
  const std::size_t inner = product(first, axis + 1, first.size());
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    offset += widths[k];
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                        [outer, row, widths](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                            if (auto* g = grad_target(*self.inputs[k])) {
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < widths[k]; ++i)
                                  (*g)[o * widths[k] + i] += self.grad[o * row + off + i];
                            }
                            off += widths[k];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  require(axis < s.size(), "slice: axis out of range for " + shape_str(s));
  require(begin < end && end <= s[axis], "slice: bad range [" + std::to_string(begin) + ", " +
                                             std::to_string(end) + ") on axis " +
                                             std::to_string(axis) + " of " + shape_str(s));
  const std::size_t outer = product(s, 0, axis);
  const std::size_t inner = product(s, axis + 1, s.size());
  const std::size_t src_row = s[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const auto src = a.data();
  std::vector<T> out(outer * width);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + o * src_row + start, width, out.begin() + o * width);
  return make_result<T>("slice", std::move(out_shape), std::move(out), {&a},
                        [outer, src_row, width, start](Node<T>& self) {
                          auto* g = grad_target(*self.inputs[0]);
                          if (!g) return;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < width; ++i)
                              (*g)[o * src_row + start + i] += self.grad[o * width + i];
                        });
}

template <typename T>
Tensor<T> index_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  require(a.rank() >= 1 && !rows.empty(), "index_rows: need a non-empty index list");
  const std::size_t n = a.dim(0);
  const std::size_t width = a.numel() / n;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (auto r : idx)
    require(r < n, "index_rows: row " + std::to_string(r) + " out of range for " +
                       shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[0] = idx.size();
  const auto src = a.data();
  std::vector<T> out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(src.begin() + idx[i] * width, width, out.begin() + i * width);
  return make_result<T>("index_rows", std::move(out_shape), std::move(out), {&a},
                        [idx, width](Node<T>& self) {
                          auto* g = grad_target(*self.inputs[0]);
                          if (!g) return;
                          for (std::size_t i = 0; i < idx.size(); ++i)
                            for (std::size_t j = 0; j < width; ++j)
                              (*g)[idx[i] * width + j] += self.grad[i * width + j];
                        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("conv2d", input, 3);
  require_rank("conv2d", weight, 4);
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t k = weight.dim(0), cout = weight.dim(3);
  require(weight.dim(1) == k && k % 2 == 1, "conv2d: kernel must be square with odd size, got " +
                                                shape_str(weight.shape()));
  require(weight.dim(2) == cin, "conv2d: weight " + shape_str(weight.shape()) +
                                    " does not match input channels of " +
                                    shape_str(input.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.dim(0) == cout,
            "conv2d: bias " + shape_str(bias.shape()) + " does not match output channels");
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t patch = k * k * cin;
  const std::size_t pixels = h * w;

  // im2col: one row per output pixel, zero where the window leaves the map.
  auto cols = std::make_shared<std::vector<T>>(pixels * patch, T(0));
  const auto x = input.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      T* row = cols->data() + (y * w + xx) * patch;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
          std::copy_n(x.begin() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * cin,
                      cin, row + (ky * k + kx) * cin);
        }
      }
    }
  }
  std::vector<T> out(pixels * cout, T(0));
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t p = 0; p < pixels; ++p) std::copy(b.begin(), b.end(), out.begin() + p * cout);
  }
  kernels::gemm_nn(cols->data(), weight.data().data(), out.data(), pixels, patch, cout);

  std::vector<Tensor<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      "conv2d", {h, w, cout}, std::move(out), inputs,
      [cols, h, w, cin, k, cout, pad, patch, pixels, has_bias](Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& wt = *self.inputs[1];
        if (auto* gw = grad_target(wt)) {
          kernels::gemm_tn(cols->data(), self.grad.data(), gw->data(), pixels, patch, cout);
        }
        if (has_bias) {
          if (auto* gb = grad_target(*self.inputs[2]))
            for (std::size_t p = 0; p < pixels; ++p)
              for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += self.grad[p * cout + c];
        }
        if (auto* gi = grad_target(in)) {
          std::vector<T> dcols(pixels * patch, T(0));
          kernels::gemm_nt(self.grad.data(), wt.data.data(), dcols.data(), pixels, cout, patch);
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
              const T* row = dcols.data() + (y * w + xx) * patch;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                  T* dst = gi->data() +
                           (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * cin;
                  const T* src = row + (ky * k + kx) * cin;
                  for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  require(axis < s.size(), "softmax: axis " + std::to_string(axis) + " out of range for " +
                               shape_str(s));
  const std::size_t outer = product(s, 0, axis);
  const std::size_t n = s[axis];
  const std::size_t inner = product(s, axis + 1, s.size());
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = in[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>("softmax", s, std::move(out), {&x}, [outer, n, inner](Node<T>& self) {
    auto* g = grad_target(*self.inputs[0]);
    if (!g) return;
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          (*g)[p] += y[p] * (self.grad[p] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.rank() >= 1, "layernorm: scalar input");
  const std::size_t n = x.shape().back();
  require(gamma.rank() == 1 && gamma.dim(0) == n && beta.rank() == 1 && beta.dim(0) == n,
          "layernorm: gamma/beta must have extent " + std::to_string(n));
  if (!(eps > T(0))) throw ConfigError("layernorm: eps must be positive");
  const std::size_t rows = x.numel() / n;
  const auto in = x.data(), g = gamma.data(), b = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(in.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * n;
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mu) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * g[j] + b[j];
    }
  }
  return make_result<T>(
      "layernorm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xhat, rstd, rows, n](Node<T>& self) {
        auto& gn = *self.inputs[1];
        auto* gx = grad_target(*self.inputs[0]);
        auto* gg = grad_target(gn);
        auto* gb = grad_target(*self.inputs[2]);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * n;
          const T* h = xhat->data() + r * n;
          T sum_d = T(0), sum_dh = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            if (gg) (*gg)[j] += dy[j] * h[j];
            if (gb) (*gb)[j] += dy[j];
            dxhat[j] = dy[j] * gn.data[j];
            sum_d += dxhat[j];
            sum_dh += dxhat[j] * h[j];
          }
          if (!gx) continue;
          const T inv_n = T(1) / static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            (*gx)[r * n + j] += (*rstd)[r] * (dxhat[j] - inv_n * sum_d - inv_n * h[j] * sum_dh);
          }
        }
      });
}

template <typename T>
Tensor<T> bce_with_logits_sum(const Tensor<T>& logits, std::span<const T> targets,
                              std::span<const T> weights) {
  const std::size_t n = logits.numel();
  require(targets.size() == n && weights.size() == n,
          "bce_with_logits_sum: targets/weights must match " + std::to_string(n) + " logits");
  const auto z = logits.data();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == T(0)) continue;
    // max(z,0) - z*t + log(1 + exp(-|z|))
    const T zi = z[i];
    total += weights[i] * (std::max(zi, T(0)) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi))));
  }
  std::vector<T> t(targets.begin(), targets.end()), w(weights.begin(), weights.end());
  return make_result<T>("bce_with_logits_sum", {1}, {total}, {&logits},
                        [t = std::move(t), w = std::move(w)](Node<T>& self) {
                          auto* g = grad_target(*self.inputs[0]);
                          if (!g) return;
                          const auto& z = self.inputs[0]->data;
                          for (std::size_t i = 0; i < z.size(); ++i) {
                            if (w[i] == T(0)) continue;
                            const T p = z[i] >= T(0) ? T(1) / (T(1) + std::exp(-z[i]))
                                                     : std::exp(z[i]) / (T(1) + std::exp(z[i]));
                            (*g)[i] += self.grad[0] * w[i] * (p - t[i]);
                          }
                        });
}

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy_sum", logits, 2);
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  require(labels.size() == rows, "cross_entropy_sum: " + std::to_string(labels.size()) +
                                     " labels for " + std::to_string(rows) + " rows");
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<T>>(z.size());
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    require(labels[r] < classes, "cross_entropy_sum: label " + std::to_string(labels[r]) +
                                     " out of range for " + std::to_string(classes) + " classes");
    const T* row = z.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T denom = T(0);
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < classes; ++c)
      (*probs)[r * classes + c] = std::exp(row[c] - mx) / denom;
    total += std::log(denom) + mx - row[labels[r]];
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result<T>("cross_entropy_sum", {1}, {total}, {&logits},
                        [probs, lab = std::move(lab), classes](Node<T>& self) {
                          auto* g = grad_target(*self.inputs[0]);
                          if (!g) return;
                          for (std::size_t r = 0; r < lab.size(); ++r) {
                            for (std::size_t c = 0; c < classes; ++c) {
                              const T onehot = c == lab[r] ? T(1) : T(0);
                              (*g)[r * classes + c] +=
                                  self.grad[0] * ((*probs)[r * classes + c] - onehot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> smooth_l1_sum(const Tensor<T>& pred, std::span<const T> target,
                        std::span<const T> weights, T beta) {
  const std::size_t n = pred.numel();
  require(target.size() == n && weights.size() == n,
          "smooth_l1_sum: target/weights must match " + std::to_string(n) + " predictions");
  if (!(beta > T(0))) throw ConfigError("smooth_l1_sum: beta must be positive");
  const auto p = pred.data();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == T(0)) continue;
    const T d = std::abs(p[i] - target[i]);
    total += weights[i] * (d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta);
  }
  std::vector<T> t(target.begin(), target.end()), w(weights.begin(), weights.end());
  return make_result<T>("smooth_l1_sum", {1}, {total}, {&pred},
                        [t = std::move(t), w = std::move(w), beta](Node<T>& self) {
                          auto* g = grad_target(*self.inputs[0]);
                          if (!g) return;
                          const auto& p = self.inputs[0]->data;
                          for (std::size_t i = 0; i < p.size(); ++i) {
                            if (w[i] == T(0)) continue;
                            const T d = p[i] - t[i];
                            const T slope = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
                            (*g)[i] += self.grad[0] * w[i] * slope;
                          }
                        });
}

#define DTN_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add_rowwise(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> log(const Tensor<T>&);                                                     \
  template Tensor<T> exp(const Tensor<T>&);                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> index_rows(const Tensor<T>&, std::span<const std::size_t>);                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> bce_with_logits_sum(const Tensor<T>&, std::span<const T>,                  \
                                         std::span<const T>);                                   \
  template Tensor<T> cross_entropy_sum(const Tensor<T>&, std::span<const std::size_t>);         \
  template Tensor<T> smooth_l1_sum(const Tensor<T>&, std::span<const T>, std::span<const T>, T); \
  template void kernels::gemm_nn(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
  template void kernels::gemm_tn(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
  template void kernels::gemm_nt(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);

DTN_INSTANTIATE_OPS(float)
DTN_INSTANTIATE_OPS(double)

}  // namespace dtn
