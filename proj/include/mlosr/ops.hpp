#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mlosr/error.hpp"
#include "mlosr/tape.hpp"
#include "mlosr/tensor.hpp"

namespace mlosr {

namespace detail {

// Row-major dense kernels. All accumulate into C.

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A^T * B, with A stored [k x m] and B [k x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A * B^T, with A stored [m x k] and B [n x k]
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

struct ConvGeometry {
  std::size_t channels, in_h, in_w, out_h, out_w, stride, pad;

  std::size_t patch() const { return channels * 9; }
  std::size_t positions() const { return out_h * out_w; }
};

// col[(c*9 + ky*3 + kx), oy*out_w + ox] = img[c, oy*stride + ky - pad, ox*stride + kx - pad]
inline void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = col + ((c * 9) + ky * 3 + kx) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.in_h) && ix < static_cast<long>(g.in_w);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patches back and accumulates into img.
inline void col2im(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = col + ((c * 9) + ky * 3 + kx) * p;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
            img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace detail

/// out[n,j] = sum_i x[n,i] * weight[i,j] + bias[j]
inline Var affine(Var x, Var weight, Var bias) {
  Tape& t = detail::same_tape({x, weight, bias});
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(weight);
  const Tensor& bv = t.value(bias);
  detail::require_rank(xv, 2, "affine", "x");
  detail::require_rank(wv, 2, "affine", "weight");
  detail::require_rank(bv, 1, "affine", "bias");
  if (xv.dim(1) != wv.dim(0) || wv.dim(1) != bv.dim(0)) {
    throw DimensionError("affine: x " + shape_string(xv.shape()) + " does not conform with weight " +
                         shape_string(wv.shape()) + " and bias " + shape_string(bv.shape()));
  }
  const std::size_t n = xv.dim(0), din = wv.dim(0), dout = wv.dim(1);
  Tensor out(Shape{n, dout});
  for (std::size_t r = 0; r < n; ++r) std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + r * dout);
  detail::gemm_nn(n, din, dout, xv.data().data(), wv.data().data(), out.data().data());

  return t.record(std::move(out), {x.id, weight.id, bias.id}, [n, din, dout](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_at(self);
    const Tensor& g = tp.grad_buffer(self);
    if (tp.requires_grad_at(in[0])) {
      detail::gemm_nt(n, dout, din, g.data().data(), tp.value_at(in[1]).data().data(),
                      tp.grad_buffer(in[0]).data().data());
    }
    if (tp.requires_grad_at(in[1])) {
      detail::gemm_tn(din, n, dout, tp.value_at(in[0]).data().data(), g.data().data(),
                      tp.grad_buffer(in[1]).data().data());
    }
    if (tp.requires_grad_at(in[2])) {
      Tensor& gb = tp.grad_buffer(in[2]);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
    }
  });
}

/// 3x3 cross-correlation with zero padding. Output spatial size is
/// (H + 2*padding - 3) / stride + 1, i.e. ceil(H/2) for stride 2, padding 1.
inline Var conv2d(Var x, Var kernels, std::size_t stride = 2, std::size_t padding = 1) {
  Tape& t = detail::same_tape({x, kernels});
  const Tensor& xv = t.value(x);
  const Tensor& kv = t.value(kernels);
  detail::require_rank(xv, 4, "conv2d", "x");
  detail::require_rank(kv, 4, "conv2d", "kernels");
  if (kv.dim(2) != 3 || kv.dim(3) != 3) {
    throw DimensionError("conv2d: kernels must be Fx Cx3x3, got " + shape_string(kv.shape()));
  }
  if (kv.dim(1) != xv.dim(1)) {
    throw DimensionError("conv2d: channel mismatch between x " + shape_string(xv.shape()) + " and kernels " +
                         shape_string(kv.shape()));
  }
  if (stride == 0 || xv.dim(2) + 2 * padding < 3 || xv.dim(3) + 2 * padding < 3) {
    throw DimensionError("conv2d: padding/stride produce no valid output for " + shape_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0), f = kv.dim(0);
  const detail::ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), (xv.dim(2) + 2 * padding - 3) / stride + 1,
                               (xv.dim(3) + 2 * padding - 3) / stride + 1, stride, padding};
  const std::size_t in_vol = g.channels * g.in_h * g.in_w, out_vol = f * g.positions();
  Tensor out(Shape{n, f, g.out_h, g.out_w});
  std::vector<double> col(g.patch() * g.positions());
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(g, xv.data().data() + s * in_vol, col.data());
    detail::gemm_nn(f, g.patch(), g.positions(), kv.data().data(), col.data(), out.data().data() + s * out_vol);
  }

  return t.record(std::move(out), {x.id, kernels.id}, [g, n, f, in_vol, out_vol](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_at(self);
    const Tensor& gout = tp.grad_buffer(self);
    const Tensor& xv = tp.value_at(in[0]);
    const Tensor& kv = tp.value_at(in[1]);
    const bool need_x = tp.requires_grad_at(in[0]);
    const bool need_k = tp.requires_grad_at(in[1]);
    std::vector<double> col(g.patch() * g.positions());
    for (std::size_t s = 0; s < n; ++s) {
      const double* go = gout.data().data() + s * out_vol;
      if (need_k) {
        detail::im2col(g, xv.data().data() + s * in_vol, col.data());
        detail::gemm_nt(f, g.positions(), g.patch(), go, col.data(), tp.grad_buffer(in[1]).data().data());
      }
      if (need_x) {
        std::fill(col.begin(), col.end(), 0.0);
        detail::gemm_tn(g.patch(), f, g.positions(), kv.data().data(), go, col.data());
        detail::col2im(g, col.data(), tp.grad_buffer(in[0]).data().data() + s * in_vol);
      }
    }
  });
}

/// Transposed 3x3 convolution (padding 1, output padding stride-1), the
/// adjoint of conv2d with the same kernels. Output spatial size is
/// stride * H. Kernels are laid out C_in x F_out x 3 x 3.
inline Var conv_transpose2d(Var x, Var kernels, std::size_t stride = 2) {
  Tape& t = detail::same_tape({x, kernels});
  const Tensor& xv = t.value(x);
  const Tensor& kv = t.value(kernels);
  detail::require_rank(xv, 4, "conv_transpose2d", "x");
  detail::require_rank(kv, 4, "conv_transpose2d", "kernels");
  if (kv.dim(2) != 3 || kv.dim(3) != 3) {
    throw DimensionError("conv_transpose2d: kernels must be CxFx3x3, got " + shape_string(kv.shape()));
  }
  if (kv.dim(0) != xv.dim(1)) {
    throw DimensionError("conv_transpose2d: channel mismatch between x " + shape_string(xv.shape()) +
                         " and kernels " + shape_string(kv.shape()));
  }
  if (stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
  const std::size_t n = xv.dim(0), c = kv.dim(0), f = kv.dim(1);
  // Geometry of the forward conv this op is the adjoint of: big image -> x.
  const detail::ConvGeometry g{f, xv.dim(2) * stride, xv.dim(3) * stride, xv.dim(2), xv.dim(3), stride, 1};
  const std::size_t in_vol = c * g.positions(), out_vol = f * g.in_h * g.in_w;
  Tensor out(Shape{n, f, g.in_h, g.in_w});
  std::vector<double> col(g.patch() * g.positions());
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(col.begin(), col.end(), 0.0);
    detail::gemm_tn(g.patch(), c, g.positions(), kv.data().data(), xv.data().data() + s * in_vol, col.data());
    detail::col2im(g, col.data(), out.data().data() + s * out_vol);
  }

  return t.record(std::move(out), {x.id, kernels.id}, [g, n, c, in_vol, out_vol](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_at(self);
    const Tensor& gout = tp.grad_buffer(self);
    const Tensor& xv = tp.value_at(in[0]);
    const Tensor& kv = tp.value_at(in[1]);
    const bool need_x = tp.requires_grad_at(in[0]);
    const bool need_k = tp.requires_grad_at(in[1]);
    std::vector<double> col(g.patch() * g.positions());
    for (std::size_t s = 0; s < n; ++s) {
      detail::im2col(g, gout.data().data() + s * out_vol, col.data());
      if (need_x) {
        detail::gemm_nn(c, g.patch(), g.positions(), kv.data().data(), col.data(),
                        tp.grad_buffer(in[0]).data().data() + s * in_vol);
      }
      if (need_k) {
        detail::gemm_nt(c, g.positions(), g.patch(), xv.data().data() + s * in_vol, col.data(),
                        tp.grad_buffer(in[1]).data().data());
      }
    }
  });
}

inline Var relu(Var x) {
  Tape& t = detail::same_tape({x});
  Tensor out = t.value(x);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(out), {x.id}, [](Tape& tp, std::size_t self) {
    const std::size_t in = tp.inputs_at(self)[0];
    const Tensor& xv = tp.value_at(in);
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

inline Var tanh(Var x) {
  Tape& t = detail::same_tape({x});
  Tensor out = t.value(x);
  for (double& v : out.values()) v = std::tanh(v);
  return t.record(std::move(out), {x.id}, [](Tape& tp, std::size_t self) {
    const std::size_t in = tp.inputs_at(self)[0];
    const Tensor& y = tp.value_at(self);
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

/// Row-wise softmax over an N x K tensor, max-subtracted.
inline Var softmax(Var x) {
  Tape& t = detail::same_tape({x});
  const Tensor& xv = t.value(x);
  detail::require_rank(xv, 2, "softmax", "x");
  const std::size_t n = xv.dim(0), k = xv.dim(1);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = xv.data().data() + r * k;
    double* o = out.data().data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) o[j] /= z;
  }
  return t.record(std::move(out), {x.id}, [n, k](Tape& tp, std::size_t self) {
    const std::size_t in = tp.inputs_at(self)[0];
    const Tensor& y = tp.value_at(self);
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(in);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
    }
  });
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Batch-mean cross-entropy -1/N sum_i sum_j onehot[i,j] log(prob[i,j]).
/// Probabilities are clamped below at 1e-12 before the log.
inline Var cross_entropy(Var y_onehot, Var y_prob) {
  Tape& t = detail::same_tape({y_onehot, y_prob});
  const Tensor& yv = t.value(y_onehot);
  const Tensor& pv = t.value(y_prob);
  detail::require_rank(yv, 2, "cross_entropy", "y_onehot");
  detail::require_same_shape(yv, pv, "cross_entropy");
  const std::size_t n = yv.dim(0), k = yv.dim(1);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    int ones = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = yv[r * k + j];
      if (v == 1.0) {
        ++ones;
        loss -= std::log(std::max(pv[r * k + j], kProbabilityFloor));
      } else if (v != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw ValidationError("cross_entropy: target row " + std::to_string(r) + " is not one-hot");
  }
  loss /= static_cast<double>(n);
  return t.record(Tensor::scalar(loss), {y_onehot.id, y_prob.id}, [n](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_at(self);
    const double g = tp.grad_buffer(self)[0];
    const Tensor& yv = tp.value_at(in[0]);
    const Tensor& pv = tp.value_at(in[1]);
    const double scale = g / static_cast<double>(n);
    if (tp.requires_grad_at(in[1])) {
      Tensor& gp = tp.grad_buffer(in[1]);
      for (std::size_t i = 0; i < pv.size(); ++i)
        if (yv[i] != 0.0 && pv[i] >= kProbabilityFloor) gp[i] -= scale * yv[i] / pv[i];
    }
    if (tp.requires_grad_at(in[0])) {
      Tensor& gy = tp.grad_buffer(in[0]);
      for (std::size_t i = 0; i < pv.size(); ++i) gy[i] -= scale * std::log(std::max(pv[i], kProbabilityFloor));
    }
  });
}

/// Per-sample sum of absolute differences, averaged over the leading
/// (batch) dimension. The subgradient at a zero difference is 0.
inline Var l1_loss(Var x, Var x_recon) {
  Tape& t = detail::same_tape({x, x_recon});
  const Tensor& a = t.value(x);
  const Tensor& b = t.value(x_recon);
  detail::require_same_shape(a, b, "l1_loss");
  const std::size_t n = a.rank() ? a.dim(0) : 1;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return t.record(Tensor::scalar(s / static_cast<double>(n)), {x.id, x_recon.id}, [n](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_at(self);
    const double g = tp.grad_buffer(self)[0] / static_cast<double>(n);
    const Tensor& a = tp.value_at(in[0]);
    const Tensor& b = tp.value_at(in[1]);
    const bool need_a = tp.requires_grad_at(in[0]);
    const bool need_b = tp.requires_grad_at(in[1]);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (need_a) tp.grad_buffer(in[0])[i] += g * sgn;
      if (need_b) tp.grad_buffer(in[1])[i] -= g * sgn;
    }
  });
}

inline Var sum(Var x) {
  Tape& t = detail::same_tape({x});
  double s = 0.0;
  for (double v : t.value(x).data()) s += v;
  return t.record(Tensor::scalar(s), {x.id}, [](Tape& tp, std::size_t self) {
    const std::size_t in = tp.inputs_at(self)[0];
    const double g = tp.grad_buffer(self)[0];
    for (double& v : tp.grad_buffer(in).values()) v += g;
  });
}

/// a * wa + b * wb for same-shape a, b.
inline Var weighted_sum(Var a, double wa, Var b, double wb) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::require_same_shape(av, bv, "weighted_sum");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * av[i] + wb * bv[i];
  return t.record(std::move(out), {a.id, b.id}, [wa, wb](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_at(self);
    const Tensor& g = tp.grad_buffer(self);
    if (tp.requires_grad_at(in[0])) {
      Tensor& ga = tp.grad_buffer(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += wa * g[i];
    }
    if (tp.requires_grad_at(in[1])) {
      Tensor& gb = tp.grad_buffer(in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += wb * g[i];
    }
  });
}

/// Shape-only view change (flatten before FC, unflatten before ConvTran).
inline Var reshape(Var x, Shape shape) {
  Tape& t = detail::same_tape({x});
  Tensor out = t.value(x).reshaped(std::move(shape));
  return t.record(std::move(out), {x.id}, [](Tape& tp, std::size_t self) {
    const std::size_t in = tp.inputs_at(self)[0];
    const Tensor& g = tp.grad_buffer(self);
    Tensor& gx = tp.grad_buffer(in);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

}  // namespace mlosr
