#pragma once

// Raw numerical kernels on Tensors. These are the forward and adjoint
// building blocks behind the autodiff primitives in autodiff.hpp; they hold
// no graph state and can be called directly for inference.

#include <complex>
#include <cstddef>
#include <vector>

#include "promptct/tensor.hpp"

namespace promptct::kernels {

// --- convolution -----------------------------------------------------------
//
// Circular (wrap-around) padding everywhere, so each forward/adjoint pair is
// an exact transpose:
//   out[o,i,j] = sum_{c,a,b} K[o,c,a,b] * in[c, (s*i + a - k/2) mod H, (s*j + b - k/2) mod W]
// with output size ceil(H/s) x ceil(W/s).

std::size_t conv_out_extent(std::size_t extent, std::size_t stride);

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride = 1);

/// Transpose of conv2d with respect to its input. `in_h`/`in_w` are the
/// spatial dims of the forward input (only ambiguous when stride > 1).
Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& kernels, std::size_t in_h, std::size_t in_w,
                      std::size_t stride = 1);
Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& kernels);

/// d<grad_out, conv2d(input, K)>/dK.
Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, std::size_t k, std::size_t stride = 1);

/// Per-channel bias broadcast over H x W; `bias` has C entries.
void add_channel_bias(Tensor& x, const Tensor& bias);
Tensor channel_sums(const Tensor& x);

// --- pointwise -------------------------------------------------------------

/// sign(u) * max(|u| - e, 0). Throws ArgumentError on any negative e.
Tensor soft_threshold(const Tensor& u, const Tensor& e);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// --- dense -----------------------------------------------------------------

/// y = W x + b with W of dims M x N, x of N entries, b of M entries.
Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias);
/// Mean over H x W of a C x H x W tensor -> C entries.
Tensor global_avg_pool(const Tensor& x);

// --- Fourier ---------------------------------------------------------------

using Complex = std::complex<double>;

struct ComplexGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Complex> values;
};

/// Unnormalized forward DFT of an H x W real image.
ComplexGrid dft2(const Tensor& image);
/// Inverse DFT (1/(H W) normalization), real part.
Tensor idft2(const ComplexGrid& spectrum);
ComplexGrid dft2(const ComplexGrid& grid);
ComplexGrid idft2_complex(const ComplexGrid& spectrum);

/// In-place 1D DFT; the inverse carries the 1/N factor.
void dft1d(std::vector<Complex>& data, bool inverse);

// --- optional deep-extractor blocks ----------------------------------------

/// y_c = Re(idft2(w (.) dft2(x_c))) for every channel c of a C x H x W tensor.
/// `w_re` and `w_im` are H x W and shared across channels.
Tensor spectral_scale(const Tensor& x, const Tensor& w_re, const Tensor& w_im);
void spectral_scale_backward(const Tensor& x, const Tensor& w_re, const Tensor& w_im, const Tensor& grad_out,
                             Tensor* grad_x, Tensor* grad_w_re, Tensor* grad_w_im);

/// Single-head, non-shifted windowed self-attention with residual:
/// y = x + Wo * softmax(Q K^T / sqrt(C)) V per window, Q/K/V = 1x1 projections.
Tensor window_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                        std::size_t window);
void window_attention_backward(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                               const Tensor& wo, std::size_t window, const Tensor& grad_out, Tensor* grad_x,
                               Tensor* grad_wq, Tensor* grad_wk, Tensor* grad_wv, Tensor* grad_wo);

}  // namespace promptct::kernels
