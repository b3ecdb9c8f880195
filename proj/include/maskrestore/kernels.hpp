#pragma once

// Compute kernels behind the tensor ops. Each hot kernel has an OpenMP
// version (im2col + blocked GEMM, parallel over output columns) and a
// plain nested-loop version under `reference` that tests and benchmarks
// compare against. The parallel split never changes the summation order of
// any output element, so results are identical for every thread count.

#include <cstddef>

namespace maskrestore::kernels {

struct ConvGeometry {
    std::size_t batch = 1;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
    std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

// C[M,N] += A[M,K] * B[K,N], row-major with explicit leading dimensions.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc);

// out[N,Co,Ho,Wo] = conv(input) (+ bias when non-null).
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* out);

// Accumulates into whichever of grad_input / grad_weight / grad_bias is non-null.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_out,
                     T* grad_input, T* grad_weight, T* grad_bias);

template <typename T>
void resize_bilinear_forward(std::size_t planes, std::size_t in_h, std::size_t in_w, std::size_t out_h,
                             std::size_t out_w, const T* input, T* out);

template <typename T>
void resize_bilinear_backward(std::size_t planes, std::size_t in_h, std::size_t in_w, std::size_t out_h,
                              std::size_t out_w, const T* grad_out, T* grad_input);

namespace reference {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* out);

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_out,
                     T* grad_input, T* grad_weight, T* grad_bias);

}  // namespace reference

}  // namespace maskrestore::kernels
