#include "maskrestore/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace maskrestore::kernels {

namespace {

constexpr std::size_t kColumnBlock = 256;
constexpr std::size_t kDepthBlock = 128;
constexpr std::size_t kParallelWork = std::size_t{1} << 15;

// col[(ci*k + ky)*k + kx][n*HoWo + oy*Wo + ox], zero outside the image.
template <typename T>
void im2col(const ConvGeometry& g, const T* input, T* col) {
    const std::size_t ho = g.out_height(), wo = g.out_width();
    const std::size_t plane = ho * wo;
    const std::size_t columns = g.batch * plane;
    const long rows = static_cast<long>(g.in_channels * g.kernel * g.kernel);
#pragma omp parallel for schedule(static) if (rows * columns > kParallelWork)
    for (long r = 0; r < rows; ++r) {
        const std::size_t kx = static_cast<std::size_t>(r) % g.kernel;
        const std::size_t ky = (static_cast<std::size_t>(r) / g.kernel) % g.kernel;
        const std::size_t ci = static_cast<std::size_t>(r) / (g.kernel * g.kernel);
        T* dst = col + static_cast<std::size_t>(r) * columns;
        for (std::size_t n = 0; n < g.batch; ++n) {
            const T* src = input + (n * g.in_channels + ci) * g.height * g.width;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                T* out_row = dst + n * plane + oy * wo;
                if (iy < 0 || iy >= static_cast<long>(g.height)) {
                    std::fill(out_row, out_row + wo, T(0));
                    continue;
                }
                const T* in_row = src + static_cast<std::size_t>(iy) * g.width;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                    out_row[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0) : in_row[ix];
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates columns back into the image gradient.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* grad_input) {
    const std::size_t ho = g.out_height(), wo = g.out_width();
    const std::size_t plane = ho * wo;
    const std::size_t columns = g.batch * plane;
    const long planes = static_cast<long>(g.batch * g.in_channels);
    // Parallel over (n, ci) planes: each plane is written by one thread.
#pragma omp parallel for schedule(static) if (planes * plane * g.kernel * g.kernel > kParallelWork)
    for (long p = 0; p < planes; ++p) {
        const std::size_t n = static_cast<std::size_t>(p) / g.in_channels;
        const std::size_t ci = static_cast<std::size_t>(p) % g.in_channels;
        T* dst = grad_input + static_cast<std::size_t>(p) * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const T* src = col + ((ci * g.kernel + ky) * g.kernel + kx) * columns + n * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                    T* in_row = dst + static_cast<std::size_t>(iy) * g.width;
                    const T* src_row = src + oy * wo;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                        if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                        in_row[ix] += src_row[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
inline T source_coord(std::size_t dst, std::size_t in, std::size_t out) {
    const T scale = static_cast<T>(in) / static_cast<T>(out);
    const T src = (static_cast<T>(dst) + T(0.5)) * scale - T(0.5);
    return src < T(0) ? T(0) : src;
}

template <typename T>
struct Tap {
    std::size_t lo, hi;
    T frac;
};

template <typename T>
std::vector<Tap<T>> taps(std::size_t in, std::size_t out) {
    std::vector<Tap<T>> result(out);
    for (std::size_t d = 0; d < out; ++d) {
        const T src = source_coord<T>(d, in, out);
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        lo = std::min(lo, in - 1);
        const std::size_t hi = std::min(lo + 1, in - 1);
        result[d] = {lo, hi, src - static_cast<T>(lo)};
    }
    return result;
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc) {
    const long column_blocks = static_cast<long>((n + kColumnBlock - 1) / kColumnBlock);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
    for (long jb = 0; jb < column_blocks; ++jb) {
        const std::size_t j0 = static_cast<std::size_t>(jb) * kColumnBlock;
        const std::size_t j1 = std::min(n, j0 + kColumnBlock);
        for (std::size_t k0 = 0; k0 < k; k0 += kDepthBlock) {
            const std::size_t k1 = std::min(k, k0 + kDepthBlock);
            std::size_t i = 0;
            for (; i + 4 <= m; i += 4) {
                T* __restrict c0 = c + i * ldc;
                T* __restrict c1 = c0 + ldc;
                T* __restrict c2 = c1 + ldc;
                T* __restrict c3 = c2 + ldc;
                for (std::size_t kk = k0; kk < k1; ++kk) {
                    const T a0 = a[i * lda + kk];
                    const T a1 = a[(i + 1) * lda + kk];
                    const T a2 = a[(i + 2) * lda + kk];
                    const T a3 = a[(i + 3) * lda + kk];
                    const T* __restrict br = b + kk * ldb;
                    for (std::size_t j = j0; j < j1; ++j) {
                        const T bv = br[j];
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
            }
            for (; i < m; ++i) {
                T* __restrict ci = c + i * ldc;
                for (std::size_t kk = k0; kk < k1; ++kk) {
                    const T av = a[i * lda + kk];
                    const T* __restrict br = b + kk * ldb;
                    for (std::size_t j = j0; j < j1; ++j) ci[j] += av * br[j];
                }
            }
        }
    }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* out) {
    const std::size_t plane = g.out_height() * g.out_width();
    const std::size_t columns = g.batch * plane;
    const std::size_t depth = g.in_channels * g.kernel * g.kernel;
    std::vector<T> col(depth * columns);
    im2col(g, input, col.data());
    std::vector<T> acc(g.out_channels * columns, T(0));
    gemm(g.out_channels, columns, depth, weight, depth, col.data(), columns, acc.data(), columns);
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            const T* src = acc.data() + co * columns + n * plane;
            T* dst = out + (n * g.out_channels + co) * plane;
            const T b = bias ? bias[co] : T(0);
            if (bias) {
                for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
            } else {
                std::copy(src, src + plane, dst);
            }
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_out,
                     T* grad_input, T* grad_weight, T* grad_bias) {
    const std::size_t plane = g.out_height() * g.out_width();
    const std::size_t columns = g.batch * plane;
    const std::size_t depth = g.in_channels * g.kernel * g.kernel;

    // grad_out regrouped as [Co, N*HoWo]
    std::vector<T> gout(g.out_channels * columns);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            const T* src = grad_out + (n * g.out_channels + co) * plane;
            std::copy(src, src + plane, gout.data() + co * columns + n * plane);
        }

    if (grad_bias) {
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            T s = T(0);
            const T* row = gout.data() + co * columns;
            for (std::size_t j = 0; j < columns; ++j) s += row[j];
            grad_bias[co] += s;
        }
    }

    if (grad_weight) {
        std::vector<T> col(depth * columns);
        im2col(g, input, col.data());
        std::vector<T> col_t(columns * depth);
        for (std::size_t r = 0; r < depth; ++r)
            for (std::size_t j = 0; j < columns; ++j) col_t[j * depth + r] = col[r * columns + j];
        gemm(g.out_channels, depth, columns, gout.data(), columns, col_t.data(), depth, grad_weight, depth);
    }

    if (grad_input) {
        std::vector<T> w_t(depth * g.out_channels);
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (std::size_t r = 0; r < depth; ++r) w_t[r * g.out_channels + co] = weight[co * depth + r];
        std::vector<T> dcol(depth * columns, T(0));
        gemm(depth, columns, g.out_channels, w_t.data(), g.out_channels, gout.data(), columns, dcol.data(),
             columns);
        col2im(g, dcol.data(), grad_input);
    }
}

template <typename T>
void resize_bilinear_forward(std::size_t planes, std::size_t in_h, std::size_t in_w, std::size_t out_h,
                             std::size_t out_w, const T* input, T* out) {
    const auto ty = taps<T>(in_h, out_h);
    const auto tx = taps<T>(in_w, out_w);
#pragma omp parallel for schedule(static) if (planes * out_h * out_w > kParallelWork)
    for (long p = 0; p < static_cast<long>(planes); ++p) {
        const T* src = input + static_cast<std::size_t>(p) * in_h * in_w;
        T* dst = out + static_cast<std::size_t>(p) * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& vy = ty[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& vx = tx[x];
                const T top = src[vy.lo * in_w + vx.lo] * (T(1) - vx.frac) + src[vy.lo * in_w + vx.hi] * vx.frac;
                const T bot = src[vy.hi * in_w + vx.lo] * (T(1) - vx.frac) + src[vy.hi * in_w + vx.hi] * vx.frac;
                dst[y * out_w + x] = top * (T(1) - vy.frac) + bot * vy.frac;
            }
        }
    }
}

template <typename T>
void resize_bilinear_backward(std::size_t planes, std::size_t in_h, std::size_t in_w, std::size_t out_h,
                              std::size_t out_w, const T* grad_out, T* grad_input) {
    const auto ty = taps<T>(in_h, out_h);
    const auto tx = taps<T>(in_w, out_w);
#pragma omp parallel for schedule(static) if (planes * out_h * out_w > kParallelWork)
    for (long p = 0; p < static_cast<long>(planes); ++p) {
        const T* src = grad_out + static_cast<std::size_t>(p) * out_h * out_w;
        T* dst = grad_input + static_cast<std::size_t>(p) * in_h * in_w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& vy = ty[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& vx = tx[x];
                const T gv = src[y * out_w + x];
                dst[vy.lo * in_w + vx.lo] += gv * (T(1) - vy.frac) * (T(1) - vx.frac);
                dst[vy.lo * in_w + vx.hi] += gv * (T(1) - vy.frac) * vx.frac;
                dst[vy.hi * in_w + vx.lo] += gv * vy.frac * (T(1) - vx.frac);
                dst[vy.hi * in_w + vx.hi] += gv * vy.frac * vx.frac;
            }
        }
    }
}

namespace reference {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T s = c[i * ldc + j];
            for (std::size_t kk = 0; kk < k; ++kk) s += a[i * lda + kk] * b[kk * ldb + j];
            c[i * ldc + j] = s;
        }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias, T* out) {
    const std::size_t ho = g.out_height(), wo = g.out_width();
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    T s = T(0);
                    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                        for (std::size_t ky = 0; ky < g.kernel; ++ky)
                            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                                    ix >= static_cast<long>(g.width))
                                    continue;
                                s += weight[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] *
                                     input[((n * g.in_channels + ci) * g.height + static_cast<std::size_t>(iy)) *
                                               g.width +
                                           static_cast<std::size_t>(ix)];
                            }
                    if (bias) s += bias[co];
                    out[((n * g.out_channels + co) * ho + oy) * wo + ox] = s;
                }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* input, const T* weight, const T* grad_out,
                     T* grad_input, T* grad_weight, T* grad_bias) {
    const std::size_t ho = g.out_height(), wo = g.out_width();
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T go = grad_out[((n * g.out_channels + co) * ho + oy) * wo + ox];
                    if (grad_bias) grad_bias[co] += go;
                    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                        for (std::size_t ky = 0; ky < g.kernel; ++ky)
                            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                                    ix >= static_cast<long>(g.width))
                                    continue;
                                const std::size_t wi = ((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx;
                                const std::size_t ii =
                                    ((n * g.in_channels + ci) * g.height + static_cast<std::size_t>(iy)) * g.width +
                                    static_cast<std::size_t>(ix);
                                if (grad_weight) grad_weight[wi] += go * input[ii];
                                if (grad_input) grad_input[ii] += go * weight[wi];
                            }
                }
}

}  // namespace reference

#define MASKRESTORE_INSTANTIATE_KERNELS(T)                                                                        \
    template void gemm<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*, std::size_t,    \
                          T*, std::size_t);                                                                       \
    template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);                       \
    template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, T*);              \
    template void resize_bilinear_forward<T>(std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,     \
                                             const T*, T*);                                                       \
    template void resize_bilinear_backward<T>(std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,    \
                                              const T*, T*);                                                      \
    template void reference::gemm<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*,     \
                                     std::size_t, T*, std::size_t);                                               \
    template void reference::conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);            \
    template void reference::conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, T*);

MASKRESTORE_INSTANTIATE_KERNELS(float)
MASKRESTORE_INSTANTIATE_KERNELS(double)

#undef MASKRESTORE_INSTANTIATE_KERNELS

}  // namespace maskrestore::kernels
