#pragma once

#include <cstddef>
#include <span>

// Dense compute kernels on raw row-major buffers.
//
// ck::kernels holds the OpenMP versions used by the tensor ops. Every kernel
// assigns each output element to exactly one thread and accumulates it in a
// fixed order, so results are bit-identical to ck::kernels::reference (the
// serial versions kept for testing) for any thread count.

namespace ck::kernels {

struct Conv2dGeometry {
    std::size_t batch = 0;
    std::size_t in_channels = 0;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
    std::size_t input_size() const { return batch * in_channels * in_h * in_w; }
    std::size_t weight_size() const { return out_channels * in_channels * kernel_h * kernel_w; }
    std::size_t output_size() const { return batch * out_channels * out_h() * out_w(); }
};

// y[n,o,i,j] = sum_{c,p,q} w[o,c,p,q] * x[n,c,i*stride+p-pad, j*stride+q-pad]
void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y);
// Adjoint of conv2d_forward with respect to x.
void conv2d_input_grad(const Conv2dGeometry& g, std::span<const double> gy, std::span<const double> w,
                       std::span<double> gx);
// Adjoint of conv2d_forward with respect to w.
void conv2d_weight_grad(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> gy,
                        std::span<double> gw);

// c[m,n] = sum_k a[m,k] * b[k,n]
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a, std::span<const double> b,
            std::span<double> c);

// out[i] = sum_{j != i} || rows[i] - rows[j] ||_2 over `count` rows of length `dim`.
void pairwise_distance_sums(std::size_t count, std::size_t dim, std::span<const double> rows, std::span<double> out);

namespace reference {

void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y);
void conv2d_input_grad(const Conv2dGeometry& g, std::span<const double> gy, std::span<const double> w,
                       std::span<double> gx);
void conv2d_weight_grad(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> gy,
                        std::span<double> gw);
void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a, std::span<const double> b,
            std::span<double> c);
void pairwise_distance_sums(std::size_t count, std::size_t dim, std::span<const double> rows, std::span<double> out);

} // namespace reference

} // namespace ck::kernels
