#include <cmath>
#include <cstddef>

#include "ck/kernels.hpp"

namespace ck::kernels {

void conv2d_forward(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const auto ih = static_cast<std::ptrdiff_t>(g.in_h), iw = static_cast<std::ptrdiff_t>(g.in_w);
    const auto pad = static_cast<std::ptrdiff_t>(g.padding), stride = static_cast<std::ptrdiff_t>(g.stride);
    const auto batch = static_cast<std::ptrdiff_t>(g.batch), out_c = static_cast<std::ptrdiff_t>(g.out_channels);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::ptrdiff_t n = 0; n < batch; ++n) {
        for (std::ptrdiff_t o = 0; o < out_c; ++o) {
            for (std::size_t i = 0; i < oh; ++i) {
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < g.in_channels; ++c) {
                        for (std::size_t p = 0; p < g.kernel_h; ++p) {
                            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i) * stride + static_cast<std::ptrdiff_t>(p) - pad;
                            if (r < 0 || r >= ih) continue;
                            for (std::size_t q = 0; q < g.kernel_w; ++q) {
                                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j) * stride + static_cast<std::ptrdiff_t>(q) - pad;
                                if (s < 0 || s >= iw) continue;
                                acc += w[((o * g.in_channels + c) * g.kernel_h + p) * g.kernel_w + q] *
                                       x[((n * g.in_channels + c) * g.in_h + r) * g.in_w + s];
                            }
                        }
                    }
                    y[((n * g.out_channels + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
}

void conv2d_input_grad(const Conv2dGeometry& g, std::span<const double> gy, std::span<const double> w,
                       std::span<double> gx) {
    const auto oh = static_cast<std::ptrdiff_t>(g.out_h()), ow = static_cast<std::ptrdiff_t>(g.out_w());
    const auto pad = static_cast<std::ptrdiff_t>(g.padding), stride = static_cast<std::ptrdiff_t>(g.stride);
    const auto batch = static_cast<std::ptrdiff_t>(g.batch), in_c = static_cast<std::ptrdiff_t>(g.in_channels);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::ptrdiff_t n = 0; n < batch; ++n) {
        for (std::ptrdiff_t c = 0; c < in_c; ++c) {
            for (std::size_t h = 0; h < g.in_h; ++h) {
                for (std::size_t v = 0; v < g.in_w; ++v) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < g.out_channels; ++o) {
                        for (std::size_t p = 0; p < g.kernel_h; ++p) {
                            const std::ptrdiff_t rn = static_cast<std::ptrdiff_t>(h) + pad - static_cast<std::ptrdiff_t>(p);
                            if (rn < 0 || rn % stride != 0 || rn / stride >= oh) continue;
                            const std::ptrdiff_t i = rn / stride;
                            for (std::size_t q = 0; q < g.kernel_w; ++q) {
                                const std::ptrdiff_t sn = static_cast<std::ptrdiff_t>(v) + pad - static_cast<std::ptrdiff_t>(q);
                                if (sn < 0 || sn % stride != 0 || sn / stride >= ow) continue;
                                const std::ptrdiff_t j = sn / stride;
                                acc += gy[((n * g.out_channels + o) * oh + i) * ow + j] *
                                       w[((o * g.in_channels + c) * g.kernel_h + p) * g.kernel_w + q];
                            }
                        }
                    }
                    gx[((n * g.in_channels + c) * g.in_h + h) * g.in_w + v] = acc;
                }
            }
        }
    }
}

void conv2d_weight_grad(const Conv2dGeometry& g, std::span<const double> x, std::span<const double> gy,
                        std::span<double> gw) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    const auto ih = static_cast<std::ptrdiff_t>(g.in_h), iw = static_cast<std::ptrdiff_t>(g.in_w);
    const auto pad = static_cast<std::ptrdiff_t>(g.padding), stride = static_cast<std::ptrdiff_t>(g.stride);
    const auto out_c = static_cast<std::ptrdiff_t>(g.out_channels), in_c = static_cast<std::ptrdiff_t>(g.in_channels);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::ptrdiff_t o = 0; o < out_c; ++o) {
        for (std::ptrdiff_t c = 0; c < in_c; ++c) {
            for (std::size_t p = 0; p < g.kernel_h; ++p) {
                for (std::size_t q = 0; q < g.kernel_w; ++q) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < g.batch; ++n) {
                        for (std::size_t i = 0; i < oh; ++i) {
                            const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i) * stride + static_cast<std::ptrdiff_t>(p) - pad;
                            if (r < 0 || r >= ih) continue;
                            for (std::size_t j = 0; j < ow; ++j) {
                                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(j) * stride + static_cast<std::ptrdiff_t>(q) - pad;
                                if (s < 0 || s >= iw) continue;
                                acc += gy[((n * g.out_channels + o) * oh + i) * ow + j] *
                                       x[((n * g.in_channels + c) * g.in_h + r) * g.in_w + s];
                            }
                        }
                    }
                    gw[((o * g.in_channels + c) * g.kernel_h + p) * g.kernel_w + q] = acc;
                }
            }
        }
    }
}

void matmul(std::size_t m, std::size_t k, std::size_t n, std::span<const double> a, std::span<const double> b,
            std::span<double> c) {
    const auto rows = static_cast<std::ptrdiff_t>(m), cols = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for collapse(2) schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        for (std::ptrdiff_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
            c[i * n + j] = acc;
        }
    }
}

void pairwise_distance_sums(std::size_t count, std::size_t dim, std::span<const double> rows, std::span<double> out) {
    const auto total = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < total; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < count; ++j) {
            if (static_cast<std::ptrdiff_t>(j) == i) continue;
            double sq = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = rows[i * dim + d] - rows[j * dim + d];
                sq += diff * diff;
            }
            acc += std::sqrt(sq);
        }
        out[i] = acc;
    }
}

} // namespace ck::kernels
