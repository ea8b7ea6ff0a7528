#include "ck/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ck/error.hpp"
#include "ck/kernels.hpp"

namespace ck {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
std::vector<double> map_values(const Tensor& x, F f) {
    std::vector<double> out(x.numel());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return out;
}

// Constant (non-differentiable) tensor with f applied elementwise.
template <class F>
Tensor constant_map(const Tensor& x, F f) {
    return Tensor(x.shape(), map_values(x, f));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return record_op("add", a.shape(), std::move(out), {a, b},
                     [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return record_op("sub", a.shape(), std::move(out), {a, b},
                     [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return record_op("mul", a.shape(), std::move(out), {a, b}, [a, b](const Tensor& g) {
        return std::vector<Tensor>{a.requires_grad() ? mul(g, b) : Tensor{}, b.requires_grad() ? mul(g, a) : Tensor{}};
    });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
    return record_op("scale", x.shape(), map_values(x, [factor](double v) { return v * factor; }), {x},
                     [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& x, double value) {
    return record_op("add_scalar", x.shape(), map_values(x, [value](double v) { return v + value; }), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor pow_scalar(const Tensor& x, double exponent) {
    return record_op("pow_scalar", x.shape(), map_values(x, [exponent](double v) { return std::pow(v, exponent); }),
                     {x}, [x, exponent](const Tensor& g) {
                         return std::vector<Tensor>{mul(g, scale(pow_scalar(x, exponent - 1.0), exponent))};
                     });
}

Tensor exp(const Tensor& x) {
    return record_op("exp", x.shape(), map_values(x, [](double v) { return std::exp(v); }), {x},
                     [x](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(x))}; });
}

Tensor log(const Tensor& x) {
    return record_op("log", x.shape(), map_values(x, [](double v) { return std::log(v); }), {x},
                     [x](const Tensor& g) { return std::vector<Tensor>{mul(g, pow_scalar(x, -1.0))}; });
}

Tensor abs(const Tensor& x) {
    return record_op("abs", x.shape(), map_values(x, [](double v) { return std::fabs(v); }), {x}, [x](const Tensor& g) {
        Tensor sign = constant_map(x, [](double v) { return static_cast<double>((v > 0) - (v < 0)); });
        return std::vector<Tensor>{mul(g, sign)};
    });
}

Tensor sigmoid(const Tensor& x) {
    auto f = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return record_op("sigmoid", x.shape(), map_values(x, f), {x}, [x](const Tensor& g) {
        // recomputed rather than captured: the output cannot be held by its own node
        Tensor y = sigmoid(x);
        return std::vector<Tensor>{mul(g, sub(y, mul(y, y)))};
    });
}

Tensor relu(const Tensor& x) {
    return record_op("relu", x.shape(), map_values(x, [](double v) { return v > 0 ? v : 0.0; }), {x},
                     [x](const Tensor& g) {
                         return std::vector<Tensor>{mul(g, constant_map(x, [](double v) { return v > 0 ? 1.0 : 0.0; }))};
                     });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Shape shape = x.shape();
    return record_op("sum", Shape{1}, {acc}, {x},
                     [shape](const Tensor& g) { return std::vector<Tensor>{expand(g, shape)}; });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor expand(const Tensor& scalar, const Shape& shape) {
    if (scalar.numel() != 1) throw ShapeError("expand: source must hold one element, got " + shape_str(scalar.shape()));
    return record_op("expand", shape, std::vector<double>(shape_numel(shape), scalar[0]), {scalar},
                     [](const Tensor& g) { return std::vector<Tensor>{sum(g)}; });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Shape from = x.shape();
    return record_op("reshape", shape, x.values(), {x},
                     [from](const Tensor& g) { return std::vector<Tensor>{reshape(g, from)}; });
}

namespace {

// Splits `shape` around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

} // namespace

Tensor reduce_to_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("reduce_to_axis: axis " + std::to_string(axis) + " out of range for " +
                                           shape_str(x.shape()));
    const AxisSplit s = split_axis(x.shape(), axis);
    std::vector<double> out(s.extent, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) out[e] += x[(o * s.extent + e) * s.inner + i];
    Shape shape = x.shape();
    return record_op("reduce_to_axis", Shape{s.extent}, std::move(out), {x},
                     [shape, axis](const Tensor& g) { return std::vector<Tensor>{broadcast_axis(g, shape, axis)}; });
}

Tensor broadcast_axis(const Tensor& v, const Shape& shape, std::size_t axis) {
    if (axis >= shape.size() || v.rank() != 1 || v.numel() != shape[axis])
        throw ShapeError("broadcast_axis: cannot broadcast " + shape_str(v.shape()) + " along axis " +
                         std::to_string(axis) + " of " + shape_str(shape));
    const AxisSplit s = split_axis(shape, axis);
    std::vector<double> out(shape_numel(shape));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) out[(o * s.extent + e) * s.inner + i] = v[e];
    return record_op("broadcast_axis", shape, std::move(out), {v},
                     [axis](const Tensor& g) { return std::vector<Tensor>{reduce_to_axis(g, axis)}; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible operands " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    kernels::matmul(m, k, n, a.data(), b.data(), out);
    return record_op("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b](const Tensor& g) {
        return std::vector<Tensor>{a.requires_grad() ? matmul(g, transpose(b)) : Tensor{},
                                   b.requires_grad() ? matmul(transpose(a), g) : Tensor{}};
    });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected a 2-D tensor, got " + shape_str(x.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return record_op("transpose", Shape{c, r}, std::move(out), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

namespace {

kernels::Conv2dGeometry conv_geometry(const Shape& x, const Shape& w, Conv2dOptions opt) {
    if (x.size() != 4 || w.size() != 4)
        throw ShapeError("conv2d: expected 4-D input and weight, got " + shape_str(x) + " and " + shape_str(w));
    if (x[1] != w[1])
        throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels but weight expects " +
                         std::to_string(w[1]) + " (input " + shape_str(x) + ", weight " + shape_str(w) + ")");
    if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (x[2] + 2 * opt.padding < w[2] || x[3] + 2 * opt.padding < w[3])
        throw ShapeError("conv2d: kernel " + shape_str(w) + " does not fit padded input " + shape_str(x));
    kernels::Conv2dGeometry g;
    g.batch = x[0];
    g.in_channels = x[1];
    g.in_h = x[2];
    g.in_w = x[3];
    g.out_channels = w[0];
    g.kernel_h = w[2];
    g.kernel_w = w[3];
    g.stride = opt.stride;
    g.padding = opt.padding;
    return g;
}

Shape conv_output_shape(const kernels::Conv2dGeometry& g) { return {g.batch, g.out_channels, g.out_h(), g.out_w()}; }

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dOptions opt) {
    const auto geo = conv_geometry(x.shape(), w.shape(), opt);
    std::vector<double> out(geo.output_size());
    kernels::conv2d_forward(geo, x.data(), w.data(), out);
    return record_op("conv2d", conv_output_shape(geo), std::move(out), {x, w}, [x, w, opt](const Tensor& g) {
        return std::vector<Tensor>{x.requires_grad() ? conv2d_input_grad(g, w, x.shape(), opt) : Tensor{},
                                   w.requires_grad() ? conv2d_weight_grad(x, g, w.shape(), opt) : Tensor{}};
    });
}

// conv2d, conv2d_input_grad and conv2d_weight_grad are the three partial
// derivatives of one trilinear form, so each one's gradient is another member
// of the family.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape, Conv2dOptions opt) {
    const auto geo = conv_geometry(input_shape, w.shape(), opt);
    if (grad_out.shape() != conv_output_shape(geo))
        throw ShapeError("conv2d_input_grad: gradient shape " + shape_str(grad_out.shape()) + " does not match " +
                         shape_str(conv_output_shape(geo)));
    std::vector<double> out(geo.input_size());
    kernels::conv2d_input_grad(geo, grad_out.data(), w.data(), out);
    return record_op("conv2d_input_grad", input_shape, std::move(out), {grad_out, w},
                     [grad_out, w, opt](const Tensor& g) {
                         return std::vector<Tensor>{
                             grad_out.requires_grad() ? conv2d(g, w, opt) : Tensor{},
                             w.requires_grad() ? conv2d_weight_grad(g, grad_out, w.shape(), opt) : Tensor{}};
                     });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape, Conv2dOptions opt) {
    const auto geo = conv_geometry(x.shape(), weight_shape, opt);
    if (grad_out.shape() != conv_output_shape(geo))
        throw ShapeError("conv2d_weight_grad: gradient shape " + shape_str(grad_out.shape()) + " does not match " +
                         shape_str(conv_output_shape(geo)));
    std::vector<double> out(geo.weight_size());
    kernels::conv2d_weight_grad(geo, x.data(), grad_out.data(), out);
    return record_op("conv2d_weight_grad", weight_shape, std::move(out), {x, grad_out},
                     [x, grad_out, opt](const Tensor& g) {
                         return std::vector<Tensor>{
                             x.requires_grad() ? conv2d_input_grad(grad_out, g, x.shape(), opt) : Tensor{},
                             grad_out.requires_grad() ? conv2d(x, g, opt) : Tensor{}};
                     });
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
    if (x.rank() != 4) throw ShapeError("max_pool2d: expected 4-D input, got " + shape_str(x.shape()));
    if (kernel == 0 || stride == 0 || x.dim(2) < kernel || x.dim(3) < kernel)
        throw ShapeError("max_pool2d: window " + std::to_string(kernel) + " does not fit " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    std::vector<std::size_t> index;
    index.reserve(n * c * oh * ow);
    for (std::size_t b = 0; b < n * c; ++b)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (b * h + i * stride) * w + j * stride;
                for (std::size_t p = 0; p < kernel; ++p)
                    for (std::size_t q = 0; q < kernel; ++q) {
                        const std::size_t at = (b * h + i * stride + p) * w + j * stride + q;
                        if (x[at] > x[best]) best = at;
                    }
                index.push_back(best);
            }
    return gather(x, std::move(index), Shape{n, c, oh, ow});
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, const Shape& out_shape) {
    if (index.size() != shape_numel(out_shape)) throw ShapeError("gather: index length does not match output shape");
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.numel()) throw ShapeError("gather: index out of range");
        out[i] = x[index[i]];
    }
    Shape in_shape = x.shape();
    return record_op("gather", out_shape, std::move(out), {x}, [index, in_shape](const Tensor& g) {
        return std::vector<Tensor>{scatter_add(g, index, in_shape)};
    });
}

Tensor scatter_add(const Tensor& x, std::vector<std::size_t> index, const Shape& out_shape) {
    if (index.size() != x.numel()) throw ShapeError("scatter_add: index length does not match source");
    std::vector<double> out(shape_numel(out_shape), 0.0);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= out.size()) throw ShapeError("scatter_add: index out of range");
        out[index[i]] += x[i];
    }
    Shape src_shape = x.shape();
    return record_op("scatter_add", out_shape, std::move(out), {x}, [index, src_shape](const Tensor& g) {
        return std::vector<Tensor>{gather(g, index, src_shape)};
    });
}

Tensor ste_apply(const Tensor& x, const std::function<double(double)>& fn) {
    return record_op("ste", x.shape(), map_values(x, fn), {x}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    // Row maxima are subtracted as constants for stability; the loss is
    // invariant to them so no gradient is lost.
    std::vector<double> row_max(rows, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) row_max[i] = std::max(row_max[i], logits[i * cols + j]);
    std::vector<double> onehot(rows * cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= cols)
            throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                             std::to_string(cols) + ")");
        onehot[i * cols + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    Tensor shift = broadcast_axis(Tensor(Shape{rows}, row_max), logits.shape(), 0);
    Tensor z = sub(logits, shift);
    Tensor lse = log(reduce_to_axis(exp(z), 0));                       // [rows]
    Tensor picked = reduce_to_axis(mul(z, Tensor(logits.shape(), std::move(onehot))), 0);
    return scale(sum(sub(lse, picked)), 1.0 / static_cast<double>(rows));
}

} // namespace ck
