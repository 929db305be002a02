#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>

#include "drmm/tensor.hpp"

namespace drmm {

enum class Padding { valid, same_zero };

struct ConvSpec {
    std::size_t filter_count = 1;
    std::size_t filter_height = 1;
    std::size_t filter_width = 1;
    std::size_t channels = 1;
    std::size_t stride = 1;
    Padding padding = Padding::valid;

    std::size_t filter_size() const { return filter_height * filter_width * channels; }
    Shape filter_shape() const { return {filter_count, filter_height, filter_width, channels}; }

    void validate() const {
        if (stride < 1 || filter_height < 1 || filter_width < 1 || channels < 1 || filter_count < 1) {
            throw ShapeError("conv spec needs stride and filter extents >= 1");
        }
    }
};

struct PoolSpec {
    std::size_t window_height = 2;
    std::size_t window_width = 2;
    std::size_t stride = 2;

    std::size_t window_size() const { return window_height * window_width; }

    void validate() const {
        if (stride < 1 || window_height < 1 || window_width < 1) {
            throw ShapeError("pool spec needs stride and window extents >= 1");
        }
    }
};

/// Spatial bookkeeping for one convolution: where output (oy, ox) reads from.
struct ConvGeometry {
    std::size_t in_h = 0, in_w = 0, in_c = 0;
    std::size_t out_h = 0, out_w = 0;
    std::size_t pad_top = 0, pad_left = 0;

    Shape input_shape() const { return {in_h, in_w, in_c}; }
};

inline ConvGeometry conv_geometry(const Shape& input, const ConvSpec& spec) {
    spec.validate();
    if (input.size() != 3) {
        throw ShapeError("conv2d expects an HxWxC input, got " + shape_string(input));
    }
    if (input[2] != spec.channels) {
        throw ShapeError("conv2d channel mismatch: input " + shape_string(input) + " vs filters " +
                         shape_string(spec.filter_shape()));
    }
    ConvGeometry g;
    g.in_h = input[0];
    g.in_w = input[1];
    g.in_c = input[2];
    if (spec.padding == Padding::valid) {
        if (g.in_h < spec.filter_height || g.in_w < spec.filter_width) {
            throw ShapeError("conv2d window " + shape_string(spec.filter_shape()) +
                             " does not fit input " + shape_string(input));
        }
        g.out_h = (g.in_h - spec.filter_height) / spec.stride + 1;
        g.out_w = (g.in_w - spec.filter_width) / spec.stride + 1;
    } else {
        g.pad_top = (spec.filter_height - 1) / 2;
        g.pad_left = (spec.filter_width - 1) / 2;
        g.out_h = (g.in_h - 1) / spec.stride + 1;
        g.out_w = (g.in_w - 1) / spec.stride + 1;
    }
    if (g.out_h == 0 || g.out_w == 0) {
        throw ShapeError("conv2d produces an empty output for input " + shape_string(input));
    }
    return g;
}

namespace detail {

// Filters reordered to [kh][kw][C][K] so the filter index is innermost.
inline std::vector<double> filters_k_last(const Tensor& filters, const ConvSpec& spec) {
    const std::size_t k = spec.filter_count, f = spec.filter_size();
    std::vector<double> out(k * f);
    for (std::size_t fi = 0; fi < k; ++fi) {
        for (std::size_t j = 0; j < f; ++j) out[j * k + fi] = filters[fi * f + j];
    }
    return out;
}

inline void check_filters(const Tensor& filters, const ConvSpec& spec) {
    if (filters.shape() != spec.filter_shape()) {
        throw ShapeError("filter bank shape " + shape_string(filters.shape()) + " does not match spec " +
                         shape_string(spec.filter_shape()));
    }
}

}  // namespace detail

/// Cross-correlation of an HxWxC input with a KxkhxkwxC bank.
///
/// Every output accumulates bias first, then window terms in (ky, kx, c)
/// order, so results are bit-reproducible.
inline Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& filters, const Tensor& bias) {
    const ConvGeometry g = conv_geometry(input.shape(), spec);
    detail::check_filters(filters, spec);
    if (bias.size() != spec.filter_count) {
        throw ShapeError("conv2d bias " + shape_string(bias.shape()) + " vs filter count " +
                         std::to_string(spec.filter_count));
    }
    const std::size_t nk = spec.filter_count, c = g.in_c;
    const std::vector<double> w = detail::filters_k_last(filters, spec);
    Tensor out({g.out_h, g.out_w, nk});
    std::vector<double> acc(nk);
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            for (std::size_t f = 0; f < nk; ++f) acc[f] = bias[f];
            for (std::size_t ky = 0; ky < spec.filter_height; ++ky) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad_top);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
                for (std::size_t kx = 0; kx < spec.filter_width; ++kx) {
                    const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.pad_left);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                    const double* in = input.data() + ((static_cast<std::size_t>(iy) * g.in_w + ix) * c);
                    const double* wk = &w[((ky * spec.filter_width + kx) * c) * nk];
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double x = in[ch];
                        const double* wf = wk + ch * nk;
                        for (std::size_t f = 0; f < nk; ++f) acc[f] += wf[f] * x;
                    }
                }
            }
            double* o = out.data() + ((oy * g.out_w + ox) * nk);
            std::copy(acc.begin(), acc.end(), o);
        }
    }
    return out;
}

/// Adjoint of conv2d with respect to its input: scatters an output-shaped
/// grid back onto the input canvas through the filters. This is also the
/// rendering step z -> Gamma z of a convolutional layer.
inline Tensor conv2d_transpose(const Tensor& grid, const ConvSpec& spec, const Tensor& filters,
                               const Shape& input_shape) {
    const ConvGeometry g = conv_geometry(input_shape, spec);
    detail::check_filters(filters, spec);
    if (grid.shape() != Shape{g.out_h, g.out_w, spec.filter_count}) {
        throw ShapeError("conv2d_transpose grid " + shape_string(grid.shape()) + " vs expected " +
                         shape_string({g.out_h, g.out_w, spec.filter_count}));
    }
    const std::size_t nk = spec.filter_count, c = g.in_c, fsz = spec.filter_size();
    Tensor out(input_shape);
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const double* gv = grid.data() + ((oy * g.out_w + ox) * nk);
            for (std::size_t f = 0; f < nk; ++f) {
                const double v = gv[f];
                if (v == 0.0) continue;
                const double* wf = filters.data() + (f * fsz);
                for (std::size_t ky = 0; ky < spec.filter_height; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
                    for (std::size_t kx = 0; kx < spec.filter_width; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad_left);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                        double* o = out.data() + ((static_cast<std::size_t>(iy) * g.in_w + ix) * c);
                        const double* wk = wf + (ky * spec.filter_width + kx) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) o[ch] += v * wk[ch];
                    }
                }
            }
        }
    }
    return out;
}

/// Accumulates d(loss)/d(filters) given d(loss)/d(output) into `grad`.
///
/// `output_grad` may be sparse; zero entries are skipped.
inline void conv2d_filter_grad(const Tensor& input, const Tensor& output_grad, const ConvSpec& spec,
                               Tensor& grad) {
    const ConvGeometry g = conv_geometry(input.shape(), spec);
    detail::check_filters(grad, spec);
    const std::size_t nk = spec.filter_count, c = g.in_c, fsz = spec.filter_size();
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const double* gv = output_grad.data() + ((oy * g.out_w + ox) * nk);
            for (std::size_t f = 0; f < nk; ++f) {
                const double v = gv[f];
                if (v == 0.0) continue;
                double* wf = grad.data() + (f * fsz);
                for (std::size_t ky = 0; ky < spec.filter_height; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
                    for (std::size_t kx = 0; kx < spec.filter_width; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad_left);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
                        const double* in = input.data() + ((static_cast<std::size_t>(iy) * g.in_w + ix) * c);
                        double* wk = wf + (ky * spec.filter_width + kx) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) wk[ch] += v * in[ch];
                    }
                }
            }
        }
    }
}

inline Tensor relu(const Tensor& input) {
    Tensor out = input;
    for (auto& v : out.values()) v = std::max(v, 0.0);
    return out;
}

/// Max-pooling values together with the flat within-window offset
/// (dy * window_width + dx) of the first maximizer in row-major order.
struct PoolResult {
    Tensor values;
    std::vector<std::uint32_t> argmax;
};

struct PoolGeometry {
    std::size_t out_h = 0, out_w = 0;
};

inline PoolGeometry pool_geometry(const Shape& input, const PoolSpec& spec) {
    spec.validate();
    if (input.size() != 3) {
        throw ShapeError("maxpool expects an HxWxC input, got " + shape_string(input));
    }
    if (input[0] < spec.window_height || input[1] < spec.window_width) {
        throw ShapeError("pool window " + std::to_string(spec.window_height) + "x" +
                         std::to_string(spec.window_width) + " larger than input " + shape_string(input));
    }
    return {(input[0] - spec.window_height) / spec.stride + 1, (input[1] - spec.window_width) / spec.stride + 1};
}

inline PoolResult maxpool_argmax(const Tensor& input, const PoolSpec& spec) {
    const PoolGeometry pg = pool_geometry(input.shape(), spec);
    const std::size_t w = input.dim(1), c = input.dim(2);
    PoolResult r{Tensor({pg.out_h, pg.out_w, c}), std::vector<std::uint32_t>(pg.out_h * pg.out_w * c, 0)};
    for (std::size_t py = 0; py < pg.out_h; ++py) {
        for (std::size_t px = 0; px < pg.out_w; ++px) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double best = -std::numeric_limits<double>::infinity();
                std::uint32_t best_off = 0;
                for (std::size_t dy = 0; dy < spec.window_height; ++dy) {
                    for (std::size_t dx = 0; dx < spec.window_width; ++dx) {
                        const std::size_t y = py * spec.stride + dy, x = px * spec.stride + dx;
                        const double v = input[(y * w + x) * c + ch];
                        if (v > best) {
                            best = v;
                            best_off = static_cast<std::uint32_t>(dy * spec.window_width + dx);
                        }
                    }
                }
                const std::size_t o = (py * pg.out_w + px) * c + ch;
                r.values[o] = best;
                r.argmax[o] = best_off;
            }
        }
    }
    return r;
}

/// Places pooled values back at their recorded offsets; everything else is zero.
inline Tensor unpool(const Tensor& pooled, std::span<const std::uint32_t> argmax, const PoolSpec& spec,
                     const Shape& input_shape) {
    const PoolGeometry pg = pool_geometry(input_shape, spec);
    if (pooled.shape() != Shape{pg.out_h, pg.out_w, input_shape[2]} || argmax.size() != pooled.size()) {
        throw ShapeError("unpool: pooled shape " + shape_string(pooled.shape()) + " inconsistent with input " +
                         shape_string(input_shape));
    }
    const std::size_t w = input_shape[1], c = input_shape[2];
    Tensor out(input_shape);
    for (std::size_t py = 0; py < pg.out_h; ++py) {
        for (std::size_t px = 0; px < pg.out_w; ++px) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t o = (py * pg.out_w + px) * c + ch;
                const std::size_t dy = argmax[o] / spec.window_width, dx = argmax[o] % spec.window_width;
                out[((py * spec.stride + dy) * w + px * spec.stride + dx) * c + ch] += pooled[o];
            }
        }
    }
    return out;
}

/// Adjoint of unpool: reads each window at its recorded offset.
inline Tensor gather_pooled(const Tensor& input, std::span<const std::uint32_t> argmax, const PoolSpec& spec) {
    const PoolGeometry pg = pool_geometry(input.shape(), spec);
    const std::size_t w = input.dim(1), c = input.dim(2);
    if (argmax.size() != pg.out_h * pg.out_w * c) throw ShapeError("gather_pooled: argmax length mismatch");
    Tensor out({pg.out_h, pg.out_w, c});
    for (std::size_t py = 0; py < pg.out_h; ++py) {
        for (std::size_t px = 0; px < pg.out_w; ++px) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t o = (py * pg.out_w + px) * c + ch;
                const std::size_t dy = argmax[o] / spec.window_width, dx = argmax[o] % spec.window_width;
                out[o] = input[((py * spec.stride + dy) * w + px * spec.stride + dx) * c + ch];
            }
        }
    }
    return out;
}

inline Tensor normalize_l2(const Tensor& input) {
    const double n2 = squared_norm(input.values());
    if (n2 == 0.0) throw NumericError("normalize_l2: input is all zero");
    const double inv = 1.0 / std::sqrt(n2);
    Tensor out = input;
    for (auto& v : out.values()) v *= inv;
    return out;
}

inline double log_sum_exp(std::span<const double> x) {
    const double m = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

/// Softmax along `axis`, with max subtraction.
inline Tensor softmax(const Tensor& input, std::size_t axis = 0) {
    if (axis >= input.rank()) throw ShapeError("softmax axis out of range for " + shape_string(input.shape()));
    const Shape& s = input.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Tensor out = input;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            auto at = [&](std::size_t k) -> double& { return out[(o * n + k) * inner + in]; };
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < n; ++k) m = std::max(m, at(k));
            double total = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                at(k) = std::exp(at(k) - m);
                total += at(k);
            }
            for (std::size_t k = 0; k < n; ++k) at(k) /= total;
        }
    }
    return out;
}

/// Index of the first maximum (lowest index wins ties).
inline std::size_t argmax_first(std::span<const double> x) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i] > x[best]) best = i;
    }
    return best;
}

}  // namespace drmm
