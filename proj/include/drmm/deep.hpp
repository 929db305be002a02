#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "drmm/kernels.hpp"
#include "drmm/rng.hpp"

namespace drmm::deep {

struct LayerSpec {
    ConvSpec conv;
    PoolSpec pool;
};

/// One rendering layer. Its nuisance at every output unit x is g_x = (t_x, a_x):
/// t_x picks a position inside the pooling window, a_x switches the unit on.
/// The rendering matrix Lambda_{t,a} (input_dim x output_dim) has column x equal to
/// a_x times filter f(x) placed, zero-padded, at the conv location selected by t_x.
struct Layer {
    ConvSpec conv;
    PoolSpec pool;
    Tensor filters;  // [K][kh][kw][C]
    Tensor bias;     // [K], zero for generative models
    Shape input_shape;
    Shape conv_shape;
    Shape output_shape;
    std::vector<double> nuisance_prior;  // length 2*|T|, index t*2 + a
    Tensor alpha;                        // additive render bias over the input canvas; empty means zero

    std::size_t translations() const { return pool.window_size(); }
    std::size_t input_dim() const { return shape_size(input_shape); }
    std::size_t output_dim() const { return shape_size(output_shape); }
    bool has_alpha() const {
        for (double v : alpha.values()) {
            if (v != 0.0) return true;
        }
        return false;
    }
};

struct DrmmParams {
    Shape input_shape;
    std::vector<Layer> layers;
    Tensor templates;                 // [C][D^(L)]
    Tensor class_bias;                // [C], zero for generative models
    std::vector<double> class_prior;  // length C
    double noise_var = 1.0;

    std::size_t depth() const { return layers.size(); }
    std::size_t num_classes() const { return templates.dim(0); }
    std::size_t top_dim() const { return layers.back().output_dim(); }
    const Shape& top_shape() const { return layers.back().output_shape; }

    std::span<const double> mu(std::size_t c) const { return row(templates, c); }

    void validate() const {
        if (layers.empty()) throw ShapeError("a DRMM needs at least one layer");
        Shape expect = input_shape;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const Layer& layer = layers[l];
            if (layer.input_shape != expect) {
                throw ShapeError("layer " + std::to_string(l + 1) + " expects input " +
                                 shape_string(layer.input_shape) + " but receives " + shape_string(expect));
            }
            if (layer.pool.stride < layer.pool.window_height || layer.pool.stride < layer.pool.window_width) {
                throw ShapeError("layer " + std::to_string(l + 1) + ": pooling windows must not overlap");
            }
            if (layer.filters.shape() != layer.conv.filter_shape() || layer.bias.size() != layer.conv.filter_count) {
                throw ShapeError("layer " + std::to_string(l + 1) + ": filter bank has shape " +
                                 shape_string(layer.filters.shape()));
            }
            if (layer.nuisance_prior.size() != 2 * layer.translations()) {
                throw ShapeError("layer " + std::to_string(l + 1) + ": nuisance prior must have 2*|T| entries");
            }
            if (!layer.alpha.empty() && layer.alpha.shape() != layer.input_shape) {
                throw ShapeError("layer " + std::to_string(l + 1) + ": alpha must match the layer input");
            }
            expect = layer.output_shape;
        }
        if (templates.rank() != 2 || templates.dim(1) != top_dim()) {
            throw ShapeError("top templates must be [C][" + std::to_string(top_dim()) + "], got " +
                             shape_string(templates.shape()));
        }
        if (class_prior.size() != num_classes() || class_bias.size() != num_classes()) {
            throw ShapeError("class prior/bias length must equal the class count");
        }
        if (!(noise_var > 0.0)) throw NumericError("noise variance must be positive");
    }
};

/// Builds a model with zero filters and templates and uniform priors.
inline DrmmParams make_drmm(const Shape& input_shape, const std::vector<LayerSpec>& specs, std::size_t num_classes,
                            double noise_var = 1.0) {
    DrmmParams p;
    p.input_shape = input_shape;
    Shape cur = input_shape;
    for (const LayerSpec& s : specs) {
        Layer layer;
        layer.conv = s.conv;
        layer.pool = s.pool;
        layer.conv.channels = cur.size() == 3 ? cur[2] : 0;
        const ConvGeometry g = conv_geometry(cur, layer.conv);
        layer.input_shape = cur;
        layer.conv_shape = {g.out_h, g.out_w, layer.conv.filter_count};
        const PoolGeometry pg = pool_geometry(layer.conv_shape, layer.pool);
        layer.output_shape = {pg.out_h, pg.out_w, layer.conv.filter_count};
        layer.filters = Tensor(layer.conv.filter_shape());
        layer.bias = Tensor({layer.conv.filter_count});
        layer.nuisance_prior.assign(2 * layer.translations(), 1.0 / static_cast<double>(2 * layer.translations()));
        cur = layer.output_shape;
        p.layers.push_back(std::move(layer));
    }
    p.templates = Tensor({num_classes, shape_size(cur)});
    p.class_bias = Tensor({num_classes});
    p.class_prior.assign(num_classes, 1.0 / static_cast<double>(num_classes));
    p.noise_var = noise_var;
    p.validate();
    return p;
}

/// Per-layer latent nuisances; a full assignment plus the class is a rendering path.
struct LayerLatents {
    std::vector<std::uint32_t> t;  // one per output unit
    std::vector<std::uint8_t> a;   // one per output unit
    bool operator==(const LayerLatents&) const = default;
};

struct LatentConfig {
    std::size_t c = 0;
    std::vector<LayerLatents> layers;  // index 0 is layer 1
    bool operator==(const LatentConfig&) const = default;
};

inline void check_latents(const DrmmParams& params, const LatentConfig& z) {
    if (z.c >= params.num_classes()) throw ShapeError("class index " + std::to_string(z.c) + " out of range");
    if (z.layers.size() != params.depth()) throw ShapeError("latent config depth does not match the model");
    for (std::size_t l = 0; l < params.depth(); ++l) {
        const Layer& layer = params.layers[l];
        const LayerLatents& ll = z.layers[l];
        if (ll.t.size() != layer.output_dim() || ll.a.size() != layer.output_dim()) {
            throw ShapeError("layer " + std::to_string(l + 1) + " latents have the wrong length");
        }
        for (std::size_t x = 0; x < ll.t.size(); ++x) {
            if (ll.t[x] >= layer.translations() || ll.a[x] > 1) {
                throw ShapeError("layer " + std::to_string(l + 1) + " unit " + std::to_string(x) +
                                 " has an invalid (t, a) = (" + std::to_string(ll.t[x]) + ", " +
                                 std::to_string(ll.a[x]) + ")");
            }
        }
    }
}

/// One rendering step z^(l-1) = Lambda^(l)_{t,a} z^(l), without alpha.
inline Tensor render_step(const Layer& layer, const LayerLatents& latents, const Tensor& z) {
    Tensor masked = z.reshaped(layer.output_shape);
    for (std::size_t x = 0; x < masked.size(); ++x) {
        if (!latents.a[x]) masked[x] = 0.0;
    }
    const Tensor grid = unpool(masked, latents.t, layer.pool, layer.conv_shape);
    return conv2d_transpose(grid, layer.conv, layer.filters, layer.input_shape);
}

/// Noise-free template mu_{c g} = Lambda_g mu_c (plus alpha terms when present).
inline Tensor render_from(const DrmmParams& params, const LatentConfig& latents, Tensor top) {
    Tensor z = std::move(top);
    for (std::size_t l = params.depth(); l-- > 0;) {
        const Layer& layer = params.layers[l];
        z = render_step(layer, latents.layers[l], z);
        if (!layer.alpha.empty()) z = z + layer.alpha;
    }
    return z;
}

inline Tensor render(const DrmmParams& params, const LatentConfig& latents) {
    check_latents(params, latents);
    return render_from(params, latents, Tensor::vector(std::vector<double>(params.mu(latents.c).begin(),
                                                                           params.mu(latents.c).end())));
}

/// Entry (row, col) of Lambda^(l)_{t,a}, computed from the placement geometry.
inline double lambda_entry(const Layer& layer, const LayerLatents& latents, std::size_t row_index,
                           std::size_t col_index) {
    if (!latents.a[col_index]) return 0.0;
    const std::size_t in_w = layer.input_shape[1], in_c = layer.input_shape[2];
    const std::size_t y = row_index / (in_w * in_c), x = (row_index / in_c) % in_w, ch = row_index % in_c;
    const std::size_t out_w = layer.output_shape[1], k = layer.output_shape[2];
    const std::size_t py = col_index / (out_w * k), px = (col_index / k) % out_w, f = col_index % k;
    const std::uint32_t t = latents.t[col_index];
    const std::size_t cy = py * layer.pool.stride + t / layer.pool.window_width;
    const std::size_t cx = px * layer.pool.stride + t % layer.pool.window_width;
    const ConvGeometry g = conv_geometry(layer.input_shape, layer.conv);
    const auto ky = static_cast<std::ptrdiff_t>(y + g.pad_top) - static_cast<std::ptrdiff_t>(cy * layer.conv.stride);
    const auto kx = static_cast<std::ptrdiff_t>(x + g.pad_left) - static_cast<std::ptrdiff_t>(cx * layer.conv.stride);
    if (ky < 0 || kx < 0 || ky >= static_cast<std::ptrdiff_t>(layer.conv.filter_height) ||
        kx >= static_cast<std::ptrdiff_t>(layer.conv.filter_width)) {
        return 0.0;
    }
    const std::size_t idx = ((f * layer.conv.filter_height + static_cast<std::size_t>(ky)) * layer.conv.filter_width +
                             static_cast<std::size_t>(kx)) *
                                layer.conv.channels +
                            ch;
    return layer.filters[idx];
}

/// Dense Lambda^(l)_{t,a} of shape D^(l-1) x D^(l).
inline Tensor assemble_lambda(const Layer& layer, const LayerLatents& latents) {
    const std::size_t rows = layer.input_dim(), cols = layer.output_dim();
    Tensor m({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] = lambda_entry(layer, latents, r, c);
    }
    return m;
}

/// Sum over every rendering path ending at `pixel` of the product of the
/// (masked) weights along the path times the template entry at its root.
/// Alpha terms enter as paths rooted at the level where they are added.
inline double pixel_sum_over_paths(const DrmmParams& params, const LatentConfig& latents, std::size_t pixel,
                                   double max_paths = 1e6) {
    check_latents(params, latents);
    double count = 1.0;
    for (const Layer& layer : params.layers) count *= static_cast<double>(layer.output_dim());
    if (count > max_paths) {
        throw Error("path enumeration needs " + std::to_string(count) + " paths, above the cap of " +
                    std::to_string(max_paths));
    }
    const auto mu = params.mu(latents.c);
    // walk(level, index at level-1, product of weights so far)
    std::function<double(std::size_t, std::size_t, double)> walk = [&](std::size_t level, std::size_t index,
                                                                       double product) -> double {
        const Layer& layer = params.layers[level - 1];
        double total = 0.0;
        if (!layer.alpha.empty()) total += product * layer.alpha[index];
        for (std::size_t col = 0; col < layer.output_dim(); ++col) {
            const double w = lambda_entry(layer, latents.layers[level - 1], index, col);
            if (level == params.depth()) {
                total += product * w * mu[col];
            } else {
                total += walk(level + 1, col, product * w);
            }
        }
        return total;
    };
    return walk(1, pixel, 1.0);
}

inline double sign_of(double v) { return v >= 0.0 ? 1.0 : -1.0; }

struct MaskSolution {
    double value = 0.0;
    std::vector<std::uint8_t> a_hat;
};

/// max over binary masks a of z^T diag(a) u, solved coordinate-wise.
inline MaskSolution mask_opt(std::span<const double> z, std::span<const double> u) {
    if (z.size() != u.size()) throw ShapeError("mask_opt: z and u lengths differ");
    MaskSolution s;
    s.a_hat.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = z[i] * u[i];
        s.a_hat[i] = p > 0.0 ? 1 : 0;
        if (p > 0.0) s.value += p;
    }
    return s;
}

struct RowMaxSolution {
    double value = 0.0;
    std::vector<std::uint32_t> t_hat;
    std::vector<double> u_at;
};

/// max over per-row choices t_x of sum_x z_x u_x(t_x), u given as D x |T|.
inline RowMaxSolution rowmax_opt(std::span<const double> z, const Tensor& u) {
    if (u.rank() != 2 || u.dim(0) != z.size()) throw ShapeError("rowmax_opt: u must be D x |T|");
    const std::size_t nt = u.dim(1);
    RowMaxSolution s;
    s.t_hat.resize(z.size());
    s.u_at.resize(z.size());
    for (std::size_t x = 0; x < z.size(); ++x) {
        const double sg = sign_of(z[x]);
        std::uint32_t best = 0;
        for (std::uint32_t t = 1; t < nt; ++t) {
            if (sg * u(x, t) > sg * u(x, best)) best = t;
        }
        s.t_hat[x] = best;
        s.u_at[x] = u(x, best);
        s.value += std::abs(z[x]) * (sg * u(x, best));
    }
    return s;
}

enum class InferenceMode { nonnegative, signed_ };

/// Everything the bottom-up pass records: feature maps I^(0..L), pre-pooling
/// conv outputs u^(1..L), and the per-unit argmax nuisances.
struct BottomUp {
    std::size_t c_hat = 0;
    std::vector<double> scores;
    std::vector<Tensor> features;    // size L+1, features[0] is the image
    std::vector<Tensor> conv_out;    // size L
    std::vector<LayerLatents> hats;  // size L
    InferenceMode mode = InferenceMode::nonnegative;
};

namespace detail {

inline void reject_alpha(const DrmmParams& params) {
    for (const Layer& layer : params.layers) {
        if (layer.has_alpha()) throw Error("exact inference is unsupported with nonzero alpha biases");
    }
}

/// Expands per-output-unit signs onto every conv position of the unit's window.
inline Tensor window_signs(const Layer& layer, std::span<const double> signs) {
    Tensor grid = Tensor::filled(layer.conv_shape, 1.0);
    const std::size_t out_w = layer.output_shape[1], k = layer.output_shape[2], cw = layer.conv_shape[1];
    for (std::size_t x = 0; x < signs.size(); ++x) {
        const std::size_t py = x / (out_w * k), px = (x / k) % out_w, f = x % k;
        for (std::size_t dy = 0; dy < layer.pool.window_height; ++dy) {
            for (std::size_t dx = 0; dx < layer.pool.window_width; ++dx) {
                const std::size_t y = py * layer.pool.stride + dy, xx = px * layer.pool.stride + dx;
                grid[(y * cw + xx) * k + f] = signs[x];
            }
        }
    }
    return grid;
}

}  // namespace detail

inline std::vector<double> class_scores(const DrmmParams& params, const Tensor& top) {
    std::vector<double> s(params.num_classes());
    for (std::size_t c = 0; c < s.size(); ++c) s[c] = dot(params.mu(c), top.values()) + params.class_bias[c];
    return s;
}

/// Fine-to-coarse max-sum pass. Nonnegative mode is MaxPool(ReLU(Conv(.))) per
/// layer; signed mode uses the supplied per-layer signs s^(l) of the top-down
/// templates: I^(l) = s * MaxPool(ReLU(s * u^(l))).
inline BottomUp bottom_up(const DrmmParams& params, const Tensor& image, InferenceMode mode = InferenceMode::nonnegative,
                          const std::vector<std::vector<double>>* signs = nullptr) {
    params.validate();
    detail::reject_alpha(params);
    if (image.size() != shape_size(params.input_shape)) {
        throw ShapeError("image " + shape_string(image.shape()) + " does not match model input " +
                         shape_string(params.input_shape));
    }
    if (mode == InferenceMode::signed_ && (!signs || signs->size() != params.depth())) {
        throw ShapeError("signed inference needs one sign vector per layer");
    }
    BottomUp r;
    r.mode = mode;
    r.features.push_back(image.reshaped(params.input_shape));
    for (std::size_t l = 0; l < params.depth(); ++l) {
        const Layer& layer = params.layers[l];
        Tensor u = conv2d(r.features.back(), layer.conv, layer.filters, layer.bias);
        LayerLatents hat;
        Tensor next;
        if (mode == InferenceMode::nonnegative) {
            PoolResult pr = maxpool_argmax(relu(u), layer.pool);
            next = std::move(pr.values);
            hat.t = std::move(pr.argmax);
        } else {
            const auto& s = (*signs)[l];
            if (s.size() != layer.output_dim()) throw ShapeError("sign vector length mismatch at layer " + std::to_string(l + 1));
            const Tensor grid = detail::window_signs(layer, s);
            Tensor su = u;
            for (std::size_t i = 0; i < su.size(); ++i) su[i] *= grid[i];
            // Pool before rectifying so t_hat is the argmax of s * u even when the unit is off.
            PoolResult pr = maxpool_argmax(su, layer.pool);
            next = relu(pr.values);
            for (std::size_t x = 0; x < next.size(); ++x) next[x] *= s[x];
            hat.t = std::move(pr.argmax);
        }
        hat.a.resize(next.size());
        for (std::size_t x = 0; x < next.size(); ++x) hat.a[x] = next[x] != 0.0 ? 1 : 0;
        r.conv_out.push_back(std::move(u));
        r.hats.push_back(std::move(hat));
        r.features.push_back(std::move(next));
    }
    r.scores = class_scores(params, r.features.back());
    r.c_hat = argmax_first(r.scores);
    return r;
}

inline LatentConfig traceback(const BottomUp& up, std::size_t c) {
    return LatentConfig{c, up.hats};
}

struct TopDown {
    std::vector<Tensor> z;            // z[l] for l = 0..L; z[0] is the reconstruction
    std::vector<Tensor> preactivation;  // Lambda z^(l+1) before the rectifier, l = 0..L-1
    Tensor reconstruction() const { return z.front(); }
};

/// Coarse-to-fine reconstruction through the recorded argmax nuisances.
/// Nonnegative mode rectifies every intermediate template z^(1..L-1).
inline TopDown top_down(const DrmmParams& params, std::size_t c_hat, const std::vector<LayerLatents>& hats,
                        InferenceMode mode = InferenceMode::nonnegative) {
    if (hats.size() != params.depth()) throw Error("top_down: missing argmax records from the bottom-up pass");
    LatentConfig cfg{c_hat, hats};
    check_latents(params, cfg);
    const std::size_t depth = params.depth();
    TopDown td;
    td.z.resize(depth + 1);
    td.preactivation.resize(depth);
    td.z[depth] = Tensor(params.top_shape(), std::vector<double>(params.mu(c_hat).begin(), params.mu(c_hat).end()));
    for (std::size_t l = depth; l-- > 0;) {
        Tensor v = render_step(params.layers[l], hats[l], td.z[l + 1]);
        td.preactivation[l] = v;
        td.z[l] = (mode == InferenceMode::nonnegative && l > 0) ? relu(v) : std::move(v);
    }
    return td;
}

inline TopDown top_down(const DrmmParams& params, const BottomUp& up) {
    return top_down(params, up.c_hat, up.hats, up.mode);
}

struct ParamCount {
    std::uint64_t drmm = 0;
    std::uint64_t shallow = 0;
};

/// Free parameters with dense Lambda's: sum_l |G^(l+1)| D^(l) D^(l+1) (the
/// top term uses |C| and D^(L+1) = 1) against the shallow D |C| prod_l |G^(l)|.
inline ParamCount count_params(std::size_t num_classes, std::span<const std::size_t> dims,
                               std::span<const std::size_t> nuisance_counts) {
    if (dims.size() != nuisance_counts.size() + 1) {
        throw ShapeError("count_params: need L+1 layer widths and L nuisance counts");
    }
    const std::size_t depth = nuisance_counts.size();
    ParamCount pc;
    for (std::size_t l = 0; l < depth; ++l) pc.drmm += nuisance_counts[l] * dims[l] * dims[l + 1];
    pc.drmm += num_classes * dims[depth];
    pc.shallow = dims[0] * num_classes;
    for (std::size_t g : nuisance_counts) pc.shallow *= g;
    return pc;
}

/// Per-unit nuisance cardinality |G^(l)| = 2|T^(l)| for a convolutional model.
inline ParamCount count_params(const DrmmParams& params) {
    std::vector<std::size_t> dims{shape_size(params.input_shape)}, g;
    for (const Layer& layer : params.layers) {
        dims.push_back(layer.output_dim());
        g.push_back(2 * layer.translations());
    }
    return count_params(params.num_classes(), dims, g);
}

inline LatentConfig sample_nuisances(const DrmmParams& params, std::size_t c, Rng& rng) {
    LatentConfig z;
    z.c = c;
    for (const Layer& layer : params.layers) {
        LayerLatents ll;
        ll.t.resize(layer.output_dim());
        ll.a.resize(layer.output_dim());
        for (std::size_t x = 0; x < layer.output_dim(); ++x) {
            const std::size_t g = rng.categorical(layer.nuisance_prior);
            ll.t[x] = static_cast<std::uint32_t>(g / 2);
            ll.a[x] = static_cast<std::uint8_t>(g % 2);
        }
        z.layers.push_back(std::move(ll));
    }
    return z;
}

struct DeepSample {
    Tensor image;
    LatentConfig latents;
};

inline void add_noise(Tensor& image, double noise_var, Rng& rng) {
    const double sigma = std::sqrt(noise_var);
    for (auto& v : image.values()) v += sigma * rng.normal();
}

inline DeepSample sample(const DrmmParams& params, std::uint64_t seed) {
    params.validate();
    Rng rng(seed);
    DeepSample s;
    const std::size_t c = rng.categorical(params.class_prior);
    s.latents = sample_nuisances(params, c, rng);
    s.image = render(params, s.latents);
    add_noise(s.image, params.noise_var, rng);
    return s;
}

/// Rendering factor model: a Gaussian top latent mapped through per-class
/// loadings, then the DRMM layer stack.
struct DrfmParams {
    DrmmParams stack;
    Tensor loadings;  // [C][D^(L)][d]

    std::size_t latent_dim() const { return loadings.dim(2); }

    void validate() const {
        stack.validate();
        if (loadings.rank() != 3 || loadings.dim(0) != stack.num_classes() || loadings.dim(1) != stack.top_dim() ||
            loadings.dim(2) < 1) {
            throw ShapeError("DRFM loadings must be [C][D^(L)][d] with d >= 1, got " + shape_string(loadings.shape()));
        }
    }
};

struct DrfmSample {
    Tensor image;
    LatentConfig latents;
    Tensor top_latent;
};

inline DrfmSample drfm_sample(const DrfmParams& params, std::uint64_t seed) {
    params.validate();
    Rng rng(seed);
    DrfmSample s;
    const std::size_t c = rng.categorical(params.stack.class_prior);
    const std::size_t d = params.latent_dim(), top = params.stack.top_dim();
    std::vector<double> zt(d);
    for (auto& v : zt) v = rng.normal();
    s.top_latent = Tensor::vector(zt);
    Tensor z(params.stack.top_shape());
    for (std::size_t i = 0; i < top; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += params.loadings[(c * top + i) * d + j] * zt[j];
        z[i] = acc;
    }
    s.latents = sample_nuisances(params.stack, c, rng);
    s.image = render_from(params.stack, s.latents, std::move(z));
    add_noise(s.image, params.stack.noise_var, rng);
    return s;
}

}  // namespace drmm::deep
