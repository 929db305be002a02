#pragma once

// Brute-force oracles and random instance builders shared by the unit and
// acceptance tests. Nothing here calls the inference routines it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "drmm/deep.hpp"
#include "drmm/edrmm.hpp"
#include "drmm/learning.hpp"
#include "drmm/rmm.hpp"

namespace drmm::oracle {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

inline Tensor random_nonneg(Rng& rng, Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform();
    return t;
}

inline std::vector<double> random_simplex(Rng& rng, std::size_t n) {
    std::vector<double> p(n);
    double s = 0.0;
    for (auto& v : p) s += (v = 0.1 + rng.uniform());
    for (auto& v : p) v /= s;
    return p;
}

/// Max over all 2^D masks of z^T diag(a) u.
inline double brute_mask(std::span<const double> z, std::span<const double> u) {
    const std::size_t d = z.size();
    double best = -std::numeric_limits<double>::infinity();
    for (std::uint64_t m = 0; m < (std::uint64_t{1} << d); ++m) {
        double v = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            if (m >> i & 1) v += z[i] * u[i];
        }
        best = std::max(best, v);
    }
    return best;
}

/// Max over all |T|^D row choices of sum_x z_x u_x(t_x).
inline double brute_rowmax(std::span<const double> z, const Tensor& u) {
    const std::size_t d = z.size(), nt = u.dim(1);
    std::size_t total = 1;
    for (std::size_t i = 0; i < d; ++i) total *= nt;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t rest = code;
        double v = 0.0;
        for (std::size_t x = 0; x < d; ++x) {
            v += z[x] * u(x, rest % nt);
            rest /= nt;
        }
        best = std::max(best, v);
    }
    return best;
}

/// Visits every LatentConfig of a model (class outermost).
template <class Fn>
void for_each_latent(const deep::DrmmParams& params, Fn&& fn) {
    std::vector<std::size_t> card;
    for (const auto& layer : params.layers) {
        for (std::size_t x = 0; x < layer.output_dim(); ++x) card.push_back(2 * layer.translations());
    }
    std::vector<std::size_t> digit(card.size(), 0);
    for (std::size_t c = 0; c < params.num_classes(); ++c) {
        std::fill(digit.begin(), digit.end(), 0);
        while (true) {
            deep::LatentConfig z;
            z.c = c;
            std::size_t k = 0;
            for (const auto& layer : params.layers) {
                deep::LayerLatents ll;
                for (std::size_t x = 0; x < layer.output_dim(); ++x, ++k) {
                    ll.t.push_back(static_cast<std::uint32_t>(digit[k] / 2));
                    ll.a.push_back(static_cast<std::uint8_t>(digit[k] % 2));
                }
                z.layers.push_back(std::move(ll));
            }
            fn(z);
            std::size_t i = 0;
            while (i < digit.size() && ++digit[i] == card[i]) digit[i++] = 0;
            if (i == digit.size()) break;
        }
    }
}

inline double latent_count(const deep::DrmmParams& params) {
    double n = static_cast<double>(params.num_classes());
    for (const auto& layer : params.layers) {
        n *= std::pow(2.0 * static_cast<double>(layer.translations()), static_cast<double>(layer.output_dim()));
    }
    return n;
}

/// Fills filters and templates; nonnegative draws give z^(l) >= 0 everywhere.
inline void randomize(deep::DrmmParams& p, Rng& rng, bool nonnegative) {
    for (auto& layer : p.layers) {
        layer.filters = nonnegative ? random_nonneg(rng, layer.filters.shape()) : random_tensor(rng, layer.filters.shape());
    }
    p.templates = nonnegative ? random_nonneg(rng, p.templates.shape()) : random_tensor(rng, p.templates.shape());
}

/// A random conv stack whose every width stays tiny. Each layer uses a
/// kh x kw conv with K filters followed by a non-overlapping pool.
inline deep::DrmmParams random_small_model(Rng& rng, std::size_t depth, std::size_t max_side, std::size_t max_k,
                                           std::size_t classes) {
    const std::size_t h = 1 + rng.uniform_index(max_side), w = 1 + rng.uniform_index(max_side);
    const std::size_t ch = 1 + rng.uniform_index(2);
    Shape cur{h, w, ch};
    std::vector<deep::LayerSpec> specs;
    for (std::size_t l = 0; l < depth; ++l) {
        deep::LayerSpec s;
        s.conv.filter_count = 1 + rng.uniform_index(max_k);
        s.conv.filter_height = 1 + rng.uniform_index(std::min<std::size_t>(cur[0], 2));
        s.conv.filter_width = 1 + rng.uniform_index(std::min<std::size_t>(cur[1], 2));
        s.conv.channels = cur[2];
        s.conv.stride = 1;
        s.conv.padding = rng.bernoulli(0.5) ? Padding::valid : Padding::same_zero;
        const ConvGeometry g = conv_geometry(cur, s.conv);
        s.pool.window_height = 1 + rng.uniform_index(std::min<std::size_t>(g.out_h, 2));
        s.pool.window_width = 1 + rng.uniform_index(std::min<std::size_t>(g.out_w, 2));
        s.pool.stride = std::max(s.pool.window_height, s.pool.window_width);
        const PoolGeometry pg = pool_geometry({g.out_h, g.out_w, s.conv.filter_count}, s.pool);
        cur = {pg.out_h, pg.out_w, s.conv.filter_count};
        specs.push_back(s);
    }
    return deep::make_drmm({h, w, ch}, specs, classes);
}

/// Shallow natural parameters with one template per full 1-layer latent
/// configuration, w_cg = Lambda_g mu_c and zero biases.
inline rmm::NaturalParams shallow_from_one_layer(const deep::DrmmParams& p) {
    std::vector<std::vector<double>> rows;
    for_each_latent(p, [&](const deep::LatentConfig& z) {
        const Tensor r = deep::render(p, z);
        rows.emplace_back(r.values().begin(), r.values().end());
    });
    const std::size_t nc = p.num_classes(), ng = rows.size() / nc, d = shape_size(p.input_shape);
    rmm::NaturalParams nat;
    nat.weights = Tensor({nc, ng, d});
    nat.biases = Tensor({nc, ng});
    nat.switch_bias = {0.0, 0.0};
    for (std::size_t k = 0; k < rows.size(); ++k) std::copy(rows[k].begin(), rows[k].end(), nat.weights.data() + k * d);
    return nat;
}

// Fully connected layer: a 1x1 canvas with channels as dimensions.
inline deep::LayerSpec dense_spec(std::size_t out) {
    return deep::LayerSpec{ConvSpec{out, 1, 1, 0, 1, Padding::valid}, PoolSpec{1, 1, 1}};
}

/// Writes a D_in x D_out matrix into a dense layer's filter bank (column f is filter f).
inline void set_dense(deep::Layer& layer, const Tensor& lambda) {
    const std::size_t rows = lambda.dim(0), cols = lambda.dim(1);
    for (std::size_t f = 0; f < cols; ++f) {
        for (std::size_t r = 0; r < rows; ++r) layer.filters[f * rows + r] = lambda(r, f);
    }
}

/// Everything the E-step freezes for a batch: classes, nuisances and the
/// rectifier pattern of the top-down pass.
struct FrozenLatents {
    std::vector<std::size_t> classes;
    std::vector<std::vector<deep::LayerLatents>> hats;
    std::vector<std::vector<std::uint8_t>> td_active;
    std::vector<std::vector<std::uint8_t>> bu_active;
    bool operator==(const FrozenLatents&) const = default;
};

inline FrozenLatents freeze(const deep::DrmmParams& p, std::span<const learn::BatchItem> batch,
                            const learn::TrainConfig& cfg) {
    FrozenLatents f;
    for (const auto& item : batch) {
        const auto s = learn::trace_sample(p, item, cfg, cfg.beta_rec > 0.0);
        f.classes.push_back(s.up.c_hat);
        f.hats.push_back(s.up.hats);
        std::vector<std::uint8_t> td, bu;
        if (s.has_down) {
            for (const auto& v : s.down.preactivation) {
                for (double x : v.values()) td.push_back(x > 0.0);
            }
        }
        for (const auto& u : s.up.conv_out) {
            for (double x : u.values()) bu.push_back(x > 0.0);
        }
        f.td_active.push_back(std::move(td));
        f.bu_active.push_back(std::move(bu));
    }
    return f;
}

struct GradCheck {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

/// Central differences on every parameter coordinate; coordinates whose
/// perturbation changes any frozen latent (a kink) are skipped.
inline GradCheck check_gradient(deep::DrmmParams p, std::span<const learn::BatchItem> batch,
                                const learn::TrainConfig& cfg, double eps = 1e-5) {
    learn::Gradients g = learn::gradient(p, batch, cfg);
    const FrozenLatents base = freeze(p, batch, cfg);
    std::vector<Tensor*> grads;
    g.for_each([&](const std::string&, Tensor& t) { grads.push_back(&t); });
    GradCheck out;
    std::size_t k = 0;
    learn::for_each_param(p, [&](const std::string& name, Tensor& param) {
        const Tensor& gt = *grads[k++];
        if (name.ends_with("bias") && !cfg.train_biases) return;
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double keep = param[i];
            param[i] = keep + eps;
            const double up = learn::objective(p, batch, cfg).total;
            const bool same_up = freeze(p, batch, cfg) == base;
            param[i] = keep - eps;
            const double down = learn::objective(p, batch, cfg).total;
            const bool same_down = freeze(p, batch, cfg) == base;
            param[i] = keep;
            if (!same_up || !same_down) {
                ++out.skipped;
                continue;
            }
            const double fd = (up - down) / (2.0 * eps);
            const double rel = std::abs(fd - gt[i]) / std::max({std::abs(fd), std::abs(gt[i]), 1e-6});
            out.max_rel_err = std::max(out.max_rel_err, rel);
            ++out.checked;
        }
    });
    return out;
}

/// Leaf maximizing <mu_leaf|I> over every leaf (lowest node id on ties).
inline std::size_t exhaustive_leaf(const edrmm::EvoTree& tree, std::span<const double> image) {
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t leaf : tree.leaves()) {
        const double v = dot(tree.nodes[leaf].mu.values(), image);
        if (v > best_v) best_v = v, best = leaf;
    }
    return best;
}

/// Template at `node` rebuilt as root + the alphas along its path, summed top-down.
inline Tensor path_template(const edrmm::EvoTree& tree, std::size_t node) {
    std::vector<std::size_t> path;
    for (auto id = static_cast<std::int64_t>(node); id > 0; id = tree.nodes[static_cast<std::size_t>(id)].parent) {
        path.push_back(static_cast<std::size_t>(id));
    }
    Tensor t = tree.nodes[0].mu;
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += tree.nodes[*it].alpha[i];
    }
    return t;
}

}  // namespace drmm::oracle
