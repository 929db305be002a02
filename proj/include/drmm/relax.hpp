#pragma once

#include <cstdint>

#include "drmm/data.hpp"
#include "drmm/deep.hpp"
#include "drmm/learning.hpp"
#include "drmm/rmm.hpp"

namespace drmm::relax {

enum class Provenance : std::uint8_t { free_init = 0, relaxed_from_generative = 1 };

/// Conv -> ReLU -> MaxPool stage with unconstrained weights.
struct Stage {
    ConvSpec conv;
    PoolSpec pool;
    Shape input_shape;
    Tensor weights;  // [K][kh][kw][C]
    Tensor bias;     // [K]
};

/// Free classifier weights. Scores are max_g (<w_cg|x> + b_cg), where x is the
/// output of the stages; a rectified head computes
/// max_g ReLU(<w_cg|x> + b_cg + gate_bias) + off_bias instead.
struct DiscriminativeParams {
    Shape input_shape;
    std::vector<Stage> stages;
    Tensor weights;  // [C][G][D_top]
    Tensor biases;   // [C][G]
    bool rectified = false;
    double gate_bias = 0.0;
    double off_bias = 0.0;
    Provenance provenance = Provenance::free_init;

    std::size_t num_classes() const { return weights.dim(0); }
    std::size_t num_groups() const { return weights.dim(1); }
    std::size_t top_dim() const { return weights.dim(2); }

    void validate() const {
        if (weights.rank() != 3 || biases.shape() != Shape{weights.dim(0), weights.dim(1)}) {
            throw ShapeError("discriminative head must be weights [C][G][D] with biases [C][G]");
        }
        Shape cur = input_shape;
        for (const Stage& s : stages) {
            if (s.input_shape != cur) throw ShapeError("stage input " + shape_string(s.input_shape) + " does not chain");
            if (s.weights.shape() != s.conv.filter_shape() || s.bias.size() != s.conv.filter_count) {
                throw ShapeError("stage weights have shape " + shape_string(s.weights.shape()));
            }
            const ConvGeometry g = conv_geometry(cur, s.conv);
            const PoolGeometry pg = pool_geometry({g.out_h, g.out_w, s.conv.filter_count}, s.pool);
            cur = {pg.out_h, pg.out_w, s.conv.filter_count};
        }
        if (shape_size(cur) != top_dim()) {
            throw ShapeError("head expects " + std::to_string(top_dim()) + " features but stages give " +
                             std::to_string(shape_size(cur)));
        }
    }
};

/// Frees the natural parameters of a shallow max-sum classifier.
inline DiscriminativeParams relax(const rmm::RmmParams& generative,
                                  rmm::PriorFolding folding = rmm::PriorFolding::uniform) {
    const rmm::NaturalParams nat = rmm::to_natural(generative, folding);
    DiscriminativeParams d;
    d.input_shape = {nat.dim()};
    d.weights = nat.weights;
    d.biases = nat.biases;
    d.rectified = true;
    d.gate_bias = nat.b0;
    d.off_bias = nat.switch_bias[0];
    d.provenance = Provenance::relaxed_from_generative;
    return d;
}

/// Frees the filters, templates and biases of a DRMM: the result is an ordinary convnet.
inline DiscriminativeParams relax(const deep::DrmmParams& generative) {
    generative.validate();
    deep::detail::reject_alpha(generative);
    DiscriminativeParams d;
    d.input_shape = generative.input_shape;
    for (const deep::Layer& layer : generative.layers) {
        d.stages.push_back(Stage{layer.conv, layer.pool, layer.input_shape, layer.filters, layer.bias});
    }
    d.weights = generative.templates.reshaped({generative.num_classes(), 1, generative.top_dim()});
    d.biases = generative.class_bias.reshaped({generative.num_classes(), 1});
    d.provenance = Provenance::relaxed_from_generative;
    return d;
}

inline Tensor features(const DiscriminativeParams& d, const Tensor& image) {
    if (image.size() != shape_size(d.input_shape)) {
        throw ShapeError("image " + shape_string(image.shape()) + " does not match input " + shape_string(d.input_shape));
    }
    Tensor x = image.reshaped(d.input_shape);
    for (const Stage& s : d.stages) x = maxpool_argmax(relu(conv2d(x, s.conv, s.weights, s.bias)), s.pool).values;
    return x;
}

inline std::vector<double> scores(const DiscriminativeParams& d, const Tensor& image) {
    d.validate();
    const Tensor x = features(d, image);
    const std::size_t ng = d.num_groups(), dim = d.top_dim();
    std::vector<double> out(d.num_classes());
    for (std::size_t c = 0; c < out.size(); ++c) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < ng; ++g) {
            double v = dot(d.weights.values().subspan((c * ng + g) * dim, dim), x.values()) + d.biases[c * ng + g];
            if (d.rectified) v = std::max(v + d.gate_bias, 0.0);
            best = std::max(best, v);
        }
        out[c] = d.rectified ? best + d.off_bias : best;
    }
    return out;
}

inline rmm::Decision classify(const DiscriminativeParams& d, const Tensor& image) {
    const auto s = scores(d, image);
    const std::size_t c = argmax_first(s);
    return {c, s[c]};
}

/// Mean ln p(c_n | I_n) over the labeled samples under softmax of the scores.
inline double conditional_log_likelihood(const DiscriminativeParams& d, const Dataset& data, bool normalize_input) {
    double sum = 0.0;
    std::size_t n_lab = 0;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!data.labeled(n)) continue;
        Tensor img = data.image_tensor(n, d.input_shape);
        const auto s = scores(d, normalize_input ? normalize_l2(img) : img);
        sum += s[static_cast<std::size_t>(data.labels[n])] - log_sum_exp(s);
        ++n_lab;
    }
    return n_lab ? sum / static_cast<double>(n_lab) : 0.0;
}

inline double error_rate(const DiscriminativeParams& d, const Dataset& data, bool normalize_input) {
    std::size_t wrong = 0, total = 0;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!data.labeled(n)) continue;
        ++total;
        Tensor img = data.image_tensor(n, d.input_shape);
        if (classify(d, normalize_input ? normalize_l2(img) : img).c != static_cast<std::size_t>(data.labels[n])) ++wrong;
    }
    return total ? static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
}

namespace detail {

inline deep::DrmmParams to_convnet(const DiscriminativeParams& d) {
    std::vector<deep::LayerSpec> specs;
    for (const Stage& s : d.stages) specs.push_back({s.conv, s.pool});
    deep::DrmmParams p = deep::make_drmm(d.input_shape, specs, d.num_classes());
    for (std::size_t l = 0; l < specs.size(); ++l) {
        p.layers[l].filters = d.stages[l].weights;
        p.layers[l].bias = d.stages[l].bias;
    }
    p.templates = d.weights.reshaped({d.num_classes(), d.top_dim()});
    p.class_bias = d.biases.reshaped({d.num_classes()});
    return p;
}

/// Softmax cross-entropy SGD for the rectified single-stage head.
inline void train_rectified(DiscriminativeParams& d, const Dataset& data, const learn::TrainConfig& cfg) {
    const std::size_t nc = d.num_classes(), ng = d.num_groups(), dim = d.top_dim();
    std::vector<std::size_t> labeled;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (data.labeled(n)) labeled.push_back(n);
    }
    if (labeled.empty()) throw ConfigError("discriminative training needs labeled samples");
    learn::detail::IndexStream stream(labeled.size(), cfg.seed, "labeled-order");
    const std::size_t steps =
        cfg.steps_per_epoch ? cfg.steps_per_epoch : (labeled.size() + cfg.batch_size - 1) / cfg.batch_size;
    Tensor vw(d.weights.shape()), vb(d.biases.shape());
    double vgate = 0.0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double rate = cfg.rate_at(epoch);
        for (std::size_t step = 0; step < steps; ++step) {
            const auto idx = stream.next(cfg.batch_size);
            Tensor gw(d.weights.shape()), gb(d.biases.shape());
            double ggate = 0.0;
            const double w = 1.0 / static_cast<double>(idx.size());
            for (std::size_t i : idx) {
                const std::size_t n = labeled[i];
                Tensor img = data.image_tensor(n, d.input_shape);
                if (cfg.normalize_input) img = normalize_l2(img);
                const auto s = scores(d, img);
                const double z = log_sum_exp(s);
                for (std::size_t c = 0; c < nc; ++c) {
                    const double gs = w * (std::exp(s[c] - z) - (static_cast<std::size_t>(data.labels[n]) == c ? 1.0 : 0.0));
                    std::size_t best = 0;
                    double best_v = -std::numeric_limits<double>::infinity();
                    for (std::size_t g = 0; g < ng; ++g) {
                        const double v = dot(d.weights.values().subspan((c * ng + g) * dim, dim), img.values()) +
                                         d.biases[c * ng + g] + d.gate_bias;
                        if (v > best_v) best_v = v, best = g;
                    }
                    if (!(best_v > 0.0)) continue;
                    const std::size_t k = c * ng + best;
                    for (std::size_t j = 0; j < dim; ++j) gw[k * dim + j] += gs * img[j];
                    gb[k] += gs;
                    ggate += gs;
                }
            }
            if (!all_finite(gw)) throw NumericError("non-finite gradient for weights");
            for (std::size_t k = 0; k < gw.size(); ++k) d.weights[k] -= rate * (vw[k] = cfg.momentum * vw[k] + gw[k]);
            for (std::size_t k = 0; k < gb.size(); ++k) d.biases[k] -= rate * (vb[k] = cfg.momentum * vb[k] + gb[k]);
            d.gate_bias -= rate * (vgate = cfg.momentum * vgate + ggate);
        }
    }
}

}  // namespace detail

/// Gradient descent on the conditional cross-entropy alone; nothing projects
/// the parameters back onto the generative family.
inline DiscriminativeParams train_discriminative(DiscriminativeParams d, const Dataset& data, learn::TrainConfig cfg) {
    d.validate();
    data.validate();
    cfg.regime = learn::Regime::supervised;
    cfg.step = learn::StepKind::g_step;
    cfg.beta_ce = 1.0;
    cfg.beta_rec = 0.0;
    cfg.beta_kl = 0.0;
    cfg.train_biases = true;
    cfg.validate();
    if (d.rectified) {
        if (!d.stages.empty()) throw ConfigError("rectified heads are only trained without conv stages");
        detail::train_rectified(d, data, cfg);
        return d;
    }
    if (d.num_groups() != 1) throw ConfigError("a plain head must have one group per class");
    deep::DrmmParams p = detail::to_convnet(d);
    learn::train(p, data, Dataset{}, nullptr, cfg);
    for (std::size_t l = 0; l < d.stages.size(); ++l) {
        d.stages[l].weights = p.layers[l].filters;
        d.stages[l].bias = p.layers[l].bias;
    }
    d.weights = p.templates.reshaped(d.weights.shape());
    d.biases = p.class_bias.reshaped(d.biases.shape());
    return d;
}

}  // namespace drmm::relax
