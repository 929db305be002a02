#pragma once

#include <chrono>
#include <functional>
#include <limits>
#include <numbers>

#include <Eigen/Dense>

#include "drmm/data.hpp"
#include "drmm/deep.hpp"
#include "drmm/rmm.hpp"

namespace drmm::learn {

// ---------------------------------------------------------------------------
// Responsibilities

/// Posterior over (c, g) with the switch held ON, flattened as c * |G| + g.
inline std::vector<double> e_step_soft(const rmm::RmmParams& p, std::span<const double> image) {
    const std::size_t nc = p.num_classes(), ng = p.num_nuisances();
    std::vector<double> logits(nc * ng);
    for (std::size_t c = 0; c < nc; ++c) {
        for (std::size_t g = 0; g < ng; ++g) {
            logits[c * ng + g] = std::log(p.class_priors[c]) + std::log(p.nuisance_priors[g]) -
                                 0.5 * squared_distance(image, p.mu(c, g)) / p.noise_var;
        }
    }
    const double z = log_sum_exp(logits);
    for (auto& v : logits) v = std::exp(v - z);
    return logits;
}

struct HardAssignment {
    std::size_t c = 0;
    std::size_t g = 0;
    bool operator==(const HardAssignment&) const = default;
};

/// Zero-noise limit of the soft E-step: the nearest template, lexicographic ties.
inline HardAssignment e_step_hard(const rmm::RmmParams& p, std::span<const double> image) {
    HardAssignment best;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < p.num_classes(); ++c) {
        for (std::size_t g = 0; g < p.num_nuisances(); ++g) {
            const double d = squared_distance(image, p.mu(c, g));
            if (d < best_d) {
                best_d = d;
                best = {c, g};
            }
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Least squares M-step

namespace detail {

/// Solves (G + lambda I) W = R with lambda = ridge_scale * trace(G) / p.
inline Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& gram, const Eigen::MatrixXd& rhs, double ridge_scale) {
    const auto p = gram.rows();
    const double lambda = ridge_scale * gram.trace() / static_cast<double>(p);
    if (lambda <= 0.0) {
        Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
        if (lu.rank() < p) {
            throw NumericError("GLS normal equations are rank deficient (rank " + std::to_string(lu.rank()) + " < " +
                               std::to_string(p) + "); use a nonzero ridge");
        }
        return lu.solve(rhs);
    }
    Eigen::MatrixXd damped = gram;
    damped.diagonal().array() += lambda;
    return damped.ldlt().solve(rhs);
}

}  // namespace detail

/// Lambda (q x p) minimizing sum_n |y_n - Lambda x_n|^2 + lambda |Lambda|_F^2 for
/// predictors X (N x p) and targets Y (N x q).
inline Tensor gls(const Tensor& predictors, const Tensor& targets, double ridge_scale = 1e-6) {
    if (predictors.rank() != 2 || targets.rank() != 2 || predictors.dim(0) != targets.dim(0)) {
        throw ShapeError("gls: predictors " + shape_string(predictors.shape()) + " and targets " +
                         shape_string(targets.shape()) + " must be N x p and N x q");
    }
    const auto n = static_cast<Eigen::Index>(predictors.dim(0));
    const auto p = static_cast<Eigen::Index>(predictors.dim(1)), q = static_cast<Eigen::Index>(targets.dim(1));
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMajor> x(predictors.data(), n, p), y(targets.data(), n, q);
    const Eigen::MatrixXd w = detail::ridge_solve(x.transpose() * x, x.transpose() * y, ridge_scale);
    Tensor out({static_cast<std::size_t>(q), static_cast<std::size_t>(p)});
    for (Eigen::Index i = 0; i < q; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) out[static_cast<std::size_t>(i * p + j)] = w(j, i);
    }
    return out;
}

/// One GLS solve per nuisance value over the samples assigned to it; values
/// with no samples keep their previous transformation.
inline std::vector<Tensor> m_step_gls(const Tensor& predictors, const Tensor& targets,
                                      std::span<const std::size_t> assignments, std::vector<Tensor> previous,
                                      double ridge_scale = 1e-6) {
    if (assignments.size() != predictors.dim(0)) throw ShapeError("m_step_gls: one assignment per sample");
    for (std::size_t g = 0; g < previous.size(); ++g) {
        std::vector<std::size_t> rows;
        for (std::size_t n = 0; n < assignments.size(); ++n) {
            if (assignments[n] == g) rows.push_back(n);
        }
        if (rows.empty()) continue;
        Tensor x({rows.size(), predictors.dim(1)}), y({rows.size(), targets.dim(1)});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy_n(row(predictors, rows[i]).begin(), x.dim(1), x.data() + i * x.dim(1));
            std::copy_n(row(targets, rows[i]).begin(), y.dim(1), y.data() + i * y.dim(1));
        }
        previous[g] = gls(x, y, ridge_scale);
    }
    return previous;
}

// ---------------------------------------------------------------------------
// Hard EM for the shallow model

struct HardEmConfig {
    std::size_t num_classes = 1;
    std::size_t num_nuisances = 1;
    std::size_t iterations = 50;
    std::size_t restarts = 5;
    double noise_var = 1.0;
    double ridge_scale = 1e-6;
    std::uint64_t seed = 0;
};

struct HardEmResult {
    rmm::RmmParams params;
    std::vector<double> log_likelihood;  // after every E-step
    std::vector<HardAssignment> assignments;
};

/// sum_n ln p(I_n, c_n, g_n) with the switch ON.
inline double complete_log_likelihood(const rmm::RmmParams& p, const Tensor& data,
                                      std::span<const HardAssignment> assignments) {
    double ll = 0.0;
    for (std::size_t n = 0; n < assignments.size(); ++n) {
        ll += rmm::log_joint(p, row(data, n), {assignments[n].c, assignments[n].g, true});
    }
    return ll;
}

namespace detail {

/// Seeded k-means++ centers over the rows of `data`.
inline Tensor kmeans_pp(const Tensor& data, std::size_t k, Rng& rng) {
    const std::size_t n = data.dim(0), d = data.size() / n;
    Tensor centers({k, d});
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.uniform_index(n);
    for (std::size_t j = 0; j < k; ++j) {
        std::copy_n(row(data, pick).begin(), d, centers.data() + j * d);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = std::min(dist[i], squared_distance(row(data, i), row(centers, j)));
            total += dist[i];
        }
        if (total <= 0.0) {
            pick = rng.uniform_index(n);
            continue;
        }
        std::vector<double> probs(n);
        for (std::size_t i = 0; i < n; ++i) probs[i] = dist[i] / total;
        pick = rng.categorical(probs);
    }
    return centers;
}

}  // namespace detail

/// Alternates the hard E-step with a GLS M-step whose single predictor is the
/// constant 1, i.e. a ridge-damped per-component mean. Components are (c, g)
/// pairs; the restart with the highest final likelihood is kept.
inline HardEmResult hard_em(const Tensor& data, const HardEmConfig& cfg) {
    if (data.rank() != 2 || data.dim(0) == 0) throw ShapeError("hard_em expects an N x D data matrix");
    const std::size_t n = data.dim(0), d = data.dim(1), k = cfg.num_classes * cfg.num_nuisances;
    if (k == 0 || k > n) throw ConfigError("hard_em needs between 1 and N components");
    HardEmResult best;
    bool have = false;
    const Tensor ones = Tensor::filled({n, 1}, 1.0);
    for (std::size_t r = 0; r < std::max<std::size_t>(1, cfg.restarts); ++r) {
        Rng rng(derive_seed(cfg.seed, "hard-em-init", r));
        rmm::RmmParams p = rmm::RmmParams::uniform(
            detail::kmeans_pp(data, k, rng).reshaped({cfg.num_classes, cfg.num_nuisances, d}), cfg.noise_var, 1.0);
        HardEmResult run;
        std::vector<std::size_t> flat(n);
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            std::vector<HardAssignment> assign(n);
            for (std::size_t i = 0; i < n; ++i) {
                assign[i] = e_step_hard(p, row(data, i));
                flat[i] = assign[i].c * cfg.num_nuisances + assign[i].g;
            }
            run.log_likelihood.push_back(complete_log_likelihood(p, data, assign));
            const bool settled = assign == run.assignments;
            run.assignments = std::move(assign);
            if (settled) break;
            std::vector<Tensor> lambdas(k);
            for (std::size_t j = 0; j < k; ++j) {
                const auto t = p.templates.values().subspan(j * d, d);
                lambdas[j] = Tensor({d, 1}, std::vector<double>(t.begin(), t.end()));
            }
            lambdas = m_step_gls(ones, data, flat, std::move(lambdas), cfg.ridge_scale);
            for (std::size_t j = 0; j < k; ++j) std::copy_n(lambdas[j].data(), d, p.templates.data() + j * d);
        }
        run.params = p;
        if (!have || run.log_likelihood.back() > best.log_likelihood.back()) {
            best = std::move(run);
            have = true;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Deep training: objective, reverse-mode gradients, G-step and M-step

enum class Regime { supervised, unsupervised, semi_supervised };
enum class StepKind { g_step, m_step };

struct TrainConfig {
    Regime regime = Regime::supervised;
    StepKind step = StepKind::g_step;
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    std::size_t labeled_batch = 32;   // labeled samples per step when unlabeled data drives the epoch
    std::size_t steps_per_epoch = 0;  // 0: one pass over the driving set
    double learning_rate = 0.01;
    double lr_decay = 1.0;
    std::size_t decay_every = 1;
    double momentum = 0.0;
    double beta_ce = 1.0;
    double beta_rec = 0.0;
    double beta_kl = 0.0;
    bool nonnegative = true;  // rectify intermediate top-down templates
    bool train_biases = false;
    bool normalize_input = false;
    double ridge_scale = 1e-6;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs == 0 || batch_size == 0 || labeled_batch == 0 || decay_every == 0) {
            throw ConfigError("epochs, batch sizes and decay interval must be positive");
        }
        if (!(learning_rate >= 0.0) || !(lr_decay > 0.0)) {
            throw ConfigError("learning rate must be nonnegative and decay positive");
        }
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
        if (beta_ce < 0.0 || beta_rec < 0.0 || beta_kl < 0.0) throw ConfigError("loss weights must be nonnegative");
    }

    double rate_at(std::size_t epoch) const {
        return learning_rate * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
    }
};

struct Terms {
    double cross_entropy = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    double total = 0.0;

    Terms& operator+=(const Terms& o) {
        cross_entropy += o.cross_entropy;
        recon += o.recon;
        kl += o.kl;
        total += o.total;
        return *this;
    }
};

struct Gradients {
    std::vector<Tensor> filters;
    std::vector<Tensor> bias;
    Tensor templates;
    Tensor class_bias;

    static Gradients zeros_like(const deep::DrmmParams& p) {
        Gradients g;
        for (const auto& layer : p.layers) {
            g.filters.emplace_back(layer.filters.shape());
            g.bias.emplace_back(layer.bias.shape());
        }
        g.templates = Tensor(p.templates.shape());
        g.class_bias = Tensor(p.class_bias.shape());
        return g;
    }

    template <class Fn>
    void for_each(Fn&& fn) {
        for (std::size_t l = 0; l < filters.size(); ++l) {
            fn("layer" + std::to_string(l + 1) + "/filters", filters[l]);
            fn("layer" + std::to_string(l + 1) + "/bias", bias[l]);
        }
        fn(std::string("templates"), templates);
        fn(std::string("class_bias"), class_bias);
    }
};

template <class Fn>
void for_each_param(deep::DrmmParams& p, Fn&& fn) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        fn("layer" + std::to_string(l + 1) + "/filters", p.layers[l].filters);
        fn("layer" + std::to_string(l + 1) + "/bias", p.layers[l].bias);
    }
    fn(std::string("templates"), p.templates);
    fn(std::string("class_bias"), p.class_bias);
}

struct BatchItem {
    std::span<const double> image;
    std::int32_t label = -1;
};

/// Latents and intermediate values of one sample under the current parameters.
struct SampleTrace {
    Tensor image;
    deep::BottomUp up;
    deep::TopDown down;
    std::vector<double> log_probs;
    std::size_t rendered_class = 0;
    bool has_down = false;
};

inline Tensor prepare_input(const deep::DrmmParams& p, std::span<const double> image, const TrainConfig& cfg) {
    Tensor t(p.input_shape, std::vector<double>(image.begin(), image.end()));
    return cfg.normalize_input ? normalize_l2(t) : t;
}

/// E-step for one sample: bottom-up inference, then top-down reconstruction of
/// the label's class (or the inferred class when unlabeled).
inline SampleTrace trace_sample(const deep::DrmmParams& p, const BatchItem& item, const TrainConfig& cfg,
                                bool need_down) {
    SampleTrace s;
    s.image = prepare_input(p, item.image, cfg);
    s.up = deep::bottom_up(p, s.image);
    const double z = log_sum_exp(s.up.scores);
    s.log_probs.resize(s.up.scores.size());
    for (std::size_t c = 0; c < s.log_probs.size(); ++c) s.log_probs[c] = s.up.scores[c] - z;
    s.rendered_class = item.label >= 0 ? static_cast<std::size_t>(item.label) : s.up.c_hat;
    if (item.label >= 0 && s.rendered_class >= p.num_classes()) {
        throw ShapeError("label " + std::to_string(item.label) + " outside the model's classes");
    }
    if (need_down) {
        s.down = deep::top_down(p, s.rendered_class, s.up.hats,
                                cfg.nonnegative ? deep::InferenceMode::nonnegative : deep::InferenceMode::signed_);
        s.has_down = true;
    }
    return s;
}

/// Per-sample loss terms (unweighted).
inline Terms sample_terms(const deep::DrmmParams& p, const SampleTrace& s, std::int32_t label, const TrainConfig& cfg) {
    Terms t;
    if (label >= 0) t.cross_entropy = -s.log_probs[static_cast<std::size_t>(label)];
    for (std::size_t c = 0; c < s.log_probs.size(); ++c) {
        t.kl += std::exp(s.log_probs[c]) * (s.log_probs[c] - std::log(p.class_prior[c]));
    }
    if (s.has_down) t.recon = squared_distance(s.image.values(), s.down.z.front().values());
    t.total = (label >= 0 ? cfg.beta_ce * t.cross_entropy : 0.0) + cfg.beta_rec * t.recon + cfg.beta_kl * t.kl;
    return t;
}

/// Reverse accumulation of weight * (per-sample objective) with every argmax
/// (class, pooling offsets, switches) frozen at the trace.
inline void accumulate_gradient(const deep::DrmmParams& p, const SampleTrace& s, std::int32_t label, double weight,
                                const TrainConfig& cfg, Gradients& g) {
    const std::size_t depth = p.depth(), nc = p.num_classes();
    // Class scores s_c = mu_c . I^(L) + b_c.
    std::vector<double> gs(nc, 0.0);
    double kl = 0.0;
    for (std::size_t c = 0; c < nc; ++c) kl += std::exp(s.log_probs[c]) * (s.log_probs[c] - std::log(p.class_prior[c]));
    for (std::size_t c = 0; c < nc; ++c) {
        const double pc = std::exp(s.log_probs[c]);
        if (label >= 0) gs[c] += cfg.beta_ce * (pc - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0));
        gs[c] += cfg.beta_kl * pc * (s.log_probs[c] - std::log(p.class_prior[c]) - kl);
        gs[c] *= weight;
    }
    const Tensor& top = s.up.features.back();
    Tensor g_feat(p.top_shape());
    for (std::size_t c = 0; c < nc; ++c) {
        if (gs[c] == 0.0) continue;
        const auto mu = p.mu(c);
        auto gmu = row(g.templates, c);
        for (std::size_t i = 0; i < top.size(); ++i) {
            gmu[i] += gs[c] * top[i];
            g_feat[i] += gs[c] * mu[i];
        }
        g.class_bias[c] += gs[c];
    }
    // Bottom-up: I^(l+1) = MaxPool(ReLU(conv(I^(l)) + b)).
    for (std::size_t l = depth; l-- > 0;) {
        const deep::Layer& layer = p.layers[l];
        Tensor g_conv = unpool(g_feat, s.up.hats[l].t, layer.pool, layer.conv_shape);
        const Tensor& u = s.up.conv_out[l];
        for (std::size_t i = 0; i < g_conv.size(); ++i) {
            if (!(u[i] > 0.0)) g_conv[i] = 0.0;
        }
        conv2d_filter_grad(s.up.features[l], g_conv, layer.conv, g.filters[l]);
        const std::size_t k = layer.conv.filter_count;
        for (std::size_t i = 0; i < g_conv.size(); ++i) g.bias[l][i % k] += g_conv[i];
        if (l > 0) g_feat = conv2d_transpose(g_conv, layer.conv, layer.filters, layer.input_shape);
    }
    if (!s.has_down || cfg.beta_rec == 0.0) return;
    // Top-down: z^(l) = act(Lambda_l z^(l+1)), reconstruction z^(0).
    Tensor gz = (-2.0 * weight * cfg.beta_rec) * (s.image - s.down.z.front());
    for (std::size_t l = 0; l < depth; ++l) {
        const deep::Layer& layer = p.layers[l];
        if (l > 0 && cfg.nonnegative) {
            const Tensor& v = s.down.preactivation[l];
            for (std::size_t i = 0; i < gz.size(); ++i) {
                if (!(v[i] > 0.0)) gz[i] = 0.0;
            }
        }
        Tensor masked = s.down.z[l + 1].reshaped(layer.output_shape);
        const auto& hat = s.up.hats[l];
        for (std::size_t x = 0; x < masked.size(); ++x) {
            if (!hat.a[x]) masked[x] = 0.0;
        }
        const Tensor grid = unpool(masked, hat.t, layer.pool, layer.conv_shape);
        conv2d_filter_grad(gz, grid, layer.conv, g.filters[l]);
        const Tensor g_grid = conv2d(gz, layer.conv, layer.filters, Tensor({layer.conv.filter_count}));
        Tensor next = gather_pooled(g_grid, hat.t, layer.pool);
        for (std::size_t x = 0; x < next.size(); ++x) {
            if (!hat.a[x]) next[x] = 0.0;
        }
        gz = std::move(next);
    }
    auto gmu = row(g.templates, s.rendered_class);
    for (std::size_t i = 0; i < gz.size(); ++i) gmu[i] += gz[i];
}

namespace detail {

inline std::pair<double, double> batch_weights(std::span<const BatchItem> batch) {
    std::size_t nl = 0, nu = 0;
    for (const auto& it : batch) (it.label >= 0 ? nl : nu)++;
    return {nl ? 1.0 / static_cast<double>(nl) : 0.0, nu ? 1.0 / static_cast<double>(nu) : 0.0};
}

}  // namespace detail

/// Batch objective: the mean over labeled items of beta_ce CE + beta_rec rec +
/// beta_KL KL plus the mean over unlabeled items of beta_rec rec + beta_KL KL.
/// With `grads` set, also accumulates its gradient.
inline Terms evaluate_batch(const deep::DrmmParams& p, std::span<const BatchItem> batch, const TrainConfig& cfg,
                            Gradients* grads = nullptr) {
    const auto [wl, wu] = detail::batch_weights(batch);
    Terms total;
    for (const auto& item : batch) {
        const double w = item.label >= 0 ? wl : wu;
        const SampleTrace s = trace_sample(p, item, cfg, cfg.beta_rec > 0.0);
        Terms t = sample_terms(p, s, item.label, cfg);
        t.cross_entropy *= w;
        t.recon *= w;
        t.kl *= w;
        t.total *= w;
        total += t;
        if (grads) accumulate_gradient(p, s, item.label, w, cfg, *grads);
    }
    return total;
}

inline Terms objective(const deep::DrmmParams& p, std::span<const BatchItem> batch, const TrainConfig& cfg) {
    return evaluate_batch(p, batch, cfg);
}

inline Gradients gradient(const deep::DrmmParams& p, std::span<const BatchItem> batch, const TrainConfig& cfg,
                          Terms* terms = nullptr) {
    Gradients g = Gradients::zeros_like(p);
    const Terms t = evaluate_batch(p, batch, cfg, &g);
    if (terms) *terms = t;
    g.for_each([](const std::string& name, Tensor& t) {
        if (!all_finite(t)) throw NumericError("non-finite gradient for " + name);
    });
    return g;
}

/// SGD with optional heavy-ball momentum. Biases move only when enabled.
class Sgd {
public:
    explicit Sgd(double momentum = 0.0) : momentum_(momentum) {}

    void step(deep::DrmmParams& p, Gradients& g, double rate, bool train_biases) {
        if (velocity_.filters.empty()) velocity_ = Gradients::zeros_like(p);
        std::vector<Tensor*> grads, vel;
        g.for_each([&](const std::string&, Tensor& t) { grads.push_back(&t); });
        velocity_.for_each([&](const std::string&, Tensor& t) { vel.push_back(&t); });
        std::size_t i = 0;
        for_each_param(p, [&](const std::string& name, Tensor& param) {
            const bool is_bias = name.ends_with("bias");
            Tensor& gt = *grads[i];
            Tensor& vt = *vel[i];
            ++i;
            if (is_bias && !train_biases) return;
            for (std::size_t k = 0; k < param.size(); ++k) {
                vt[k] = momentum_ * vt[k] + gt[k];
                param[k] -= rate * vt[k];
            }
        });
    }

private:
    double momentum_;
    Gradients velocity_;
};

/// One G-step: a gradient update of all filters and templates on `batch`.
inline Terms g_step(deep::DrmmParams& p, std::span<const BatchItem> batch, const TrainConfig& cfg, double rate,
                    Sgd& opt) {
    Terms t;
    Gradients g = gradient(p, batch, cfg, &t);
    opt.step(p, g, rate, cfg.train_biases);
    return t;
}

namespace detail {

/// Normal equations of the filter bank of `layer` for target ~ Lambda(filters) z,
/// shared across input channels: gram is P x P, rhs is P x C with P = K kh kw.
inline void accumulate_filter_normal_equations(const deep::Layer& layer, const Tensor& grid, const Tensor& target,
                                               Eigen::MatrixXd& gram, Eigen::MatrixXd& rhs) {
    const ConvGeometry g = conv_geometry(layer.input_shape, layer.conv);
    const std::size_t kh = layer.conv.filter_height, kw = layer.conv.filter_width, nk = layer.conv.filter_count;
    const std::size_t s = layer.conv.stride, c = g.in_c;
    std::vector<std::pair<std::size_t, double>> nz;
    for (std::size_t y = 0; y < g.in_h; ++y) {
        for (std::size_t x = 0; x < g.in_w; ++x) {
            nz.clear();
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const auto oy_s = static_cast<std::ptrdiff_t>(y + g.pad_top) - static_cast<std::ptrdiff_t>(ky);
                if (oy_s < 0 || oy_s % static_cast<std::ptrdiff_t>(s)) continue;
                const std::size_t oy = static_cast<std::size_t>(oy_s) / s;
                if (oy >= g.out_h) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const auto ox_s = static_cast<std::ptrdiff_t>(x + g.pad_left) - static_cast<std::ptrdiff_t>(kx);
                    if (ox_s < 0 || ox_s % static_cast<std::ptrdiff_t>(s)) continue;
                    const std::size_t ox = static_cast<std::size_t>(ox_s) / s;
                    if (ox >= g.out_w) continue;
                    for (std::size_t f = 0; f < nk; ++f) {
                        const double v = grid(oy, ox, f);
                        if (v != 0.0) nz.emplace_back((f * kh + ky) * kw + kx, v);
                    }
                }
            }
            for (const auto& [i, vi] : nz) {
                for (const auto& [j, vj] : nz) gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += vi * vj;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    rhs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)) += vi * target(y, x, ch);
                }
            }
        }
    }
}

}  // namespace detail

/// Hard-EM M-step over a full pass: each filter bank is the GLS fit of the
/// layer input I^(l-1) from the rendered template z^(l) placed by the
/// inferred nuisances, and mu_c is the ridge-damped mean of I^(L) over the
/// samples assigned to class c.
inline Terms m_step_deep(deep::DrmmParams& p, std::span<const BatchItem> data, const TrainConfig& cfg) {
    const std::size_t depth = p.depth(), nc = p.num_classes(), top = p.top_dim();
    std::vector<Eigen::MatrixXd> gram(depth), rhs(depth);
    for (std::size_t l = 0; l < depth; ++l) {
        const auto& conv = p.layers[l].conv;
        const auto np = static_cast<Eigen::Index>(conv.filter_count * conv.filter_height * conv.filter_width);
        gram[l] = Eigen::MatrixXd::Zero(np, np);
        rhs[l] = Eigen::MatrixXd::Zero(np, static_cast<Eigen::Index>(conv.channels));
    }
    std::vector<std::vector<double>> sums(nc, std::vector<double>(top, 0.0));
    std::vector<double> counts(nc, 0.0);
    const auto [wl, wu] = detail::batch_weights(data);
    Terms total;
    for (const auto& item : data) {
        const SampleTrace s = trace_sample(p, item, cfg, true);
        Terms t = sample_terms(p, s, item.label, cfg);
        const double w = item.label >= 0 ? wl : wu;
        t.cross_entropy *= w;
        t.recon *= w;
        t.kl *= w;
        t.total *= w;
        total += t;
        for (std::size_t l = 0; l < depth; ++l) {
            const deep::Layer& layer = p.layers[l];
            Tensor masked = s.down.z[l + 1].reshaped(layer.output_shape);
            for (std::size_t x = 0; x < masked.size(); ++x) {
                if (!s.up.hats[l].a[x]) masked[x] = 0.0;
            }
            const Tensor grid = unpool(masked, s.up.hats[l].t, layer.pool, layer.conv_shape);
            detail::accumulate_filter_normal_equations(layer, grid, s.up.features[l], gram[l], rhs[l]);
        }
        const Tensor& feat = s.up.features.back();
        for (std::size_t i = 0; i < top; ++i) sums[s.rendered_class][i] += feat[i];
        counts[s.rendered_class] += 1.0;
    }
    for (std::size_t l = 0; l < depth; ++l) {
        if (gram[l].trace() <= 0.0) continue;
        const double scale = cfg.ridge_scale > 0.0 ? cfg.ridge_scale : 1e-12;
        const Eigen::MatrixXd w = detail::ridge_solve(gram[l], rhs[l], scale);
        deep::Layer& layer = p.layers[l];
        const std::size_t np = static_cast<std::size_t>(w.rows()), c = layer.conv.channels;
        for (std::size_t i = 0; i < np; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                layer.filters[i * c + ch] = w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch));
            }
        }
    }
    for (std::size_t c = 0; c < nc; ++c) {
        if (counts[c] == 0.0) continue;
        const double denom = counts[c] * (1.0 + cfg.ridge_scale);
        for (std::size_t i = 0; i < top; ++i) p.templates(c, i) = sums[c][i] / denom;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Initialization, evaluation and the training loop

/// Filters ~ N(0, 2 / fan-in); mu_c = mean of I^(L) over labeled samples of
/// class c, Gaussian for classes without labeled samples.
inline void initialize(deep::DrmmParams& p, const Dataset& labeled, const TrainConfig& cfg) {
    for (std::size_t l = 0; l < p.depth(); ++l) {
        Rng rng(derive_seed(cfg.seed, "init-filters", l));
        deep::Layer& layer = p.layers[l];
        const double sd = std::sqrt(2.0 / static_cast<double>(layer.conv.filter_size()));
        for (auto& v : layer.filters.values()) v = sd * rng.normal();
        for (auto& v : layer.bias.values()) v = 0.0;
    }
    const std::size_t nc = p.num_classes(), top = p.top_dim();
    std::vector<std::vector<double>> sums(nc, std::vector<double>(top, 0.0));
    std::vector<std::size_t> counts(nc, 0);
    for (std::size_t n = 0; n < labeled.size(); ++n) {
        if (!labeled.labeled(n)) continue;
        const auto c = static_cast<std::size_t>(labeled.labels[n]);
        if (c >= nc) throw ShapeError("label " + std::to_string(c) + " outside the model's classes");
        const deep::BottomUp up = deep::bottom_up(p, prepare_input(p, labeled.image(n), cfg));
        for (std::size_t i = 0; i < top; ++i) sums[c][i] += up.features.back()[i];
        ++counts[c];
    }
    Rng rng(derive_seed(cfg.seed, "init-templates"));
    const double sd = 1.0 / std::sqrt(static_cast<double>(top));
    for (std::size_t c = 0; c < nc; ++c) {
        for (std::size_t i = 0; i < top; ++i) {
            p.templates(c, i) = counts[c] ? sums[c][i] / static_cast<double>(counts[c]) : sd * rng.normal();
        }
    }
    for (auto& v : p.class_bias.values()) v = 0.0;
}

/// Fraction of labeled samples whose inferred class differs from the label.
inline double error_rate(const deep::DrmmParams& p, const Dataset& data, const TrainConfig& cfg) {
    std::size_t wrong = 0, total = 0;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!data.labeled(n)) continue;
        ++total;
        if (deep::bottom_up(p, prepare_input(p, data.image(n), cfg)).c_hat != static_cast<std::size_t>(data.labels[n])) {
            ++wrong;
        }
    }
    return total ? static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
}

struct EpochReport {
    std::size_t epoch = 0;
    double train_error = 0.0;
    double test_error = 0.0;
    double cross_entropy = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    double total = 0.0;
    double wall_seconds = 0.0;
};

namespace detail {

/// Endless reshuffled pass over n items; a batch never straddles two passes.
class IndexStream {
public:
    IndexStream(std::size_t n, std::uint64_t seed, std::string label) : n_(n), seed_(seed), label_(std::move(label)) {}

    std::vector<std::size_t> next(std::size_t k) {
        if (pos_ == order_.size()) reshuffle();
        const std::size_t take = std::min(k, order_.size() - pos_);
        std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                     order_.begin() + static_cast<std::ptrdiff_t>(pos_ + take));
        pos_ += take;
        return out;
    }

private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        Rng rng(derive_seed(seed_, label_, pass_++));
        rng.shuffle(order_.begin(), order_.end());
        pos_ = 0;
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::string label_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::uint64_t pass_ = 0;
};

}  // namespace detail

/// Alternates hard E-steps with G- (or M-) steps. Unlabeled data, when present,
/// drives the epoch and every step adds a labeled batch cycled from `labeled`;
/// otherwise the labeled set drives the epoch. Labels on `unlabeled` are never
/// read for training. Reported loss terms are step averages over the epoch.
inline std::vector<EpochReport> train(deep::DrmmParams& p, const Dataset& labeled, const Dataset& unlabeled,
                                      const Dataset* test, const TrainConfig& cfg,
                                      const std::function<void(const EpochReport&)>& on_epoch = {}) {
    cfg.validate();
    labeled.validate();
    const bool use_labels = cfg.regime != Regime::unsupervised;
    const bool use_unlabeled = cfg.regime != Regime::supervised;
    const Dataset empty;
    const Dataset& lab = use_labels ? labeled : empty;
    const Dataset& unl = use_unlabeled ? unlabeled : empty;
    const std::size_t n_lab = lab.size(), n_unl = unl.size();
    // Unsupervised runs still learn from the images of the labeled set.
    std::vector<BatchItem> pool_unl;
    for (std::size_t n = 0; n < n_unl; ++n) pool_unl.push_back({unl.image(n), -1});
    if (!use_labels) {
        for (std::size_t n = 0; n < labeled.size(); ++n) pool_unl.push_back({labeled.image(n), -1});
    }
    std::vector<BatchItem> pool_lab;
    for (std::size_t n = 0; n < n_lab; ++n) pool_lab.push_back({lab.image(n), lab.labeled(n) ? lab.labels[n] : -1});
    if (pool_lab.empty() && pool_unl.empty()) throw ConfigError("training needs at least one sample");

    const bool drive_unlabeled = !pool_unl.empty();
    const std::size_t n_drive = drive_unlabeled ? pool_unl.size() : pool_lab.size();
    const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : (n_drive + cfg.batch_size - 1) / cfg.batch_size;
    detail::IndexStream drive(n_drive, cfg.seed, drive_unlabeled ? "unlabeled-order" : "labeled-order");
    detail::IndexStream side(pool_lab.size(), cfg.seed, "labeled-order");
    Sgd opt(cfg.momentum);
    std::vector<EpochReport> history;
    const Dataset& train_eval = n_lab ? lab : unlabeled;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        Terms sum;
        std::size_t done = 0;
        if (cfg.step == StepKind::m_step) {
            std::vector<BatchItem> all = pool_lab;
            all.insert(all.end(), pool_unl.begin(), pool_unl.end());
            sum = m_step_deep(p, all, cfg);
            done = 1;
        } else {
            const double rate = cfg.rate_at(epoch);
            std::vector<BatchItem> batch;
            for (std::size_t step = 0; step < steps; ++step) {
                batch.clear();
                for (std::size_t i : drive.next(cfg.batch_size)) {
                    batch.push_back(drive_unlabeled ? pool_unl[i] : pool_lab[i]);
                }
                if (drive_unlabeled && !pool_lab.empty()) {
                    for (std::size_t i : side.next(cfg.labeled_batch)) batch.push_back(pool_lab[i]);
                }
                sum += g_step(p, batch, cfg, rate, opt);
                ++done;
            }
        }
        EpochReport r;
        r.epoch = epoch + 1;
        const double inv = 1.0 / static_cast<double>(done);
        r.cross_entropy = sum.cross_entropy * inv;
        r.recon = sum.recon * inv;
        r.kl = sum.kl * inv;
        r.total = sum.total * inv;
        r.train_error = error_rate(p, train_eval, cfg);
        r.test_error = test ? error_rate(p, *test, cfg) : 0.0;
        r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!std::isfinite(r.total)) throw NumericError("objective became non-finite at epoch " + std::to_string(r.epoch));
        history.push_back(r);
        if (on_epoch) on_epoch(r);
    }
    return history;
}

}  // namespace drmm::learn
