#pragma once

#include <array>
#include <limits>
#include <numbers>

#include "drmm/kernels.hpp"
#include "drmm/rng.hpp"

namespace drmm::rmm {

/// Shallow Rendering Mixture Model: I = a * mu_cg + N(0, sigma^2 I).
struct RmmParams {
    std::vector<double> class_priors;
    std::vector<double> nuisance_priors;
    double switch_prior = 0.5;  // probability of a = ON
    Tensor templates;           // [C][G][D]
    double noise_var = 1.0;

    std::size_t num_classes() const { return templates.dim(0); }
    std::size_t num_nuisances() const { return templates.dim(1); }
    std::size_t dim() const { return templates.dim(2); }

    std::span<const double> mu(std::size_t c, std::size_t g) const {
        return templates.values().subspan((c * num_nuisances() + g) * dim(), dim());
    }

    void validate() const {
        if (templates.rank() != 3) throw ShapeError("rmm templates must be [C][G][D]");
        auto check_prob = [](const std::vector<double>& p, std::size_t n, const char* what) {
            if (p.size() != n) throw ShapeError(std::string(what) + " has wrong length");
            double s = 0.0;
            for (double v : p) {
                if (!(v >= 0.0)) throw NumericError(std::string(what) + " has a negative entry");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-12) throw NumericError(std::string(what) + " does not sum to 1");
        };
        check_prob(class_priors, num_classes(), "class prior");
        check_prob(nuisance_priors, num_nuisances(), "nuisance prior");
        if (!(switch_prior >= 0.0 && switch_prior <= 1.0)) throw NumericError("switch prior outside [0, 1]");
        if (!(noise_var > 0.0)) throw NumericError("noise variance must be positive");
    }

    static RmmParams uniform(Tensor templates, double noise_var, double switch_prior = 0.5) {
        RmmParams p;
        const std::size_t c = templates.dim(0), g = templates.dim(1);
        p.class_priors.assign(c, 1.0 / static_cast<double>(c));
        p.nuisance_priors.assign(g, 1.0 / static_cast<double>(g));
        p.switch_prior = switch_prior;
        p.templates = std::move(templates);
        p.noise_var = noise_var;
        p.validate();
        return p;
    }
};

struct Latents {
    std::size_t c = 0;
    std::size_t g = 0;
    bool a = true;
    bool operator==(const Latents&) const = default;
};

struct Sample {
    Tensor image;
    Latents latents;
};

inline Sample sample(const RmmParams& params, std::uint64_t seed) {
    params.validate();
    Rng rng(seed);
    Sample s;
    s.latents.c = rng.categorical(params.class_priors);
    s.latents.g = rng.categorical(params.nuisance_priors);
    s.latents.a = rng.bernoulli(params.switch_prior);
    const auto mu = params.mu(s.latents.c, s.latents.g);
    const double sigma = std::sqrt(params.noise_var);
    std::vector<double> img(params.dim());
    for (std::size_t i = 0; i < img.size(); ++i) {
        img[i] = (s.latents.a ? mu[i] : 0.0) + sigma * rng.normal();
    }
    s.image = Tensor::vector(std::move(img));
    return s;
}

/// ln p(I | c, g, a) + ln p(c, g, a) with isotropic Gaussian noise.
inline double log_joint(const RmmParams& params, std::span<const double> image, const Latents& z) {
    const double var = params.noise_var;
    const auto mu = params.mu(z.c, z.g);
    double r2 = 0.0;
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double d = image[i] - (z.a ? mu[i] : 0.0);
        r2 += d * d;
    }
    const double d = static_cast<double>(image.size());
    const double pa = z.a ? params.switch_prior : 1.0 - params.switch_prior;
    return -0.5 * r2 / var - 0.5 * d * std::log(2.0 * std::numbers::pi * var) +
           std::log(params.class_priors[z.c]) + std::log(params.nuisance_priors[z.g]) + std::log(pa);
}

struct ExhaustiveResult {
    Latents latents;
    double log_joint = -std::numeric_limits<double>::infinity();
};

/// Full enumeration over (c, g, a) with a ordered OFF < ON; first maximum wins.
inline ExhaustiveResult classify_exhaustive(const RmmParams& params, const Tensor& image) {
    if (image.size() != params.dim()) throw ShapeError("image length does not match template length");
    ExhaustiveResult best;
    bool first = true;
    for (std::size_t c = 0; c < params.num_classes(); ++c) {
        for (std::size_t g = 0; g < params.num_nuisances(); ++g) {
            for (int a = 0; a < 2; ++a) {
                const Latents z{c, g, a == 1};
                const double lj = log_joint(params, image.values(), z);
                if (first || lj > best.log_joint) {
                    best = {z, lj};
                    first = false;
                }
            }
        }
    }
    return best;
}

/// Natural parameters eta(theta) of the max-sum classifier.
struct NaturalParams {
    Tensor weights;  // [C][G][D]
    Tensor biases;   // [C][G]
    std::array<double, 2> switch_bias{};  // ln p(a) for a = OFF, ON
    double b0 = 0.0;                      // ln(p(ON) / p(OFF))

    std::size_t num_classes() const { return weights.dim(0); }
    std::size_t num_nuisances() const { return weights.dim(1); }
    std::size_t dim() const { return weights.dim(2); }
};

enum class PriorFolding { uniform, fold_into_bias };

inline NaturalParams to_natural(const RmmParams& params, PriorFolding folding = PriorFolding::uniform) {
    params.validate();
    if (params.switch_prior <= 0.0 || params.switch_prior >= 1.0) {
        throw NumericError("to_natural: switch prior must lie strictly inside (0, 1)");
    }
    const std::size_t nc = params.num_classes(), ng = params.num_nuisances(), d = params.dim();
    NaturalParams nat;
    nat.weights = Tensor({nc, ng, d});
    nat.biases = Tensor({nc, ng});
    const double inv = 1.0 / params.noise_var;
    for (std::size_t c = 0; c < nc; ++c) {
        for (std::size_t g = 0; g < ng; ++g) {
            const auto mu = params.mu(c, g);
            for (std::size_t i = 0; i < d; ++i) nat.weights[(c * ng + g) * d + i] = mu[i] * inv;
            double b = -0.5 * squared_norm(mu) * inv;
            if (folding == PriorFolding::fold_into_bias) {
                b += std::log(params.class_priors[c]) + std::log(params.nuisance_priors[g]);
            }
            nat.biases[c * ng + g] = b;
        }
    }
    nat.switch_bias = {std::log(1.0 - params.switch_prior), std::log(params.switch_prior)};
    nat.b0 = std::log(params.switch_prior / (1.0 - params.switch_prior));
    return nat;
}

struct Decision {
    std::size_t c = 0;
    double score = 0.0;
};

namespace detail {
inline double preactivation(const NaturalParams& nat, std::size_t c, std::size_t g, std::span<const double> image) {
    const std::size_t d = nat.dim();
    return dot(nat.weights.values().subspan((c * nat.num_nuisances() + g) * d, d), image) +
           nat.biases[c * nat.num_nuisances() + g];
}

inline void check_image(const NaturalParams& nat, const Tensor& image) {
    if (image.size() != nat.dim()) throw ShapeError("image length does not match weight length");
}
}  // namespace detail

/// Per-class scores max_g ReLU(<w_cg|I> + b_cg + b0) + b_OFF.
///
/// The switch log-odds b0 sits inside the rectifier and the OFF-branch
/// log-prior is added outside, which is the exact max-marginal over a.
inline std::vector<double> relu_scores(const NaturalParams& nat, const Tensor& image) {
    detail::check_image(nat, image);
    std::vector<double> scores(nat.num_classes());
    for (std::size_t c = 0; c < nat.num_classes(); ++c) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < nat.num_nuisances(); ++g) {
            best = std::max(best, std::max(detail::preactivation(nat, c, g, image.values()) + nat.b0, 0.0));
        }
        scores[c] = best + nat.switch_bias[0];
    }
    return scores;
}

inline Decision classify_relu(const NaturalParams& nat, const Tensor& image) {
    const auto scores = relu_scores(nat, image);
    const std::size_t c = argmax_first(scores);
    return {c, scores[c]};
}

/// Same decision written as an explicit MaxOut over g and a.
inline Decision classify_maxout(const NaturalParams& nat, const Tensor& image) {
    detail::check_image(nat, image);
    Decision best{0, -std::numeric_limits<double>::infinity()};
    for (std::size_t c = 0; c < nat.num_classes(); ++c) {
        double score = -std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < nat.num_nuisances(); ++g) {
            const double u = detail::preactivation(nat, c, g, image.values());
            for (int a = 0; a < 2; ++a) {
                score = std::max(score, a * u + nat.switch_bias[a]);
            }
        }
        if (c == 0 || score > best.score) best = {c, score};
    }
    return best;
}

/// Translational template bank: row t holds the core filter shifted to offset t.
inline Tensor build_translational(const Tensor& core_filter, std::span<const std::size_t> translations,
                                  std::size_t dim) {
    const std::size_t k = core_filter.size();
    Tensor bank({translations.size(), dim});
    for (std::size_t i = 0; i < translations.size(); ++i) {
        const std::size_t t = translations[i];
        if (t + k > dim) {
            throw ShapeError("translation " + std::to_string(t) + " pushes a length-" + std::to_string(k) +
                             " filter outside dimension " + std::to_string(dim));
        }
        for (std::size_t j = 0; j < k; ++j) bank[i * dim + t + j] = core_filter[j];
    }
    return bank;
}

struct TranslationalMatch {
    std::size_t t_index = 0;
    double score = 0.0;
};

/// max_t <T_t w | I> over a translational bank (first maximum wins).
inline TranslationalMatch translational_score(const Tensor& bank, const Tensor& image) {
    if (bank.dim(1) != image.size()) throw ShapeError("bank width does not match image length");
    TranslationalMatch best{0, -std::numeric_limits<double>::infinity()};
    for (std::size_t t = 0; t < bank.dim(0); ++t) {
        const double s = dot(row(bank, t), image.values());
        if (s > best.score) best = {t, s};
    }
    return best;
}

}  // namespace drmm::rmm
