#pragma once

#include <limits>

#include "drmm/kernels.hpp"

namespace drmm::actmax {

/// Disjoint pixel-index sets covering [0, D).
struct PatchPartition {
    std::vector<std::vector<std::size_t>> patches;

    void validate(std::size_t dim) const {
        std::vector<char> seen(dim, 0);
        for (const auto& patch : patches) {
            for (std::size_t i : patch) {
                if (i >= dim) throw ShapeError("patch pixel " + std::to_string(i) + " outside dimension " + std::to_string(dim));
                if (seen[i]++) throw ShapeError("pixel " + std::to_string(i) + " belongs to two patches");
            }
        }
        for (std::size_t i = 0; i < dim; ++i) {
            if (!seen[i]) throw ShapeError("pixel " + std::to_string(i) + " is not covered by any patch");
        }
    }

    static PatchPartition single(std::size_t dim) {
        PatchPartition p;
        p.patches.emplace_back(dim);
        std::iota(p.patches[0].begin(), p.patches[0].end(), std::size_t{0});
        return p;
    }

    /// Non-overlapping ph x pw tiles of an h x w image (edge tiles may be smaller).
    static PatchPartition tiles(std::size_t h, std::size_t w, std::size_t ph, std::size_t pw) {
        if (ph == 0 || pw == 0) throw ConfigError("tile extents must be positive");
        PatchPartition p;
        for (std::size_t y0 = 0; y0 < h; y0 += ph) {
            for (std::size_t x0 = 0; x0 < w; x0 += pw) {
                std::vector<std::size_t> patch;
                for (std::size_t y = y0; y < std::min(h, y0 + ph); ++y) {
                    for (std::size_t x = x0; x < std::min(w, x0 + pw); ++x) patch.push_back(y * w + x);
                }
                p.patches.push_back(std::move(patch));
            }
        }
        return p;
    }
};

struct Result {
    Tensor image;                  // [D]
    std::vector<std::size_t> g;    // per patch
};

namespace detail {

inline std::vector<double> restrict(std::span<const double> mu, const std::vector<std::size_t>& patch) {
    std::vector<double> out(patch.size());
    for (std::size_t k = 0; k < patch.size(); ++k) out[k] = mu[patch[k]];
    return out;
}

inline std::span<const double> template_of(const Tensor& templates, std::size_t c, std::size_t g) {
    const std::size_t ng = templates.dim(1), d = templates.dim(2);
    return templates.values().subspan((c * ng + g) * d, d);
}

inline void check(const Tensor& templates, std::size_t c, const PatchPartition& partition) {
    if (templates.rank() != 3) throw ShapeError("templates must be [C][G][D]");
    if (c >= templates.dim(0)) throw ShapeError("class " + std::to_string(c) + " outside the template bank");
    partition.validate(templates.dim(2));
}

}  // namespace detail

/// Per patch, the nuisance whose template restriction has the largest norm,
/// and that restriction scaled to unit norm; patches where every template
/// vanishes stay zero.
inline Result activity_max_closed(const Tensor& templates, std::size_t c, const PatchPartition& partition) {
    detail::check(templates, c, partition);
    const std::size_t ng = templates.dim(1);
    Result r{Tensor({templates.dim(2)}), {}};
    for (const auto& patch : partition.patches) {
        std::size_t best = 0;
        double best_norm = -1.0;
        for (std::size_t g = 0; g < ng; ++g) {
            const double n = std::sqrt(squared_norm(detail::restrict(detail::template_of(templates, c, g), patch)));
            if (n > best_norm) best_norm = n, best = g;
        }
        r.g.push_back(best);
        if (best_norm <= 0.0) continue;
        const auto mu = detail::template_of(templates, c, best);
        for (std::size_t i : patch) r.image[i] = mu[i] / best_norm;
    }
    return r;
}

/// Exhaustive per-patch search over (nuisance, candidate) pairs for the largest
/// <mu(c,g)|J>. Without explicit candidates the grid is the unit-norm
/// restriction of every template of class c.
inline Result activity_max_brute(const Tensor& templates, std::size_t c, const PatchPartition& partition,
                                 const std::vector<std::vector<std::vector<double>>>* candidates = nullptr) {
    detail::check(templates, c, partition);
    const std::size_t ng = templates.dim(1);
    Result r{Tensor({templates.dim(2)}), {}};
    for (std::size_t p = 0; p < partition.patches.size(); ++p) {
        const auto& patch = partition.patches[p];
        std::vector<std::vector<double>> grid;
        if (candidates) {
            grid = (*candidates)[p];
        } else {
            for (std::size_t g = 0; g < ng; ++g) {
                auto v = detail::restrict(detail::template_of(templates, c, g), patch);
                const double n = std::sqrt(squared_norm(v));
                if (n > 0.0) {
                    for (double& x : v) x /= n;
                    grid.push_back(std::move(v));
                }
            }
        }
        std::size_t best_g = 0;
        const std::vector<double>* best_j = nullptr;
        double best = 0.0;
        for (std::size_t g = 0; g < ng; ++g) {
            const auto mu = detail::restrict(detail::template_of(templates, c, g), patch);
            for (const auto& j : grid) {
                if (j.size() != patch.size()) throw ShapeError("candidate length does not match its patch");
                const double v = dot(mu, j);
                if (!best_j || v > best) best = v, best_g = g, best_j = &j;
            }
        }
        r.g.push_back(best_g);
        if (!best_j || best <= 0.0) continue;
        for (std::size_t k = 0; k < patch.size(); ++k) r.image[patch[k]] = (*best_j)[k];
    }
    return r;
}

/// Sum over patches of <mu(c, g_i) | I restricted to patch i>.
inline double patch_score(const Tensor& templates, std::size_t c, const PatchPartition& partition,
                          std::span<const std::size_t> g, const Tensor& image) {
    double s = 0.0;
    for (std::size_t p = 0; p < partition.patches.size(); ++p) {
        const auto mu = detail::template_of(templates, c, g[p]);
        for (std::size_t i : partition.patches[p]) s += mu[i] * image[i];
    }
    return s;
}

}  // namespace drmm::actmax
