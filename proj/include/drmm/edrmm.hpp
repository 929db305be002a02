#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>

#include "drmm/data.hpp"
#include "drmm/kernels.hpp"
#include "drmm/rng.hpp"

namespace drmm::edrmm {

/// Taxonomy of templates grown by additive mutations: a node's template is its
/// parent's template plus the node's alpha. Every leaf sits at the same depth.
struct EvoTree {
    struct Node {
        std::int64_t parent = -1;
        std::size_t depth = 0;
        Tensor alpha;     // zero at the root
        Tensor mu;        // parent mu + alpha
        std::vector<std::size_t> children;
        std::int32_t label = -1;         // leaves only
        std::vector<double> histogram;   // leaves only, smoothed label counts
    };

    std::vector<Node> nodes;  // nodes[0] is the root
    std::size_t num_classes = 0;

    static EvoTree with_root(Tensor mu) {
        EvoTree t;
        Node root;
        root.alpha = Tensor(mu.shape());
        root.mu = std::move(mu);
        t.nodes.push_back(std::move(root));
        return t;
    }

    std::size_t dim() const { return nodes.front().mu.size(); }
    bool is_leaf(std::size_t id) const { return nodes[id].children.empty(); }

    std::size_t add_child(std::size_t parent, Tensor alpha) {
        if (alpha.size() != dim()) throw ShapeError("mutation length does not match the root template");
        Node n;
        n.parent = static_cast<std::int64_t>(parent);
        n.depth = nodes[parent].depth + 1;
        n.mu = nodes[parent].mu + alpha;
        n.alpha = std::move(alpha);
        nodes.push_back(std::move(n));
        nodes[parent].children.push_back(nodes.size() - 1);
        return nodes.size() - 1;
    }

    std::vector<std::size_t> leaves() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (is_leaf(i)) out.push_back(i);
        }
        return out;
    }

    void validate() const {
        if (nodes.empty()) throw ShapeError("tree has no root");
        std::size_t depth = 0;
        bool first = true;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (!is_leaf(i)) continue;
            if (first) depth = nodes[i].depth, first = false;
            if (nodes[i].depth != depth) throw ShapeError("leaves of an evolutionary tree must share one depth");
        }
    }
};

/// Grows a full tree whose level-l mutations are N(0, (scale * decay^(l-1))^2).
/// Each leaf is labeled with the index of its level-1 ancestor.
inline EvoTree sample_taxonomy(const Tensor& root, const std::vector<std::size_t>& branching, double scale,
                               std::uint64_t seed, double decay = 1.0) {
    if (branching.empty()) throw ConfigError("taxonomy depth must be at least 1");
    Rng rng(seed);
    EvoTree tree = EvoTree::with_root(root);
    std::vector<std::size_t> frontier{0};
    double s = scale;
    for (std::size_t level = 0; level < branching.size(); ++level) {
        if (branching[level] == 0) throw ConfigError("branching factors must be positive");
        std::vector<std::size_t> next;
        for (std::size_t parent : frontier) {
            for (std::size_t b = 0; b < branching[level]; ++b) {
                Tensor alpha(root.shape());
                for (auto& v : alpha.values()) v = s * rng.normal();
                next.push_back(tree.add_child(parent, std::move(alpha)));
            }
        }
        frontier = std::move(next);
        s *= decay;
    }
    for (std::size_t leaf : frontier) {
        std::size_t id = leaf;
        while (tree.nodes[id].depth > 1) id = static_cast<std::size_t>(tree.nodes[id].parent);
        const auto& top = tree.nodes[0].children;
        tree.nodes[leaf].label = static_cast<std::int32_t>(std::find(top.begin(), top.end(), id) - top.begin());
    }
    tree.num_classes = branching.front();
    return tree;
}

struct TreeSample {
    Tensor image;
    std::size_t leaf = 0;
};

/// Uniform child at every level, then isotropic Gaussian noise.
inline TreeSample sample_image(const EvoTree& tree, double noise_var, std::uint64_t seed) {
    Rng rng(seed);
    std::size_t id = 0;
    while (!tree.is_leaf(id)) id = tree.nodes[id].children[rng.uniform_index(tree.nodes[id].children.size())];
    TreeSample s{tree.nodes[id].mu, id};
    const double sd = std::sqrt(noise_var);
    if (sd > 0.0) {
        for (auto& v : s.image.values()) v += sd * rng.normal();
    }
    return s;
}

struct TreeDecision {
    std::size_t leaf = 0;
    std::vector<double> histogram;
};

/// Greedy descent: at each node move to the child with the largest <mu_child|I>
/// (lowest index on ties).
inline TreeDecision infer_tree(const EvoTree& tree, std::span<const double> image) {
    if (image.size() != tree.dim()) throw ShapeError("image length does not match the tree templates");
    std::size_t id = 0;
    while (!tree.is_leaf(id)) {
        const auto& kids = tree.nodes[id].children;
        std::size_t best = kids.front();
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t k : kids) {
            const double v = dot(tree.nodes[k].mu.values(), image);
            if (v > best_v) best_v = v, best = k;
        }
        id = best;
    }
    return {id, tree.nodes[id].histogram};
}

/// Laplace-smoothed label counts of the labeled samples routed to each leaf.
inline EvoTree fit_histograms(EvoTree tree, const Dataset& data, std::size_t num_classes) {
    data.validate();
    if (num_classes == 0) throw ConfigError("histograms need at least one class");
    tree.num_classes = num_classes;
    for (std::size_t leaf : tree.leaves()) tree.nodes[leaf].histogram.assign(num_classes, 1.0);
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!data.labeled(n)) continue;
        const auto c = static_cast<std::size_t>(data.labels[n]);
        if (c >= num_classes) throw ShapeError("label " + std::to_string(c) + " outside the histogram classes");
        tree.nodes[infer_tree(tree, data.image(n)).leaf].histogram[c] += 1.0;
    }
    return tree;
}

inline std::size_t predict(const EvoTree& tree, std::span<const double> image) {
    return argmax_first(infer_tree(tree, image).histogram);
}

struct TreeConfig {
    std::size_t depth = 3;
    std::size_t branching = 2;
    std::size_t iterations = 20;
    std::uint64_t seed = 0;
};

namespace detail {

inline Tensor unit(std::span<const double> v) {
    Tensor t({v.size()}, std::vector<double>(v.begin(), v.end()));
    return normalize_l2(t);
}

/// Directional k-means under the routing rule argmax_k <m_k|x>, with unit-norm
/// centers; returns at most k centers (fewer when samples run out).
inline std::vector<Tensor> split(const Dataset& data, const std::vector<std::size_t>& members, std::size_t k,
                                 std::size_t iterations, Rng& rng) {
    const std::size_t d = data.image_size();
    std::vector<Tensor> centers;
    if (members.empty()) return centers;
    // Farthest-direction seeding: k-means++ on cosine distance.
    centers.push_back(unit(data.image(members[rng.uniform_index(members.size())])));
    std::vector<double> dist(members.size());
    while (centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < members.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            const Tensor x = unit(data.image(members[i]));
            for (const Tensor& c : centers) best = std::min(best, std::max(0.0, 1.0 - dot(c.values(), x.values())));
            total += (dist[i] = best);
        }
        if (total <= 0.0) break;
        for (auto& v : dist) v /= total;
        centers.push_back(unit(data.image(members[rng.categorical(dist)])));
    }
    std::vector<std::size_t> assign(members.size(), 0);
    for (std::size_t it = 0; it < iterations; ++it) {
        bool changed = it == 0;
        for (std::size_t i = 0; i < members.size(); ++i) {
            const auto x = data.image(members[i]);
            std::size_t best = 0;
            double best_v = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < centers.size(); ++j) {
                const double v = dot(centers[j].values(), x);
                if (v > best_v) best_v = v, best = j;
            }
            changed |= best != assign[i];
            assign[i] = best;
        }
        if (!changed) break;
        std::vector<Tensor> sums(centers.size(), Tensor({d}));
        std::vector<std::size_t> counts(centers.size(), 0);
        for (std::size_t i = 0; i < members.size(); ++i) {
            const auto x = data.image(members[i]);
            for (std::size_t j = 0; j < d; ++j) sums[assign[i]][j] += x[j];
            ++counts[assign[i]];
        }
        for (std::size_t j = 0; j < centers.size(); ++j) {
            if (counts[j] && squared_norm(sums[j].values()) > 0.0) centers[j] = normalize_l2(sums[j]);
        }
    }
    return centers;
}

}  // namespace detail

/// Learns tree templates by recursive splitting of the routed samples. The
/// root is the data mean; a child's template is the unit direction of its
/// cluster, and its alpha is that template minus the parent's.
inline EvoTree learn_tree(const Dataset& data, const TreeConfig& cfg) {
    data.validate();
    if (data.size() == 0) throw ConfigError("tree learning needs samples");
    if (cfg.depth == 0 || cfg.branching == 0) throw ConfigError("tree depth and branching must be positive");
    const std::size_t d = data.image_size();
    Tensor mean({d});
    for (std::size_t n = 0; n < data.size(); ++n) {
        const auto x = data.image(n);
        for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
    }
    for (auto& v : mean.values()) v /= static_cast<double>(data.size());
    EvoTree tree = EvoTree::with_root(mean);
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> frontier;
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    frontier.emplace_back(0, std::move(all));
    for (std::size_t level = 0; level < cfg.depth; ++level) {
        std::vector<std::pair<std::size_t, std::vector<std::size_t>>> next;
        for (auto& [node, members] : frontier) {
            Rng rng(derive_seed(cfg.seed, "tree-split", node));
            std::vector<Tensor> centers = detail::split(data, members, cfg.branching, cfg.iterations, rng);
            if (centers.empty()) centers.push_back(tree.nodes[node].mu);
            const Tensor parent = tree.nodes[node].mu;
            std::vector<std::size_t> kids;
            for (const Tensor& c : centers) kids.push_back(tree.add_child(node, c - parent));
            std::vector<std::vector<std::size_t>> routed(kids.size());
            for (std::size_t n : members) {
                std::size_t best = 0;
                double best_v = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < kids.size(); ++j) {
                    const double v = dot(tree.nodes[kids[j]].mu.values(), data.image(n));
                    if (v > best_v) best_v = v, best = j;
                }
                routed[best].push_back(n);
            }
            for (std::size_t j = 0; j < kids.size(); ++j) next.emplace_back(kids[j], std::move(routed[j]));
        }
        frontier = std::move(next);
    }
    return tree;
}

struct Forest {
    std::vector<EvoTree> trees;
    std::vector<std::uint64_t> bootstrap_seeds;

    std::vector<double> mean_histogram(std::span<const double> image) const {
        if (trees.empty()) throw ConfigError("forest has no trees");
        std::vector<double> mean(trees.front().num_classes, 0.0);
        for (const EvoTree& t : trees) {
            const auto h = infer_tree(t, image).histogram;
            double s = 0.0;
            for (double v : h) s += v;
            for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += h[c] / (s * static_cast<double>(trees.size()));
        }
        return mean;
    }

    std::size_t predict(std::span<const double> image) const { return argmax_first(mean_histogram(image)); }
};

/// Bagging: every tree is learned and its histograms fitted on a bootstrap
/// resample of the same size. Without bootstrap each tree sees the full set.
inline Forest bagged_forest(const Dataset& data, std::size_t n_trees, const TreeConfig& cfg, std::size_t num_classes,
                            std::uint64_t seed, bool bootstrap = true) {
    if (n_trees == 0) throw ConfigError("a forest needs at least one tree");
    Forest f;
    for (std::size_t i = 0; i < n_trees; ++i) {
        const std::uint64_t bseed = derive_seed(seed, "bootstrap", i);
        Dataset sample;
        if (bootstrap) {
            Rng rng(bseed);
            std::vector<std::size_t> idx(data.size());
            for (auto& v : idx) v = rng.uniform_index(data.size());
            sample = subset(data, idx);
        }
        const Dataset& src = bootstrap ? sample : data;
        TreeConfig tc = cfg;
        if (bootstrap) tc.seed = derive_seed(seed, "tree", i);
        f.trees.push_back(fit_histograms(learn_tree(src, tc), src, num_classes));
        f.bootstrap_seeds.push_back(bootstrap ? bseed : 0);
    }
    return f;
}

inline double error_rate(const Forest& f, const Dataset& data) {
    std::size_t wrong = 0, total = 0;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!data.labeled(n)) continue;
        ++total;
        if (f.predict(data.image(n)) != static_cast<std::size_t>(data.labels[n])) ++wrong;
    }
    return total ? static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
}

}  // namespace drmm::edrmm
