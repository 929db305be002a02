#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>

#include <boost/crc.hpp>
#include <boost/endian/conversion.hpp>

#include "drmm/deep.hpp"
#include "drmm/edrmm.hpp"
#include "drmm/io.hpp"
#include "drmm/relax.hpp"
#include "drmm/rmm.hpp"

namespace drmm::ckpt {

inline constexpr char magic[8] = {'D', 'R', 'M', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t version = 1;
inline constexpr std::uint8_t dtype_f64 = 0;
inline const std::string meta_prefix = "__meta__/";

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

inline std::uint64_t crc64(std::string_view bytes) {
    Crc64 crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

/// Ordered named tensors; string metadata rides along as tensors of byte
/// values under the "__meta__/" prefix.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;

    void put(const std::string& name, Tensor t) {
        for (auto& [n, v] : tensors) {
            if (n == name) {
                v = std::move(t);
                return;
            }
        }
        tensors.emplace_back(name, std::move(t));
    }
    void put_scalar(const std::string& name, double v) { put(name, Tensor::vector({v})); }

    bool has(const std::string& name) const {
        for (const auto& [n, v] : tensors) {
            if (n == name) return true;
        }
        return false;
    }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, v] : tensors) {
            if (n == name) return v;
        }
        throw FormatError("checkpoint has no tensor '" + name + "'");
    }
    double scalar(const std::string& name) const { return get(name)[0]; }

    void set_meta(const std::string& key, const std::string& value) {
        std::vector<double> bytes;
        for (unsigned char ch : value) bytes.push_back(ch);
        const std::size_t n = bytes.size();
        put(meta_prefix + key, Tensor({n}, std::move(bytes)));
    }

    std::string meta(const std::string& key) const {
        std::string out;
        for (double v : get(meta_prefix + key).values()) out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
        return out;
    }
};

namespace detail {

template <class T>
void append_le(std::string& out, T v) {
    boost::endian::native_to_little_inplace(v);
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T le() {
        T v;
        std::memcpy(&v, take(sizeof v).data(), sizeof v);
        return boost::endian::little_to_native(v);
    }

    std::string_view take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated at offset " + std::to_string(pos_));
        const auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t offset() const { return pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const Checkpoint& c) {
    std::string out(magic, sizeof magic);
    detail::append_le<std::uint32_t>(out, version);
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        if (name.size() > 0xffff) throw FormatError("tensor name longer than 65535 bytes");
        if (t.rank() > 0xff) throw FormatError("tensor rank above 255");
        detail::append_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        detail::append_le<std::uint8_t>(out, dtype_f64);
        detail::append_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::append_le<std::uint64_t>(out, d);
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            detail::append_le<std::uint64_t>(out, bits);
        }
    }
    detail::append_le<std::uint64_t>(out, crc64(out));
    return out;
}

inline Checkpoint decode(std::string_view bytes) {
    if (bytes.size() < sizeof magic + 16) throw FormatError("checkpoint too short: " + std::to_string(bytes.size()) + " bytes");
    if (bytes.substr(0, sizeof magic) != std::string_view(magic, sizeof magic)) {
        throw FormatError("not a checkpoint: bad magic at offset 0");
    }
    const std::size_t body = bytes.size() - 8;
    detail::Reader tail(bytes.substr(body));
    const auto stored = tail.le<std::uint64_t>();
    if (stored != crc64(bytes.substr(0, body))) throw FormatError("checkpoint CRC mismatch");
    detail::Reader r(bytes.substr(0, body));
    r.take(sizeof magic);
    const auto ver = r.le<std::uint32_t>();
    if (ver != version) throw FormatError("unknown checkpoint version " + std::to_string(ver));
    const auto count = r.le<std::uint32_t>();
    Checkpoint c;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.le<std::uint16_t>();
        std::string name(r.take(len));
        const std::size_t at = r.offset();
        const auto dtype = r.le<std::uint8_t>();
        if (dtype != dtype_f64) {
            throw FormatError("unknown dtype " + std::to_string(dtype) + " at offset " + std::to_string(at));
        }
        const auto rank = r.le<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) d = r.le<std::uint64_t>();
        std::vector<double> values(shape_size(shape));
        for (auto& v : values) {
            const auto bits = r.le<std::uint64_t>();
            std::memcpy(&v, &bits, sizeof v);
        }
        c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    if (r.offset() != body) throw FormatError("trailing bytes before the CRC at offset " + std::to_string(r.offset()));
    return c;
}

inline void save(const std::filesystem::path& path, const Checkpoint& c) { io::write_file(path, encode(c)); }
inline Checkpoint load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline std::string kind(const Checkpoint& c) { return c.has(meta_prefix + "kind") ? c.meta("kind") : ""; }

namespace detail {

inline void expect_kind(const Checkpoint& c, const std::string& want) {
    if (kind(c) != want) throw FormatError("checkpoint holds a '" + kind(c) + "' model, expected '" + want + "'");
}

inline Tensor dims_tensor(const Shape& s) {
    return Tensor({s.size()}, std::vector<double>(s.begin(), s.end()));
}

inline Shape tensor_dims(const Tensor& t) {
    Shape s;
    for (double v : t.values()) s.push_back(static_cast<std::size_t>(v));
    return s;
}

inline Tensor stage_spec(const ConvSpec& conv, const PoolSpec& pool) {
    return Tensor::vector({static_cast<double>(conv.filter_count), static_cast<double>(conv.filter_height),
                           static_cast<double>(conv.filter_width), static_cast<double>(conv.channels),
                           static_cast<double>(conv.stride), conv.padding == Padding::same_zero ? 1.0 : 0.0,
                           static_cast<double>(pool.window_height), static_cast<double>(pool.window_width),
                           static_cast<double>(pool.stride)});
}

inline std::pair<ConvSpec, PoolSpec> read_stage_spec(const Tensor& t) {
    if (t.size() != 9) throw FormatError("layer spec must have 9 entries");
    auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
    return {ConvSpec{u(0), u(1), u(2), u(3), u(4), t[5] != 0.0 ? Padding::same_zero : Padding::valid},
            PoolSpec{u(6), u(7), u(8)}};
}

inline std::string layer_name(std::size_t l, const char* what) { return "layer" + std::to_string(l + 1) + "/" + what; }

inline void put_drmm(Checkpoint& c, const deep::DrmmParams& p, const std::string& prefix) {
    c.put(prefix + "input_shape", dims_tensor(p.input_shape));
    c.put_scalar(prefix + "depth", static_cast<double>(p.depth()));
    for (std::size_t l = 0; l < p.depth(); ++l) {
        const deep::Layer& layer = p.layers[l];
        c.put(prefix + layer_name(l, "spec"), stage_spec(layer.conv, layer.pool));
        c.put(prefix + layer_name(l, "filters"), layer.filters);
        c.put(prefix + layer_name(l, "bias"), layer.bias);
        c.put(prefix + layer_name(l, "nuisance_prior"), Tensor::vector(layer.nuisance_prior));
        if (!layer.alpha.empty()) c.put(prefix + layer_name(l, "alpha"), layer.alpha);
    }
    c.put(prefix + "templates", p.templates);
    c.put(prefix + "class_bias", p.class_bias);
    c.put(prefix + "class_prior", Tensor::vector(p.class_prior));
    c.put_scalar(prefix + "noise_var", p.noise_var);
}

inline deep::DrmmParams get_drmm(const Checkpoint& c, const std::string& prefix) {
    const auto depth = static_cast<std::size_t>(c.scalar(prefix + "depth"));
    std::vector<deep::LayerSpec> specs;
    for (std::size_t l = 0; l < depth; ++l) {
        const auto [conv, pool] = read_stage_spec(c.get(prefix + layer_name(l, "spec")));
        specs.push_back({conv, pool});
    }
    const Tensor& templates = c.get(prefix + "templates");
    deep::DrmmParams p = deep::make_drmm(tensor_dims(c.get(prefix + "input_shape")), specs, templates.dim(0),
                                         c.scalar(prefix + "noise_var"));
    for (std::size_t l = 0; l < depth; ++l) {
        deep::Layer& layer = p.layers[l];
        layer.filters = c.get(prefix + layer_name(l, "filters"));
        layer.bias = c.get(prefix + layer_name(l, "bias"));
        const auto np = c.get(prefix + layer_name(l, "nuisance_prior")).values();
        layer.nuisance_prior.assign(np.begin(), np.end());
        if (c.has(prefix + layer_name(l, "alpha"))) layer.alpha = c.get(prefix + layer_name(l, "alpha"));
    }
    p.templates = templates;
    p.class_bias = c.get(prefix + "class_bias");
    const auto cp = c.get(prefix + "class_prior").values();
    p.class_prior.assign(cp.begin(), cp.end());
    p.validate();
    return p;
}

}  // namespace detail

inline Checkpoint to_checkpoint(const rmm::RmmParams& p) {
    Checkpoint c;
    c.set_meta("kind", "rmm");
    c.put("templates", p.templates);
    c.put("class_priors", Tensor::vector(p.class_priors));
    c.put("nuisance_priors", Tensor::vector(p.nuisance_priors));
    c.put_scalar("switch_prior", p.switch_prior);
    c.put_scalar("noise_var", p.noise_var);
    return c;
}

inline rmm::RmmParams rmm_from(const Checkpoint& c) {
    detail::expect_kind(c, "rmm");
    rmm::RmmParams p;
    p.templates = c.get("templates");
    const auto cp = c.get("class_priors").values(), np = c.get("nuisance_priors").values();
    p.class_priors.assign(cp.begin(), cp.end());
    p.nuisance_priors.assign(np.begin(), np.end());
    p.switch_prior = c.scalar("switch_prior");
    p.noise_var = c.scalar("noise_var");
    p.validate();
    return p;
}

inline Checkpoint to_checkpoint(const deep::DrmmParams& p) {
    Checkpoint c;
    c.set_meta("kind", "drmm");
    detail::put_drmm(c, p, "");
    return c;
}

inline deep::DrmmParams drmm_from(const Checkpoint& c) {
    detail::expect_kind(c, "drmm");
    return detail::get_drmm(c, "");
}

inline Checkpoint to_checkpoint(const deep::DrfmParams& p) {
    Checkpoint c;
    c.set_meta("kind", "drfm");
    detail::put_drmm(c, p.stack, "");
    c.put("loadings", p.loadings);
    return c;
}

inline deep::DrfmParams drfm_from(const Checkpoint& c) {
    detail::expect_kind(c, "drfm");
    deep::DrfmParams p{detail::get_drmm(c, ""), c.get("loadings")};
    p.validate();
    return p;
}

inline Checkpoint to_checkpoint(const relax::DiscriminativeParams& d) {
    Checkpoint c;
    c.set_meta("kind", "discriminative");
    c.put("input_shape", detail::dims_tensor(d.input_shape));
    c.put_scalar("depth", static_cast<double>(d.stages.size()));
    for (std::size_t l = 0; l < d.stages.size(); ++l) {
        c.put(detail::layer_name(l, "spec"), detail::stage_spec(d.stages[l].conv, d.stages[l].pool));
        c.put(detail::layer_name(l, "filters"), d.stages[l].weights);
        c.put(detail::layer_name(l, "bias"), d.stages[l].bias);
    }
    c.put("weights", d.weights);
    c.put("biases", d.biases);
    c.put("head", Tensor::vector({d.rectified ? 1.0 : 0.0, d.gate_bias, d.off_bias,
                                  static_cast<double>(static_cast<std::uint8_t>(d.provenance))}));
    return c;
}

inline relax::DiscriminativeParams discriminative_from(const Checkpoint& c) {
    detail::expect_kind(c, "discriminative");
    relax::DiscriminativeParams d;
    d.input_shape = detail::tensor_dims(c.get("input_shape"));
    Shape cur = d.input_shape;
    const auto depth = static_cast<std::size_t>(c.scalar("depth"));
    for (std::size_t l = 0; l < depth; ++l) {
        const auto [conv, pool] = detail::read_stage_spec(c.get(detail::layer_name(l, "spec")));
        d.stages.push_back({conv, pool, cur, c.get(detail::layer_name(l, "filters")), c.get(detail::layer_name(l, "bias"))});
        const ConvGeometry g = conv_geometry(cur, conv);
        const PoolGeometry pg = pool_geometry({g.out_h, g.out_w, conv.filter_count}, pool);
        cur = {pg.out_h, pg.out_w, conv.filter_count};
    }
    d.weights = c.get("weights");
    d.biases = c.get("biases");
    const Tensor& head = c.get("head");
    d.rectified = head[0] != 0.0;
    d.gate_bias = head[1];
    d.off_bias = head[2];
    d.provenance = static_cast<relax::Provenance>(static_cast<std::uint8_t>(head[3]));
    d.validate();
    return d;
}

inline Checkpoint to_checkpoint(const edrmm::Forest& f) {
    Checkpoint c;
    c.set_meta("kind", "edrmm");
    c.put_scalar("trees", static_cast<double>(f.trees.size()));
    for (std::size_t i = 0; i < f.trees.size(); ++i) {
        const edrmm::EvoTree& t = f.trees[i];
        const std::string pre = "tree" + std::to_string(i + 1) + "/";
        const std::size_t n = t.nodes.size(), d = t.dim(), nc = t.num_classes;
        Tensor parents({n}), labels({n}), alpha({n, d}), mu({n, d}), hist({n, nc});
        for (std::size_t k = 0; k < n; ++k) {
            const auto& node = t.nodes[k];
            parents[k] = static_cast<double>(node.parent);
            labels[k] = node.label;
            std::copy_n(node.alpha.data(), d, alpha.data() + k * d);
            std::copy_n(node.mu.data(), d, mu.data() + k * d);
            std::copy(node.histogram.begin(), node.histogram.end(), hist.data() + k * nc);
        }
        c.put(pre + "parents", parents);
        c.put(pre + "labels", labels);
        c.put(pre + "alpha", alpha);
        c.put(pre + "mu", mu);
        c.put(pre + "histograms", hist);
        const auto seed = f.bootstrap_seeds.size() > i ? f.bootstrap_seeds[i] : 0;
        c.put(pre + "bootstrap_seed", Tensor::vector({static_cast<double>(seed >> 32), static_cast<double>(seed & 0xffffffffu)}));
    }
    return c;
}

inline edrmm::Forest forest_from(const Checkpoint& c) {
    detail::expect_kind(c, "edrmm");
    edrmm::Forest f;
    const auto count = static_cast<std::size_t>(c.scalar("trees"));
    for (std::size_t i = 0; i < count; ++i) {
        const std::string pre = "tree" + std::to_string(i + 1) + "/";
        const Tensor &parents = c.get(pre + "parents"), &labels = c.get(pre + "labels"), &alpha = c.get(pre + "alpha"),
                     &mu = c.get(pre + "mu"), &hist = c.get(pre + "histograms");
        const std::size_t n = parents.size(), d = alpha.dim(1), nc = hist.dim(1);
        edrmm::EvoTree t;
        t.num_classes = nc;
        for (std::size_t k = 0; k < n; ++k) {
            edrmm::EvoTree::Node node;
            node.parent = static_cast<std::int64_t>(parents[k]);
            node.label = static_cast<std::int32_t>(labels[k]);
            node.alpha = Tensor({d}, std::vector<double>(row(alpha, k).begin(), row(alpha, k).end()));
            node.mu = Tensor({d}, std::vector<double>(row(mu, k).begin(), row(mu, k).end()));
            if (node.parent >= 0) {
                const auto p = static_cast<std::size_t>(node.parent);
                if (p >= k) throw FormatError(pre + "parents must precede their children");
                node.depth = t.nodes[p].depth + 1;
                t.nodes[p].children.push_back(k);
            }
            t.nodes.push_back(std::move(node));
        }
        for (std::size_t k = 0; k < n; ++k) {
            if (t.is_leaf(k)) {
                const auto h = row(hist, k);
                t.nodes[k].histogram.assign(h.begin(), h.end());
            }
        }
        f.trees.push_back(std::move(t));
        const Tensor& s = c.get(pre + "bootstrap_seed");
        f.bootstrap_seeds.push_back(static_cast<std::uint64_t>(s[0]) << 32 | static_cast<std::uint64_t>(s[1]));
    }
    return f;
}

}  // namespace drmm::ckpt
