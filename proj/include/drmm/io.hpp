#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <boost/endian/conversion.hpp>

#include "drmm/data.hpp"
#include "drmm/rng.hpp"

namespace drmm::io {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
        throw DataError("cannot write " + path.string());
    }
}

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& what) {
    if (offset + 4 > bytes.size()) {
        throw FormatError(what + ": truncated header at offset " + std::to_string(offset));
    }
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + offset, 4);
    return boost::endian::big_to_native(v);
}

inline void append_be32(std::string& out, std::uint32_t v) {
    v = boost::endian::native_to_big(v);
    out.append(reinterpret_cast<const char*>(&v), 4);
}

inline std::string hex32(std::uint32_t v) {
    std::ostringstream ss;
    ss << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
    return ss.str();
}

struct IdxPayload {
    std::vector<std::uint32_t> dims;
    std::string_view data;
};

inline IdxPayload parse_idx(const std::string& bytes, std::uint32_t magic, const std::string& what) {
    const std::uint32_t found = read_be32(bytes, 0, what);
    if (found != magic) throw FormatError(what + ": expected magic " + hex32(magic) + " but found " + hex32(found));
    const std::size_t rank = magic & 0xff;
    IdxPayload p;
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        p.dims.push_back(read_be32(bytes, 4 + 4 * i, what));
        count *= p.dims.back();
    }
    const std::size_t offset = 4 + 4 * rank;
    if (bytes.size() < offset + count) {
        throw FormatError(what + ": truncated payload at offset " + std::to_string(bytes.size()) + ", expected " +
                          std::to_string(offset + count) + " bytes");
    }
    if (bytes.size() > offset + count) {
        throw FormatError(what + ": " + std::to_string(bytes.size() - offset - count) +
                          " trailing bytes after offset " + std::to_string(offset + count));
    }
    p.data = std::string_view(bytes).substr(offset, count);
    return p;
}

}  // namespace detail

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

/// Parses an IDX image file (pixels divided by 255) and, unless `labels_path`
/// is empty, its label file. Images come out as [N][rows][cols].
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path = {}) {
    const std::string img_bytes = read_file(images_path);
    const auto img = detail::parse_idx(img_bytes, idx_images_magic, images_path.string());
    Dataset d;
    std::vector<double> values(img.data.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<unsigned char>(img.data[i]) / 255.0;
    d.images = Tensor(Shape{img.dims[0], img.dims[1], img.dims[2]}, std::move(values));
    if (!labels_path.empty()) {
        const std::string lab_bytes = read_file(labels_path);
        const auto lab = detail::parse_idx(lab_bytes, idx_labels_magic, labels_path.string());
        if (lab.dims[0] != img.dims[0]) {
            throw FormatError(labels_path.string() + ": " + std::to_string(lab.dims[0]) + " labels at offset 4 for " +
                              std::to_string(img.dims[0]) + " images");
        }
        for (char c : lab.data) d.labels.push_back(static_cast<unsigned char>(c));
    }
    return d;
}

/// Writes images quantized to round(255 v), clamped to [0, 255]; labels when present.
inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const Dataset& d) {
    if (d.images.rank() != 3) throw ShapeError("IDX images must be [N][rows][cols]");
    std::string out;
    detail::append_be32(out, idx_images_magic);
    for (std::size_t k = 0; k < 3; ++k) detail::append_be32(out, static_cast<std::uint32_t>(d.images.dim(k)));
    for (double v : d.images.values()) {
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L))));
    }
    write_file(images_path, out);
    if (labels_path.empty()) return;
    out.clear();
    detail::append_be32(out, idx_labels_magic);
    detail::append_be32(out, static_cast<std::uint32_t>(d.labels.size()));
    for (std::int32_t l : d.labels) {
        if (l < 0 || l > 255) throw ShapeError("IDX labels must lie in [0, 255]");
        out.push_back(static_cast<char>(static_cast<unsigned char>(l)));
    }
    write_file(labels_path, out);
}

struct Split {
    Dataset labeled;
    Dataset unlabeled;
    std::vector<std::size_t> labeled_indices;
};

/// Class-balanced labeled subset: floor(n_labeled / C) per class drawn without
/// replacement, the remainder drawn uniformly from what is left. The
/// unlabeled remainder carries no labels.
inline Split split_semisup(const Dataset& data, std::size_t n_labeled, std::uint64_t seed, std::size_t num_classes = 10) {
    data.validate();
    if (n_labeled > data.size()) {
        throw ConfigError("cannot label " + std::to_string(n_labeled) + " of " + std::to_string(data.size()) + " samples");
    }
    if (data.labels.empty()) throw ConfigError("splitting needs labels");
    Rng rng(derive_seed(seed, "semisup-split"));
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t n = 0; n < data.size(); ++n) {
        const auto c = static_cast<std::size_t>(data.labels[n]);
        if (c >= num_classes) throw ShapeError("label " + std::to_string(c) + " outside " + std::to_string(num_classes) + " classes");
        by_class[c].push_back(n);
    }
    std::vector<char> taken(data.size(), 0);
    std::vector<std::size_t> chosen;
    const std::size_t per = n_labeled / num_classes;
    for (auto& members : by_class) {
        rng.shuffle(members.begin(), members.end());
        for (std::size_t i = 0; i < std::min(per, members.size()); ++i) {
            chosen.push_back(members[i]);
            taken[members[i]] = 1;
        }
    }
    std::vector<std::size_t> rest;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!taken[n]) rest.push_back(n);
    }
    rng.shuffle(rest.begin(), rest.end());
    for (std::size_t i = 0; chosen.size() < n_labeled; ++i) {
        chosen.push_back(rest[i]);
        taken[rest[i]] = 1;
    }
    std::sort(chosen.begin(), chosen.end());
    std::vector<std::size_t> others;
    for (std::size_t n = 0; n < data.size(); ++n) {
        if (!taken[n]) others.push_back(n);
    }
    return {subset(data, chosen), subset(data, others, false), chosen};
}

/// Binary P5 image, min-max scaled to [0, 255]; a constant image is all zeros.
inline std::string pgm_bytes(const Tensor& image, std::size_t height, std::size_t width) {
    if (image.size() != height * width) throw ShapeError("PGM extent does not match the image size");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : image.values()) lo = std::min(lo, v), hi = std::max(hi, v);
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (double v : image.values()) {
        const double s = hi > lo ? (v - lo) / (hi - lo) * 255.0 : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(s), 0L, 255L))));
    }
    return out;
}

inline void write_pgm(const std::filesystem::path& path, const Tensor& image, std::size_t height, std::size_t width) {
    write_file(path, pgm_bytes(image, height, width));
}

}  // namespace drmm::io
