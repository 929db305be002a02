#pragma once

#include <cstdint>
#include <string>

#include "drmm/tensor.hpp"

namespace drmm {

/// Images stacked along the first axis; label -1 marks an unlabeled sample.
struct Dataset {
    Tensor images;  // [N][...]
    std::vector<std::int32_t> labels;

    std::size_t size() const { return images.rank() ? images.dim(0) : 0; }
    std::size_t image_size() const { return size() ? images.size() / size() : 0; }
    Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
    bool labeled(std::size_t n) const { return n < labels.size() && labels[n] >= 0; }

    std::span<const double> image(std::size_t n) const {
        return images.values().subspan(n * image_size(), image_size());
    }

    Tensor image_tensor(std::size_t n, const Shape& shape) const {
        const auto v = image(n);
        return Tensor(shape, std::vector<double>(v.begin(), v.end()));
    }

    void validate() const {
        if (!labels.empty() && labels.size() != size()) {
            throw ShapeError("dataset has " + std::to_string(size()) + " images but " +
                             std::to_string(labels.size()) + " labels");
        }
    }
};

/// Rows `indices` of `data`, in order.
inline Dataset subset(const Dataset& data, std::span<const std::size_t> indices, bool keep_labels = true) {
    Shape shape = data.images.shape();
    shape[0] = indices.size();
    std::vector<double> values;
    values.reserve(indices.size() * data.image_size());
    Dataset out;
    for (std::size_t n : indices) {
        const auto v = data.image(n);
        values.insert(values.end(), v.begin(), v.end());
        if (keep_labels && !data.labels.empty()) out.labels.push_back(data.labels[n]);
    }
    out.images = Tensor(std::move(shape), std::move(values));
    return out;
}

}  // namespace drmm
