#include "clu/dataset.hpp"

#include "clu/errors.hpp"

#include <numeric>

namespace clu {

std::span<const double> LabeledDataset::sample(std::size_t i) const {
    if (i >= size()) {
        throw IndexError("sample index " + std::to_string(i) + " out of range (" + std::to_string(size()) + ")");
    }
    return std::span<const double>(features).subspan(i * sample_width(), sample_width());
}

void LabeledDataset::push_back(std::span<const double> x, ClassId label, std::uint64_t id) {
    if (x.size() != sample_width()) {
        throw DimensionError("sample of width " + std::to_string(x.size()) + " pushed into dataset of width " +
                             std::to_string(sample_width()));
    }
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
    ids.push_back(id);
}

void LabeledDataset::append(const LabeledDataset& other) {
    if (empty() && features.empty() && seq_len == 0) {
        seq_len = other.seq_len;
        input_dim = other.input_dim;
    }
    if (other.seq_len != seq_len || other.input_dim != input_dim) {
        throw DimensionError("cannot append datasets with different sample shapes");
    }
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    out.seq_len = seq_len;
    out.input_dim = input_dim;
    out.features.reserve(indices.size() * sample_width());
    for (auto i : indices) {
        out.push_back(sample(i), labels[i], ids[i]);
    }
    return out;
}

LabeledDataset LabeledDataset::filter(const ClassSet& keep) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < size(); ++i) {
        if (keep.contains(labels[i])) {
            idx.push_back(i);
        }
    }
    return subset(idx);
}

ClassSet LabeledDataset::classes() const {
    return ClassSet(labels.begin(), labels.end());
}

Tensor LabeledDataset::batch(std::span<const std::size_t> indices) const {
    std::vector<double> buf;
    buf.reserve(indices.size() * sample_width());
    for (auto i : indices) {
        auto s = sample(i);
        buf.insert(buf.end(), s.begin(), s.end());
    }
    return Tensor::from({indices.size(), seq_len, input_dim}, std::move(buf));
}

Tensor LabeledDataset::all() const {
    return Tensor::from({size(), seq_len, input_dim}, features);
}

std::vector<ClassId> LabeledDataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<ClassId> out;
    out.reserve(indices.size());
    for (auto i : indices) {
        out.push_back(labels.at(i));
    }
    return out;
}

}  // namespace clu
