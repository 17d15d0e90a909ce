#pragma once

#include "clu/tensor.hpp"

#include <cstdint>
#include <set>
#include <span>
#include <vector>

namespace clu {

using ClassId = std::int32_t;
using ClassSet = std::set<ClassId>;

// Token-sequence samples with class labels and stable sample ids.
struct LabeledDataset {
    std::size_t seq_len = 0;
    std::size_t input_dim = 0;
    std::vector<double> features;  // size() * seq_len * input_dim, row-major
    std::vector<ClassId> labels;
    std::vector<std::uint64_t> ids;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
    std::size_t sample_width() const { return seq_len * input_dim; }

    std::span<const double> sample(std::size_t i) const;
    void push_back(std::span<const double> x, ClassId label, std::uint64_t id);
    void append(const LabeledDataset& other);

    LabeledDataset subset(std::span<const std::size_t> indices) const;
    LabeledDataset filter(const ClassSet& classes) const;
    ClassSet classes() const;

    // [n x seq_len x input_dim]
    Tensor batch(std::span<const std::size_t> indices) const;
    Tensor all() const;
    std::vector<ClassId> batch_labels(std::span<const std::size_t> indices) const;
};

}  // namespace clu
