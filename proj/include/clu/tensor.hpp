#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace clu {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the define-by-run graph. Leaves have no backward_fn; interior
// nodes exist only when at least one parent requires a gradient.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_interior() const { return static_cast<bool>(backward_fn); }

    // Lazily allocates the gradient buffer. Only valid when requires_grad.
    std::vector<T>& grad_buffer() {
        if (grad.size() != values.size()) {
            grad.assign(values.size(), T(0));
        }
        return grad;
    }
};

}  // namespace detail

// Dense row-major tensor with a reverse-mode gradient slot.
//
// Copies share the underlying node (handle semantics, like a parameter
// reference); use detach() for an independent deep copy.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor();

    static BasicTensor zeros(Shape shape);
    static BasicTensor full(Shape shape, T value);
    static BasicTensor from(Shape shape, std::vector<T> values);
    static BasicTensor scalar(T value);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return node_->values.size(); }

    std::span<const T> values() const { return node_->values; }
    // Leaves only: mutating an interior node would desynchronize the graph.
    std::span<T> mutable_values();
    T item() const;

    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    BasicTensor& set_requires_grad(bool flag);
    void zero_grad();

    bool is_leaf() const { return !node_->is_interior(); }
    BasicTensor detach() const;

    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
    static BasicTensor wrap(std::shared_ptr<detail::Node<T>> node);

private:
    std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

// Populates grad on every requires_grad leaf reachable from `loss`.
// Leaf gradients accumulate across calls; interior gradients are recomputed.
template <typename T>
void backward(const BasicTensor<T>& loss);

extern template class BasicTensor<double>;
extern template class BasicTensor<float>;

}  // namespace clu
