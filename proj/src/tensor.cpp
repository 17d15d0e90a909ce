#include "clu/tensor.hpp"

#include "clu/errors.hpp"

#include <algorithm>
#include <unordered_set>

namespace clu {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            s += "x";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
BasicTensor<T>::BasicTensor() : node_(std::make_shared<detail::Node<T>>()) {
    node_->values.assign(1, T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
    return full(std::move(shape), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    return wrap(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
    return from({}, {value});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::wrap(std::shared_ptr<detail::Node<T>> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
    }
    return node_->shape[axis];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
    if (node_->is_interior()) {
        throw ContractError("cannot mutate an interior graph node");
    }
    return node_->values;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (node_->values.size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(node_->shape));
    }
    return node_->values[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
    if (node_->is_interior()) {
        throw ContractError("requires_grad is derived for interior nodes");
    }
    node_->requires_grad = flag;
    if (!flag) {
        std::vector<T>().swap(node_->grad);
    }
    return *this;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from(node_->shape, node_->values);
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("loss is not connected to any tensor that requires grad");
    }
    using NodeT = detail::Node<T>;
    if (!loss.node()->is_interior()) {
        loss.node()->grad_buffer()[0] += T(1);
        return;
    }

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* parent = node->parents[next++].get();
            if (parent->requires_grad && parent->is_interior() && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (NodeT* node : order) {
        node->grad.assign(node->values.size(), T(0));
    }
    order.back()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->backward_fn(**it);
    }
}

template class BasicTensor<double>;
template class BasicTensor<float>;
template void backward<double>(const BasicTensor<double>&);
template void backward<float>(const BasicTensor<float>&);

}  // namespace clu
