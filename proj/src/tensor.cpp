#include "lfq/tensor.hpp"

#include <cmath>
#include <cstring>
#include <malloc.h>
#include <sstream>
#include <unordered_set>

#include "lfq/error.hpp"

namespace lfq {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

std::vector<float>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad;
}

void Node::accumulate(std::size_t i, float g) { grad_buffer()[i] += g; }

}  // namespace detail

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<float> values) {
    if (numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return node;
}

const detail::Node& require(const std::shared_ptr<detail::Node>& n) {
    if (!n) throw StateError("use of an undefined tensor");
    return *n;
}

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
    auto n = numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
    return Tensor(make_leaf(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return require(node_).shape; }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_str(s));
    return s[0];
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_str(s));
    return s[1];
}

std::span<const float> Tensor::data() const { return require(node_).value; }

std::span<float> Tensor::mutable_data() {
    require(node_);
    return node_->value;
}

float Tensor::item() const {
    const auto& n = require(node_);
    if (n.value.size() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(n.shape));
    }
    return n.value[0];
}

float Tensor::at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

Tensor& Tensor::set_requires_grad(bool on) {
    require(node_);
    node_->requires_grad = on;
    return *this;
}

std::span<const float> Tensor::grad() const { return require(node_).grad; }

std::span<float> Tensor::mutable_grad() {
    if (!node_) throw StateError("use of an undefined tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::clone(bool keep_requires_grad) const {
    const auto& n = require(node_);
    auto copy = std::make_shared<detail::Node>();
    copy->shape = n.shape;
    copy->value = n.value;
    copy->requires_grad = keep_requires_grad && n.requires_grad;
    return Tensor(std::move(copy));
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw StateError("backward on an undefined tensor");
    if (loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("loss does not depend on any trainable tensor");
    }

    // Iterative post-order DFS gives a topological order without recursion.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->is_leaf() || node->grad.empty()) continue;
        node->backward(*node);
        if (node != loss.node().get()) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace lfq
