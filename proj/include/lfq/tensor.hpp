#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lfq {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the reverse-mode graph. Results of differentiable ops keep
// their parents alive and a closure that pushes `grad` into the parents.
struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until the first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }
    void accumulate(std::size_t i, float g);
    std::vector<float>& grad_buffer();
};

}  // namespace detail

// Handle to a dense row-major float tensor that may take part in a graph.
// Copies of a Tensor alias the same storage; use clone() for a deep copy.
class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor from(Shape shape, std::vector<float> values);
    static Tensor scalar(float value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const { return node_ ? node_->value.size() : 0; }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const float> data() const;
    // Mutating a tensor that already feeds a live graph invalidates that graph.
    std::span<float> mutable_data();
    float item() const;
    float at(std::size_t r, std::size_t c) const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const float> grad() const;
    // Empty until a gradient has been accumulated.
    std::span<float> mutable_grad();
    void zero_grad();

    // Deep copy that is a fresh leaf, requires_grad preserved only if asked.
    Tensor clone(bool keep_requires_grad = false) const;
    // Leaf sharing no graph history; data is copied.
    Tensor detach() const { return clone(false); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<detail::Node> node_;
};

// Populates grads of every trainable leaf reachable from `loss`.
void backward(const Tensor& loss);

bool bit_equal(const Tensor& a, const Tensor& b);

// Keeps large tensor buffers on the heap instead of fresh mmap pages; graph
// construction allocates many short-lived multi-hundred-KiB buffers. Call
// once at program start.
void tune_allocator();

}  // namespace lfq
