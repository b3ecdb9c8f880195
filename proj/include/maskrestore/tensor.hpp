#pragma once

// Dense tensors with tape-style reverse-mode differentiation.
//
// A Tensor is a shared handle to a Node. Every op that sees an input with
// requires_grad records a node holding its parents and a vector-Jacobian
// closure; backward() orders the reachable nodes topologically and sweeps
// them once in reverse. Values are immutable once created, gradients are
// the only state that changes after construction (plus parameter updates
// done by the optimizer through mutable_data()).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskrestore {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents that require grad.
    std::function<void(Node&)> backward;
    std::string op = "leaf";

    bool is_leaf() const { return !backward; }
    std::span<T> ensure_grad();
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor();
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    // Parameter updates only; never used on recorded intermediate values.
    std::span<T> mutable_data() { return node_->value; }
    std::vector<T> to_vector() const { return node_->value; }
    T item() const;
    T at(std::size_t flat_index) const { return node_->value.at(flat_index); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();

    // Scalar output only. Gradients accumulate additively on leaves.
    void backward() const;

    // Deep copy of values into a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    const std::string& op() const { return node_->op; }
    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Topologically ordered list of the nodes reachable from an output.
template <typename T>
struct Graph {
    std::vector<Node<T>*> order;  // inputs precede their consumers

    bool contains(const Node<T>* node) const;
};

template <typename T>
Graph<T> trace(const Tensor<T>& output);

// ---- elementwise (numpy-style broadcasting for binary ops) ----

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);

// ---- reductions ----

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// [C,H,W] -> [C], [N,C,H,W] -> [N,C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& a);

// ---- shape and indexing ----

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);  // rank 2
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);
// Flat gather: out[i] = a.flat[indices[i]]; indices may repeat.
template <typename T> Tensor<T> gather(const Tensor<T>& a, std::span<const std::size_t> indices);
// [C,H,W] -> [(H/p)*(W/p), C*p*p], tokens in row-major patch order.
template <typename T> Tensor<T> patchify(const Tensor<T>& image, std::size_t patch);

// ---- linear algebra and image ops ----

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);

// input [C,H,W] or [N,C,H,W]; weight [Co,Ci,k,k]; bias [Co] or empty handle.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 std::size_t padding, std::size_t stride = 1);

// Bilinear resampling with half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

// Values shared, no gradient path.
template <typename T> Tensor<T> detach(const Tensor<T>& a);

// Converts precision; the result is a new leaf (no gradient path).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a, bool requires_grad = false);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }

// Central differences of a scalar function, one coordinate at a time.
template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T(const std::vector<T>&)>& f,
                                          std::vector<T> x, T h);

}  // namespace maskrestore
