#include "maskrestore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "maskrestore/kernels.hpp"

namespace maskrestore {

std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <typename T>
std::span<T> Node<T>::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
}

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor() : node_(std::make_shared<Node<T>>()) {
    node_->shape = {};
    node_->value = {T(0)};
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value.assign(numel_of(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (numel_of(shape) != values.size())
        throw ShapeError("tensor shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
    return from(shape(), node_->value, requires_grad);
}

template <typename T>
bool Graph<T>::contains(const Node<T>* node) const {
    return std::find(order.begin(), order.end(), node) != order.end();
}

template <typename T>
Graph<T> trace(const Tensor<T>& output) {
    Graph<T> graph;
    std::unordered_set<const Node<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(output.node(), 0);
    seen.insert(output.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            graph.order.push_back(node);
            stack.pop_back();
        }
    }
    return graph;
}

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw ShapeError("backward() needs a scalar output, got shape " + to_string(shape()));
    if (!requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");
    const Graph<T> graph = trace(*this);
    for (Node<T>* node : graph.order)
        if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
    auto root_grad = node_->ensure_grad();
    if (node_->is_leaf())
        root_grad[0] += T(1);
    else
        root_grad[0] = T(1);
    for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && node->requires_grad) node->backward(*node);
    }
}

// ---------------------------------------------------------------- helpers

namespace {

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(Node<T>&)> backward, const char* op) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool any = false;
    for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
    if (any) {
        node->requires_grad = true;
        for (const Tensor<T>* in : inputs) node->parents.push_back(in->node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> record_many(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward, const char* op) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
std::span<T> parent_grad(Node<T>& self, std::size_t i) {
    Node<T>& p = *self.parents[i];
    if (!p.requires_grad) return {};
    return p.ensure_grad();
}

struct BroadcastPlan {
    Shape out;
    bool same = false;
    std::vector<std::size_t> ia, ib;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.same = true;
        return plan;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(rank - b.size()));
    plan.out.resize(rank);
    for (std::size_t d = 0; d < rank; ++d) {
        if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
        plan.out[d] = std::max(pa[d], pb[d]);
    }
    std::vector<std::size_t> sa(rank), sb(rank);
    std::size_t ra = 1, rb = 1;
    for (std::size_t d = rank; d-- > 0;) {
        sa[d] = pa[d] == 1 ? 0 : ra;
        sb[d] = pb[d] == 1 ? 0 : rb;
        ra *= pa[d];
        rb *= pb[d];
    }
    const std::size_t n = numel_of(plan.out);
    plan.ia.resize(n);
    plan.ib.resize(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t offa = 0, offb = 0;
    for (std::size_t k = 0; k < n; ++k) {
        plan.ia[k] = offa;
        plan.ib[k] = offb;
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < plan.out[d]) {
                offa += sa[d];
                offb += sb[d];
                break;
            }
            offa -= sa[d] * (plan.out[d] - 1);
            offb -= sb[d] * (plan.out[d] - 1);
            idx[d] = 0;
        }
    }
    return plan;
}

enum class BinaryKind { add, sub, mul, div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), op));
    const std::size_t n = numel_of(plan->out);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<T> out(n);
    auto apply = [kind](T x, T y) {
        switch (kind) {
            case BinaryKind::add: return x + y;
            case BinaryKind::sub: return x - y;
            case BinaryKind::mul: return x * y;
            case BinaryKind::div: return x / y;
        }
        return T(0);
    };
    if (plan->same) {
        for (std::size_t k = 0; k < n; ++k) out[k] = apply(av[k], bv[k]);
    } else {
        for (std::size_t k = 0; k < n; ++k) out[k] = apply(av[plan->ia[k]], bv[plan->ib[k]]);
    }
    return record<T>(
        plan->out, std::move(out), {&a, &b},
        [plan, kind](Node<T>& self) {
            const auto g = std::span<const T>(self.grad);
            const auto& av = self.parents[0]->value;
            const auto& bv = self.parents[1]->value;
            auto ga = parent_grad(self, 0);
            auto gb = parent_grad(self, 1);
            const std::size_t n = g.size();
            auto ia = [&](std::size_t k) { return plan->same ? k : plan->ia[k]; };
            auto ib = [&](std::size_t k) { return plan->same ? k : plan->ib[k]; };
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = ia(k), j = ib(k);
                switch (kind) {
                    case BinaryKind::add:
                        if (!ga.empty()) ga[i] += g[k];
                        if (!gb.empty()) gb[j] += g[k];
                        break;
                    case BinaryKind::sub:
                        if (!ga.empty()) ga[i] += g[k];
                        if (!gb.empty()) gb[j] -= g[k];
                        break;
                    case BinaryKind::mul:
                        if (!ga.empty()) ga[i] += g[k] * bv[j];
                        if (!gb.empty()) gb[j] += g[k] * av[i];
                        break;
                    case BinaryKind::div:
                        if (!ga.empty()) ga[i] += g[k] / bv[j];
                        if (!gb.empty()) gb[j] -= g[k] * av[i] / (bv[j] * bv[j]);
                        break;
                }
            }
        },
        op);
}

// Unary op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D df, const char* op) {
    const auto av = a.data();
    std::vector<T> out(av.size());
    for (std::size_t k = 0; k < av.size(); ++k) out[k] = f(av[k]);
    return record<T>(
        a.shape(), std::move(out), {&a},
        [df](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            const auto& x = self.parents[0]->value;
            for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += self.grad[k] * df(x[k], self.value[k]);
        },
        op);
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::add, "add"); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::sub, "sub"); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::mul, "mul"); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::div, "div"); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); }, "add_scalar");
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; }, "mul_scalar");
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, "log");
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    return unary(
        a, [](T x) { return std::abs(x); }, [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); },
        "abs");
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; }, "square");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary(
        a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.data()) s += v;
    return record<T>(
        {}, {s}, {&a},
        [](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (auto& v : ga) v += self.grad[0];
        },
        "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    const T inv = T(1) / static_cast<T>(a.numel());
    T s = T(0);
    for (T v : a.data()) s += v;
    return record<T>(
        {}, {s * inv}, {&a},
        [inv](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (auto& v : ga) v += self.grad[0] * inv;
        },
        "mean");
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
    if (a.rank() != 3 && a.rank() != 4)
        throw ShapeError("global_avg_pool expects [C,H,W] or [N,C,H,W], got " + to_string(a.shape()));
    const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
    if (h == 0 || w == 0) throw ShapeError("global_avg_pool on empty spatial extent");
    const std::size_t plane = h * w;
    const std::size_t planes = a.numel() / plane;
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    std::vector<T> out(planes);
    const auto av = a.data();
    for (std::size_t p = 0; p < planes; ++p) {
        T s = T(0);
        for (std::size_t k = 0; k < plane; ++k) s += av[p * plane + k];
        out[p] = s / static_cast<T>(plane);
    }
    return record<T>(
        out_shape, std::move(out), {&a},
        [plane](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (std::size_t p = 0; p < self.grad.size(); ++p) {
                const T g = self.grad[p] / static_cast<T>(plane);
                for (std::size_t k = 0; k < plane; ++k) ga[p * plane + k] += g;
            }
        },
        "global_avg_pool");
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
    return record<T>(
        std::move(shape), a.to_vector(), {&a},
        [](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += self.grad[k];
        },
        "reshape");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<T> out(r * c);
    const auto av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return record<T>(
        {c, r}, std::move(out), {&a},
        [r, c](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
        },
        "transpose");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range for " + to_string(first));
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw ShapeError("concat shape mismatch: " + to_string(first) + " vs " + to_string(s));
        total += s[axis];
    }
    Shape out_shape = first;
    out_shape[axis] = total;
    const std::size_t outer = numel_of(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
    const std::size_t inner = numel_of(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
    std::vector<T> out(numel_of(out_shape));
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[axis] * inner;
        const auto pv = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(pv.begin() + static_cast<long>(o * len), pv.begin() + static_cast<long>((o + 1) * len),
                      out.begin() + static_cast<long>(o * total * inner + offset));
        widths.push_back(len);
        offset += len;
    }
    return record_many<T>(
        out_shape, std::move(out), parts,
        [widths, outer, total, inner](Node<T>& self) {
            std::size_t offset = 0;
            for (std::size_t i = 0; i < widths.size(); ++i) {
                auto gp = parent_grad(self, i);
                const std::size_t len = widths[i];
                if (!gp.empty())
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t k = 0; k < len; ++k) gp[o * len + k] += self.grad[o * total * inner + offset + k];
                offset += len;
            }
        },
        "concat");
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = a.shape();
    if (axis >= s.size() || start + length > s[axis])
        throw ShapeError("narrow(" + std::to_string(axis) + ", " + std::to_string(start) + ", " +
                         std::to_string(length) + ") out of range for " + to_string(s));
    Shape out_shape = s;
    out_shape[axis] = length;
    const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t inner = numel_of(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    const std::size_t full = s[axis] * inner, part = length * inner, skip = start * inner;
    std::vector<T> out(outer * part);
    const auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(av.begin() + static_cast<long>(o * full + skip), av.begin() + static_cast<long>(o * full + skip + part),
                  out.begin() + static_cast<long>(o * part));
    return record<T>(
        out_shape, std::move(out), {&a},
        [outer, full, part, skip](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < part; ++k) ga[o * full + skip + k] += self.grad[o * part + k];
        },
        "narrow");
}

template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::span<const std::size_t> indices) {
    auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
    std::vector<T> out(idx->size());
    const auto av = a.data();
    for (std::size_t k = 0; k < idx->size(); ++k) {
        if ((*idx)[k] >= av.size())
            throw ShapeError("gather index " + std::to_string((*idx)[k]) + " out of range for " + to_string(a.shape()));
        out[k] = av[(*idx)[k]];
    }
    return record<T>(
        {idx->size()}, std::move(out), {&a},
        [idx](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (std::size_t k = 0; k < idx->size(); ++k) ga[(*idx)[k]] += self.grad[k];
        },
        "gather");
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
    if (image.rank() != 3) throw ShapeError("patchify expects [C,H,W], got " + to_string(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError("patch size " + std::to_string(patch) + " does not divide " + to_string(image.shape()));
    const std::size_t th = h / patch, tw = w / patch;
    const std::size_t tokens = th * tw, features = c * patch * patch;
    // map[token*features + f] = flat image index
    auto map = std::make_shared<std::vector<std::size_t>>(tokens * features);
    for (std::size_t ty = 0; ty < th; ++ty)
        for (std::size_t tx = 0; tx < tw; ++tx)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t py = 0; py < patch; ++py)
                    for (std::size_t px = 0; px < patch; ++px) {
                        const std::size_t t = ty * tw + tx;
                        const std::size_t f = (ch * patch + py) * patch + px;
                        (*map)[t * features + f] = (ch * h + ty * patch + py) * w + tx * patch + px;
                    }
    std::vector<T> out(map->size());
    const auto av = image.data();
    for (std::size_t k = 0; k < map->size(); ++k) out[k] = av[(*map)[k]];
    return record<T>(
        {tokens, features}, std::move(out), {&image},
        [map](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            for (std::size_t k = 0; k < map->size(); ++k) ga[(*map)[k]] += self.grad[k];
        },
        "patchify");
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    kernels::gemm(m, n, k, a.data().data(), k, b.data().data(), n, out.data(), n);
    return record<T>(
        {m, n}, std::move(out), {&a, &b},
        [m, k, n](Node<T>& self) {
            const auto& av = self.parents[0]->value;
            const auto& bv = self.parents[1]->value;
            auto ga = parent_grad(self, 0);
            auto gb = parent_grad(self, 1);
            if (!ga.empty()) {  // ga[m,k] += g[m,n] * b^T[n,k]
                std::vector<T> bt(n * k);
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = bv[i * n + j];
                kernels::gemm(m, k, n, self.grad.data(), n, bt.data(), k, ga.data(), k);
            }
            if (!gb.empty()) {  // gb[k,n] += a^T[k,m] * g[m,n]
                std::vector<T> at(k * m);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < k; ++j) at[j * m + i] = av[i * k + j];
                kernels::gemm(k, n, m, at.data(), m, self.grad.data(), n, gb.data(), n);
            }
        },
        "matmul");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for " + to_string(s));
    const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t len = s[axis];
    const std::size_t inner = numel_of(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    const auto av = a.data();
    std::vector<T> out(av.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, av[base + k * inner]);
            T total = T(0);
            for (std::size_t k = 0; k < len; ++k) {
                const T e = std::exp(av[base + k * inner] - mx);
                out[base + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
        }
    return record<T>(
        s, std::move(out), {&a},
        [outer, len, inner](Node<T>& self) {
            auto ga = parent_grad(self, 0);
            const auto& y = self.value;
            const auto& g = self.grad;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * len * inner + i;
                    T dot = T(0);
                    for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k)
                        ga[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
                }
        },
        "softmax");
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t padding,
                 std::size_t stride) {
    if (input.rank() != 3 && input.rank() != 4)
        throw ShapeError("conv2d input must be [C,H,W] or [N,C,H,W], got " + to_string(input.shape()));
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3))
        throw ShapeError("conv2d weight must be [Co,Ci,k,k], got " + to_string(weight.shape()));
    const bool batched = input.rank() == 4;
    kernels::ConvGeometry g;
    g.batch = batched ? input.dim(0) : 1;
    g.in_channels = input.dim(batched ? 1 : 0);
    g.height = input.dim(batched ? 2 : 1);
    g.width = input.dim(batched ? 3 : 2);
    g.out_channels = weight.dim(0);
    g.kernel = weight.dim(2);
    g.stride = stride;
    g.padding = padding;
    if (weight.dim(1) != g.in_channels)
        throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) + ", weight " +
                         to_string(weight.shape()));
    if (g.kernel % 2 == 0) throw ShapeError("conv2d kernel size must be odd, got " + std::to_string(g.kernel));
    if (stride == 0 || g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel)
        throw ShapeError("conv2d geometry invalid for input " + to_string(input.shape()));
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels))
        throw ShapeError("conv2d bias shape " + to_string(bias->shape()) + " does not match " +
                         std::to_string(g.out_channels) + " output channels");
    Shape out_shape = batched ? Shape{g.batch, g.out_channels, g.out_height(), g.out_width()}
                              : Shape{g.out_channels, g.out_height(), g.out_width()};
    std::vector<T> out(numel_of(out_shape));
    kernels::conv2d_forward(g, input.data().data(), weight.data().data(), bias ? bias->data().data() : nullptr,
                            out.data());
    const bool has_bias = bias != nullptr;
    auto backward = [g, has_bias](Node<T>& self) {
        auto gi = parent_grad(self, 0);
        auto gw = parent_grad(self, 1);
        std::span<T> gb;
        if (has_bias) gb = parent_grad(self, 2);
        kernels::conv2d_backward(g, self.parents[0]->value.data(), self.parents[1]->value.data(), self.grad.data(),
                                 gi.empty() ? nullptr : gi.data(), gw.empty() ? nullptr : gw.data(),
                                 gb.empty() ? nullptr : gb.data());
    };
    if (bias) return record<T>(out_shape, std::move(out), {&input, &weight, bias}, backward, "conv2d");
    return record<T>(out_shape, std::move(out), {&input, &weight}, backward, "conv2d");
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
    if (input.rank() != 3 && input.rank() != 4)
        throw ShapeError("resize_bilinear expects [C,H,W] or [N,C,H,W], got " + to_string(input.shape()));
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear to empty size");
    const std::size_t in_h = input.dim(input.rank() - 2), in_w = input.dim(input.rank() - 1);
    const std::size_t planes = input.numel() / (in_h * in_w);
    Shape out_shape = input.shape();
    out_shape[out_shape.size() - 2] = out_h;
    out_shape[out_shape.size() - 1] = out_w;
    std::vector<T> out(planes * out_h * out_w);
    kernels::resize_bilinear_forward(planes, in_h, in_w, out_h, out_w, input.data().data(), out.data());
    return record<T>(
        out_shape, std::move(out), {&input},
        [planes, in_h, in_w, out_h, out_w](Node<T>& self) {
            auto gi = parent_grad(self, 0);
            kernels::resize_bilinear_backward(planes, in_h, in_w, out_h, out_w, self.grad.data(), gi.data());
        },
        "resize_bilinear");
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    auto t = Tensor<T>::from(a.shape(), a.to_vector(), false);
    t.node()->op = "detach";
    return t;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a, bool requires_grad) {
    const auto av = a.data();
    std::vector<To> out(av.size());
    for (std::size_t k = 0; k < av.size(); ++k) out[k] = static_cast<To>(av[k]);
    return Tensor<To>::from(a.shape(), std::move(out), requires_grad);
}

template <typename T>
std::vector<T> finite_difference_gradient(const std::function<T(const std::vector<T>&)>& f, std::vector<T> x,
                                          T h) {
    if (!(h > T(0))) throw std::invalid_argument("finite difference step must be positive");
    std::vector<T> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T saved = x[i];
        x[i] = saved + h;
        const T up = f(x);
        x[i] = saved - h;
        const T down = f(x);
        x[i] = saved;
        grad[i] = (up - down) / (T(2) * h);
    }
    return grad;
}

// ---------------------------------------------------------------- instantiation

#define MASKRESTORE_INSTANTIATE_TENSOR(T)                                                                        \
    template struct Node<T>;                                                                                     \
    template class Tensor<T>;                                                                                    \
    template struct Graph<T>;                                                                                    \
    template Graph<T> trace<T>(const Tensor<T>&);                                                                \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                       \
    template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                                       \
    template Tensor<T> neg<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> exp<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> log<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> abs<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> square<T>(const Tensor<T>&);                                                              \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                                \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                             \
    template Tensor<T> tanh<T>(const Tensor<T>&);                                                                \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                                 \
    template Tensor<T> mean<T>(const Tensor<T>&);                                                                \
    template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                                     \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                      \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                                           \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                                    \
    template Tensor<T> narrow<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                       \
    template Tensor<T> gather<T>(const Tensor<T>&, std::span<const std::size_t>);                                \
    template Tensor<T> patchify<T>(const Tensor<T>&, std::size_t);                                               \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                            \
    template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t, std::size_t); \
    template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::size_t, std::size_t);                           \
    template Tensor<T> detach<T>(const Tensor<T>&);                                                              \
    template std::vector<T> finite_difference_gradient<T>(const std::function<T(const std::vector<T>&)>&,        \
                                                          std::vector<T>, T);

MASKRESTORE_INSTANTIATE_TENSOR(float)
MASKRESTORE_INSTANTIATE_TENSOR(double)

template Tensor<float> cast<float, double>(const Tensor<double>&, bool);
template Tensor<double> cast<double, float>(const Tensor<float>&, bool);
template Tensor<float> cast<float, float>(const Tensor<float>&, bool);
template Tensor<double> cast<double, double>(const Tensor<double>&, bool);

#undef MASKRESTORE_INSTANTIATE_TENSOR

}  // namespace maskrestore
