#pragma once

#include <cassert>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidit {

// Vector storage that skips value-initialization on resize; op outputs are
// fully overwritten, so zeroing them first just doubles memory traffic.
template <class T, class A = std::allocator<T>>
struct uninit_allocator : A {
    template <class U>
    struct rebind {
        using other = uninit_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
    };
    using A::A;
    template <class U>
    void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(ptr)) U;
    }
    template <class U, class... Args>
    void construct(U* ptr, Args&&... args) {
        std::allocator_traits<A>::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
    }
};

template <class S>
using RawBuffer = std::vector<S, uninit_allocator<S>>;

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class S>
struct TensorStorage {
    Shape shape;
    RawBuffer<S> value;
    RawBuffer<S> grad;  // lazily allocated, same numel as value
    bool requires_grad = false;
};

// Value-semantics handle over shared storage. Ops return fresh tensors;
// gradients accumulate into storage during Tape::backward().
template <class S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    // storage left uninitialized; caller overwrites every element
    static Tensor uninit(Shape shape) {
        Tensor t;
        t.p_ = std::make_shared<TensorStorage<S>>();
        t.p_->shape = std::move(shape);
        t.p_->value.resize(static_cast<size_t>(shape_numel(t.p_->shape)));
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.p_ = std::make_shared<TensorStorage<S>>();
        t.p_->shape = std::move(shape);
        t.p_->value.assign(static_cast<size_t>(shape_numel(t.p_->shape)), S(0));
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, S fill, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (S& x : t.p_->value) x = fill;
        return t;
    }

    static Tensor from_data(Shape shape, const std::vector<S>& data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data size " +
                             std::to_string(data.size()));
        Tensor t = uninit(std::move(shape));
        std::copy(data.begin(), data.end(), t.p_->value.begin());
        t.p_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int64_t numel() const { return static_cast<int64_t>(p_->value.size()); }
    int rank() const { return static_cast<int>(p_->shape.size()); }

    // dim(-1) is the trailing extent
    int64_t dim(int i) const {
        int r = rank();
        if (i < 0) i += r;
        return p_->shape[static_cast<size_t>(i)];
    }

    // The handle is pointer-like: a const Tensor still exposes mutable
    // storage, so backward closures can accumulate through captured copies.
    S* data() const { return p_->value.data(); }
    S at(int64_t i) const { return p_->value[static_cast<size_t>(i)]; }

    bool requires_grad() const { return p_ && p_->requires_grad; }
    void set_requires_grad(bool rg) const { p_->requires_grad = rg; }

    bool has_grad() const { return !p_->grad.empty(); }
    S* grad() const {
        ensure_grad();
        return p_->grad.data();
    }
    void ensure_grad() const {
        if (p_->grad.empty()) p_->grad.assign(p_->value.size(), S(0));
    }
    void zero_grad() const {
        if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), S(0));
    }
    void drop_grad() const {
        p_->grad.clear();
        p_->grad.shrink_to_fit();
    }

    // same storage identity (used by bitwise-sharing checks in tests)
    bool same_storage(const Tensor& o) const { return p_ == o.p_; }

private:
    std::shared_ptr<TensorStorage<S>> p_;
};

// Reverse-mode tape. Ops executed under an active tape append a backward
// closure; backward() replays them last-to-first.
template <class S>
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    void backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    size_t size() const { return nodes_.size(); }
    void clear() {
        nodes_.clear();
        nodes_.shrink_to_fit();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

template <class S>
inline Tape<S>*& active_tape() {
    thread_local Tape<S>* tape = nullptr;
    return tape;
}

template <class S>
struct TapeScope {
    Tape<S>* prev;
    explicit TapeScope(Tape<S>& t) : prev(active_tape<S>()) { active_tape<S>() = &t; }
    ~TapeScope() { active_tape<S>() = prev; }
};

template <class S>
struct NoGradScope {
    Tape<S>* prev;
    NoGradScope() : prev(active_tape<S>()) { active_tape<S>() = nullptr; }
    ~NoGradScope() { active_tape<S>() = prev; }
};

namespace detail {

template <class S>
inline bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
    if (!active_tape<S>()) return false;
    for (const Tensor<S>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class S, class F>
inline void mark_and_record(Tensor<S>& out, bool trace, F&& fn) {
    if (trace) {
        out.set_requires_grad(true);
        active_tape<S>()->record(std::forward<F>(fn));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

template <class S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "add");
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    bool trace = detail::tracing<S>({&a, &b});
    detail::mark_and_record(out, trace, [a, b, out]() mutable {
        const S* g = out.grad();
        int64_t n = out.numel();
        if (a.requires_grad()) {
            S* ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            S* gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "sub");
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    bool trace = detail::tracing<S>({&a, &b});
    detail::mark_and_record(out, trace, [a, b, out]() mutable {
        const S* g = out.grad();
        int64_t n = out.numel();
        if (a.requires_grad()) {
            S* ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            S* gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mul");
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    bool trace = detail::tracing<S>({&a, &b});
    detail::mark_and_record(out, trace, [a, b, out]() mutable {
        const S* g = out.grad();
        int64_t n = out.numel();
        if (a.requires_grad()) {
            S* ga = a.grad();
            const S* pb = b.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
        }
        if (b.requires_grad()) {
            S* gb = b.grad();
            const S* pa = a.data();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
        }
    });
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S* pa = a.data();
    S* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    bool trace = detail::tracing<S>({&a});
    detail::mark_and_record(out, trace, [a, out, c]() mutable {
        const S* g = out.grad();
        S* ga = a.grad();
        int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
    return out;
}

// bias over the trailing dimension: out[..., j] = x[..., j] + b[j]
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    int64_t d = x.dim(-1);
    if (b.rank() != 1 || b.dim(0) != d)
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " vs trailing dim " + std::to_string(d));
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    int64_t rows = x.numel() / d;
    const S* px = x.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
    bool trace = detail::tracing<S>({&x, &b});
    detail::mark_and_record(out, trace, [x, b, out, rows, d]() mutable {
        const S* g = out.grad();
        if (x.requires_grad()) {
            S* gx = x.grad();
            int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        }
        if (b.requires_grad()) {
            S* gb = b.grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
    });
    return out;
}

// out has new_shape, same numel; data copied so storages stay independent
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    Tensor<S> out = Tensor<S>::uninit(std::move(new_shape));
    std::copy(x.data(), x.data() + x.numel(), out.data());
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out]() mutable {
        const S* g = out.grad();
        S* gx = x.grad();
        int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    return out;
}

// concatenate along axis; all inputs must agree on the other extents
template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    Shape out_shape = xs[0].shape();
    int r = static_cast<int>(out_shape.size());
    if (axis < 0) axis += r;
    int64_t total = 0;
    for (const auto& x : xs) {
        if (x.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && x.shape()[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)])
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(i));
        total += x.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor<S> out = Tensor<S>::uninit(out_shape);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

    S* po = out.data();
    int64_t out_stride = total * inner;
    int64_t offset = 0;
    for (const auto& x : xs) {
        int64_t ax = x.dim(axis);
        const S* px = x.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(px + o * ax * inner, px + (o + 1) * ax * inner,
                      po + o * out_stride + offset * inner);
        offset += ax;
    }

    bool trace = false;
    for (const auto& x : xs)
        if (x.requires_grad()) trace = true;
    if (active_tape<S>() && trace) {
        std::vector<Tensor<S>> inputs = xs;
        out.set_requires_grad(true);
        active_tape<S>()->record([inputs, out, outer, inner, total, axis]() mutable {
            const S* g = out.grad();
            int64_t out_stride = total * inner;
            int64_t offset = 0;
            for (auto& x : inputs) {
                int64_t ax = x.dim(axis);
                if (x.requires_grad()) {
                    S* gx = x.grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const S* src = g + o * out_stride + offset * inner;
                        S* dst = gx + o * ax * inner;
                        for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += ax;
            }
        });
    }
    return out;
}

// rows [begin, end) along axis 1 of a [B, L, ...] tensor
template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, int64_t begin, int64_t end) {
    if (x.rank() < 2) throw ShapeError("slice_rows: rank < 2");
    int64_t L = x.dim(1);
    if (begin < 0 || end > L || begin >= end)
        throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for L=" + std::to_string(L));
    Shape out_shape = x.shape();
    out_shape[1] = end - begin;
    Tensor<S> out = Tensor<S>::uninit(out_shape);
    int64_t B = x.dim(0);
    int64_t inner = x.numel() / (B * L);
    const S* px = x.data();
    S* po = out.data();
    int64_t keep = end - begin;
    for (int64_t b = 0; b < B; ++b)
        std::copy(px + (b * L + begin) * inner, px + (b * L + end) * inner, po + b * keep * inner);
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, B, L, inner, begin, keep]() mutable {
        const S* g = out.grad();
        S* gx = x.grad();
        for (int64_t b = 0; b < B; ++b) {
            const S* src = g + b * keep * inner;
            S* dst = gx + (b * L + begin) * inner;
            for (int64_t i = 0; i < keep * inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// mean over every element -> scalar tensor []
template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(Shape{});
    const S* px = x.data();
    int64_t n = x.numel();
    S acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc / static_cast<S>(n);
    bool trace = detail::tracing<S>({&x});
    detail::mark_and_record(out, trace, [x, out, n]() mutable {
        S g = out.grad()[0] / static_cast<S>(n);
        S* gx = x.grad();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

// mean squared error between same-shape tensors -> scalar
template <class S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape(a, b, "mse");
    Tensor<S> out = Tensor<S>::zeros(Shape{});
    const S* pa = a.data();
    const S* pb = b.data();
    int64_t n = a.numel();
    S acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        S d = pa[i] - pb[i];
        acc += d * d;
    }
    out.data()[0] = acc / static_cast<S>(n);
    bool trace = detail::tracing<S>({&a, &b});
    detail::mark_and_record(out, trace, [a, b, out, n]() mutable {
        S g = out.grad()[0] * S(2) / static_cast<S>(n);
        const S* pa = a.data();
        const S* pb = b.data();
        if (a.requires_grad()) {
            S* ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += g * (pa[i] - pb[i]);
        }
        if (b.requires_grad()) {
            S* gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g * (pa[i] - pb[i]);
        }
    });
    return out;
}

// value copy with no autograd edge
template <class S>
Tensor<S> detach(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    std::copy(x.data(), x.data() + x.numel(), out.data());
    return out;
}

}  // namespace lidit
