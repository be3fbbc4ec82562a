#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "t2i/common.hpp"
#include "t2i/rng.hpp"

namespace t2i {

using Shape = std::vector<int64_t>;

// Allocator whose no-argument construct default-initializes instead of
// value-initializing, so resize() can open storage without a zero pass.
// Used for buffers every consumer writes in full before reading.
template <class T>
struct RawAlloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = RawAlloc<U>;
    };
    using std::allocator<T>::allocator;
    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using FloatBuf = std::vector<float, RawAlloc<float>>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        check_dim(d >= 0, "negative dimension");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major f32 tensor. Copying a Tensor copies the handle, not the
// buffer. The gradient buffer is allocated on first use and lives alongside
// the data so a tensor's grad survives as long as any handle does.
struct TensorData {
    Shape shape;
    FloatBuf data;
    FloatBuf grad;
    bool requires_grad = false;
};

struct Tensor {
    std::shared_ptr<TensorData> d;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d = std::make_shared<TensorData>();
        t.d->shape = std::move(shape);
        t.d->data.assign(static_cast<size_t>(shape_numel(t.d->shape)), 0.0f);
        t.d->requires_grad = requires_grad;
        return t;
    }

    // Storage left uninitialized. Callers must write every element before
    // the tensor is read; ops use this for results they cover in full.
    static Tensor uninit(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d = std::make_shared<TensorData>();
        t.d->shape = std::move(shape);
        t.d->data.resize(static_cast<size_t>(shape_numel(t.d->shape)));
        t.d->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.d->data) x = v;
        return t;
    }

    static Tensor from(const std::vector<float>& values, Shape shape, bool requires_grad = false) {
        check_dim(static_cast<int64_t>(values.size()) == shape_numel(shape),
                  "value count does not match shape " + shape_str(shape));
        Tensor t;
        t.d = std::make_shared<TensorData>();
        t.d->shape = std::move(shape);
        t.d->data.assign(values.begin(), values.end());
        t.d->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(Rng& rng, Shape shape, float stddev = 1.0f, bool requires_grad = false) {
        Tensor t = uninit(std::move(shape), requires_grad);
        for (auto& x : t.d->data) x = stddev * rng.gaussian();
        return t;
    }

    bool defined() const { return static_cast<bool>(d); }
    const Shape& shape() const { return d->shape; }
    int64_t rank() const { return static_cast<int64_t>(d->shape.size()); }
    int64_t dim(int64_t i) const {
        if (i < 0) i += rank();
        check_dim(i >= 0 && i < rank(), "dim index out of range");
        return d->shape[static_cast<size_t>(i)];
    }
    int64_t numel() const { return static_cast<int64_t>(d->data.size()); }

    float* data() { return d->data.data(); }
    const float* data() const { return d->data.data(); }

    bool requires_grad() const { return d && d->requires_grad; }
    void set_requires_grad(bool v) { d->requires_grad = v; }

    bool has_grad() const { return d && !d->grad.empty(); }
    // Allocates (zero-filled) on first access.
    float* grad() {
        if (d->grad.empty()) d->grad.assign(d->data.size(), 0.0f);
        return d->grad.data();
    }
    const float* grad() const {
        check(!d->grad.empty(), "gradient not allocated");
        return d->grad.data();
    }
    void zero_grad() {
        if (!d->grad.empty()) std::fill(d->grad.begin(), d->grad.end(), 0.0f);
    }

    float item() const {
        check_dim(numel() == 1, "item() requires a single-element tensor");
        return d->data[0];
    }

    Tensor clone() const {
        Tensor t;
        t.d = std::make_shared<TensorData>();
        t.d->shape = d->shape;
        t.d->data = d->data;
        t.d->requires_grad = d->requires_grad;
        return t;
    }

    // Deep copy under a new shape with equal element count.
    Tensor reshaped(Shape shape) const {
        check_dim(shape_numel(shape) == numel(), "reshape changes element count");
        Tensor t = clone();
        t.d->shape = std::move(shape);
        return t;
    }

    bool same_storage(const Tensor& o) const { return d.get() == o.d.get(); }
};

}  // namespace t2i
