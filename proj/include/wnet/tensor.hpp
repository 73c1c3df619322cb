#pragma once

#include <cstdint>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wnet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // same length as data iff requires_grad
};

// Dense row-major tensor handle. Copying a Tensor copies the handle, not
// the buffer; clone() makes a deep copy.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<std::size_t>(wnet::numel(t.impl_->shape)), T{0});
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (static_cast<std::int64_t>(values.size()) != wnet::numel(shape))
            throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    std::vector<T>& grad() { return impl_->grad; }
    const std::vector<T>& grad() const { return impl_->grad; }

    T item() const {
        if (numel() != 1)
            throw std::runtime_error("item(): tensor has " + std::to_string(numel()) +
                                     " elements, expected 1");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }

    void set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        if (rg)
            impl_->grad.assign(impl_->data.size(), T{0});
        else
            impl_->grad.clear();
    }

    void zero_grad() {
        if (impl_->requires_grad)
            std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
    }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>(*impl_);
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t = Tensor<U>::zeros(shape());
        for (std::size_t i = 0; i < impl_->data.size(); ++i)
            t.data()[i] = static_cast<U>(impl_->data[i]);
        return t;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

    bool same_shape(const Tensor& other) const { return shape() == other.shape(); }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
    if (!all_finite(t))
        throw std::runtime_error(std::string("non-finite values in ") + what);
}

// Reverse-mode tape. Ops append one node per recorded operation; backward
// replays the nodes in exact reverse recording order. Node outputs are
// zeroed before each replay so repeated backward calls accumulate into leaf
// gradients only.
template <typename T>
class Tape {
public:
    void record(std::shared_ptr<TensorImpl<T>> out, std::function<void()> fn) {
        nodes_.push_back({std::move(out), std::move(fn)});
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void run_backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw std::invalid_argument("backward: loss does not require grad");
        for (auto& n : nodes_)
            if (n.out->requires_grad)
                std::fill(n.out->grad.begin(), n.out->grad.end(), T{0});
        loss.impl()->grad[0] = T{1};
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            it->fn();
    }

private:
    struct Node {
        std::shared_ptr<TensorImpl<T>> out;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
    tape.run_backward(loss);
}

namespace detail {

template <typename T>
inline bool track(const Tape<T>* tape, bool any_input_grad) {
    return tape != nullptr && any_input_grad;
}

}  // namespace detail

// ---- small elementwise / reduction ops (used by losses and tests) ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i)
        out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::track(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (ai->requires_grad) ai->grad[i] += oi->grad[i];
                if (bi->requires_grad) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (!a.same_shape(b))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i)
        out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::track(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                if (ai->requires_grad) ai->grad[i] += oi->grad[i] * bi->data[i];
                if (bi->requires_grad) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c, Tape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i)
        out.data()[i] = a.data()[i] * c;
    if (detail::track(tape, a.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi, c] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                ai->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, Tape<T>* tape = nullptr) {
    T s{0};
    for (T v : a.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::track(tape, a.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi] {
            const T g = oi->grad[0];
            for (auto& gv : ai->grad) gv += g;
        });
    }
    return out;
}

// ---- RNG fills ----

template <typename T, typename Rng>
void fill_normal(Tensor<T>& t, T mean, T stddev, Rng& rng) {
    std::normal_distribution<double> dist(static_cast<double>(mean),
                                          static_cast<double>(stddev));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T, typename Rng>
void fill_uniform(Tensor<T>& t, T lo, T hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

}  // namespace wnet
