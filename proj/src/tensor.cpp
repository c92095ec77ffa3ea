#include "stnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace stnet {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace {

std::shared_ptr<TensorImpl> alloc_impl(Shape shape, DType dtype) {
    for (int64_t d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    const size_t n = static_cast<size_t>(impl->numel());
    if (dtype == DType::F32)
        impl->f32.assign(n, 0.0f);
    else
        impl->f64.assign(n, 0.0);
    return impl;
}

thread_local bool g_grad_enabled = true;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(alloc_impl(std::move(shape), dtype)); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    t.fill_(value);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    if (static_cast<int64_t>(values.size()) != t.numel())
        throw std::invalid_argument("from_values: value count does not match shape");
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, values[static_cast<size_t>(i)]);
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("shape() on undefined tensor");
    return impl_->shape;
}

int64_t Tensor::numel() const { return impl_ ? impl_->numel() : 0; }

DType Tensor::dtype() const {
    if (!impl_) throw std::logic_error("dtype() on undefined tensor");
    return impl_->dtype;
}

template <>
std::span<float> Tensor::data<float>() {
    if (dtype() != DType::F32) throw std::logic_error("tensor is not f32");
    return {impl_->f32.data(), impl_->f32.size()};
}
template <>
std::span<double> Tensor::data<double>() {
    if (dtype() != DType::F64) throw std::logic_error("tensor is not f64");
    return {impl_->f64.data(), impl_->f64.size()};
}
template <>
std::span<const float> Tensor::data<float>() const {
    if (dtype() != DType::F32) throw std::logic_error("tensor is not f32");
    return {impl_->f32.data(), impl_->f32.size()};
}
template <>
std::span<const double> Tensor::data<double>() const {
    if (dtype() != DType::F64) throw std::logic_error("tensor is not f64");
    return {impl_->f64.data(), impl_->f64.size()};
}

double Tensor::at(int64_t i) const {
    return dtype() == DType::F32 ? static_cast<double>(impl_->f32[static_cast<size_t>(i)])
                                 : impl_->f64[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
    if (dtype() == DType::F32)
        impl_->f32[static_cast<size_t>(i)] = static_cast<float>(v);
    else
        impl_->f64[static_cast<size_t>(i)] = v;
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor, shape is " + shape_str(shape()));
    return at(0);
}

Tensor Tensor::clone() const {
    Tensor t = zeros(shape(), dtype());
    t.copy_from(*this);
    return t;
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype()) return clone();
    Tensor t = zeros(shape(), dt);
    for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
    return t;
}

void Tensor::fill_(double v) {
    if (dtype() == DType::F32)
        std::fill(impl_->f32.begin(), impl_->f32.end(), static_cast<float>(v));
    else
        std::fill(impl_->f64.begin(), impl_->f64.end(), v);
}

void Tensor::copy_from(const Tensor& src) {
    if (shape() != src.shape() || dtype() != src.dtype())
        throw std::invalid_argument("copy_from: shape/dtype mismatch");
    if (dtype() == DType::F32)
        impl_->f32 = src.impl_->f32;
    else
        impl_->f64 = src.impl_->f64;
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

bool Tensor::tracked() const { return impl_ && (impl_->requires_grad || impl_->node != nullptr); }

Tensor Tensor::grad() const {
    if (!impl_ || !impl_->grad) return {};
    return Tensor(impl_->grad);
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.reset();
}

Tensor Tensor::detached() const {
    if (!impl_) return {};
    auto copy = std::make_shared<TensorImpl>();
    copy->shape = impl_->shape;
    copy->dtype = impl_->dtype;
    copy->f32 = impl_->f32;
    copy->f64 = impl_->f64;
    return Tensor(copy);
}

void Tensor::check_finite(const std::string& what) const {
    auto bad = [&](double v) { return !std::isfinite(v); };
    if (dtype() == DType::F32) {
        for (float v : impl_->f32)
            if (bad(v)) throw std::runtime_error("non-finite value in " + what);
    } else {
        for (double v : impl_->f64)
            if (bad(v)) throw std::runtime_error("non-finite value in " + what);
    }
}

TensorImpl& grad_buffer(TensorImpl& t) {
    if (!t.grad) {
        auto g = std::make_shared<TensorImpl>();
        g->shape = t.shape;
        g->dtype = t.dtype;
        if (t.dtype == DType::F32)
            g->f32.assign(t.f32.size(), 0.0f);
        else
            g->f64.assign(t.f64.size(), 0.0);
        t.grad = std::move(g);
    }
    return *t.grad;
}

void accumulate_grad(TensorImpl& t, const TensorImpl& delta) {
    TensorImpl& g = grad_buffer(t);
    if (t.dtype == DType::F32) {
        for (size_t i = 0; i < g.f32.size(); ++i) g.f32[i] += delta.f32[i];
    } else {
        for (size_t i = 0; i < g.f64.size(); ++i) g.f64[i] += delta.f64[i];
    }
}

Tensor make_op_output(Shape shape, DType dtype, std::vector<Tensor> inputs,
                      std::function<void(TensorImpl&)> backward) {
    auto out = alloc_impl(std::move(shape), dtype);
    if (grad_enabled()) {
        bool any_tracked = false;
        for (const Tensor& in : inputs) any_tracked |= in.tracked();
        if (any_tracked) {
            auto node = std::make_shared<AutogradNode>();
            for (Tensor& in : inputs)
                if (in.defined()) node->parents.push_back(in.impl());
            node->backward = std::move(backward);
            out->node = std::move(node);
        }
    }
    return Tensor(out);
}

void Tensor::backward() {
    if (!impl_) throw std::invalid_argument("backward() on undefined tensor");
    if (numel() != 1) throw std::invalid_argument("backward() requires a scalar loss, shape is " + shape_str(shape()));
    if (!tracked()) throw std::invalid_argument("backward() on a tensor detached from any graph");

    // topological order over producing nodes (iterative post-order DFS)
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    if (impl_->node) {
        if (impl_->node->consumed) throw std::logic_error("backward() already ran on this graph; build a fresh forward pass");
        stack.emplace_back(impl_.get(), 0);
        seen.insert(impl_.get());
    }
    while (!stack.empty()) {
        auto& [t, idx] = stack.back();
        if (!t->node || idx >= t->node->parents.size()) {
            if (t->node) order.push_back(t);
            stack.pop_back();
            continue;
        }
        TensorImpl* parent = t->node->parents[idx++].get();
        if (parent->node && !seen.count(parent)) {
            if (parent->node->consumed)
                throw std::logic_error("backward() reached an already-consumed graph node; build a fresh forward pass");
            seen.insert(parent);
            stack.emplace_back(parent, 0);
        }
    }

    // seed d(loss)/d(loss) = 1
    TensorImpl& seed = grad_buffer(*impl_);
    if (impl_->dtype == DType::F32)
        seed.f32[0] = 1.0f;
    else
        seed.f64[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (t->grad) t->node->backward(*t);
        t->node->consumed = true;
    }
}

uint64_t Rng::next_u64() {
    // splitmix64
    state_ += 0x9E3779B97f4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller on open-interval uniforms
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

Rng Rng::fork(uint64_t stream) const {
    Rng base(state_ ^ (0xA0761D6478BD642FULL + stream * 0xE7037ED1A0B428DBULL));
    // burn one step so adjacent streams decorrelate
    base.next_u64();
    return base;
}

}  // namespace stnet
