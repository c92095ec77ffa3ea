#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stnet {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }
inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl;

struct AutogradNode {
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl& out)> backward;
    bool consumed = false;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::F32;
    std::vector<float> f32;
    std::vector<double> f64;
    bool requires_grad = false;
    std::shared_ptr<TensorImpl> grad;
    std::shared_ptr<AutogradNode> node;

    int64_t numel() const { return shape_numel(shape); }
};

/// Dense row-major tensor handle. Image data uses N,C,H,W order.
/// Copying a Tensor copies the handle; clone() copies the buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dtype = DType::F32);
    static Tensor full(Shape shape, double value, DType dtype = DType::F32);
    static Tensor from_values(Shape shape, std::span<const double> values, DType dtype = DType::F32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    int64_t dim(int i) const { return shape()[static_cast<size_t>(i)]; }
    int64_t numel() const;
    DType dtype() const;

    template <typename T> std::span<T> data();
    template <typename T> std::span<const T> data() const;

    // dtype-agnostic element access (slow path, for tests and glue code)
    double at(int64_t i) const;
    void set(int64_t i, double v);
    double item() const;

    Tensor clone() const;
    Tensor astype(DType dt) const;
    void fill_(double v);
    void copy_from(const Tensor& src);

    Tensor& set_requires_grad(bool rg);
    bool requires_grad() const;
    /// true when this tensor participates in the autodiff graph
    bool tracked() const;
    Tensor grad() const;
    void zero_grad();
    void backward();
    Tensor detached() const;

    /// throws std::runtime_error naming `what` if any value is NaN/Inf
    void check_finite(const std::string& what) const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording for the current thread while alive.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

/// Creates the output of a differentiable op and wires it into the graph
/// when recording is on and any input is tracked.
Tensor make_op_output(Shape shape, DType dtype, std::vector<Tensor> inputs,
                      std::function<void(TensorImpl&)> backward);

/// Accumulates `delta` into the (lazily created) grad buffer of `t`.
void accumulate_grad(TensorImpl& t, const TensorImpl& delta);
TensorImpl& grad_buffer(TensorImpl& t);

/// Deterministic splitmix64-based generator. Independent of the C++ library's
/// distribution implementations so streams are reproducible everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}
    uint64_t next_u64();
    double uniform();  // [0, 1)
    double normal();   // N(0, 1)
    /// derive an independent stream, e.g. per sample index
    Rng fork(uint64_t stream) const;

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace stnet
