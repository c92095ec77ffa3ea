#include <cmath>
#include <stdexcept>
#include <vector>

#include "kernels.hpp"
#include "stnet/ops.hpp"

namespace stnet {

namespace {

template <class F>
void with_dtype(DType dt, F&& f) {
    if (dt == DType::F32)
        f.template operator()<float>();
    else
        f.template operator()<double>();
}

bool needs_grad(const Tensor& t) { return t.defined() && t.tracked(); }

}  // namespace

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   bool training, bool update_stats, double momentum, double eps) {
    if (!x.defined() || x.ndim() != 4) throw std::invalid_argument("batchnorm2d: input must be N,C,H,W");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Shape cs{C};
    if (!gamma.defined() || gamma.shape() != cs || !beta.defined() || beta.shape() != cs)
        throw std::invalid_argument("batchnorm2d: gamma/beta must have " + std::to_string(C) + " channels");
    if (!state.running_mean.defined() || state.running_mean.shape() != cs ||
        !state.running_var.defined() || state.running_var.shape() != cs)
        throw std::invalid_argument("batchnorm2d: running stats must have " + std::to_string(C) + " channels");

    const int64_t m = N * H * W;
    const int64_t hw = H * W;

    // per-channel statistics used by both passes
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
    auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(C));

    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        for (int64_t c = 0; c < C; ++c) {
            double mu, var;
            if (training) {
                double s = 0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* xp = px + (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) s += static_cast<double>(xp[i]);
                }
                mu = s / static_cast<double>(m);
                double sv = 0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* xp = px + (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const double d = static_cast<double>(xp[i]) - mu;
                        sv += d * d;
                    }
                }
                var = sv / static_cast<double>(m);
                if (update_stats) {
                    const double unbiased = m > 1 ? sv / static_cast<double>(m - 1) : var;
                    state.running_mean.set(c, (1.0 - momentum) * state.running_mean.at(c) + momentum * mu);
                    state.running_var.set(c, (1.0 - momentum) * state.running_var.at(c) + momentum * unbiased);
                }
            } else {
                mu = state.running_mean.at(c);
                var = state.running_var.at(c);
            }
            (*mean)[static_cast<size_t>(c)] = mu;
            (*invstd)[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
        }
    });

    Tensor xs = x, gs = gamma, bs = beta;
    Tensor y = make_op_output(
        x.shape(), x.dtype(), {xs, gs, bs}, [xs, gs, bs, mean, invstd, training, C, hw, m](TensorImpl& out) {
            with_dtype(out.dtype, [&]<typename T>() {
                const T* dy = kern::buf<T>(*out.grad);
                const T* px = kern::buf<T>(*xs.impl());
                const T* pg = kern::buf<T>(*gs.impl());
                const int64_t N = xs.dim(0);
                T* gx = needs_grad(xs) ? kern::buf<T>(grad_buffer(*xs.impl())) : nullptr;
                T* gg = needs_grad(gs) ? kern::buf<T>(grad_buffer(*gs.impl())) : nullptr;
                T* gb = needs_grad(bs) ? kern::buf<T>(grad_buffer(*bs.impl())) : nullptr;
                for (int64_t c = 0; c < C; ++c) {
                    const double mu = (*mean)[static_cast<size_t>(c)];
                    const double is = (*invstd)[static_cast<size_t>(c)];
                    double s1 = 0, s2 = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        const int64_t base = (n * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            const double d = static_cast<double>(dy[base + i]);
                            s1 += d;
                            s2 += d * (static_cast<double>(px[base + i]) - mu) * is;
                        }
                    }
                    if (gb) gb[c] += static_cast<T>(s1);
                    if (gg) gg[c] += static_cast<T>(s2);
                    if (!gx) continue;
                    const double gval = static_cast<double>(pg[c]);
                    for (int64_t n = 0; n < N; ++n) {
                        const int64_t base = (n * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            const double xhat = (static_cast<double>(px[base + i]) - mu) * is;
                            double dx;
                            if (training) {
                                dx = gval * is *
                                     (static_cast<double>(dy[base + i]) - s1 / static_cast<double>(m) -
                                      xhat * s2 / static_cast<double>(m));
                            } else {
                                dx = gval * is * static_cast<double>(dy[base + i]);
                            }
                            gx[base + i] += static_cast<T>(dx);
                        }
                    }
                }
            });
        });

    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        const T* pg = kern::buf<T>(*gamma.impl());
        const T* pb = kern::buf<T>(*beta.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t c = 0; c < C; ++c) {
            const double mu = (*mean)[static_cast<size_t>(c)];
            const double is = (*invstd)[static_cast<size_t>(c)];
            const double gv = static_cast<double>(pg[c]);
            const double bv = static_cast<double>(pb[c]);
            for (int64_t n = 0; n < N; ++n) {
                const int64_t base = (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i)
                    py[base + i] =
                        static_cast<T>((static_cast<double>(px[base + i]) - mu) * is * gv + bv);
            }
        }
    });
    return y;
}

}  // namespace stnet
