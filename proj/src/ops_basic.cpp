#include <algorithm>
#include <cmath>
#include <cstring>
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

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.defined() || !b.defined()) throw std::invalid_argument(std::string(op) + ": undefined operand");
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    if (a.dtype() != b.dtype()) throw std::invalid_argument(std::string(op) + ": dtype mismatch");
}

void require_nchw(const Tensor& x, const char* op) {
    if (!x.defined() || x.ndim() != 4) throw std::invalid_argument(std::string(op) + ": input must be N,C,H,W");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    Tensor as = a, bs = b;
    Tensor y = make_op_output(a.shape(), a.dtype(), {as, bs}, [as, bs](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const T* dy = kern::buf<T>(*out.grad);
            const int64_t n = out.numel();
            for (const Tensor* t : {&as, &bs}) {
                if (!needs_grad(*t)) continue;
                T* g = kern::buf<T>(grad_buffer(*t->impl()));
                for (int64_t i = 0; i < n; ++i) g[i] += dy[i];
            }
        });
    });
    with_dtype(a.dtype(), [&]<typename T>() {
        const T* pa = kern::buf<T>(*a.impl());
        const T* pb = kern::buf<T>(*b.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t i = 0; i < a.numel(); ++i) py[i] = pa[i] + pb[i];
    });
    return y;
}

namespace {

enum class MulMode { Same, PerChannel, PerPixel };

MulMode mul_mode(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return MulMode::Same;
    if (a.ndim() == 4 && b.ndim() == 4 && a.dim(0) == b.dim(0)) {
        if (b.dim(1) == a.dim(1) && b.dim(2) == 1 && b.dim(3) == 1) return MulMode::PerChannel;
        if (b.dim(1) == 1 && b.dim(2) == a.dim(2) && b.dim(3) == a.dim(3)) return MulMode::PerPixel;
    }
    throw std::invalid_argument("mul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace

Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.defined() || !b.defined()) throw std::invalid_argument("mul: undefined operand");
    if (a.dtype() != b.dtype()) throw std::invalid_argument("mul: dtype mismatch");
    const MulMode mode = mul_mode(a, b);
    Tensor as = a, bs = b;
    Tensor y = make_op_output(a.shape(), a.dtype(), {as, bs}, [as, bs, mode](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const T* dy = kern::buf<T>(*out.grad);
            const T* pa = kern::buf<T>(*as.impl());
            const T* pb = kern::buf<T>(*bs.impl());
            T* ga = needs_grad(as) ? kern::buf<T>(grad_buffer(*as.impl())) : nullptr;
            T* gb = needs_grad(bs) ? kern::buf<T>(grad_buffer(*bs.impl())) : nullptr;
            if (mode == MulMode::Same) {
                const int64_t n = out.numel();
                for (int64_t i = 0; i < n; ++i) {
                    if (ga) ga[i] += dy[i] * pb[i];
                    if (gb) gb[i] += dy[i] * pa[i];
                }
                return;
            }
            const int64_t N = as.dim(0), C = as.dim(1), H = as.dim(2), W = as.dim(3);
            const int64_t hw = H * W;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t base = (n * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const int64_t bi = mode == MulMode::PerChannel ? n * C + c : n * hw + i;
                        if (ga) ga[base + i] += dy[base + i] * pb[bi];
                        if (gb) gb[bi] += dy[base + i] * pa[base + i];
                    }
                }
        });
    });
    with_dtype(a.dtype(), [&]<typename T>() {
        const T* pa = kern::buf<T>(*a.impl());
        const T* pb = kern::buf<T>(*b.impl());
        T* py = kern::buf<T>(*y.impl());
        if (mode == MulMode::Same) {
            for (int64_t i = 0; i < a.numel(); ++i) py[i] = pa[i] * pb[i];
            return;
        }
        const int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
        const int64_t hw = H * W;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const int64_t base = (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const int64_t bi = mode == MulMode::PerChannel ? n * C + c : n * hw + i;
                    py[base + i] = pa[base + i] * pb[bi];
                }
            }
    });
    return y;
}

Tensor scalar_mul(const Tensor& a, double sval) {
    if (!a.defined()) throw std::invalid_argument("scalar_mul: undefined operand");
    Tensor as = a;
    Tensor y = make_op_output(a.shape(), a.dtype(), {as}, [as, sval](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(as)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*as.impl()));
            const T sv = static_cast<T>(sval);
            for (int64_t i = 0; i < out.numel(); ++i) g[i] += sv * dy[i];
        });
    });
    with_dtype(a.dtype(), [&]<typename T>() {
        const T* pa = kern::buf<T>(*a.impl());
        T* py = kern::buf<T>(*y.impl());
        const T sv = static_cast<T>(sval);
        for (int64_t i = 0; i < a.numel(); ++i) py[i] = sv * pa[i];
    });
    return y;
}

Tensor relu(const Tensor& x) {
    if (!x.defined()) throw std::invalid_argument("relu: undefined operand");
    Tensor xs = x;
    Tensor y = make_op_output(x.shape(), x.dtype(), {xs}, [xs](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            const T* px = kern::buf<T>(*xs.impl());
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            for (int64_t i = 0; i < out.numel(); ++i)
                if (px[i] > T(0)) g[i] += dy[i];
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t i = 0; i < x.numel(); ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
    });
    return y;
}

Tensor sigmoid(const Tensor& x) {
    if (!x.defined()) throw std::invalid_argument("sigmoid: undefined operand");
    Tensor xs = x;
    Tensor y = make_op_output(x.shape(), x.dtype(), {xs}, [xs](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            const T* py = kern::buf<T>(out);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            for (int64_t i = 0; i < out.numel(); ++i) g[i] += dy[i] * py[i] * (T(1) - py[i]);
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t i = 0; i < x.numel(); ++i) py[i] = T(1) / (T(1) + std::exp(-px[i]));
    });
    return y;
}

namespace {

struct AxisSplit {
    int64_t outer, axis, inner;
};

AxisSplit axis_split(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("bad axis");
    AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    int64_t axis_total = 0;
    std::vector<int64_t> sizes;
    for (const Tensor& p : parts) {
        if (p.ndim() != static_cast<int>(s0.size()) || p.dtype() != parts[0].dtype())
            throw std::invalid_argument("concat: rank/dtype mismatch");
        for (int d = 0; d < p.ndim(); ++d)
            if (d != axis && p.dim(d) != s0[static_cast<size_t>(d)])
                throw std::invalid_argument("concat: extent mismatch off the concat axis");
        sizes.push_back(p.dim(axis));
        axis_total += p.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = axis_total;
    const AxisSplit sp = axis_split(out_shape, axis);

    std::vector<Tensor> inputs(parts.begin(), parts.end());
    Tensor y = make_op_output(out_shape, parts[0].dtype(), inputs,
                              [inputs, sizes, sp](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const T* dy = kern::buf<T>(*out.grad);
            int64_t offset = 0;
            for (size_t pi = 0; pi < inputs.size(); ++pi) {
                const int64_t len = sizes[pi] * sp.inner;
                if (needs_grad(inputs[pi])) {
                    T* g = kern::buf<T>(grad_buffer(*inputs[pi].impl()));
                    for (int64_t o = 0; o < sp.outer; ++o) {
                        const T* src = dy + o * sp.axis * sp.inner + offset;
                        T* dst = g + o * len;
                        for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                }
                offset += len;
            }
        });
    });
    with_dtype(parts[0].dtype(), [&]<typename T>() {
        T* py = kern::buf<T>(*y.impl());
        int64_t offset = 0;
        for (size_t pi = 0; pi < inputs.size(); ++pi) {
            const int64_t len = sizes[pi] * sp.inner;
            const T* src = kern::buf<T>(*inputs[pi].impl());
            for (int64_t o = 0; o < sp.outer; ++o)
                std::memcpy(py + o * sp.axis * sp.inner + offset, src + o * len,
                            static_cast<size_t>(len) * sizeof(T));
            offset += len;
        }
    });
    return y;
}

std::vector<Tensor> split(const Tensor& x, int axis, std::span<const int64_t> sizes) {
    if (!x.defined()) throw std::invalid_argument("split: undefined input");
    int64_t total = 0;
    for (int64_t s : sizes) {
        if (s <= 0) throw std::invalid_argument("split: sizes must be positive");
        total += s;
    }
    if (total != x.dim(axis))
        throw std::invalid_argument("split: sizes sum to " + std::to_string(total) + ", axis extent is " +
                                    std::to_string(x.dim(axis)));
    const AxisSplit sp = axis_split(x.shape(), axis);
    std::vector<Tensor> outs;
    int64_t offset = 0;
    for (int64_t sz : sizes) {
        Shape os = x.shape();
        os[static_cast<size_t>(axis)] = sz;
        Tensor xs = x;
        const int64_t off = offset;
        Tensor y = make_op_output(os, x.dtype(), {xs}, [xs, sp, off, sz](TensorImpl& out) {
            with_dtype(out.dtype, [&]<typename T>() {
                if (!needs_grad(xs)) return;
                const T* dy = kern::buf<T>(*out.grad);
                T* g = kern::buf<T>(grad_buffer(*xs.impl()));
                const int64_t len = sz * sp.inner;
                for (int64_t o = 0; o < sp.outer; ++o) {
                    T* dst = g + o * sp.axis * sp.inner + off * sp.inner;
                    const T* src = dy + o * len;
                    for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
                }
            });
        });
        with_dtype(x.dtype(), [&]<typename T>() {
            const T* px = kern::buf<T>(*x.impl());
            T* py = kern::buf<T>(*y.impl());
            const int64_t len = sz * sp.inner;
            for (int64_t o = 0; o < sp.outer; ++o)
                std::memcpy(py + o * len, px + o * sp.axis * sp.inner + offset * sp.inner,
                            static_cast<size_t>(len) * sizeof(T));
        });
        outs.push_back(std::move(y));
        offset += sz;
    }
    return outs;
}

Tensor pool2d(const Tensor& x, PoolKind kind, int window, int stride) {
    require_nchw(x, "pool2d");
    if (window <= 0 || stride <= 0) throw std::invalid_argument("pool2d: bad window/stride");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (window > H || window > W)
        throw std::invalid_argument("pool2d: window " + std::to_string(window) + " exceeds input " +
                                    std::to_string(H) + "x" + std::to_string(W));
    const int64_t oh = (H - window) / stride + 1;
    const int64_t ow = (W - window) / stride + 1;

    auto argmax = std::make_shared<std::vector<int64_t>>();
    if (kind == PoolKind::Max) argmax->resize(static_cast<size_t>(N * C * oh * ow));

    Tensor xs = x;
    Tensor y = make_op_output({N, C, oh, ow}, x.dtype(), {xs},
                              [xs, kind, window, stride, oh, ow, argmax](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            const int64_t N = xs.dim(0), C = xs.dim(1), H = xs.dim(2), W = xs.dim(3);
            const int64_t planes = N * C;
            for (int64_t p = 0; p < planes; ++p) {
                const T* dyp = dy + p * oh * ow;
                T* gp = g + p * H * W;
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const T d = dyp[oy * ow + ox];
                        if (kind == PoolKind::Max) {
                            gp[(*argmax)[static_cast<size_t>((p * oh + oy) * ow + ox)]] += d;
                        } else {
                            const T share = d / static_cast<T>(window * window);
                            for (int64_t ky = 0; ky < window; ++ky)
                                for (int64_t kx = 0; kx < window; ++kx)
                                    gp[(oy * stride + ky) * W + ox * stride + kx] += share;
                        }
                    }
            }
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        const int64_t planes = N * C;
        for (int64_t p = 0; p < planes; ++p) {
            const T* xp = px + p * H * W;
            T* yp = py + p * oh * ow;
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    if (kind == PoolKind::Max) {
                        // ties keep the lowest linear index (first found)
                        int64_t best_idx = (oy * stride) * W + ox * stride;
                        T best = xp[best_idx];
                        for (int64_t ky = 0; ky < window; ++ky)
                            for (int64_t kx = 0; kx < window; ++kx) {
                                const int64_t idx = (oy * stride + ky) * W + ox * stride + kx;
                                if (xp[idx] > best) {
                                    best = xp[idx];
                                    best_idx = idx;
                                }
                            }
                        yp[oy * ow + ox] = best;
                        (*argmax)[static_cast<size_t>((p * oh + oy) * ow + ox)] = best_idx;
                    } else {
                        T acc = T(0);
                        for (int64_t ky = 0; ky < window; ++ky)
                            for (int64_t kx = 0; kx < window; ++kx)
                                acc += xp[(oy * stride + ky) * W + ox * stride + kx];
                        yp[oy * ow + ox] = acc / static_cast<T>(window * window);
                    }
                }
        }
    });
    return y;
}

Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
    require_nchw(x, "resize_bilinear");
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: target extents must be positive");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    // half-pixel-center sampling grid, shared by forward and backward
    struct Tap {
        int64_t lo, hi;
        double w_hi;
    };
    auto make_taps = [](int64_t in, int64_t out) {
        std::vector<Tap> taps(static_cast<size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (int64_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            int64_t lo = static_cast<int64_t>(src);
            if (lo > in - 1) lo = in - 1;
            int64_t hi = std::min<int64_t>(lo + 1, in - 1);
            taps[static_cast<size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
        }
        return taps;
    };
    auto ytaps = std::make_shared<std::vector<Tap>>(make_taps(H, out_h));
    auto xtaps = std::make_shared<std::vector<Tap>>(make_taps(W, out_w));

    Tensor xs = x;
    Tensor y = make_op_output({N, C, out_h, out_w}, x.dtype(), {xs},
                              [xs, ytaps, xtaps, out_h, out_w](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            const int64_t H = xs.dim(2), W = xs.dim(3);
            const int64_t planes = xs.dim(0) * xs.dim(1);
            for (int64_t p = 0; p < planes; ++p) {
                const T* dyp = dy + p * out_h * out_w;
                T* gp = g + p * H * W;
                for (int64_t oy = 0; oy < out_h; ++oy) {
                    const auto& ty = (*ytaps)[static_cast<size_t>(oy)];
                    for (int64_t ox = 0; ox < out_w; ++ox) {
                        const auto& tx = (*xtaps)[static_cast<size_t>(ox)];
                        const T d = dyp[oy * out_w + ox];
                        const T wy = static_cast<T>(ty.w_hi), wx = static_cast<T>(tx.w_hi);
                        gp[ty.lo * W + tx.lo] += d * (T(1) - wy) * (T(1) - wx);
                        gp[ty.lo * W + tx.hi] += d * (T(1) - wy) * wx;
                        gp[ty.hi * W + tx.lo] += d * wy * (T(1) - wx);
                        gp[ty.hi * W + tx.hi] += d * wy * wx;
                    }
                }
            }
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        const int64_t planes = N * C;
        for (int64_t p = 0; p < planes; ++p) {
            const T* xp = px + p * H * W;
            T* yp = py + p * out_h * out_w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                const auto& ty = (*ytaps)[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    const auto& tx = (*xtaps)[static_cast<size_t>(ox)];
                    const T wy = static_cast<T>(ty.w_hi), wx = static_cast<T>(tx.w_hi);
                    const T v00 = xp[ty.lo * W + tx.lo], v01 = xp[ty.lo * W + tx.hi];
                    const T v10 = xp[ty.hi * W + tx.lo], v11 = xp[ty.hi * W + tx.hi];
                    yp[oy * out_w + ox] = (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                                          wy * ((T(1) - wx) * v10 + wx * v11);
                }
            }
        }
    });
    return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (!x.defined() || x.ndim() != 2) throw std::invalid_argument("linear: input must be (N,Cin)");
    if (!w.defined() || w.ndim() != 2 || w.dim(1) != x.dim(1))
        throw std::invalid_argument("linear: weight must be (Cout,Cin) matching input");
    if (b.defined() && b.shape() != Shape{w.dim(0)}) throw std::invalid_argument("linear: bias shape mismatch");
    const int64_t N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);

    Tensor xs = x, ws = w, bs = b;
    Tensor y = make_op_output({N, Cout}, x.dtype(), {xs, ws, bs}, [xs, ws, bs, N, Cin, Cout](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const T* dy = kern::buf<T>(*out.grad);
            if (needs_grad(xs))
                kern::gemm_acc(dy, kern::buf<T>(*ws.impl()), kern::buf<T>(grad_buffer(*xs.impl())), N, Cout,
                               Cin);
            if (needs_grad(ws))
                kern::gemm_atb_acc(dy, kern::buf<T>(*xs.impl()), kern::buf<T>(grad_buffer(*ws.impl())), N,
                                   Cout, Cin);
            if (needs_grad(bs)) {
                T* gb = kern::buf<T>(grad_buffer(*bs.impl()));
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t o = 0; o < Cout; ++o) gb[o] += dy[n * Cout + o];
            }
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        kern::gemm_abt_acc(kern::buf<T>(*x.impl()), kern::buf<T>(*w.impl()), kern::buf<T>(*y.impl()), N, Cin,
                           Cout);
        if (bs.defined()) {
            const T* bb = kern::buf<T>(*bs.impl());
            T* py = kern::buf<T>(*y.impl());
            for (int64_t n = 0; n < N; ++n)
                for (int64_t o = 0; o < Cout; ++o) py[n * Cout + o] += bb[o];
        }
    });
    return y;
}

Tensor global_avg_pool(const Tensor& x) {
    require_nchw(x, "global_avg_pool");
    const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor xs = x;
    Tensor y = make_op_output({N, C}, x.dtype(), {xs}, [xs, hw](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            const int64_t planes = out.numel();
            for (int64_t p = 0; p < planes; ++p) {
                const T share = dy[p] / static_cast<T>(hw);
                T* gp = g + p * hw;
                for (int64_t i = 0; i < hw; ++i) gp[i] += share;
            }
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t p = 0; p < N * C; ++p) {
            T acc = T(0);
            const T* xp = px + p * hw;
            for (int64_t i = 0; i < hw; ++i) acc += xp[i];
            py[p] = acc / static_cast<T>(hw);
        }
    });
    return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (!x.defined()) throw std::invalid_argument("reshape: undefined input");
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                                    shape_str(shape));
    Tensor xs = x;
    Tensor y = make_op_output(shape, x.dtype(), {xs}, [xs](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            for (int64_t i = 0; i < out.numel(); ++i) g[i] += dy[i];
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        std::memcpy(kern::buf<T>(*y.impl()), kern::buf<T>(*x.impl()),
                    static_cast<size_t>(x.numel()) * sizeof(T));
    });
    return y;
}

Tensor sum(const Tensor& x) {
    if (!x.defined()) throw std::invalid_argument("sum: undefined input");
    Tensor xs = x;
    Tensor y = make_op_output({1}, x.dtype(), {xs}, [xs](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T d = kern::buf<T>(*out.grad)[0];
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            for (int64_t i = 0; i < xs.numel(); ++i) g[i] += d;
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T acc = T(0);
        for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
        kern::buf<T>(*y.impl())[0] = acc;
    });
    return y;
}

Tensor channel_mean(const Tensor& x) {
    require_nchw(x, "channel_mean");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t hw = H * W;
    Tensor xs = x;
    Tensor y = make_op_output({N, 1, H, W}, x.dtype(), {xs}, [xs, C, hw](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            const int64_t N = xs.dim(0);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    T* gp = g + (n * C + c) * hw;
                    const T* dn = dy + n * hw;
                    for (int64_t i = 0; i < hw; ++i) gp[i] += dn[i] / static_cast<T>(C);
                }
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < hw; ++i) {
                T acc = T(0);
                for (int64_t c = 0; c < C; ++c) acc += px[(n * C + c) * hw + i];
                py[n * hw + i] = acc / static_cast<T>(C);
            }
    });
    return y;
}

Tensor channel_max(const Tensor& x) {
    require_nchw(x, "channel_max");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t hw = H * W;
    auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(N * hw));
    Tensor xs = x;
    Tensor y = make_op_output({N, 1, H, W}, x.dtype(), {xs}, [xs, C, hw, argmax](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            if (!needs_grad(xs)) return;
            const T* dy = kern::buf<T>(*out.grad);
            T* g = kern::buf<T>(grad_buffer(*xs.impl()));
            const int64_t N = xs.dim(0);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < hw; ++i) {
                    const int64_t c = (*argmax)[static_cast<size_t>(n * hw + i)];
                    g[(n * C + c) * hw + i] += dy[n * hw + i];
                }
        });
    });
    with_dtype(x.dtype(), [&]<typename T>() {
        const T* px = kern::buf<T>(*x.impl());
        T* py = kern::buf<T>(*y.impl());
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < hw; ++i) {
                T best = px[n * C * hw + i];
                int32_t bc = 0;
                for (int64_t c = 1; c < C; ++c) {
                    const T v = px[(n * C + c) * hw + i];
                    if (v > best) {
                        best = v;
                        bc = static_cast<int32_t>(c);
                    }
                }
                py[n * hw + i] = best;
                (*argmax)[static_cast<size_t>(n * hw + i)] = bc;
            }
    });
    return y;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    require_same(pred, target, "mse_loss");
    Tensor ps = pred, ts = target;
    const int64_t n = pred.numel();
    Tensor y = make_op_output({1}, pred.dtype(), {ps, ts}, [ps, ts, n](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const T d = kern::buf<T>(*out.grad)[0];
            const T* pp = kern::buf<T>(*ps.impl());
            const T* pt = kern::buf<T>(*ts.impl());
            const T scale = d * T(2) / static_cast<T>(n);
            if (needs_grad(ps)) {
                T* g = kern::buf<T>(grad_buffer(*ps.impl()));
                for (int64_t i = 0; i < n; ++i) g[i] += scale * (pp[i] - pt[i]);
            }
            if (needs_grad(ts)) {
                T* g = kern::buf<T>(grad_buffer(*ts.impl()));
                for (int64_t i = 0; i < n; ++i) g[i] -= scale * (pp[i] - pt[i]);
            }
        });
    });
    with_dtype(pred.dtype(), [&]<typename T>() {
        const T* pp = kern::buf<T>(*pred.impl());
        const T* pt = kern::buf<T>(*target.impl());
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) {
            const T e = pp[i] - pt[i];
            acc += e * e;
        }
        kern::buf<T>(*y.impl())[0] = acc / static_cast<T>(n);
    });
    return y;
}

Tensor masked_mse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    require_same(pred, target, "masked_mse_loss");
    require_nchw(pred, "masked_mse_loss");
    if (!mask.defined() || mask.ndim() != 2 || mask.dim(0) != pred.dim(0) || mask.dim(1) != pred.dim(1))
        throw std::invalid_argument("masked_mse_loss: mask must be (N,K) matching pred");
    if (mask.dtype() != pred.dtype()) throw std::invalid_argument("masked_mse_loss: mask dtype mismatch");

    const int64_t N = pred.dim(0), K = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
    double mask_sum = 0;
    for (int64_t i = 0; i < mask.numel(); ++i) mask_sum += mask.at(i);
    if (mask_sum <= 0) throw std::invalid_argument("masked_mse_loss: no visible entries in mask");
    const double denom = mask_sum * static_cast<double>(hw);

    Tensor ps = pred, ts = target, ms = mask;
    Tensor y = make_op_output({1}, pred.dtype(), {ps, ts, ms}, [ps, ts, ms, N, K, hw, denom](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const T d = kern::buf<T>(*out.grad)[0];
            const T* pp = kern::buf<T>(*ps.impl());
            const T* pt = kern::buf<T>(*ts.impl());
            const T* pm = kern::buf<T>(*ms.impl());
            const T scale = d * T(2) / static_cast<T>(denom);
            T* gp = needs_grad(ps) ? kern::buf<T>(grad_buffer(*ps.impl())) : nullptr;
            T* gt = needs_grad(ts) ? kern::buf<T>(grad_buffer(*ts.impl())) : nullptr;
            if (!gp && !gt) return;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < K; ++k) {
                    const T m = pm[n * K + k];
                    if (m == T(0)) continue;
                    const int64_t base = (n * K + k) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        const T e = scale * m * (pp[base + i] - pt[base + i]);
                        if (gp) gp[base + i] += e;
                        if (gt) gt[base + i] -= e;
                    }
                }
        });
    });
    with_dtype(pred.dtype(), [&]<typename T>() {
        const T* pp = kern::buf<T>(*pred.impl());
        const T* pt = kern::buf<T>(*target.impl());
        const T* pm = kern::buf<T>(*mask.impl());
        double acc = 0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t k = 0; k < K; ++k) {
                const double m = static_cast<double>(pm[n * K + k]);
                if (m == 0) continue;
                const int64_t base = (n * K + k) * hw;
                double se = 0;
                for (int64_t i = 0; i < hw; ++i) {
                    const double e = static_cast<double>(pp[base + i]) - static_cast<double>(pt[base + i]);
                    se += e * e;
                }
                acc += m * se;
            }
        kern::buf<T>(*y.impl())[0] = static_cast<T>(acc / denom);
    });
    return y;
}

}  // namespace stnet
