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

kern::ConvGeom make_geom(const ConvSpec& s, int64_t h, int64_t w) {
    auto [oh, ow] = s.out_hw(h, w);
    return kern::ConvGeom{s.in_channels, h, w, s.kernel, s.stride, s.padding, s.dilation, oh, ow};
}

}  // namespace

void ConvSpec::validate() const {
    if (in_channels <= 0 || out_channels <= 0) throw std::invalid_argument("conv: channel counts must be positive");
    if (kernel <= 0 || stride <= 0 || dilation <= 0 || padding < 0)
        throw std::invalid_argument("conv: bad kernel/stride/dilation/padding");
    if (groups <= 0 || in_channels % groups != 0 || out_channels % groups != 0)
        throw std::invalid_argument("conv: groups must divide both channel counts");
}

std::pair<int64_t, int64_t> ConvSpec::out_hw(int64_t h, int64_t w) const {
    const int64_t K = effective_kernel();
    const int64_t oh = (h + 2 * padding - K) / stride + 1;
    const int64_t ow = (w + 2 * padding - K) / stride + 1;
    if (h + 2 * padding < K || w + 2 * padding < K || oh <= 0 || ow <= 0)
        throw std::invalid_argument("conv: zero-size spatial output for input " + std::to_string(h) + "x" +
                                    std::to_string(w));
    return {oh, ow};
}

namespace {

template <typename T>
void conv2d_direct_fwd(const TensorImpl& x, const TensorImpl& w, const TensorImpl* b, TensorImpl& y,
                       const ConvSpec& s, const kern::ConvGeom& g) {
    const int64_t n_batch = x.shape[0];
    const int64_t cing = s.in_channels / s.groups;
    const int64_t outg = s.out_channels / s.groups;
    const T* xb = kern::buf<T>(x);
    const T* wb = kern::buf<T>(w);
    T* yb = kern::buf<T>(y);
    const int64_t ohw = g.h_out * g.w_out;
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t oc = 0; oc < s.out_channels; ++oc) {
            const int64_t grp = oc / outg;
            T* yo = yb + (n * s.out_channels + oc) * ohw;
            for (int64_t oy = 0; oy < g.h_out; ++oy) {
                for (int64_t ox = 0; ox < g.w_out; ++ox) {
                    T acc = b ? kern::buf<T>(*b)[oc] : T(0);
                    for (int64_t ic = 0; ic < cing; ++ic) {
                        const int64_t c = grp * cing + ic;
                        const T* xc = xb + (n * s.in_channels + c) * g.h_in * g.w_in;
                        const T* wc = wb + ((oc * cing + ic) * g.k) * g.k;
                        for (int64_t ky = 0; ky < g.k; ++ky) {
                            const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
                            if (iy < 0 || iy >= g.h_in) continue;
                            for (int64_t kx = 0; kx < g.k; ++kx) {
                                const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
                                if (ix < 0 || ix >= g.w_in) continue;
                                acc += xc[iy * g.w_in + ix] * wc[ky * g.k + kx];
                            }
                        }
                    }
                    yo[oy * g.w_out + ox] = acc;
                }
            }
        }
    }
}

template <typename T>
void conv2d_im2col_fwd(const TensorImpl& x, const TensorImpl& w, const TensorImpl* b, TensorImpl& y,
                       const ConvSpec& s, const kern::ConvGeom& g) {
    const int64_t n_batch = x.shape[0];
    const int64_t cing = s.in_channels / s.groups;
    const int64_t outg = s.out_channels / s.groups;
    const int64_t ohw = g.h_out * g.w_out;
    const int64_t krows = cing * g.k * g.k;
    std::vector<T> col(static_cast<size_t>(s.in_channels * g.k * g.k * ohw));
    const T* xb = kern::buf<T>(x);
    const T* wb = kern::buf<T>(w);
    T* yb = kern::buf<T>(y);
    for (int64_t n = 0; n < n_batch; ++n) {
        kern::im2col(xb + n * s.in_channels * g.h_in * g.w_in, col.data(), g);
        for (int64_t grp = 0; grp < s.groups; ++grp) {
            kern::gemm_acc(wb + grp * outg * krows, col.data() + grp * krows * ohw,
                           yb + (n * s.out_channels + grp * outg) * ohw, outg, krows, ohw);
        }
        if (b) {
            const T* bb = kern::buf<T>(*b);
            for (int64_t oc = 0; oc < s.out_channels; ++oc) {
                T* yo = yb + (n * s.out_channels + oc) * ohw;
                for (int64_t i = 0; i < ohw; ++i) yo[i] += bb[oc];
            }
        }
    }
}

template <typename T>
void conv2d_backward(const TensorImpl& x, const TensorImpl& w, TensorImpl* gx, TensorImpl* gw, TensorImpl* gb,
                     const TensorImpl& gy, const ConvSpec& s, const kern::ConvGeom& g) {
    const int64_t n_batch = x.shape[0];
    const int64_t cing = s.in_channels / s.groups;
    const int64_t outg = s.out_channels / s.groups;
    const int64_t ohw = g.h_out * g.w_out;
    const int64_t krows = cing * g.k * g.k;
    const T* xb = kern::buf<T>(x);
    const T* wb = kern::buf<T>(w);
    const T* dyb = kern::buf<T>(gy);

    if (gb) {
        T* dbb = kern::buf<T>(*gb);
        for (int64_t n = 0; n < n_batch; ++n)
            for (int64_t oc = 0; oc < s.out_channels; ++oc) {
                const T* dyo = dyb + (n * s.out_channels + oc) * ohw;
                T acc = T(0);
                for (int64_t i = 0; i < ohw; ++i) acc += dyo[i];
                dbb[oc] += acc;
            }
    }
    if (gw) {
        std::vector<T> col(static_cast<size_t>(s.in_channels * g.k * g.k * ohw));
        T* dwb = kern::buf<T>(*gw);
        for (int64_t n = 0; n < n_batch; ++n) {
            kern::im2col(xb + n * s.in_channels * g.h_in * g.w_in, col.data(), g);
            for (int64_t grp = 0; grp < s.groups; ++grp)
                kern::gemm_abt_acc(dyb + (n * s.out_channels + grp * outg) * ohw,
                                   col.data() + grp * krows * ohw, dwb + grp * outg * krows, outg, ohw,
                                   krows);
        }
    }
    if (gx) {
        std::vector<T> dcol(static_cast<size_t>(s.in_channels * g.k * g.k * ohw));
        T* dxb = kern::buf<T>(*gx);
        for (int64_t n = 0; n < n_batch; ++n) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            for (int64_t grp = 0; grp < s.groups; ++grp)
                kern::gemm_atb_acc(wb + grp * outg * krows, dyb + (n * s.out_channels + grp * outg) * ohw,
                                   dcol.data() + grp * krows * ohw, outg, krows, ohw);
            kern::col2im_acc(dcol.data(), dxb + n * s.in_channels * g.h_in * g.w_in, g);
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec, ConvPath path) {
    spec.validate();
    if (!x.defined() || x.ndim() != 4) throw std::invalid_argument("conv2d: input must be N,C,H,W");
    if (x.dim(1) != spec.in_channels)
        throw std::invalid_argument("conv2d: input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                                    std::to_string(spec.in_channels));
    const Shape want_w{spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel};
    if (!w.defined() || w.shape() != want_w)
        throw std::invalid_argument("conv2d: weight shape must be " + shape_str(want_w));
    if (spec.bias && (!b.defined() || b.shape() != Shape{spec.out_channels}))
        throw std::invalid_argument("conv2d: bias shape must be (" + std::to_string(spec.out_channels) + ")");
    if (w.dtype() != x.dtype() || (spec.bias && b.dtype() != x.dtype()))
        throw std::invalid_argument("conv2d: dtype mismatch");

    const kern::ConvGeom g = make_geom(spec, x.dim(2), x.dim(3));
    Tensor xs = x, ws = w, bs = spec.bias ? b : Tensor{};
    ConvSpec s = spec;
    auto backward = [xs, ws, bs, s, g](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            TensorImpl* gx = needs_grad(xs) ? &grad_buffer(*xs.impl()) : nullptr;
            TensorImpl* gw = needs_grad(ws) ? &grad_buffer(*ws.impl()) : nullptr;
            TensorImpl* gb = needs_grad(bs) ? &grad_buffer(*bs.impl()) : nullptr;
            conv2d_backward<T>(*xs.impl(), *ws.impl(), gx, gw, gb, *out.grad, s, g);
        });
    };
    Tensor y = make_op_output({x.dim(0), spec.out_channels, g.h_out, g.w_out}, x.dtype(),
                              {xs, ws, bs}, backward);
    const TensorImpl* bp = spec.bias ? bs.impl().get() : nullptr;
    with_dtype(x.dtype(), [&]<typename T>() {
        if (path == ConvPath::Direct)
            conv2d_direct_fwd<T>(*x.impl(), *w.impl(), bp, *y.impl(), s, g);
        else
            conv2d_im2col_fwd<T>(*x.impl(), *w.impl(), bp, *y.impl(), s, g);
    });
    return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec) {
    spec.validate();
    if (spec.groups != 1 || spec.dilation != 1)
        throw std::invalid_argument("conv_transpose2d: groups/dilation other than 1 are not supported");
    if (!x.defined() || x.ndim() != 4) throw std::invalid_argument("conv_transpose2d: input must be N,C,H,W");
    if (x.dim(1) != spec.in_channels) throw std::invalid_argument("conv_transpose2d: input channel mismatch");
    const Shape want_w{spec.in_channels, spec.out_channels, spec.kernel, spec.kernel};
    if (!w.defined() || w.shape() != want_w)
        throw std::invalid_argument("conv_transpose2d: weight shape must be " + shape_str(want_w));
    if (spec.bias && (!b.defined() || b.shape() != Shape{spec.out_channels}))
        throw std::invalid_argument("conv_transpose2d: bias shape mismatch");

    const int64_t h_in = x.dim(2), w_in = x.dim(3);
    const int64_t h_out = (h_in - 1) * spec.stride - 2 * spec.padding + spec.kernel;
    const int64_t w_out = (w_in - 1) * spec.stride - 2 * spec.padding + spec.kernel;
    if (h_out <= 0 || w_out <= 0) throw std::invalid_argument("conv_transpose2d: zero-size spatial output");
    // geometry of the conv that maps (h_out, w_out) back to (h_in, w_in)
    const kern::ConvGeom g{spec.out_channels, h_out, w_out, spec.kernel,
                           spec.stride,       spec.padding, 1, h_in, w_in};

    Tensor xs = x, ws = w, bs = spec.bias ? b : Tensor{};
    ConvSpec s = spec;
    auto backward = [xs, ws, bs, s, g](TensorImpl& out) {
        with_dtype(out.dtype, [&]<typename T>() {
            const int64_t n_batch = xs.impl()->shape[0];
            const int64_t hw = g.h_out * g.w_out;  // input pixels of the transpose conv
            const int64_t krows = s.out_channels * g.k * g.k;
            const TensorImpl& gy = *out.grad;
            const T* dyb = kern::buf<T>(gy);
            if (needs_grad(bs)) {
                T* dbb = kern::buf<T>(grad_buffer(*bs.impl()));
                const int64_t out_hw = g.h_in * g.w_in;
                for (int64_t n = 0; n < n_batch; ++n)
                    for (int64_t oc = 0; oc < s.out_channels; ++oc) {
                        const T* dyo = dyb + (n * s.out_channels + oc) * out_hw;
                        T acc = T(0);
                        for (int64_t i = 0; i < out_hw; ++i) acc += dyo[i];
                        dbb[oc] += acc;
                    }
            }
            const bool want_x = needs_grad(xs), want_w = needs_grad(ws);
            if (!want_x && !want_w) return;
            std::vector<T> col(static_cast<size_t>(krows * hw));
            T* dxb = want_x ? kern::buf<T>(grad_buffer(*xs.impl())) : nullptr;
            T* dwb = want_w ? kern::buf<T>(grad_buffer(*ws.impl())) : nullptr;
            const T* wb = kern::buf<T>(*ws.impl());
            const T* xb = kern::buf<T>(*xs.impl());
            for (int64_t n = 0; n < n_batch; ++n) {
                kern::im2col(dyb + n * s.out_channels * g.h_in * g.w_in, col.data(), g);
                if (want_x)
                    kern::gemm_acc(wb, col.data(), dxb + n * s.in_channels * hw, s.in_channels, krows, hw);
                if (want_w)
                    kern::gemm_abt_acc(xb + n * s.in_channels * hw, col.data(), dwb, s.in_channels, hw,
                                       krows);
            }
        });
    };
    Tensor y = make_op_output({x.dim(0), spec.out_channels, h_out, w_out}, x.dtype(), {xs, ws, bs},
                              backward);
    with_dtype(x.dtype(), [&]<typename T>() {
        const int64_t n_batch = x.dim(0);
        const int64_t hw = h_in * w_in;
        const int64_t krows = spec.out_channels * spec.kernel * spec.kernel;
        std::vector<T> col(static_cast<size_t>(krows * hw));
        const T* xb = kern::buf<T>(*x.impl());
        const T* wb = kern::buf<T>(*w.impl());
        T* yb = kern::buf<T>(*y.impl());
        for (int64_t n = 0; n < n_batch; ++n) {
            std::fill(col.begin(), col.end(), T(0));
            kern::gemm_atb_acc(wb, xb + n * spec.in_channels * hw, col.data(), spec.in_channels, krows, hw);
            kern::col2im_acc(col.data(), yb + n * spec.out_channels * h_out * w_out, g);
        }
        if (spec.bias) {
            const T* bb = kern::buf<T>(*b.impl());
            const int64_t out_hw = h_out * w_out;
            for (int64_t n = 0; n < n_batch; ++n)
                for (int64_t oc = 0; oc < spec.out_channels; ++oc) {
                    T* yo = yb + (n * spec.out_channels + oc) * out_hw;
                    for (int64_t i = 0; i < out_hw; ++i) yo[i] += bb[oc];
                }
        }
    });
    return y;
}

}  // namespace stnet
