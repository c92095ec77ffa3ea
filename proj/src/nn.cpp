#include "stnet/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace stnet {

Builder::Builder(bool materialize, DType dtype, uint64_t seed)
    : materialize_(materialize), dtype_(dtype), rng_(seed) {}

void Builder::push(const std::string& name) { stack_.push_back(name); }

void Builder::pop() {
    if (stack_.empty()) throw std::logic_error("builder scope underflow");
    stack_.pop_back();
}

std::string Builder::path(const std::string& name) const {
    std::string p;
    for (const auto& s : stack_) {
        p += s;
        p += '.';
    }
    return p + name;
}

Tensor Builder::make_param(const std::string& name, Shape shape, Init init, double fan_in) {
    if (!materialize_) return {};
    Tensor t = Tensor::zeros(std::move(shape), dtype_);
    if (init == Init::FanInNormal) {
        const double std = std::sqrt(2.0 / std::max(1.0, fan_in));
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng_.normal() * std);
    }
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
}

Tensor Builder::make_buffer(const std::string& name, Shape shape, double fill) {
    if (!materialize_) return {};
    Tensor t = Tensor::full(std::move(shape), fill, dtype_);
    buffers_.emplace_back(name, t);
    return t;
}

nn::Conv2d Builder::conv(const std::string& name, ConvSpec spec, int64_t in_h, int64_t in_w, Init winit) {
    spec.validate();
    auto [oh, ow] = spec.out_hw(in_h, in_w);
    const int64_t wcount = static_cast<int64_t>(spec.kernel) * spec.kernel *
                           (spec.in_channels / spec.groups) * spec.out_channels;
    LayerInfo info;
    info.path = path(name);
    info.kind = LayerInfo::Kind::Conv;
    info.params = wcount + (spec.bias ? spec.out_channels : 0);
    info.macs = wcount * oh * ow;
    info.cin = spec.in_channels;
    info.cout = spec.out_channels;
    info.kernel = spec.kernel;
    info.stride = spec.stride;
    info.dilation = spec.dilation;
    info.groups = spec.groups;
    info.bias = spec.bias;
    info.out_h = oh;
    info.out_w = ow;
    layers_.push_back(info);

    nn::Conv2d layer;
    layer.spec = spec;
    const double fan_in = static_cast<double>(spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
    layer.w = make_param(info.path + ".w",
                         {spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel},
                         winit, fan_in);
    if (spec.bias) layer.b = make_param(info.path + ".b", {spec.out_channels}, Init::Zero, 1);
    return layer;
}

nn::ConvTranspose2d Builder::deconv(const std::string& name, ConvSpec spec, int64_t in_h, int64_t in_w,
                                    Init winit) {
    spec.validate();
    if (spec.groups != 1 || spec.dilation != 1)
        throw std::invalid_argument("deconv: groups/dilation must be 1");
    const int64_t wcount =
        static_cast<int64_t>(spec.kernel) * spec.kernel * spec.in_channels * spec.out_channels;
    LayerInfo info;
    info.path = path(name);
    info.kind = LayerInfo::Kind::Deconv;
    info.params = wcount + (spec.bias ? spec.out_channels : 0);
    // transposed convs perform one kernel application per *input* pixel
    info.macs = wcount * in_h * in_w;
    info.cin = spec.in_channels;
    info.cout = spec.out_channels;
    info.kernel = spec.kernel;
    info.stride = spec.stride;
    info.bias = spec.bias;
    info.out_h = (in_h - 1) * spec.stride - 2 * spec.padding + spec.kernel;
    info.out_w = (in_w - 1) * spec.stride - 2 * spec.padding + spec.kernel;
    layers_.push_back(info);

    nn::ConvTranspose2d layer;
    layer.spec = spec;
    const double fan_in = static_cast<double>(spec.in_channels) * spec.kernel * spec.kernel /
                          (static_cast<double>(spec.stride) * spec.stride);
    layer.w = make_param(info.path + ".w",
                         {spec.in_channels, spec.out_channels, spec.kernel, spec.kernel}, winit, fan_in);
    if (spec.bias) layer.b = make_param(info.path + ".b", {spec.out_channels}, Init::Zero, 1);
    return layer;
}

nn::BatchNorm2d Builder::norm(const std::string& name, int channels) {
    if (channels <= 0) throw std::invalid_argument("norm: channels must be positive");
    LayerInfo info;
    info.path = path(name);
    info.kind = LayerInfo::Kind::Norm;
    info.params = 2 * static_cast<int64_t>(channels);
    info.cin = info.cout = channels;
    layers_.push_back(info);

    nn::BatchNorm2d layer;
    if (materialize_) {
        layer.gamma = Tensor::full({channels}, 1.0, dtype_);
        layer.gamma.set_requires_grad(true);
        params_.emplace_back(info.path + ".gamma", layer.gamma);
        layer.beta = make_param(info.path + ".beta", {channels}, Init::Zero, 1);
        layer.state.running_mean = make_buffer(info.path + ".running_mean", {channels}, 0.0);
        layer.state.running_var = make_buffer(info.path + ".running_var", {channels}, 1.0);
    }
    return layer;
}

nn::Linear Builder::linear(const std::string& name, int cin, int cout, Init winit) {
    if (cin <= 0 || cout <= 0) throw std::invalid_argument("linear: bad extents");
    LayerInfo info;
    info.path = path(name);
    info.kind = LayerInfo::Kind::Linear;
    info.params = static_cast<int64_t>(cin) * cout + cout;
    info.cin = cin;
    info.cout = cout;
    layers_.push_back(info);

    nn::Linear layer;
    layer.w = make_param(info.path + ".w", {cout, cin}, winit, cin);
    layer.b = make_param(info.path + ".b", {cout}, Init::Zero, 1);
    return layer;
}

}  // namespace stnet
