#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stnet/ops.hpp"
#include "stnet/tensor.hpp"

namespace stnet {

struct ForwardCtx {
    bool training = false;
    bool update_stats = true;  // batch-stat tracking can be frozen for gradient checks
};

namespace nn {

struct Conv2d {
    ConvSpec spec;
    Tensor w, b;
    Tensor forward(const Tensor& x, ConvPath path = ConvPath::Auto) const {
        return conv2d(x, w, b, spec, path);
    }
};

struct ConvTranspose2d {
    ConvSpec spec;
    Tensor w, b;
    Tensor forward(const Tensor& x) const { return conv_transpose2d(x, w, b, spec); }
};

struct BatchNorm2d {
    Tensor gamma, beta;
    BatchNormState state;
    Tensor forward(const Tensor& x, const ForwardCtx& ctx) {
        return batchnorm2d(x, gamma, beta, state, ctx.training, ctx.update_stats);
    }
};

struct Linear {
    Tensor w, b;
    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

}  // namespace nn

enum class Init { FanInNormal, Zero };

struct LayerInfo {
    enum class Kind { Conv, Deconv, Norm, Linear };
    std::string path;
    Kind kind = Kind::Conv;
    int64_t params = 0;  // trainable elements
    int64_t macs = 0;    // multiply-accumulates; counted for conv/deconv only
    int cin = 0, cout = 0, kernel = 0, stride = 1, dilation = 1, groups = 1;
    bool bias = false;
    int64_t out_h = 0, out_w = 0;  // resolution the MACs were counted at
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Creates layers and records the cost catalog. The same construction code
/// drives both the materialized model and the analytic profile: with
/// materialize=false no tensors are allocated, only LayerInfo rows.
class Builder {
public:
    Builder(bool materialize, DType dtype, uint64_t seed);

    class Scope {
    public:
        Scope(Builder& b, const std::string& name) : b_(b) { b_.push(name); }
        ~Scope() { b_.pop(); }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Builder& b_;
    };
    Scope scope(const std::string& name) { return Scope(*this, name); }
    void push(const std::string& name);
    void pop();
    std::string path(const std::string& name) const;

    /// records the layer and returns output spatial extents via out_h/out_w
    nn::Conv2d conv(const std::string& name, ConvSpec spec, int64_t in_h, int64_t in_w,
                    Init winit = Init::FanInNormal);
    nn::ConvTranspose2d deconv(const std::string& name, ConvSpec spec, int64_t in_h, int64_t in_w,
                               Init winit = Init::FanInNormal);
    nn::BatchNorm2d norm(const std::string& name, int channels);
    nn::Linear linear(const std::string& name, int cin, int cout, Init winit = Init::FanInNormal);

    bool materializing() const { return materialize_; }
    DType dtype() const { return dtype_; }
    const std::vector<LayerInfo>& layers() const { return layers_; }
    std::vector<NamedTensor> take_params() { return std::move(params_); }
    std::vector<NamedTensor> take_buffers() { return std::move(buffers_); }

private:
    Tensor make_param(const std::string& name, Shape shape, Init init, double fan_in);
    Tensor make_buffer(const std::string& name, Shape shape, double fill);

    bool materialize_;
    DType dtype_;
    Rng rng_;
    std::vector<std::string> stack_;
    std::vector<LayerInfo> layers_;
    std::vector<NamedTensor> params_;
    std::vector<NamedTensor> buffers_;
};

}  // namespace stnet
