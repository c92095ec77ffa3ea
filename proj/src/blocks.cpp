#include "stnet/blocks.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace stnet {

std::vector<int> stc_branch_widths(int width, int branch_count) {
    if (branch_count < 1) throw std::invalid_argument("stc_branch_widths: branch count must be >= 1");
    if (branch_count == 1) return {width};
    const int div = 1 << (branch_count - 1);
    if (width <= 0 || width % div != 0)
        throw std::invalid_argument("stc_branch_widths: width " + std::to_string(width) +
                                    " not divisible by 2^" + std::to_string(branch_count - 1));
    std::vector<int> widths;
    for (int j = 1; j < branch_count; ++j) widths.push_back(width >> j);
    widths.push_back(width >> (branch_count - 1));
    return widths;
}

int attention_reduction(int width) { return std::max(2, width / 16); }

void StcConfig::validate() const {
    if (channel_halving) {
        std::vector<int> w = stc_branch_widths(width, branch_count);
        int sum = 0;
        for (int v : w) sum += v;
        if (sum != width) throw std::invalid_argument("stc: halving schedule does not sum to the width");
    } else if (branch_count < 1 || width < 1) {
        throw std::invalid_argument("stc: bad width/branch count");
    }
    if (base_dilation < 1) throw std::invalid_argument("stc: base dilation must be >= 1");
    if (attention) {
        const int r = attention_reduction(width);
        if (width / r < 2) throw std::invalid_argument("stc: attention reduced width below 2");
    }
}

MixAttention::MixAttention(Builder& b, int width, int64_t h, int64_t w) : width_(width) {
    const int r = attention_reduction(width);
    const int hidden = width / r;
    if (hidden < 2) throw std::invalid_argument("mix attention: reduced width below 2");
    auto s = b.scope("att");
    fc1_ = b.linear("fc1", width, hidden);
    fc2_ = b.linear("fc2", hidden, width, Init::Zero);
    ConvSpec sp{.in_channels = 2, .out_channels = 1, .kernel = 7, .padding = 3, .bias = true};
    spatial_ = b.conv("spatial", sp, h, w, Init::Zero);
}

Tensor MixAttention::forward(const Tensor& x, ForwardCtx&) {
    const int64_t n = x.dim(0);
    Tensor gate = sigmoid(fc2_.forward(relu(fc1_.forward(global_avg_pool(x)))));
    Tensor y = mul(x, reshape(gate, {n, width_, 1, 1}));
    Tensor masks = concat(std::vector<Tensor>{channel_mean(y), channel_max(y)}, 1);
    Tensor m = sigmoid(spatial_.forward(masks));
    return mul(y, m);
}

StairCell::StairCell(Builder& b, const StcConfig& cfg, int64_t h, int64_t w) : cfg_(cfg) {
    cfg.validate();
    const std::vector<int> widths =
        cfg.channel_halving ? stc_branch_widths(cfg.width, cfg.branch_count)
                            : std::vector<int>(static_cast<size_t>(cfg.branch_count), cfg.width);
    auto s = b.scope("stc");
    int cin = cfg.width;
    for (int j = 0; j < cfg.branch_count; ++j) {
        const int cout = widths[static_cast<size_t>(j)];
        const int dil = cfg.base_dilation + j;
        auto ls = b.scope("l" + std::to_string(j));
        StairLayer layer;
        layer.separable = cfg.depthwise;
        if (cfg.depthwise) {
            ConvSpec dws{.in_channels = cin, .out_channels = cin, .kernel = 3, .dilation = dil,
                         .padding = dil, .groups = cin, .bias = false};
            layer.dw = b.conv("dw", dws, h, w);
            layer.dw_bn = b.norm("dw", cin);
            ConvSpec pws{.in_channels = cin, .out_channels = cout, .kernel = 1, .bias = true};
            layer.conv = b.conv("pw", pws, h, w);
            layer.bn = b.norm("pw", cout);
        } else {
            ConvSpec cs{.in_channels = cin, .out_channels = cout, .kernel = 3, .dilation = dil,
                        .padding = dil, .bias = true};
            layer.conv = b.conv("conv", cs, h, w);
            layer.bn = b.norm("conv", cout);
        }
        layers_.push_back(std::move(layer));
        cin = cout;
    }
    if (cfg.attention) attention_.emplace(b, cfg.width, h, w);
}

Tensor StairCell::forward(const Tensor& x, ForwardCtx& ctx, std::vector<Tensor>* taps) {
    if (x.dim(1) != cfg_.width)
        throw std::invalid_argument("stc: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                                    std::to_string(cfg_.width));
    std::vector<Tensor> outs;
    Tensor cur = x;
    for (auto& layer : layers_) {
        if (layer.separable) cur = relu(layer.dw_bn.forward(layer.dw.forward(cur), ctx));
        cur = relu(layer.bn.forward(layer.conv.forward(cur), ctx));
        outs.push_back(cur);
    }
    if (taps) *taps = outs;
    Tensor merged;
    if (cfg_.channel_halving) {
        merged = outs.size() == 1 ? outs[0] : concat(outs, 1);
    } else {
        merged = outs[0];
        for (size_t i = 1; i < outs.size(); ++i) merged = add(merged, outs[i]);
    }
    if (attention_) merged = attention_->forward(merged, ctx);
    return add(merged, x);
}

TransformationBlock::TransformationBlock(Builder& b, int out_channels, int reduction, int64_t h,
                                         int64_t w) {
    if (reduction < 1 || out_channels / reduction < 1)
        throw std::invalid_argument("transformation block: reduced width below 1");
    const int mid = out_channels / reduction;
    auto s = b.scope("tb");
    const int widths[5] = {3, mid, mid, mid, out_channels};
    for (int j = 0; j < 4; ++j) {
        auto ls = b.scope("c" + std::to_string(j));
        ConvSpec cs{.in_channels = widths[j], .out_channels = widths[j + 1], .kernel = 3, .padding = 1,
                    .bias = false};
        Step step;
        step.conv = b.conv("conv", cs, h, w);
        step.bn = b.norm("conv", widths[j + 1]);
        steps_.push_back(std::move(step));
    }
}

Tensor TransformationBlock::forward(const Tensor& image, ForwardCtx& ctx) {
    Tensor cur = image;
    for (auto& step : steps_) cur = relu(step.bn.forward(step.conv.forward(cur), ctx));
    return cur;
}

std::vector<std::vector<double>> branch_correlation(const std::vector<Tensor>& taps) {
    const size_t n = taps.size();
    if (n == 0) throw std::invalid_argument("branch_correlation: no taps");
    const int64_t count = taps[0].dim(0) * taps[0].dim(2) * taps[0].dim(3);
    // channel-mean pool each tap down to one flattened response vector
    std::vector<std::vector<double>> pooled(n);
    for (size_t t = 0; t < n; ++t) {
        const Tensor& tap = taps[t];
        if (tap.ndim() != 4 || tap.dim(0) != taps[0].dim(0) || tap.dim(2) != taps[0].dim(2) ||
            tap.dim(3) != taps[0].dim(3))
            throw std::invalid_argument("branch_correlation: taps must be spatially aligned");
        const int64_t C = tap.dim(1), hw = tap.dim(2) * tap.dim(3);
        std::vector<double>& v = pooled[t];
        v.resize(static_cast<size_t>(count));
        for (int64_t b = 0; b < tap.dim(0); ++b)
            for (int64_t i = 0; i < hw; ++i) {
                double acc = 0;
                for (int64_t c = 0; c < C; ++c) acc += tap.at((b * C + c) * hw + i);
                v[static_cast<size_t>(b * hw + i)] = acc / static_cast<double>(C);
            }
    }
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (size_t t = 0; t < n; ++t) {
        for (double v : pooled[t]) mean[t] += v;
        mean[t] /= static_cast<double>(count);
        for (double v : pooled[t]) var[t] += (v - mean[t]) * (v - mean[t]);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::vector<double>> corr(n, std::vector<double>(n, nan));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            if (var[i] == 0.0 || var[j] == 0.0) continue;  // undefined, reported as NaN
            double cov = 0;
            for (int64_t k = 0; k < count; ++k)
                cov += (pooled[i][static_cast<size_t>(k)] - mean[i]) *
                       (pooled[j][static_cast<size_t>(k)] - mean[j]);
            const double r = cov / std::sqrt(var[i] * var[j]);
            corr[i][j] = corr[j][i] = r;
        }
    }
    return corr;
}

}  // namespace stnet
