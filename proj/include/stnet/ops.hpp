#pragma once

#include <span>
#include <utility>
#include <vector>

#include "stnet/tensor.hpp"

namespace stnet {

/// Geometry of a 2-D convolution. groups==in_channels with one filter per
/// channel encodes the depthwise case.
struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int dilation = 1;
    int padding = 0;
    int groups = 1;
    bool bias = true;

    /// equivalent kernel size K = k + (k-1)(R-1)
    int effective_kernel() const { return kernel + (kernel - 1) * (dilation - 1); }

    /// padding that preserves H,W at stride 1
    int same_padding() const { return (effective_kernel() - 1) / 2; }

    void validate() const;
    std::pair<int64_t, int64_t> out_hw(int64_t h, int64_t w) const;
};

enum class ConvPath { Auto, Direct, Im2col };

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec,
              ConvPath path = ConvPath::Auto);

/// Transposed convolution; output spatial extent is (H-1)*stride - 2*pad + kernel.
/// weight is shaped (in_channels, out_channels, k, k); groups/dilation must be 1.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec);

enum class PoolKind { Max, Avg };

/// Max routes the gradient to the first maximum in row-major window order.
Tensor pool2d(const Tensor& x, PoolKind kind, int window, int stride);

/// align-corners=false (half-pixel centers)
Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
};

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                   bool training, bool update_stats = true, double momentum = 0.1, double eps = 1e-5);

Tensor add(const Tensor& a, const Tensor& b);
/// elementwise product; rhs may also be (N,C,1,1) or (N,1,H,W) against a
/// (N,C,H,W) lhs for per-channel / per-pixel gating
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, std::span<const int64_t> sizes);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// (N,C,H,W) -> (N,C)
Tensor global_avg_pool(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
/// (N,C,H,W) -> (N,1,H,W)
Tensor channel_mean(const Tensor& x);
Tensor channel_max(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// mask is (N,K) against (N,K,H,W) inputs; loss = sum(mask*se) / (sum(mask)*H*W)
Tensor masked_mse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

}  // namespace stnet
