#pragma once

#include <optional>
#include <vector>

#include "stnet/nn.hpp"

namespace stnet {

struct StcConfig {
    int width = 32;           // channels in == channels out
    int branch_count = 4;     // chained atrous layers
    int base_dilation = 1;    // dilation of the first layer
    bool depthwise = false;   // factor each 3x3 into depthwise + pointwise
    bool attention = true;
    bool channel_halving = true;

    void validate() const;
};

/// Width schedule of the chained layers: halve per step, last two equal, so
/// the widths sum exactly to `width`. Single branch degenerates to (width).
std::vector<int> stc_branch_widths(int width, int branch_count);

/// channel-attention reduction rate, growing with width
int attention_reduction(int width);

class MixAttention {
public:
    MixAttention(Builder& b, int width, int64_t h, int64_t w);
    Tensor forward(const Tensor& x, ForwardCtx& ctx);

private:
    int width_;
    nn::Linear fc1_, fc2_;
    nn::Conv2d spatial_;
};

class StairCell {
public:
    StairCell(Builder& b, const StcConfig& cfg, int64_t h, int64_t w);
    /// taps, when non-null, receives the per-layer pre-merge outputs
    Tensor forward(const Tensor& x, ForwardCtx& ctx, std::vector<Tensor>* taps = nullptr);
    const StcConfig& config() const { return cfg_; }

private:
    struct StairLayer {
        bool separable = false;
        nn::Conv2d dw;  // used when separable
        nn::BatchNorm2d dw_bn;
        nn::Conv2d conv;  // pointwise when separable, full 3x3 otherwise
        nn::BatchNorm2d bn;
    };
    StcConfig cfg_;
    std::vector<StairLayer> layers_;
    std::optional<MixAttention> attention_;
};

/// Shallow image-side feature extractor used by the fusion stage: four 3x3
/// convolutions mapping 3 -> out/reduction (x3) -> out, spatial size kept.
class TransformationBlock {
public:
    TransformationBlock(Builder& b, int out_channels, int reduction, int64_t h, int64_t w);
    Tensor forward(const Tensor& image, ForwardCtx& ctx);

private:
    struct Step {
        nn::Conv2d conv;
        nn::BatchNorm2d bn;
    };
    std::vector<Step> steps_;
};

/// Pearson correlation between channel-mean-pooled branch responses.
/// Entries are NaN where a branch has zero variance.
std::vector<std::vector<double>> branch_correlation(const std::vector<Tensor>& taps);

}  // namespace stnet
