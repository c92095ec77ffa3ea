#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stnet/blocks.hpp"
#include "stnet/nn.hpp"

namespace stnet {

struct ModelConfig {
    int stages = 1;
    int trunk_width = 32;
    int joints = 17;
    int input_h = 256;
    int input_w = 192;
    bool mdbs = true;
    bool stf = true;
    bool attention = true;
    bool channel_halving = true;
    bool depthwise = false;
    int stc_branches = 4;
    int tb_reduction = 1;  // width divisor inside the fusion transformation blocks

    void validate() const;
    int64_t trunk_h() const { return input_h / 4; }
    int64_t trunk_w() const { return input_w / 4; }
};

/// per-STC branch taps captured during a diagnostic forward pass
using TapSink = std::vector<std::pair<std::string, std::vector<Tensor>>>;

/// Stem and residual stage in front of the stair units: two stride-2 convs
/// (3 -> 2W -> 2W), four bottleneck blocks expanding to 8W, and a 3x3
/// transition onto the trunk width, all ending at quarter resolution.
class FrontEnd {
public:
    FrontEnd(Builder& b, int trunk_width, int64_t in_h, int64_t in_w);
    Tensor forward(const Tensor& image, ForwardCtx& ctx);

private:
    struct Bottleneck {
        nn::Conv2d c1, c2, c3, sc;
        nn::BatchNorm2d b1, b2, b3, bsc;
        bool has_sc = false;
    };
    nn::Conv2d c1_, c2_, trans_;
    nn::BatchNorm2d bn1_, bn2_, bn_t_;
    std::vector<Bottleneck> blocks_;
};

/// One stair unit: four columns, each running a cell on every live branch,
/// fusing all live branches at every resolution, then opening the next
/// branch by stride-2 downsampling. Branch b runs 5-b cells.
class StairUnit {
public:
    static constexpr int kBranches = 4;

    StairUnit(Builder& b, const ModelConfig& cfg, int64_t trunk_h, int64_t trunk_w);
    std::array<Tensor, kBranches> forward(const Tensor& trunk_in, ForwardCtx& ctx,
                                          TapSink* taps = nullptr);

private:
    struct Resample {
        int src = 0, dst = 0;  // 0-based branch ids
        std::vector<std::pair<nn::Conv2d, nn::BatchNorm2d>> downs;
        nn::Conv2d up;
        nn::BatchNorm2d up_bn;
    };
    struct CellSlot {
        StairCell cell;
        std::string label;
    };
    struct Column {
        std::vector<CellSlot> cells;
        std::vector<Resample> fusion;
        std::optional<std::pair<nn::Conv2d, nn::BatchNorm2d>> create;
    };
    Tensor resample(Resample& r, const Tensor& x, ForwardCtx& ctx);

    int trunk_width_;
    std::array<std::pair<int64_t, int64_t>, kBranches> res_;
    std::vector<Column> columns_;
};

struct MdbsState {
    Tensor consolidation;  // first-half slice from the previous stage
    Tensor excavation;     // concatenated second-half slices, width n*(stage)
    int next_stage = 0;
};

/// Inter-unit bridge: a shared 1x1 conv split into a summed consolidation
/// half and a densely concatenated excavation half, then a 1x1 adapter back
/// to the trunk width.
class MdbsBridge {
public:
    MdbsBridge(Builder& b, int trunk_width, int stage, int64_t h, int64_t w);
    Tensor forward(const Tensor& branch1, MdbsState& st, ForwardCtx& ctx);
    int growth() const { return n_; }

private:
    int n_;
    int stage_;
    nn::Conv2d h_conv_, adapter_;
};

/// Image-feature replenishment applied once after the last unit: multi-scale
/// image pyramid through transformation blocks, concatenation with branch
/// features, 1x1 projection, and stride-2 deconvolution chains back to trunk
/// resolution where the four maps are summed.
class StairFusion {
public:
    StairFusion(Builder& b, const ModelConfig& cfg, int64_t trunk_h, int64_t trunk_w);
    Tensor forward(const Tensor& image, const std::array<Tensor, StairUnit::kBranches>& feats,
                   ForwardCtx& ctx);

private:
    struct ScalePath {
        TransformationBlock tb;
        nn::Conv2d proj;
        nn::BatchNorm2d proj_bn;
        std::vector<std::pair<nn::ConvTranspose2d, nn::BatchNorm2d>> ups;
    };
    std::vector<ScalePath> scales_;
};

class StairNet {
public:
    static StairNet build(const ModelConfig& cfg, DType dtype, uint64_t seed);
    /// cost catalog from the identical construction path, no tensors allocated
    static std::vector<LayerInfo> plan(const ModelConfig& cfg);

    Tensor forward(const Tensor& image, ForwardCtx& ctx, TapSink* taps = nullptr);

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedTensor>& params() { return params_; }
    const std::vector<NamedTensor>& params() const { return params_; }
    std::vector<NamedTensor>& buffers() { return buffers_; }
    const std::vector<NamedTensor>& buffers() const { return buffers_; }
    int64_t param_count() const;
    void zero_grad();

private:
    StairNet(const ModelConfig& cfg, Builder& b);

    ModelConfig cfg_;
    bool materialized_ = false;
    std::unique_ptr<FrontEnd> front_;
    std::vector<StairUnit> units_;
    std::vector<MdbsBridge> bridges_;
    std::unique_ptr<StairFusion> stf_;
    nn::Conv2d head_;
    std::vector<NamedTensor> params_, buffers_;
};

}  // namespace stnet
