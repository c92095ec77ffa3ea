#include <doctest.h>

#include <cmath>
#include <vector>

#include "grad_util.hpp"
#include "stnet/ops.hpp"
#include "stnet/tensor.hpp"

using namespace stnet;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

// independent reference convolution: plain quintuple loop, no shared code
// with the library kernels
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& s) {
    auto [oh, ow] = s.out_hw(x.dim(2), x.dim(3));
    Tensor y = Tensor::zeros({x.dim(0), s.out_channels, oh, ow}, x.dtype());
    const int64_t cing = s.in_channels / s.groups;
    const int64_t outg = s.out_channels / s.groups;
    for (int64_t n = 0; n < x.dim(0); ++n)
        for (int64_t oc = 0; oc < s.out_channels; ++oc)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = s.bias ? b.at(oc) : 0.0;
                    for (int64_t ic = 0; ic < cing; ++ic)
                        for (int64_t ky = 0; ky < s.kernel; ++ky)
                            for (int64_t kx = 0; kx < s.kernel; ++kx) {
                                const int64_t iy = oy * s.stride - s.padding + ky * s.dilation;
                                const int64_t ix = ox * s.stride - s.padding + kx * s.dilation;
                                if (iy < 0 || iy >= x.dim(2) || ix < 0 || ix >= x.dim(3)) continue;
                                const int64_t c = (oc / outg) * cing + ic;
                                const double xv = x.at(((n * x.dim(1) + c) * x.dim(2) + iy) * x.dim(3) + ix);
                                const double wv = w.at(((oc * cing + ic) * s.kernel + ky) * s.kernel + kx);
                                acc += xv * wv;
                            }
                    y.set(((n * s.out_channels + oc) * oh + oy) * ow + ox, acc);
                }
    return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
    return worst;
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 center value is 9") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0, DType::F64);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0, DType::F64);
    ConvSpec s{.in_channels = 1, .out_channels = 1, .kernel = 3, .padding = 1, .bias = false};
    Tensor y = conv2d(x, w, {}, s);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at(4) == doctest::Approx(9.0));  // center
    CHECK(y.at(0) == doctest::Approx(4.0));  // corner
}

TEST_CASE("dilated conv2d keeps taps inside on 5x5") {
    Tensor x = Tensor::full({1, 1, 5, 5}, 1.0, DType::F64);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0, DType::F64);
    ConvSpec s{.in_channels = 1, .out_channels = 1, .kernel = 3, .dilation = 2, .padding = 2, .bias = false};
    CHECK(s.effective_kernel() == 5);
    Tensor y = conv2d(x, w, {}, s);
    CHECK(y.shape() == Shape{1, 1, 5, 5});
    CHECK(y.at(12) == doctest::Approx(9.0));  // center: all dilated taps inside
}

TEST_CASE("conv2d matches the reference loop and both paths agree") {
    Rng rng(7);
    for (const auto& [cin, cout, k, stride, dil, pad, groups] :
         std::vector<std::tuple<int, int, int, int, int, int, int>>{
             {4, 6, 3, 1, 1, 1, 1},
             {4, 6, 3, 2, 1, 1, 2},
             {4, 4, 3, 1, 2, 2, 4},
             {3, 5, 1, 1, 1, 0, 1},
             {2, 4, 3, 1, 3, 3, 1},
         }) {
        ConvSpec s{.in_channels = cin, .out_channels = cout, .kernel = k, .stride = stride,
                   .dilation = dil, .padding = pad, .groups = groups, .bias = true};
        Tensor x = random_tensor({2, cin, 8, 8}, rng);
        Tensor w = random_tensor({cout, cin / groups, k, k}, rng);
        Tensor b = random_tensor({cout}, rng);
        Tensor ref = conv_reference(x, w, b, s);
        CHECK(max_abs_diff(conv2d(x, w, b, s, ConvPath::Im2col), ref) < 1e-12);
        CHECK(max_abs_diff(conv2d(x, w, b, s, ConvPath::Direct), ref) < 1e-12);
    }
}

TEST_CASE("depthwise conv equals per-channel independent convolution") {
    Rng rng(8);
    const int C = 4;
    Tensor x = random_tensor({2, C, 6, 6}, rng);
    Tensor w = random_tensor({C, 1, 3, 3}, rng);
    ConvSpec s{.in_channels = C, .out_channels = C, .kernel = 3, .padding = 1, .groups = C, .bias = false};
    Tensor y = conv2d(x, w, {}, s);
    // oracle: one single-channel convolution per channel
    for (int c = 0; c < C; ++c) {
        Tensor xc = Tensor::zeros({2, 1, 6, 6}, DType::F64);
        Tensor wc = Tensor::zeros({1, 1, 3, 3}, DType::F64);
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < 36; ++i) xc.set(n * 36 + i, x.at((n * C + c) * 36 + i));
        for (int64_t i = 0; i < 9; ++i) wc.set(i, w.at(c * 9 + i));
        ConvSpec s1{.in_channels = 1, .out_channels = 1, .kernel = 3, .padding = 1, .bias = false};
        Tensor yc = conv_reference(xc, wc, {}, s1);
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < 36; ++i)
                CHECK(y.at((n * C + c) * 36 + i) == doctest::Approx(yc.at(n * 36 + i)).epsilon(1e-12));
    }
}

TEST_CASE("conv2d error cases") {
    Tensor x = Tensor::zeros({1, 4, 8, 8}, DType::F32);
    Tensor w = Tensor::zeros({6, 4, 3, 3}, DType::F32);
    ConvSpec s{.in_channels = 4, .out_channels = 6, .kernel = 3, .padding = 1, .bias = false};

    Tensor wrong_x = Tensor::zeros({1, 3, 8, 8}, DType::F32);
    CHECK_THROWS_AS(conv2d(wrong_x, w, {}, s), std::invalid_argument);

    ConvSpec bad_groups = s;
    bad_groups.groups = 3;
    CHECK_THROWS_AS(conv2d(x, w, {}, bad_groups), std::invalid_argument);

    ConvSpec too_big = s;
    too_big.kernel = 9;
    too_big.padding = 0;
    too_big.dilation = 2;  // effective kernel 17 > 8
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({6, 4, 9, 9}, DType::F32), {}, too_big),
                    std::invalid_argument);
}

TEST_CASE("conv2d gradients vs finite differences") {
    Rng rng(9);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.5);
    Tensor b = random_tensor({4}, rng, 0.5);
    Tensor r = random_tensor({2, 4, 3, 3}, rng);  // random projection, stride-2 output
    ConvSpec s{.in_channels = 3, .out_channels = 4, .kernel = 3, .stride = 2, .padding = 1, .bias = true};
    auto loss = [&] { return sum(mul(conv2d(x, w, b, s), r)); };
    auto res = gradcheck(loss, {x, w, b});
    CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("conv_transpose2d scatters a unit input to the full kernel") {
    Tensor x = Tensor::full({1, 1, 1, 1}, 1.0, DType::F64);
    Tensor w = Tensor::full({1, 1, 2, 2}, 1.0, DType::F64);
    ConvSpec s{.in_channels = 1, .out_channels = 1, .kernel = 2, .stride = 2, .bias = false};
    Tensor y = conv_transpose2d(x, w, {}, s);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (int64_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(1.0));
}

TEST_CASE("conv_transpose2d grad of sum equals valid-tap kernel sums") {
    Rng rng(10);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Tensor w = random_tensor({2, 3, 3, 3}, rng);
    ConvSpec s{.in_channels = 2, .out_channels = 3, .kernel = 3, .stride = 2, .padding = 1, .bias = false};
    x.set_requires_grad(true);
    Tensor y = conv_transpose2d(x, w, {}, s);
    sum(y).backward();
    // oracle: d sum / d x[ci,iy,ix] = sum of kernel weights landing in bounds
    const int64_t oh = y.dim(2), ow = y.dim(3);
    for (int64_t ci = 0; ci < 2; ++ci)
        for (int64_t iy = 0; iy < 4; ++iy)
            for (int64_t ix = 0; ix < 4; ++ix) {
                double expect = 0;
                for (int64_t co = 0; co < 3; ++co)
                    for (int64_t ky = 0; ky < 3; ++ky)
                        for (int64_t kx = 0; kx < 3; ++kx) {
                            const int64_t oy = iy * s.stride - s.padding + ky;
                            const int64_t ox = ix * s.stride - s.padding + kx;
                            if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                            expect += w.at(((ci * 3 + co) * 3 + ky) * 3 + kx);
                        }
                CHECK(x.grad().at((ci * 4 + iy) * 4 + ix) == doctest::Approx(expect).epsilon(1e-10));
            }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({3, 4, 3, 3}, rng);  // (in, out, k, k) for the transpose
    ConvSpec s{.in_channels = 3, .out_channels = 4, .kernel = 3, .stride = 2, .padding = 1, .bias = false};
    Tensor y = conv_transpose2d(x, w, {}, s);
    Tensor r = random_tensor(y.shape(), rng);
    // <T(x), r> must equal <x, C(r)> where C is the conv with the same geometry
    double lhs = 0;
    for (int64_t i = 0; i < y.numel(); ++i) lhs += y.at(i) * r.at(i);
    Tensor wc = Tensor::zeros({3, 4, 3, 3}, DType::F64);  // same buffer layout, conv view (out=3,in=4)
    for (int64_t i = 0; i < wc.numel(); ++i) wc.set(i, w.at(i));
    ConvSpec sc{.in_channels = 4, .out_channels = 3, .kernel = 3, .stride = 2, .padding = 1, .bias = false};
    Tensor back = conv_reference(r, wc, {}, sc);
    double rhs = 0;
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x.at(i) * back.at(i);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("conv_transpose2d gradients vs finite differences") {
    Rng rng(12);
    Tensor x = random_tensor({1, 2, 3, 3}, rng);
    Tensor w = random_tensor({2, 3, 2, 2}, rng, 0.5);
    Tensor b = random_tensor({3}, rng, 0.5);
    ConvSpec s{.in_channels = 2, .out_channels = 3, .kernel = 2, .stride = 2, .bias = true};
    Tensor r = random_tensor({1, 3, 6, 6}, rng);
    auto loss = [&] { return sum(mul(conv_transpose2d(x, w, b, s), r)); };
    CHECK(gradcheck(loss, {x, w, b}).worst_rel < 1e-4);
}

TEST_CASE("pool2d 2x2 basics") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    CHECK(pool2d(x, PoolKind::Max, 2, 2).item() == doctest::Approx(4.0));
    CHECK(pool2d(x, PoolKind::Avg, 2, 2).item() == doctest::Approx(2.5));
    CHECK_THROWS_AS(pool2d(x, PoolKind::Max, 3, 1), std::invalid_argument);
}

TEST_CASE("max-pool tie routes gradient to the lowest linear index") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, std::vector<double>{5, 5, 0, 0}, DType::F64);
    x.set_requires_grad(true);
    Tensor y = pool2d(x, PoolKind::Max, 2, 2);
    sum(y).backward();
    CHECK(x.grad().at(0) == doctest::Approx(1.0));
    CHECK(x.grad().at(1) == doctest::Approx(0.0));
    CHECK(x.grad().at(2) == doctest::Approx(0.0));
    CHECK(x.grad().at(3) == doctest::Approx(0.0));
}

TEST_CASE("pool2d random inputs vs loop oracle") {
    Rng rng(13);
    Tensor x = random_tensor({2, 3, 7, 7}, rng);
    for (PoolKind kind : {PoolKind::Max, PoolKind::Avg}) {
        const int win = 3, stride = 2;
        Tensor y = pool2d(x, kind, win, stride);
        const int64_t oh = (7 - win) / stride + 1;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < oh; ++ox) {
                        double best = -1e300, acc = 0;
                        for (int64_t ky = 0; ky < win; ++ky)
                            for (int64_t kx = 0; kx < win; ++kx) {
                                const double v =
                                    x.at(((n * 3 + c) * 7 + oy * stride + ky) * 7 + ox * stride + kx);
                                best = std::max(best, v);
                                acc += v;
                            }
                        const double want = kind == PoolKind::Max ? best : acc / (win * win);
                        CHECK(y.at(((n * 3 + c) * oh + oy) * oh + ox) == doctest::Approx(want));
                    }
    }
}

TEST_CASE("pool2d gradients vs finite differences") {
    Rng rng(14);
    Tensor x = random_tensor({1, 2, 6, 6}, rng);
    Tensor r1 = random_tensor({1, 2, 3, 3}, rng);
    auto loss_max = [&] { return sum(mul(pool2d(x, PoolKind::Max, 2, 2), r1)); };
    CHECK(gradcheck(loss_max, {x}).worst_rel < 1e-4);
    auto loss_avg = [&] { return sum(mul(pool2d(x, PoolKind::Avg, 2, 2), r1)); };
    CHECK(gradcheck(loss_avg, {x}).worst_rel < 1e-4);
}

TEST_CASE("resize_bilinear identity and constants") {
    Rng rng(15);
    Tensor x = random_tensor({1, 2, 4, 5}, rng);
    CHECK(max_abs_diff(resize_bilinear(x, 4, 5), x) < 1e-12);

    Tensor c = Tensor::full({1, 1, 3, 3}, 2.75, DType::F64);
    Tensor up = resize_bilinear(c, 7, 5);
    for (int64_t i = 0; i < up.numel(); ++i) CHECK(up.at(i) == doctest::Approx(2.75));
    CHECK_THROWS_AS(resize_bilinear(x, 0, 5), std::invalid_argument);
}

TEST_CASE("resize_bilinear 2x2 -> 4x4 closed-form oracle") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3}, DType::F64);
    Tensor y = resize_bilinear(x, 4, 4);
    // half-pixel centers: source coordinate s = (d + 0.5)/2 - 0.5, clamped at 0
    auto axis = [](int64_t d) { return std::max(0.0, (d + 0.5) / 2.0 - 0.5); };
    for (int64_t oy = 0; oy < 4; ++oy)
        for (int64_t ox = 0; ox < 4; ++ox) {
            const double sy = std::min(axis(oy), 1.0), sx = std::min(axis(ox), 1.0);
            const int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
            const int64_t y1 = std::min<int64_t>(y0 + 1, 1), x1 = std::min<int64_t>(x0 + 1, 1);
            const double fy = sy - y0, fx = sx - x0;
            auto v = [&](int64_t yy, int64_t xx) { return x.at(yy * 2 + xx); };
            const double want = (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) +
                                fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
            CHECK(y.at(oy * 4 + ox) == doctest::Approx(want));
        }
}

TEST_CASE("resize_bilinear gradients vs finite differences") {
    Rng rng(16);
    Tensor x = random_tensor({1, 2, 3, 4}, rng);
    Tensor r = random_tensor({1, 2, 6, 8}, rng);
    auto loss = [&] { return sum(mul(resize_bilinear(x, 6, 8), r)); };
    CHECK(gradcheck(loss, {x}).worst_rel < 1e-4);
}

TEST_CASE("batchnorm2d basics") {
    // zero-mean unit-variance batch stays (almost) unchanged with gamma=1 beta=0
    const std::vector<double> vals{-1.5, -0.5, 0.5, 1.5, -1.5, -0.5, 0.5, 1.5};
    Tensor x = Tensor::from_values({2, 1, 2, 2}, vals, DType::F64);
    // normalize the values to exactly zero mean and variance 1-eps, so the
    // eps in the denominator cancels and the op acts as the identity
    const double eps = 1e-5;
    double mean = 0, var = 0;
    for (double v : vals) mean += v;
    mean /= 8;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= 8;
    for (int64_t i = 0; i < 8; ++i)
        x.set(i, (vals[static_cast<size_t>(i)] - mean) / std::sqrt(var) * std::sqrt(1.0 - eps));

    Tensor gamma = Tensor::full({1}, 1.0, DType::F64);
    Tensor beta = Tensor::zeros({1}, DType::F64);
    BatchNormState st{Tensor::zeros({1}, DType::F64), Tensor::full({1}, 1.0, DType::F64)};
    Tensor y = batchnorm2d(x, gamma, beta, st, true);
    CHECK(max_abs_diff(y, x) < 1e-6);

    SUBCASE("gamma=0 zeroes the output") {
        Tensor g0 = Tensor::zeros({1}, DType::F64);
        Tensor y0 = batchnorm2d(x, g0, beta, st, true);
        for (int64_t i = 0; i < y0.numel(); ++i) CHECK(y0.at(i) == doctest::Approx(0.0));
    }
    SUBCASE("channel count mismatch") {
        Tensor g2 = Tensor::zeros({2}, DType::F64);
        CHECK_THROWS_AS(batchnorm2d(x, g2, beta, st, true), std::invalid_argument);
    }
    SUBCASE("running stats update with momentum 0.1") {
        BatchNormState fresh{Tensor::zeros({1}, DType::F64), Tensor::full({1}, 1.0, DType::F64)};
        batchnorm2d(x, gamma, beta, fresh, true);
        CHECK(fresh.running_mean.at(0) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(fresh.running_var.at(0) == doctest::Approx(0.9 + 0.1 * (1.0 - eps) * (8.0 / 7.0)));
    }
}

TEST_CASE("batchnorm2d gradients vs finite differences (train and eval)") {
    Rng rng(17);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor gamma = random_tensor({3}, rng, 0.5);
    Tensor beta = random_tensor({3}, rng, 0.5);
    Tensor r = random_tensor({2, 3, 4, 4}, rng);
    BatchNormState st{random_tensor({3}, rng, 0.1), Tensor::full({3}, 1.3, DType::F64)};
    for (bool training : {true, false}) {
        auto loss = [&] {
            return sum(mul(batchnorm2d(x, gamma, beta, st, training, /*update_stats=*/false), r));
        };
        CHECK(gradcheck(loss, {x, gamma, beta}).worst_rel < 1e-4);
    }
}

TEST_CASE("elementwise suite semantics") {
    Rng rng(18);
    SUBCASE("split of concat is the identity, bitwise") {
        Tensor a = random_tensor({2, 3, 4, 4}, rng);
        Tensor b = random_tensor({2, 5, 4, 4}, rng);
        Tensor cat = concat(std::vector<Tensor>{a, b}, 1);
        auto parts = split(cat, 1, std::vector<int64_t>{3, 5});
        CHECK(max_abs_diff(parts[0], a) == 0.0);
        CHECK(max_abs_diff(parts[1], b) == 0.0);
    }
    SUBCASE("relu backward is zero where input < 0") {
        Tensor x = Tensor::from_values({4}, std::vector<double>{-2, -0.5, 0.5, 2}, DType::F64);
        x.set_requires_grad(true);
        sum(relu(x)).backward();
        CHECK(x.grad().at(0) == 0.0);
        CHECK(x.grad().at(1) == 0.0);
        CHECK(x.grad().at(2) == 1.0);
        CHECK(x.grad().at(3) == 1.0);
    }
    SUBCASE("mse_loss(x, x) is zero with zero gradient") {
        Tensor x = random_tensor({3, 3}, rng);
        x.set_requires_grad(true);
        Tensor loss = mse_loss(x, x.detached());
        CHECK(loss.item() == 0.0);
        loss.backward();
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad().at(i) == 0.0);
    }
    SUBCASE("concat shape mismatch") {
        Tensor a = random_tensor({2, 3, 4, 4}, rng);
        Tensor b = random_tensor({2, 5, 3, 4}, rng);
        CHECK_THROWS_AS(concat(std::vector<Tensor>{a, b}, 1), std::invalid_argument);
    }
    SUBCASE("split size mismatch") {
        Tensor a = random_tensor({2, 6}, rng);
        CHECK_THROWS_AS(split(a, 1, std::vector<int64_t>{3, 4}), std::invalid_argument);
    }
}

TEST_CASE("gradients of the remaining primitives vs finite differences") {
    Rng rng(19);
    Tensor x = random_tensor({2, 4, 3, 3}, rng);
    Tensor r4 = random_tensor({2, 4, 3, 3}, rng);

    SUBCASE("sigmoid") {
        auto loss = [&] { return sum(mul(sigmoid(x), r4)); };
        CHECK(gradcheck(loss, {x}).worst_rel < 1e-4);
    }
    SUBCASE("mul with per-channel and per-pixel broadcast") {
        Tensor gate_c = random_tensor({2, 4, 1, 1}, rng);
        Tensor gate_p = random_tensor({2, 1, 3, 3}, rng);
        auto loss = [&] { return sum(mul(mul(mul(x, gate_c), gate_p), r4)); };
        CHECK(gradcheck(loss, {x, gate_c, gate_p}).worst_rel < 1e-4);
    }
    SUBCASE("concat and split") {
        Tensor b = random_tensor({2, 2, 3, 3}, rng);
        Tensor rc = random_tensor({2, 6, 3, 3}, rng);
        auto loss = [&] { return sum(mul(concat(std::vector<Tensor>{x, b}, 1), rc)); };
        CHECK(gradcheck(loss, {x, b}).worst_rel < 1e-4);
        auto loss2 = [&] {
            auto parts = split(x, 1, std::vector<int64_t>{1, 3});
            return add(sum(parts[0]), scalar_mul(sum(parts[1]), 2.0));
        };
        CHECK(gradcheck(loss2, {x}).worst_rel < 1e-4);
    }
    SUBCASE("linear") {
        Tensor xin = random_tensor({3, 5}, rng);
        Tensor w = random_tensor({2, 5}, rng);
        Tensor b = random_tensor({2}, rng);
        Tensor rr = random_tensor({3, 2}, rng);
        auto loss = [&] { return sum(mul(linear(xin, w, b), rr)); };
        CHECK(gradcheck(loss, {xin, w, b}).worst_rel < 1e-4);
    }
    SUBCASE("global_avg_pool, channel_mean, channel_max") {
        Tensor rgap = random_tensor({2, 4}, rng);
        auto loss = [&] { return sum(mul(global_avg_pool(x), rgap)); };
        CHECK(gradcheck(loss, {x}).worst_rel < 1e-4);
        Tensor rhw = random_tensor({2, 1, 3, 3}, rng);
        auto loss_m = [&] { return sum(mul(channel_mean(x), rhw)); };
        CHECK(gradcheck(loss_m, {x}).worst_rel < 1e-4);
        auto loss_x = [&] { return sum(mul(channel_max(x), rhw)); };
        CHECK(gradcheck(loss_x, {x}).worst_rel < 1e-4);
    }
    SUBCASE("mse and masked mse") {
        Tensor t = random_tensor({2, 4, 3, 3}, rng);
        auto loss = [&] { return mse_loss(x, t); };
        CHECK(gradcheck(loss, {x}).worst_rel < 1e-4);
        Tensor mask = Tensor::from_values({2, 4}, std::vector<double>{1, 0, 1, 1, 0, 1, 1, 0}, DType::F64);
        auto loss_m = [&] { return masked_mse_loss(x, t, mask); };
        CHECK(gradcheck(loss_m, {x}).worst_rel < 1e-4);
    }
}

TEST_CASE("masked_mse_loss rejects empty masks") {
    Tensor x = Tensor::zeros({1, 2, 2, 2}, DType::F64);
    Tensor mask = Tensor::zeros({1, 2}, DType::F64);
    CHECK_THROWS_AS(masked_mse_loss(x, x, mask), std::invalid_argument);
}

TEST_CASE("determinism: identical seeds give identical conv outputs") {
    auto run = [] {
        Rng rng(123);
        Tensor x = random_tensor({2, 3, 8, 8}, rng, 1.0, DType::F32);
        Tensor w = random_tensor({5, 3, 3, 3}, rng, 1.0, DType::F32);
        ConvSpec s{.in_channels = 3, .out_channels = 5, .kernel = 3, .padding = 1, .bias = false};
        return conv2d(x, w, {}, s);
    };
    Tensor a = run(), b = run();
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}
