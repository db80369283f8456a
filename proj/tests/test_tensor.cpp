#include <catch_amalgamated.hpp>

#include <sfuda3d/tensor.hpp>

#include "support.hpp"

using namespace sfuda3d;
using testsupport::FdTol;
using testsupport::finite_diff_max_err;
using testsupport::random_values;

TEMPLATE_TEST_CASE("conv3d basics", "[tensor]", float, double) {
    using R = TestType;
    SECTION("all-zero input gives all-zero output") {
        auto x = TensorT<R>::zeros({1, 2, 4, 4, 4});
        Rng rng(7);
        auto k = TensorT<R>::from({3, 2, 3, 3, 3}, random_values<R>(3 * 2 * 27, rng));
        auto y = conv3d(x, k, 1, 1, 1);
        for (R v : y.data()) REQUIRE(v == R(0));
    }
    SECTION("degenerate 1x1x1 convolution multiplies") {
        auto x = TensorT<R>::from({1, 1, 1, 1, 1}, {R(2.5)});
        auto k = TensorT<R>::from({1, 1, 1, 1, 1}, {R(-1.5)});
        auto y = conv3d(x, k, 1, 1, 0);
        REQUIRE(y.item() == R(2.5) * R(-1.5));
    }
    SECTION("output shape follows the floor formula") {
        auto x = TensorT<R>::zeros({1, 1, 9, 9, 9});
        auto k = TensorT<R>::zeros({2, 1, 3, 3, 3});
        auto s1 = conv3d(x, k, 2, 1, 1).shape();
        REQUIRE(s1 == std::vector<int>{1, 2, 5, 5, 5});
        auto s2 = conv3d(x, k, 1, 2, 2).shape();
        REQUIRE(s2 == std::vector<int>{1, 2, 9, 9, 9});
        auto s3 = conv3d(x, k, 1, 4, 0).shape();
        REQUIRE(s3 == std::vector<int>{1, 2, 1, 1, 1});
    }
    SECTION("channel mismatch is a dimension error") {
        auto x = TensorT<R>::zeros({1, 2, 4, 4, 4});
        auto k = TensorT<R>::zeros({3, 3, 3, 3, 3});
        REQUIRE_THROWS_AS(conv3d(x, k, 1, 1, 1), DimensionError);
    }
    SECTION("no valid kernel placement is a parameter error") {
        auto x = TensorT<R>::zeros({1, 1, 2, 2, 2});
        auto k = TensorT<R>::zeros({1, 1, 3, 3, 3});
        REQUIRE_THROWS_AS(conv3d(x, k, 1, 1, 0), ParameterError);
    }
}

TEST_CASE("conv3d is linear in its input", "[tensor]") {
    Rng rng(11);
    auto xv = random_values<float>(2 * 5 * 5 * 5, rng);
    auto yv = random_values<float>(2 * 5 * 5 * 5, rng);
    auto kv = random_values<float>(3 * 2 * 27, rng);
    const float a = 0.7f, b = -1.3f;
    std::vector<float> comb(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) comb[i] = a * xv[i] + b * yv[i];
    auto k = Tensor::from({3, 2, 3, 3, 3}, kv);
    auto lhs = conv3d(Tensor::from({1, 2, 5, 5, 5}, comb), k, 1, 1, 1);
    auto cx = conv3d(Tensor::from({1, 2, 5, 5, 5}, xv), k, 1, 1, 1);
    auto cy = conv3d(Tensor::from({1, 2, 5, 5, 5}, yv), k, 1, 1, 1);
    for (int64_t i = 0; i < lhs.numel(); ++i) {
        const float expect = a * cx.data()[size_t(i)] + b * cy.data()[size_t(i)];
        REQUIRE_THAT(lhs.data()[size_t(i)], Catch::Matchers::WithinAbs(expect, 1e-4));
    }
}

TEST_CASE("conv3d is deterministic across thread counts", "[tensor]") {
    Rng rng(13);
    auto xv = random_values<float>(4 * 8 * 8 * 8, rng);
    auto kv = random_values<float>(8 * 4 * 27, rng);
    const int saved = max_threads();
    set_max_threads(1);
    auto y1 = conv3d(Tensor::from({1, 4, 8, 8, 8}, xv), Tensor::from({8, 4, 3, 3, 3}, kv), 1, 1, 1);
    set_max_threads(4);
    auto y4 = conv3d(Tensor::from({1, 4, 8, 8, 8}, xv), Tensor::from({8, 4, 3, 3, 3}, kv), 1, 1, 1);
    set_max_threads(saved);
    REQUIRE(y1.data() == y4.data());
}

TEMPLATE_TEST_CASE("conv3d gradients match finite differences", "[tensor][grad]", float, double) {
    using R = TestType;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        Rng rng(seed);
        auto x = TensorT<R>::from({1, 2, 5, 5, 5}, random_values<R>(2 * 125, rng), true);
        auto k = TensorT<R>::from({3, 2, 3, 3, 3}, random_values<R>(3 * 2 * 27, rng), true);
        auto w = testsupport::loss_weights<R>({1, 3, 3, 3, 3}, rng);
        auto fn = [&] { return sum(mul(conv3d(x, k, 2, 1, 1), w)); };
        REQUIRE(finite_diff_max_err<R>(fn, {x, k}) < FdTol<R>::tol);
    }
}

TEMPLATE_TEST_CASE("dilated conv gradients", "[tensor][grad]", float, double) {
    using R = TestType;
    Rng rng(21);
    auto x = TensorT<R>::from({1, 1, 6, 6, 6}, random_values<R>(216, rng), true);
    auto k = TensorT<R>::from({2, 1, 3, 3, 3}, random_values<R>(54, rng), true);
    auto w = testsupport::loss_weights<R>({1, 2, 6, 6, 6}, rng);
    auto fn = [&] { return sum(mul(conv3d(x, k, 1, 2, 2), w)); };
    REQUIRE(finite_diff_max_err<R>(fn, {x, k}) < FdTol<R>::tol);
}

TEST_CASE("relu forward", "[tensor]") {
    auto x = Tensor::from({1, 1, 1, 1, 3}, {-1.f, 0.f, 2.f});
    auto y = relu(x);
    REQUIRE(y.data() == std::vector<float>{0.f, 0.f, 2.f});

    auto neg = Tensor::from({1, 1, 1, 1, 3}, {-1.f, -5.f, -0.25f}, true);
    auto z = sum(relu(neg));
    backward(z);
    REQUIRE(z.item() == 0.f);
    for (float g : neg.grad()) REQUIRE(g == 0.f);
}

TEMPLATE_TEST_CASE("relu gradient away from the kink", "[tensor][grad]", float, double) {
    using R = TestType;
    Rng rng(5);
    std::vector<R> vals(64);
    for (auto& v : vals) {
        do {
            v = R(rng.uniform(-1.0, 1.0));
        } while (std::abs(double(v)) <= 1e-3);
    }
    auto x = TensorT<R>::from({1, 1, 4, 4, 4}, vals, true);
    auto w = testsupport::loss_weights<R>({1, 1, 4, 4, 4}, rng);
    auto fn = [&] { return sum(mul(relu(x), w)); };
    REQUIRE(finite_diff_max_err<R>(fn, {x}) < FdTol<R>::tol);
}

TEST_CASE("trilinear_upsample identity and constants", "[tensor]") {
    Rng rng(9);
    auto x = Tensor::from({1, 2, 3, 3, 3}, random_values<float>(2 * 27, rng));
    auto y = trilinear_upsample(x, 1);
    REQUIRE(y.data() == x.data());

    auto c = Tensor::from({1, 1, 2, 2, 2}, std::vector<float>(8, 3.25f));
    auto u = trilinear_upsample(c, 3);
    REQUIRE(u.shape() == std::vector<int>{1, 1, 6, 6, 6});
    for (float v : u.data()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(3.25, 1e-6));

    REQUIRE_THROWS_AS(trilinear_upsample(x, 0), ParameterError);
}

TEST_CASE("trilinear_upsample matches a direct interpolation oracle", "[tensor]") {
    // 2x2x2 ramp, factor 2, align-corners=false sampling
    std::vector<float> ramp(8);
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) ramp[size_t((z * 2 + y) * 2 + x)] = float(x + 2 * y + 4 * z);
    auto t = Tensor::from({1, 1, 2, 2, 2}, ramp);
    auto u = trilinear_upsample(t, 2);

    auto oracle = [&](int zo, int yo, int xo) {
        auto axis = [](int o) {
            double src = (o + 0.5) / 2.0 - 0.5;
            src = std::min(std::max(src, 0.0), 1.0);
            const int a = std::min(int(std::floor(src)), 1);
            return std::pair<int, double>(a, src - a);
        };
        auto [z0, tz] = axis(zo);
        auto [y0, ty] = axis(yo);
        auto [x0, tx] = axis(xo);
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const int zi = std::min(z0 + dz, 1), yi = std::min(y0 + dy, 1),
                              xi = std::min(x0 + dx, 1);
                    const double w = (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx);
                    acc += w * double(ramp[size_t((zi * 2 + yi) * 2 + xi)]);
                }
        return acc;
    };
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                REQUIRE_THAT(u.data()[size_t((z * 4 + y) * 4 + x)],
                             Catch::Matchers::WithinAbs(oracle(z, y, x), 1e-6));
}

TEMPLATE_TEST_CASE("trilinear_upsample gradient", "[tensor][grad]", float, double) {
    using R = TestType;
    Rng rng(17);
    auto x = TensorT<R>::from({1, 2, 2, 2, 2}, random_values<R>(16, rng), true);
    auto w = testsupport::loss_weights<R>({1, 2, 4, 4, 4}, rng);
    auto fn = [&] { return sum(mul(trilinear_upsample(x, 2), w)); };
    REQUIRE(finite_diff_max_err<R>(fn, {x}) < FdTol<R>::tol);
}

TEST_CASE("softmax_channel forward", "[tensor]") {
    SECTION("two equal logits") {
        auto x = Tensor::from({1, 2, 1, 1, 1}, {0.4f, 0.4f});
        auto p = softmax_channel(x);
        REQUIRE_THAT(p.data()[0], Catch::Matchers::WithinAbs(0.5, 1e-6));
        REQUIRE_THAT(p.data()[1], Catch::Matchers::WithinAbs(0.5, 1e-6));
    }
    SECTION("huge logit gap does not overflow") {
        auto x = Tensor::from({1, 2, 1, 1, 1}, {1000.f, 0.f});
        auto p = softmax_channel(x);
        REQUIRE_THAT(p.data()[0], Catch::Matchers::WithinAbs(1.0, 1e-6));
        REQUIRE_THAT(p.data()[1], Catch::Matchers::WithinAbs(0.0, 1e-6));
    }
    SECTION("per-voxel sums are 1 and entries lie in [0,1]") {
        Rng rng(23);
        auto x = Tensor::from({2, 5, 3, 3, 3}, random_values<float>(2 * 5 * 27, rng, -4, 4));
        auto p = softmax_channel(x);
        const int64_t V = 27;
        for (int n = 0; n < 2; ++n)
            for (int64_t v = 0; v < V; ++v) {
                double s = 0.0;
                for (int c = 0; c < 5; ++c) {
                    const float pv = p.data()[size_t((n * 5 + c) * V + v)];
                    REQUIRE(pv >= 0.f);
                    REQUIRE(pv <= 1.f);
                    s += double(pv);
                }
                REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-5));
            }
    }
}

TEMPLATE_TEST_CASE("softmax gradient", "[tensor][grad]", float, double) {
    using R = TestType;
    Rng rng(29);
    auto x = TensorT<R>::from({1, 3, 2, 2, 2}, random_values<R>(24, rng, -2, 2), true);
    auto w = testsupport::loss_weights<R>({1, 3, 2, 2, 2}, rng);
    auto fn = [&] { return sum(mul(softmax_channel(x), w)); };
    REQUIRE(finite_diff_max_err<R>(fn, {x}) < FdTol<R>::tol);
}

TEST_CASE("cross_entropy values", "[tensor]") {
    SECTION("perfect prediction has zero loss") {
        auto p = Tensor::from({1, 2, 1, 1, 1}, {1.f, 0.f});
        std::vector<uint8_t> t{0};
        REQUIRE(cross_entropy<float>(p, t).item() == 0.f);
    }
    SECTION("uniform prediction on two classes is ln 2") {
        auto p = Tensor::from({1, 2, 1, 1, 1}, {0.5f, 0.5f});
        std::vector<uint8_t> t{0};
        REQUIRE_THAT(cross_entropy<float>(p, t).item(),
                     Catch::Matchers::WithinAbs(0.6931471805599453, 1e-6));
    }
    SECTION("matches the direct -log p summation oracle") {
        Rng rng(31);
        const int C = 4;
        const int64_t V = 27;
        auto logits = Tensor::from({1, C, 3, 3, 3}, random_values<float>(C * V, rng, -2, 2));
        auto p = softmax_channel(logits);
        std::vector<uint8_t> t(static_cast<size_t>(V));
        for (auto& c : t) c = uint8_t(rng.uniform_index(C));
        double expect = 0.0;
        for (int64_t v = 0; v < V; ++v)
            expect -= std::log(std::max(double(p.data()[size_t(t[size_t(v)] * V + v)]), 1e-12));
        expect /= double(V);
        REQUIRE_THAT(cross_entropy<float>(p, t).item(), Catch::Matchers::WithinAbs(expect, 1e-6));
    }
    SECTION("loss is non-negative") {
        Rng rng(37);
        auto p = softmax_channel(Tensor::from({1, 3, 2, 2, 2}, random_values<float>(24, rng, -3, 3)));
        std::vector<uint8_t> t(8);
        for (auto& c : t) c = uint8_t(rng.uniform_index(3));
        REQUIRE(cross_entropy<float>(p, t).item() >= 0.f);
    }
    SECTION("label out of range") {
        auto p = Tensor::from({1, 2, 1, 1, 1}, {0.5f, 0.5f});
        std::vector<uint8_t> t{2};
        REQUIRE_THROWS_AS(cross_entropy<float>(p, t), LabelError);
    }
}

TEMPLATE_TEST_CASE("softmax->cross_entropy gradient", "[tensor][grad]", float, double) {
    using R = TestType;
    Rng rng(41);
    // float: single voxel keeps the finite-difference quotient above the
    // 32-bit noise floor; double: full spatial mean
    const bool single = std::is_same_v<R, float>;
    const std::vector<int> shape = single ? std::vector<int>{1, 4, 1, 1, 1}
                                          : std::vector<int>{1, 3, 2, 2, 2};
    const int C = shape[1];
    const size_t vox = size_t(shape[2]) * shape[3] * shape[4];
    auto x = TensorT<R>::from(shape, random_values<R>(size_t(C) * vox, rng, -1, 1), true);
    std::vector<uint8_t> t(vox);
    for (auto& c : t) c = uint8_t(rng.uniform_index(uint64_t(C)));
    auto fn = [&] { return cross_entropy<R>(softmax_channel(x), t); };
    REQUIRE(finite_diff_max_err<R>(fn, {x}) < FdTol<R>::tol);
}

TEST_CASE("global_avg_pool", "[tensor]") {
    auto c = Tensor::from({1, 1, 2, 2, 2}, std::vector<float>(8, 1.75f));
    REQUIRE_THAT(global_avg_pool(c).item(), Catch::Matchers::WithinAbs(1.75, 1e-7));

    auto two = Tensor::from({1, 1, 1, 1, 2}, {0.f, 2.f});
    REQUIRE_THAT(global_avg_pool(two).item(), Catch::Matchers::WithinAbs(1.0, 1e-7));

    auto x = Tensor::from({1, 1, 2, 2, 2}, std::vector<float>(8, 0.5f), true);
    auto loss = sum(global_avg_pool(x));
    backward(loss);
    for (float g : x.grad()) REQUIRE_THAT(g, Catch::Matchers::WithinAbs(1.0 / 8.0, 1e-7));
}

TEMPLATE_TEST_CASE("pool, bias, concat and field_points gradients", "[tensor][grad]", float,
                   double) {
    using R = TestType;
    Rng rng(43);
    auto x = TensorT<R>::from({1, 2, 2, 2, 2}, random_values<R>(16, rng), true);
    auto b = TensorT<R>::from({2}, random_values<R>(2, rng), true);
    auto w1 = testsupport::loss_weights<R>({1, 2, 1, 1, 1}, rng);
    auto fn1 = [&] { return sum(mul(global_avg_pool(bias_add(x, b)), w1)); };
    REQUIRE(finite_diff_max_err<R>(fn1, {x, b}) < FdTol<R>::tol);

    auto y = TensorT<R>::from({1, 3, 2, 2, 2}, random_values<R>(24, rng), true);
    auto w2 = testsupport::loss_weights<R>({8, 5}, rng);
    auto fn2 = [&] {
        return sum(mul(field_points(concat_channels<R>({x, y})), w2));
    };
    REQUIRE(finite_diff_max_err<R>(fn2, {x, y}) < FdTol<R>::tol);
}

TEST_CASE("field_points layout", "[tensor]") {
    // voxel v of channel c lands at row v, column c
    auto x = Tensor::from({1, 2, 1, 1, 2}, {10.f, 11.f, 20.f, 21.f});
    auto p = field_points(x);
    REQUIRE(p.shape() == std::vector<int>{2, 2});
    REQUIRE(p.data() == std::vector<float>{10.f, 20.f, 11.f, 21.f});
}

TEST_CASE("backward basics", "[tensor]") {
    SECTION("sum gives unit gradients") {
        auto x = Tensor::from({1, 1, 1, 1, 4}, {1.f, 2.f, 3.f, 4.f}, true);
        backward(sum(x));
        for (float g : x.grad()) REQUIRE(g == 1.f);
    }
    SECTION("x*x at 3 gives 6") {
        auto x = Tensor::from({1}, {3.f}, true);
        backward(sum(mul(x, x)));
        REQUIRE(x.grad()[0] == 6.f);
    }
    SECTION("non-scalar loss is a contract error") {
        auto x = Tensor::from({1, 1, 1, 1, 2}, {1.f, 2.f}, true);
        auto y = relu(x);
        REQUIRE_THROWS_AS(backward(y), ContractError);
    }
    SECTION("repeated backward accumulates leaf gradients") {
        auto x = Tensor::from({1}, {3.f}, true);
        auto loss = sum(mul(x, x));
        backward(loss);
        backward(loss);
        REQUIRE(x.grad()[0] == 12.f);
    }
    SECTION("NaN input surfaces as a numeric error") {
        auto x = Tensor::from({1}, {std::numeric_limits<float>::quiet_NaN()});
        REQUIRE_THROWS_AS(mul(x, x), NumericError);
    }
}

TEST_CASE("graph dump lists ops and shapes", "[tensor]") {
    auto x = Tensor::from({1, 1, 2, 2, 2}, std::vector<float>(8, 1.f), true);
    auto k = Tensor::from({2, 1, 3, 3, 3}, std::vector<float>(54, 0.1f), true);
    auto out = sum(relu(conv3d(x, k, 1, 1, 1)));
    const std::string dump = dump_graph(out);
    REQUIRE(dump.find("conv3d") != std::string::npos);
    REQUIRE(dump.find("relu") != std::string::npos);
    REQUIRE(dump.find("sum") != std::string::npos);
    REQUIRE(dump.find("[1,2,2,2,2]") != std::string::npos);
}

TEST_CASE("adam steps", "[tensor]") {
    SECTION("zero gradient leaves parameters unchanged exactly") {
        auto p = Tensor::from({3}, {1.f, -2.f, 0.5f}, true);
        Adam opt({p}, 0.1);
        opt.zero_grad();
        opt.step();
        REQUIRE(p.data() == std::vector<float>{1.f, -2.f, 0.5f});
    }
    SECTION("first step with unit gradient moves by -lr/(1+eps)") {
        const double lr = 0.01, eps = 1e-8;
        auto p = Tensor::from({1}, {0.f}, true);
        Adam opt({p}, lr, 0.9, 0.999, eps);
        p.grad()[0] = 1.f;
        opt.step();
        REQUIRE_THAT(double(p.data()[0]), Catch::Matchers::WithinAbs(-lr / (1.0 + eps), 1e-9));
    }
    SECTION("matches a hand-rolled recurrence over several steps") {
        const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        auto p = Tensor::from({1}, {0.7f}, true);
        Adam opt({p}, lr, b1, b2, eps);
        double ref = 0.7, m = 0.0, v = 0.0;
        Rng rng(3);
        for (int t = 1; t <= 20; ++t) {
            const double g = rng.uniform(-1.0, 1.0);
            p.zero_grad();
            p.grad()[0] = float(g);
            opt.step();
            const double gr = double(float(g));
            m = b1 * m + (1 - b1) * gr;
            v = b2 * v + (1 - b2) * gr * gr;
            // mirror the float storage of the moments
            m = double(float(m));
            v = double(float(v));
            const double mhat = m / (1 - std::pow(b1, t));
            const double vhat = v / (1 - std::pow(b2, t));
            ref = double(float(ref - float(lr * mhat / (std::sqrt(vhat) + eps))));
            REQUIRE_THAT(double(p.data()[0]), Catch::Matchers::WithinAbs(ref, 1e-7));
        }
    }
    SECTION("two identical runs are bit-identical") {
        auto run = [] {
            auto p = Tensor::from({4}, {0.1f, 0.2f, 0.3f, 0.4f}, true);
            Adam opt({p}, 0.02);
            Rng rng(77);
            for (int t = 0; t < 50; ++t) {
                p.zero_grad();
                for (auto& g : p.grad()) g = float(rng.uniform(-1, 1));
                opt.step();
            }
            return p.data();
        };
        REQUIRE(run() == run());
    }
}
