#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include <sfuda3d/swd.hpp>

#include "support.hpp"

using namespace sfuda3d;
using testsupport::random_values;

namespace {

// exact 1-D OT by exhaustive search over pairings, n <= 7
double brute_force_w1d(std::vector<double> a, std::vector<double> b) {
    std::vector<size_t> perm(b.size());
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double acc = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[perm[i]];
            acc += d * d;
        }
        best = std::min(best, acc / double(a.size()));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

}  // namespace

TEST_CASE("wasserstein1d basics", "[swd]") {
    std::vector<double> a{1.0, 2.0, 3.0};
    REQUIRE(wasserstein1d<double>(a, a) == 0.0);

    std::vector<double> x{0.0}, y{3.0};
    REQUIRE(wasserstein1d<double>(x, y) == 9.0);

    std::vector<double> bad{1.0, 2.0};
    REQUIRE_THROWS_AS(wasserstein1d<double>(a, bad), DimensionError);
}

TEST_CASE("wasserstein1d equals the exhaustive permutation minimum", "[swd]") {
    Rng rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t n = 2 + rng.uniform_index(6);  // 2..7
        std::vector<double> a(n), b(n);
        for (auto& v : a) v = rng.uniform(-5, 5);
        for (auto& v : b) v = rng.uniform(-5, 5);
        auto as = a, bs = b;
        std::sort(as.begin(), as.end());
        std::sort(bs.begin(), bs.end());
        const double sorted_cost = wasserstein1d<double>(as, bs);
        REQUIRE_THAT(sorted_cost, Catch::Matchers::WithinAbs(brute_force_w1d(a, b), 1e-12));
    }
}

TEST_CASE("swd of a set with itself is exactly zero", "[swd]") {
    Rng rng(3);
    for (uint64_t seed : {0ull, 1ull, 42ull}) {
        auto x = Tensor::from({50, 4}, random_values<float>(200, rng));
        REQUIRE(swd_loss(x, x, 16, seed).item() == 0.f);
    }
}

TEST_CASE("swd 1-d analytic case", "[swd]") {
    auto x = Tensor::from({2, 1}, {0.f, 2.f});
    auto y = Tensor::from({2, 1}, {1.f, 3.f});
    // in 1-d every unit direction is +-1 and both give the same cost
    REQUIRE_THAT(swd_loss(x, y, 1, 7).item(), Catch::Matchers::WithinAbs(1.0, 1e-6));
    REQUIRE_THAT(swd_loss(x, y, 8, 19).item(), Catch::Matchers::WithinAbs(1.0, 1e-6));
}

TEST_CASE("swd is symmetric and translation invariant", "[swd]") {
    Rng rng(5);
    auto xv = random_values<float>(60, rng);
    auto yv = random_values<float>(60, rng);
    auto x = Tensor::from({20, 3}, xv);
    auto y = Tensor::from({20, 3}, yv);
    const uint64_t seed = 11;
    REQUIRE(swd_loss(x, y, 32, seed).item() == swd_loss(y, x, 32, seed).item());
    REQUIRE(swd_loss(x, y, 32, seed).item() >= 0.f);

    std::vector<float> shift{0.7f, -1.2f, 3.4f};
    auto xs = xv, ys = yv;
    for (size_t i = 0; i < xs.size(); ++i) xs[i] += shift[i % 3];
    for (size_t i = 0; i < ys.size(); ++i) ys[i] += shift[i % 3];
    const float base = swd_loss(x, y, 32, seed).item();
    const float moved =
        swd_loss(Tensor::from({20, 3}, xs), Tensor::from({20, 3}, ys), 32, seed).item();
    REQUIRE_THAT(double(moved), Catch::Matchers::WithinAbs(double(base), 1e-5));
}

TEST_CASE("per-projection terms match the 1-d oracle", "[swd]") {
    Rng rng(13);
    auto x = Tensor::from({30, 5}, random_values<float>(150, rng));
    auto y = Tensor::from({30, 5}, random_values<float>(150, rng));
    auto dirs = sample_directions<float>(24, 5, 99);
    const auto terms = swd_projection_terms(x, y, dirs);
    // recompute each slice independently
    for (int p = 0; p < 24; ++p) {
        std::vector<float> u(30), v(30);
        for (int i = 0; i < 30; ++i) {
            float du = 0, dv = 0;
            for (int c = 0; c < 5; ++c) {
                du += x.data()[size_t(i * 5 + c)] * dirs[size_t(p * 5 + c)];
                dv += y.data()[size_t(i * 5 + c)] * dirs[size_t(p * 5 + c)];
            }
            u[size_t(i)] = du;
            v[size_t(i)] = dv;
        }
        std::sort(u.begin(), u.end());
        std::sort(v.begin(), v.end());
        REQUIRE_THAT(terms[size_t(p)],
                     Catch::Matchers::WithinAbs(wasserstein1d<float>(u, v), 1e-6));
    }
    // and the loss is their mean
    double mean = 0;
    for (double t : terms) mean += t;
    mean /= 24.0;
    REQUIRE_THAT(double(swd_loss_with_directions(x, y, dirs).item()),
                 Catch::Matchers::WithinAbs(mean, 1e-6));
}

TEST_CASE("swd gradient matches finite differences in double", "[swd][grad]") {
    Rng rng(17);
    auto x = TensorT<double>::from({12, 3}, random_values<double>(36, rng), true);
    auto y = TensorT<double>::from({12, 3}, random_values<double>(36, rng));
    auto dirs = sample_directions<double>(8, 3, 23);
    auto fn = [&] { return swd_loss_with_directions(x, y, dirs); };
    REQUIRE(testsupport::finite_diff_max_err<double>(fn, {x}, 1e-6) < 1e-5);
}

TEST_CASE("gradient descent on X decreases the loss for 50 steps", "[swd]") {
    Rng rng(29);
    const int n = 64, dim = 3;
    auto x = TensorT<float>::from({n, dim}, random_values<float>(size_t(n) * dim, rng, -2, 2), true);
    std::vector<float> yv(size_t(n) * dim);
    for (auto& v : yv) v = float(rng.normal());
    auto y = Tensor::from({n, dim}, yv);
    auto dirs = sample_directions<float>(64, dim, 31);  // fixed objective
    float prev = std::numeric_limits<float>::infinity();
    for (int step = 0; step < 50; ++step) {
        x.zero_grad();
        auto loss = swd_loss_with_directions(x, y, dirs);
        REQUIRE(loss.item() < prev);
        prev = loss.item();
        backward(loss);
        for (size_t i = 0; i < x.data().size(); ++i) x.data()[i] -= 0.05f * x.grad()[i];
    }
}

TEST_CASE("unequal cardinalities resample Y", "[swd]") {
    Rng rng(37);
    auto x = Tensor::from({10, 2}, random_values<float>(20, rng));
    auto y = Tensor::from({4, 2}, random_values<float>(8, rng));
    auto v = swd_loss(x, y, 8, 5);
    REQUIRE(v.item() >= 0.f);
    REQUIRE(std::isfinite(double(v.item())));
}

TEST_CASE("swd argument validation", "[swd]") {
    auto x = Tensor::from({4, 2}, std::vector<float>(8, 0.f));
    auto y3 = Tensor::from({4, 3}, std::vector<float>(12, 0.f));
    REQUIRE_THROWS_AS(swd_loss(x, y3, 8, 0), DimensionError);
    REQUIRE_THROWS_AS(swd_loss(x, x, 0, 0), ParameterError);
    auto flat = Tensor::from({8}, std::vector<float>(8, 0.f));
    REQUIRE_THROWS_AS(swd_loss(flat, flat, 8, 0), DimensionError);
}
