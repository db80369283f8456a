#pragma once

// Shared test utilities: finite-difference gradient checking and random
// tensor construction. Central differences with a scale-aware step; the
// comparison denominator is floored at a fraction of the gradient's overall
// magnitude so near-zero coordinates are judged against the gradient scale.

#include <cmath>
#include <functional>
#include <vector>

#include <sfuda3d/tensor.hpp>

namespace testsupport {

template <class R>
struct FdTol;
template <>
struct FdTol<float> {
    static constexpr double h = 1e-3;
    static constexpr double tol = 1e-3;
    static constexpr double denom_floor = 0.2;  // fraction of the gradient scale
};
template <>
struct FdTol<double> {
    static constexpr double h = 1e-5;
    static constexpr double tol = 1e-6;
    static constexpr double denom_floor = 0.05;
};

template <class R>
std::vector<R> random_values(size_t n, sfuda3d::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<R> v(n);
    for (auto& x : v) x = R(rng.uniform(lo, hi));
    return v;
}

// Weighting tensor that turns an op output into a scalar loss. Float checks
// use a sparse few-hot weighting so the loss value carries only a handful of
// rounded terms (keeps the FD quotient above the float noise floor); double
// checks weight densely.
template <class R>
sfuda3d::TensorT<R> loss_weights(std::vector<int> shape, sfuda3d::Rng& rng) {
    const size_t n = size_t(sfuda3d::shape_numel(shape));
    if constexpr (std::is_same_v<R, float>) {
        std::vector<R> w(n, R(0));
        for (int k = 0; k < 3; ++k)
            w[rng.uniform_index(n)] = rng.coin() ? R(1) : R(-1);
        return sfuda3d::TensorT<R>::from(std::move(shape), std::move(w));
    } else {
        return sfuda3d::TensorT<R>::from(std::move(shape), random_values<R>(n, rng));
    }
}

// Max relative error between analytic and central-difference gradients of a
// scalar-valued function over the given leaf tensors.
template <class R>
double finite_diff_max_err(const std::function<sfuda3d::TensorT<R>()>& fn,
                           std::vector<sfuda3d::TensorT<R>> inputs,
                           double h_base = FdTol<R>::h) {
    using namespace sfuda3d;
    for (auto& t : inputs) t.zero_grad();
    auto loss = fn();
    backward(loss);

    double gmax = 0.0;
    for (const auto& t : inputs)
        for (const R& g : t.grad()) gmax = std::max(gmax, std::abs(double(g)));

    double max_err = 0.0;
    for (auto& t : inputs) {
        auto& data = t.data();
        const auto& grad = t.grad();
        for (size_t i = 0; i < data.size(); ++i) {
            const double x0 = double(data[i]);
            const double h = h_base * std::max(1.0, std::abs(x0));
            data[i] = R(x0 + h);
            const double fp = double(fn().item());
            data[i] = R(x0 - h);
            const double fm = double(fn().item());
            data[i] = R(x0);
            const double g_fd = (fp - fm) / (2.0 * h);
            const double g_an = double(grad[i]);
            const double denom =
                std::max({std::abs(g_an), std::abs(g_fd), FdTol<R>::denom_floor * gmax, 1e-12});
            max_err = std::max(max_err, std::abs(g_an - g_fd) / denom);
        }
    }
    return max_err;
}

}  // namespace testsupport
