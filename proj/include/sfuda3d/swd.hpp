#pragma once

// Sliced Wasserstein Distance between point sets in R^C, differentiable
// w.r.t. the inputs. Projections are unit directions from normalized Gaussian
// draws; each 1-D slice is the exact quadratic transport cost between
// equal-size empirical measures (mean squared difference of order
// statistics). wasserstein1d is the oracle for a single slice.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace sfuda3d {

// Exact 1-D quadratic OT cost between equal-length sorted samples.
template <class R>
double wasserstein1d(std::span<const R> a_sorted, std::span<const R> b_sorted) {
    if (a_sorted.size() != b_sorted.size())
        throw DimensionError("wasserstein1d: length mismatch");
    if (a_sorted.empty()) throw ParameterError("wasserstein1d: empty input");
    double acc = 0.0;
    for (size_t i = 0; i < a_sorted.size(); ++i) {
        const double d = double(a_sorted[i]) - double(b_sorted[i]);
        acc += d * d;
    }
    return acc / double(a_sorted.size());
}

// num x dim unit directions, row-major.
template <class R>
std::vector<R> sample_directions(int num, int dim, uint64_t seed) {
    if (num < 1 || dim < 1) throw ParameterError("sample_directions: num and dim must be positive");
    Rng rng(seed);
    std::vector<R> dirs(static_cast<size_t>(num) * size_t(dim));
    for (int p = 0; p < num; ++p) {
        double norm2 = 0.0;
        do {
            norm2 = 0.0;
            for (int c = 0; c < dim; ++c) {
                const double g = rng.normal();
                dirs[size_t(p) * dim + c] = R(g);
                norm2 += g * g;
            }
        } while (norm2 < 1e-24);
        const R inv = R(1.0 / std::sqrt(norm2));
        for (int c = 0; c < dim; ++c) dirs[size_t(p) * dim + c] *= inv;
    }
    return dirs;
}

namespace detail {

// Projects `pts` (n x dim) onto direction `dir`, returns values sorted
// ascending along with the stable sort permutation (perm[i] = original row
// of rank i).
template <class R>
void project_sorted(const R* pts, int64_t n, int dim, const R* dir, std::vector<R>& vals,
                    std::vector<int32_t>& perm) {
    vals.resize(static_cast<size_t>(n));
    perm.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        R acc = R(0);
        const R* row = pts + i * dim;
        for (int c = 0; c < dim; ++c) acc += row[c] * dir[c];
        vals[size_t(i)] = acc;
        perm[size_t(i)] = int32_t(i);
    }
    std::stable_sort(perm.begin(), perm.end(),
                     [&](int32_t a, int32_t b) { return vals[size_t(a)] < vals[size_t(b)]; });
    std::vector<R> sorted(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) sorted[size_t(i)] = vals[size_t(perm[size_t(i)])];
    vals.swap(sorted);
}

}  // namespace detail

// Per-projection slice costs; row-major dirs (P x dim). Test hook: each term
// must equal wasserstein1d of the projected, sorted sets.
template <class R>
std::vector<double> swd_projection_terms(const TensorT<R>& X, const TensorT<R>& Y,
                                         const std::vector<R>& dirs) {
    const auto& xs = X.shape();
    const auto& ys = Y.shape();
    if (xs.size() != 2 || ys.size() != 2) throw DimensionError("swd: point sets must be 2-d [n,dim]");
    if (xs[1] != ys[1]) throw DimensionError("swd: dimension mismatch");
    if (xs[0] != ys[0]) throw DimensionError("swd_projection_terms: expects equal cardinalities");
    const int dim = xs[1];
    const int P = int(dirs.size()) / dim;
    std::vector<double> terms(static_cast<size_t>(P));
    std::vector<R> u, v;
    std::vector<int32_t> pu, pv;
    for (int p = 0; p < P; ++p) {
        detail::project_sorted(X.data().data(), xs[0], dim, dirs.data() + size_t(p) * dim, u, pu);
        detail::project_sorted(Y.data().data(), ys[0], dim, dirs.data() + size_t(p) * dim, v, pv);
        terms[size_t(p)] = wasserstein1d(std::span<const R>(u), std::span<const R>(v));
    }
    return terms;
}

// Differentiable SWD with caller-supplied directions. If |Y| != |X|, Y is
// resampled with replacement to |X| (seeded); gradients then flow to the
// sampled source rows.
template <class R>
TensorT<R> swd_loss_with_directions(const TensorT<R>& X, const TensorT<R>& Y,
                                    const std::vector<R>& dirs, uint64_t resample_seed = 0) {
    const auto& xs = X.shape();
    const auto& ys = Y.shape();
    if (xs.size() != 2 || ys.size() != 2) throw DimensionError("swd: point sets must be 2-d [n,dim]");
    if (xs[0] < 1 || ys[0] < 1) throw ParameterError("swd: empty point set");
    if (xs[1] != ys[1]) throw DimensionError("swd: dimension mismatch");
    const int64_t n = xs[0];
    const int dim = xs[1];
    if (dirs.empty() || int(dirs.size()) % dim != 0)
        throw DimensionError("swd: direction buffer does not match dimension");
    const int P = int(dirs.size()) / dim;

    // equal-cardinality contract: resample Y rows with replacement if needed
    std::vector<int32_t> ymap(static_cast<size_t>(n));
    if (int64_t(ys[0]) == n) {
        std::iota(ymap.begin(), ymap.end(), 0);
    } else {
        Rng rng(derive_seed(resample_seed, "swd-resample"));
        for (int64_t i = 0; i < n; ++i) ymap[size_t(i)] = int32_t(rng.uniform_index(uint64_t(ys[0])));
    }

    auto out = detail::make_node<R>("swd", {1}, {X.impl(), Y.impl()});
    const R* xd = X.data().data();
    const R* yd = Y.data().data();

    // per projection: sorted diffs and the sort permutations, kept for backward
    std::vector<R> diffs(static_cast<size_t>(P) * size_t(n));
    std::vector<int32_t> permx(static_cast<size_t>(P) * size_t(n));
    std::vector<int32_t> permy;  // in resampled-row space
    const bool need_y_grad = Y.impl()->requires_grad;
    if (need_y_grad) permy.resize(static_cast<size_t>(P) * size_t(n));
    std::vector<double> terms(static_cast<size_t>(P));

    parallel_for(P, 1, [&](int64_t p) {
        std::vector<R> u(static_cast<size_t>(n)), v(static_cast<size_t>(n));
        std::vector<int32_t> pu, pv;
        const R* dir = dirs.data() + size_t(p) * dim;
        detail::project_sorted(xd, n, dim, dir, u, pu);
        // project resampled Y
        std::vector<R> vv(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            R acc = R(0);
            const R* row = yd + int64_t(ymap[size_t(i)]) * dim;
            for (int c = 0; c < dim; ++c) acc += row[c] * dir[c];
            vv[size_t(i)] = acc;
        }
        pv.resize(static_cast<size_t>(n));
        std::iota(pv.begin(), pv.end(), 0);
        std::stable_sort(pv.begin(), pv.end(),
                         [&](int32_t a, int32_t b) { return vv[size_t(a)] < vv[size_t(b)]; });
        double acc = 0.0;
        R* drow = diffs.data() + size_t(p) * size_t(n);
        for (int64_t i = 0; i < n; ++i) {
            const R d = u[size_t(i)] - vv[size_t(pv[size_t(i)])];
            drow[size_t(i)] = d;
            acc += double(d) * double(d);
        }
        terms[size_t(p)] = acc / double(n);
        std::copy(pu.begin(), pu.end(), permx.begin() + size_t(p) * size_t(n));
        if (need_y_grad)
            std::copy(pv.begin(), pv.end(), permy.begin() + size_t(p) * size_t(n));
    });

    double total = 0.0;
    for (double t : terms) total += t;
    out->data[0] = R(total / double(P));
    detail::check_finite(out->data, "swd");

    if (out->requires_grad) {
        auto xi = X.impl();
        auto yi = Y.impl();
        out->backward_fn = [xi, yi, dirs, diffs = std::move(diffs), permx = std::move(permx),
                            permy = std::move(permy), ymap = std::move(ymap), n, dim,
                            P](TensorImplT<R>& self) {
            const double g = double(self.grad[0]);
            const double coef = 2.0 * g / (double(n) * double(P));
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                R* gx = xi->grad.data();
                for (int p = 0; p < P; ++p) {
                    const R* dir = dirs.data() + size_t(p) * dim;
                    const R* drow = diffs.data() + size_t(p) * size_t(n);
                    const int32_t* perm = permx.data() + size_t(p) * size_t(n);
                    for (int64_t i = 0; i < n; ++i) {
                        const double c = coef * double(drow[size_t(i)]);
                        R* row = gx + int64_t(perm[size_t(i)]) * dim;
                        for (int d = 0; d < dim; ++d) row[d] += R(c * double(dir[d]));
                    }
                }
            }
            if (yi->requires_grad && !permy.empty()) {
                detail::ensure_grad(*yi);
                R* gy = yi->grad.data();
                for (int p = 0; p < P; ++p) {
                    const R* dir = dirs.data() + size_t(p) * dim;
                    const R* drow = diffs.data() + size_t(p) * size_t(n);
                    const int32_t* perm = permy.data() + size_t(p) * size_t(n);
                    for (int64_t i = 0; i < n; ++i) {
                        const double c = -coef * double(drow[size_t(i)]);
                        R* row = gy + int64_t(ymap[size_t(perm[size_t(i)])]) * dim;
                        for (int d = 0; d < dim; ++d) row[d] += R(c * double(dir[d]));
                    }
                }
            }
        };
    }
    return TensorT<R>(out);
}

// SWD with directions drawn from `seed`.
template <class R>
TensorT<R> swd_loss(const TensorT<R>& X, const TensorT<R>& Y, int num_projections, uint64_t seed) {
    if (num_projections < 1) throw ParameterError("swd: num_projections must be positive");
    const auto& xs = X.shape();
    if (xs.size() != 2) throw DimensionError("swd: point sets must be 2-d [n,dim]");
    auto dirs = sample_directions<R>(num_projections, xs[1], derive_seed(seed, "swd-directions"));
    return swd_loss_with_directions(X, Y, dirs, seed);
}

}  // namespace sfuda3d
