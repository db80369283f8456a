#pragma once

// Minimal reverse-mode tensor engine. The op set is exactly what the
// segmentation network and the SWD loss consume: 3D convolution (strided,
// dilated), bias add, relu, trilinear upsampling, channel softmax, cross
// entropy, global average pooling, channel concat, a field->point-set
// reshape, and elementwise sum/mul used by loss plumbing and tests.
//
// Templated on the scalar type: float for training, double for the
// finite-difference check builds. Graphs are recorded dynamically; backward()
// walks the tape in reverse topological order. Ops validate output finiteness
// so NaN/Inf surfaces as an error instead of propagating.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "common.hpp"

namespace sfuda3d {

template <class R>
struct TensorImplT {
    std::vector<int> shape;
    std::vector<R> data;
    std::vector<R> grad;  // allocated lazily; same length as data when present
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImplT<R>>> parents;
    std::function<void(TensorImplT<R>&)> backward_fn;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

template <class R>
class TensorT {
public:
    using Impl = TensorImplT<R>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        auto impl = std::make_shared<Impl>();
        int64_t n = shape_numel(shape);
        impl->shape = std::move(shape);
        impl->data.assign(static_cast<size_t>(n), R(0));
        impl->requires_grad = requires_grad;
        if (requires_grad) impl->grad.assign(static_cast<size_t>(n), R(0));
        return TensorT(impl);
    }

    static TensorT from(std::vector<int> shape, std::vector<R> values, bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        if (int64_t(values.size()) != n)
            throw DimensionError("tensor data length does not match shape");
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        if (requires_grad) impl->grad.assign(static_cast<size_t>(n), R(0));
        return TensorT(impl);
    }

    static TensorT scalar(R v) { return from({1}, {v}); }

    bool valid() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[size_t(i)]; }
    int64_t numel() const { return int64_t(impl_->data.size()); }
    std::vector<R>& data() { return impl_->data; }
    const std::vector<R>& data() const { return impl_->data; }
    std::vector<R>& grad() { return impl_->grad; }
    const std::vector<R>& grad() const { return impl_->grad; }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) {
        impl_->requires_grad = v;
        if (v && impl_->grad.size() != impl_->data.size())
            impl_->grad.assign(impl_->data.size(), R(0));
        if (!v) impl_->grad.clear();
    }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), R(0));
    }
    R item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor");
        return impl_->data[0];
    }
    std::shared_ptr<Impl> impl() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class R>
void check_finite(const std::vector<R>& v, const char* op) {
    for (const R& x : v)
        if (!std::isfinite(double(x))) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class R>
void ensure_grad(TensorImplT<R>& t) {
    if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), R(0));
}

template <class R>
std::shared_ptr<TensorImplT<R>> make_node(const char* op, std::vector<int> shape,
                                          std::vector<std::shared_ptr<TensorImplT<R>>> parents) {
    auto impl = std::make_shared<TensorImplT<R>>();
    int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), R(0));
    impl->op = op;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    impl->requires_grad = needs;
    if (needs) impl->parents = std::move(parents);
    return impl;
}

inline int conv_out_dim(int in, int k, int stride, int dilation, int padding) {
    return int((int64_t(in) + 2 * padding - int64_t(dilation) * (k - 1) - 1) / stride) + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d: input [N,Cin,D,H,W] * kernel [Cout,Cin,k,k,k] -> [N,Cout,D',H',W'].

template <class R>
TensorT<R> conv3d(const TensorT<R>& input, const TensorT<R>& kernel, int stride, int dilation,
                  int padding) {
    const auto& is = input.shape();
    const auto& ks = kernel.shape();
    if (is.size() != 5 || ks.size() != 5) throw DimensionError("conv3d: expects 5-d input and kernel");
    if (ks[2] != ks[3] || ks[2] != ks[4]) throw DimensionError("conv3d: kernel must be cubic");
    if (is[1] != ks[1]) throw DimensionError("conv3d: input channels do not match kernel");
    if (stride < 1 || dilation < 1 || padding < 0) throw ParameterError("conv3d: bad stride/dilation/padding");
    const int N = is[0], Cin = is[1], D = is[2], H = is[3], W = is[4];
    const int Cout = ks[0], K = ks[2];
    const int Do = detail::conv_out_dim(D, K, stride, dilation, padding);
    const int Ho = detail::conv_out_dim(H, K, stride, dilation, padding);
    const int Wo = detail::conv_out_dim(W, K, stride, dilation, padding);
    if (Do < 1 || Ho < 1 || Wo < 1) throw ParameterError("conv3d: no valid kernel placement");

    auto out = detail::make_node<R>("conv3d", {N, Cout, Do, Ho, Wo}, {input.impl(), kernel.impl()});
    const R* in = input.data().data();
    const R* ker = kernel.data().data();
    R* o = out->data.data();

    auto run_rows = [&](int64_t b, int64_t e) {
        std::vector<R> acc(static_cast<size_t>(Wo));
        for (int64_t t = b; t < e; ++t) {
            const int z = int(t % Do);
            const int co = int((t / Do) % Cout);
            const int n = int(t / (int64_t(Do) * Cout));
            for (int y = 0; y < Ho; ++y) {
                std::fill(acc.begin(), acc.end(), R(0));
                for (int ci = 0; ci < Cin; ++ci) {
                    for (int kz = 0; kz < K; ++kz) {
                        const int zi = z * stride - padding + kz * dilation;
                        if (zi < 0 || zi >= D) continue;
                        for (int ky = 0; ky < K; ++ky) {
                            const int yi = y * stride - padding + ky * dilation;
                            if (yi < 0 || yi >= H) continue;
                            const R* row = in + ((((int64_t(n) * Cin + ci) * D + zi) * H + yi) * W);
                            const R* krow = ker + ((((int64_t(co) * Cin + ci) * K + kz) * K + ky) * K);
                            for (int kx = 0; kx < K; ++kx) {
                                const int off = kx * dilation - padding;
                                int xlo = off >= 0 ? 0 : (-off + stride - 1) / stride;
                                int xhi = (W - 1 - off) >= 0 ? (W - 1 - off) / stride : -1;
                                if (xhi > Wo - 1) xhi = Wo - 1;
                                const R w = krow[kx];
                                for (int x = xlo; x <= xhi; ++x) acc[size_t(x)] += w * row[x * stride + off];
                            }
                        }
                    }
                }
                R* orow = o + ((((int64_t(n) * Cout + co) * Do + z) * Ho + y) * Wo);
                std::copy(acc.begin(), acc.end(), orow);
            }
        }
    };
    const int64_t tasks = int64_t(N) * Cout * Do;
    const int64_t work_per_task = int64_t(Ho) * Wo * Cin * K * K * K;
    parallel_chunks(tasks, std::max<int64_t>(1, 262144 / std::max<int64_t>(1, work_per_task)), run_rows);
    detail::check_finite(out->data, "conv3d");

    if (out->requires_grad) {
        auto in_impl = input.impl();
        auto k_impl = kernel.impl();
        out->backward_fn = [in_impl, k_impl, stride, dilation, padding, N, Cin, D, H, W, Cout, K, Do,
                            Ho, Wo](TensorImplT<R>& self) {
            const R* gout = self.grad.data();
            if (in_impl->requires_grad) {
                detail::ensure_grad(*in_impl);
                const R* ker = k_impl->data.data();
                R* gin = in_impl->grad.data();
                auto run = [&](int64_t b, int64_t e) {
                    std::vector<R> plane(static_cast<size_t>(H) * W);
                    for (int64_t t = b; t < e; ++t) {
                        const int zi = int(t % D);
                        const int ci = int((t / D) % Cin);
                        const int n = int(t / (int64_t(D) * Cin));
                        std::fill(plane.begin(), plane.end(), R(0));
                        for (int co = 0; co < Cout; ++co) {
                            for (int kz = 0; kz < K; ++kz) {
                                const int znum = zi + padding - kz * dilation;
                                if (znum < 0 || znum % stride) continue;
                                const int zo = znum / stride;
                                if (zo >= Do) continue;
                                for (int ky = 0; ky < K; ++ky) {
                                    const int offy = ky * dilation - padding;
                                    int ylo = offy >= 0 ? 0 : (-offy + stride - 1) / stride;
                                    int yhi = (H - 1 - offy) >= 0 ? (H - 1 - offy) / stride : -1;
                                    if (yhi > Ho - 1) yhi = Ho - 1;
                                    const R* krow =
                                        k_impl->data.data() +
                                        ((((int64_t(co) * Cin + ci) * K + kz) * K + ky) * K);
                                    for (int yo = ylo; yo <= yhi; ++yo) {
                                        const int yi = yo * stride + offy;
                                        const R* grow =
                                            gout + ((((int64_t(n) * Cout + co) * Do + zo) * Ho + yo) * Wo);
                                        R* prow = plane.data() + int64_t(yi) * W;
                                        for (int kx = 0; kx < K; ++kx) {
                                            const int offx = kx * dilation - padding;
                                            int xlo = offx >= 0 ? 0 : (-offx + stride - 1) / stride;
                                            int xhi = (W - 1 - offx) >= 0 ? (W - 1 - offx) / stride : -1;
                                            if (xhi > Wo - 1) xhi = Wo - 1;
                                            const R w = krow[kx];
                                            for (int xo = xlo; xo <= xhi; ++xo)
                                                prow[xo * stride + offx] += w * grow[xo];
                                        }
                                    }
                                }
                            }
                        }
                        R* gplane = gin + ((int64_t(n) * Cin + ci) * D + zi) * int64_t(H) * W;
                        for (size_t i = 0; i < plane.size(); ++i) gplane[i] += plane[i];
                    }
                };
                (void)ker;
                parallel_chunks(int64_t(N) * Cin * D, 4, run);
            }
            if (k_impl->requires_grad) {
                detail::ensure_grad(*k_impl);
                const R* in = in_impl->data.data();
                R* gk = k_impl->grad.data();
                auto run = [&](int64_t b, int64_t e) {
                    for (int64_t t = b; t < e; ++t) {
                        const int ci = int(t % Cin);
                        const int co = int(t / Cin);
                        for (int kz = 0; kz < K; ++kz)
                            for (int ky = 0; ky < K; ++ky)
                                for (int kx = 0; kx < K; ++kx) {
                                    double acc = 0.0;
                                    const int offx = kx * dilation - padding;
                                    int xlo = offx >= 0 ? 0 : (-offx + stride - 1) / stride;
                                    int xhi = (W - 1 - offx) >= 0 ? (W - 1 - offx) / stride : -1;
                                    if (xhi > Wo - 1) xhi = Wo - 1;
                                    for (int n = 0; n < N; ++n)
                                        for (int zo = 0; zo < Do; ++zo) {
                                            const int zi = zo * stride - padding + kz * dilation;
                                            if (zi < 0 || zi >= D) continue;
                                            for (int yo = 0; yo < Ho; ++yo) {
                                                const int yi = yo * stride - padding + ky * dilation;
                                                if (yi < 0 || yi >= H) continue;
                                                const R* grow =
                                                    gout +
                                                    ((((int64_t(n) * Cout + co) * Do + zo) * Ho + yo) * Wo);
                                                const R* irow =
                                                    in + ((((int64_t(n) * Cin + ci) * D + zi) * H + yi) * W);
                                                for (int xo = xlo; xo <= xhi; ++xo)
                                                    acc += double(grow[xo]) * double(irow[xo * stride + offx]);
                                            }
                                        }
                                    gk[((((int64_t(co) * Cin + ci) * K + kz) * K + ky) * K) + kx] += R(acc);
                                }
                    }
                };
                parallel_chunks(int64_t(Cout) * Cin, 1, run);
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// bias_add: x [N,C,D,H,W] + b [C], broadcast over batch and space.

template <class R>
TensorT<R> bias_add(const TensorT<R>& x, const TensorT<R>& b) {
    const auto& xs = x.shape();
    if (xs.size() != 5) throw DimensionError("bias_add: expects 5-d input");
    if (b.shape().size() != 1 || b.shape()[0] != xs[1])
        throw DimensionError("bias_add: bias length must equal channel count");
    const int N = xs[0], C = xs[1];
    const int64_t V = int64_t(xs[2]) * xs[3] * xs[4];
    auto out = detail::make_node<R>("bias_add", xs, {x.impl(), b.impl()});
    const R* xd = x.data().data();
    const R* bd = b.data().data();
    R* o = out->data.data();
    parallel_chunks(int64_t(N) * C, 1, [&](int64_t lo, int64_t hi) {
        for (int64_t t = lo; t < hi; ++t) {
            const R bias = bd[t % C];
            const R* src = xd + t * V;
            R* dst = o + t * V;
            for (int64_t i = 0; i < V; ++i) dst[i] = src[i] + bias;
        }
    });
    detail::check_finite(out->data, "bias_add");
    if (out->requires_grad) {
        auto xi = x.impl();
        auto bi = b.impl();
        out->backward_fn = [xi, bi, N, C, V](TensorImplT<R>& self) {
            const R* g = self.grad.data();
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                R* gx = xi->grad.data();
                for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const R* src = g + (int64_t(n) * C + c) * V;
                        for (int64_t i = 0; i < V; ++i) acc += double(src[i]);
                    }
                    bi->grad[size_t(c)] += R(acc);
                }
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// relu, elementwise; subgradient at 0 is 0.

template <class R>
TensorT<R> relu(const TensorT<R>& x) {
    auto out = detail::make_node<R>("relu", x.shape(), {x.impl()});
    const R* xd = x.data().data();
    R* o = out->data.data();
    const int64_t n = x.numel();
    parallel_chunks(n, 65536, [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) o[i] = xd[i] > R(0) ? xd[i] : R(0);
    });
    detail::check_finite(out->data, "relu");
    if (out->requires_grad) {
        auto xi = x.impl();
        out->backward_fn = [xi](TensorImplT<R>& self) {
            if (!xi->requires_grad) return;
            detail::ensure_grad(*xi);
            const R* g = self.grad.data();
            const R* xd = xi->data.data();
            R* gx = xi->grad.data();
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (xd[i] > R(0)) gx[i] += g[i];
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// trilinear_upsample by an integer factor, align-corners=false convention:
// source coordinate of output voxel o is (o + 0.5)/f - 0.5, clamped.

template <class R>
TensorT<R> trilinear_upsample(const TensorT<R>& x, int factor) {
    const auto& xs = x.shape();
    if (xs.size() != 5) throw DimensionError("trilinear_upsample: expects 5-d input");
    if (factor < 1) throw ParameterError("trilinear_upsample: factor must be >= 1");
    const int N = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const int Do = D * factor, Ho = H * factor, Wo = W * factor;
    auto out = detail::make_node<R>("trilinear_upsample", {N, C, Do, Ho, Wo}, {x.impl()});

    // precompute per-axis corner indices and weights
    auto make_axis = [&](int in, int on) {
        std::vector<int> i0(static_cast<size_t>(on)), i1(static_cast<size_t>(on));
        std::vector<R> w1(static_cast<size_t>(on));
        for (int o = 0; o < on; ++o) {
            double src = (o + 0.5) / factor - 0.5;
            double f = std::floor(src);
            double t = src - f;
            int a = int(f), b = int(f) + 1;
            if (a < 0) { a = 0; }
            if (b > in - 1) { b = in - 1; }
            if (a > in - 1) a = in - 1;
            if (b < 0) b = 0;
            i0[size_t(o)] = a;
            i1[size_t(o)] = b;
            w1[size_t(o)] = R(t);
        }
        return std::tuple(i0, i1, w1);
    };
    auto [z0, z1, wz] = make_axis(D, Do);
    auto [y0, y1, wy] = make_axis(H, Ho);
    auto [x0, x1, wx] = make_axis(W, Wo);

    const R* xd = x.data().data();
    R* o = out->data.data();
    parallel_chunks(int64_t(N) * C * Do, 8, [&](int64_t lo, int64_t hi) {
        for (int64_t t = lo; t < hi; ++t) {
            const int zo = int(t % Do);
            const int64_t nc = t / Do;
            const R tz = wz[size_t(zo)];
            const R* p0 = xd + (nc * D + z0[size_t(zo)]) * int64_t(H) * W;
            const R* p1 = xd + (nc * D + z1[size_t(zo)]) * int64_t(H) * W;
            R* orow = o + (nc * Do + zo) * int64_t(Ho) * Wo;
            for (int yo = 0; yo < Ho; ++yo) {
                const R ty = wy[size_t(yo)];
                const R* r00 = p0 + int64_t(y0[size_t(yo)]) * W;
                const R* r01 = p0 + int64_t(y1[size_t(yo)]) * W;
                const R* r10 = p1 + int64_t(y0[size_t(yo)]) * W;
                const R* r11 = p1 + int64_t(y1[size_t(yo)]) * W;
                for (int xo = 0; xo < Wo; ++xo) {
                    const R tx = wx[size_t(xo)];
                    const int a = x0[size_t(xo)], b = x1[size_t(xo)];
                    const R v00 = r00[a] * (R(1) - tx) + r00[b] * tx;
                    const R v01 = r01[a] * (R(1) - tx) + r01[b] * tx;
                    const R v10 = r10[a] * (R(1) - tx) + r10[b] * tx;
                    const R v11 = r11[a] * (R(1) - tx) + r11[b] * tx;
                    const R v0 = v00 * (R(1) - ty) + v01 * ty;
                    const R v1 = v10 * (R(1) - ty) + v11 * ty;
                    orow[int64_t(yo) * Wo + xo] = v0 * (R(1) - tz) + v1 * tz;
                }
            }
        }
    });
    detail::check_finite(out->data, "trilinear_upsample");

    if (out->requires_grad) {
        auto xi = x.impl();
        out->backward_fn = [xi, z0 = z0, z1 = z1, wz = wz, y0 = y0, y1 = y1, wy = wy, x0 = x0,
                            x1 = x1, wx = wx, N, C, D, H, W, Do, Ho, Wo](TensorImplT<R>& self) {
            if (!xi->requires_grad) return;
            detail::ensure_grad(*xi);
            const R* g = self.grad.data();
            R* gx = xi->grad.data();
            for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
                for (int zo = 0; zo < Do; ++zo) {
                    const R tz = wz[size_t(zo)];
                    R* p0 = gx + (nc * D + z0[size_t(zo)]) * int64_t(H) * W;
                    R* p1 = gx + (nc * D + z1[size_t(zo)]) * int64_t(H) * W;
                    const R* grow = g + (nc * Do + zo) * int64_t(Ho) * Wo;
                    for (int yo = 0; yo < Ho; ++yo) {
                        const R ty = wy[size_t(yo)];
                        R* r00 = p0 + int64_t(y0[size_t(yo)]) * W;
                        R* r01 = p0 + int64_t(y1[size_t(yo)]) * W;
                        R* r10 = p1 + int64_t(y0[size_t(yo)]) * W;
                        R* r11 = p1 + int64_t(y1[size_t(yo)]) * W;
                        for (int xo = 0; xo < Wo; ++xo) {
                            const R gv = grow[int64_t(yo) * Wo + xo];
                            const R tx = wx[size_t(xo)];
                            const int a = x0[size_t(xo)], b = x1[size_t(xo)];
                            const R g0 = gv * (R(1) - tz), g1 = gv * tz;
                            const R g00 = g0 * (R(1) - ty), g01 = g0 * ty;
                            const R g10 = g1 * (R(1) - ty), g11 = g1 * ty;
                            r00[a] += g00 * (R(1) - tx);
                            r00[b] += g00 * tx;
                            r01[a] += g01 * (R(1) - tx);
                            r01[b] += g01 * tx;
                            r10[a] += g10 * (R(1) - tx);
                            r10[b] += g10 * tx;
                            r11[a] += g11 * (R(1) - tx);
                            r11[b] += g11 * tx;
                        }
                    }
                }
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// softmax over the channel axis of [N,C,D,H,W], max-subtracted.

template <class R>
TensorT<R> softmax_channel(const TensorT<R>& x) {
    const auto& xs = x.shape();
    if (xs.size() != 5) throw DimensionError("softmax_channel: expects 5-d input");
    const int N = xs[0], C = xs[1];
    const int64_t V = int64_t(xs[2]) * xs[3] * xs[4];
    auto out = detail::make_node<R>("softmax_channel", xs, {x.impl()});
    const R* xd = x.data().data();
    R* o = out->data.data();
    parallel_chunks(int64_t(N) * V, 4096, [&](int64_t b, int64_t e) {
        for (int64_t t = b; t < e; ++t) {
            const int64_t n = t / V, v = t % V;
            const R* src = xd + n * C * V + v;
            R* dst = o + n * C * V + v;
            R m = src[0];
            for (int c = 1; c < C; ++c) m = std::max(m, src[int64_t(c) * V]);
            double sum = 0.0;
            for (int c = 0; c < C; ++c) sum += std::exp(double(src[int64_t(c) * V] - m));
            const double inv = 1.0 / sum;
            for (int c = 0; c < C; ++c)
                dst[int64_t(c) * V] = R(std::exp(double(src[int64_t(c) * V] - m)) * inv);
        }
    });
    detail::check_finite(out->data, "softmax_channel");
    if (out->requires_grad) {
        auto xi = x.impl();
        out->backward_fn = [xi, N, C, V](TensorImplT<R>& self) {
            if (!xi->requires_grad) return;
            detail::ensure_grad(*xi);
            const R* g = self.grad.data();
            const R* p = self.data.data();
            R* gx = xi->grad.data();
            for (int64_t t = 0; t < int64_t(N) * V; ++t) {
                const int64_t n = t / V, v = t % V;
                const int64_t base = n * C * V + v;
                double dot = 0.0;
                for (int c = 0; c < C; ++c)
                    dot += double(g[base + int64_t(c) * V]) * double(p[base + int64_t(c) * V]);
                for (int c = 0; c < C; ++c) {
                    const int64_t i = base + int64_t(c) * V;
                    gx[i] += R(double(p[i]) * (double(g[i]) - dot));
                }
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// cross_entropy: mean over batch and voxels of -log(p[target]), log floored
// at log(1e-12). Takes probabilities (post-softmax) and per-voxel class ids.

template <class R>
TensorT<R> cross_entropy(const TensorT<R>& prob, std::span<const uint8_t> target) {
    const auto& ps = prob.shape();
    if (ps.size() != 5) throw DimensionError("cross_entropy: expects 5-d probabilities");
    const int N = ps[0], C = ps[1];
    const int64_t V = int64_t(ps[2]) * ps[3] * ps[4];
    if (int64_t(target.size()) != int64_t(N) * V)
        throw DimensionError("cross_entropy: target length does not match volume");
    constexpr double kFloor = 1e-12;
    const R* p = prob.data().data();
    double acc = 0.0;
    for (int64_t t = 0; t < int64_t(N) * V; ++t) {
        const uint8_t cls = target[size_t(t)];
        if (cls >= C) throw LabelError("cross_entropy: target class id exceeds channel count");
        const int64_t n = t / V, v = t % V;
        const double pv = double(p[n * C * V + int64_t(cls) * V + v]);
        acc -= std::log(std::max(pv, kFloor));
    }
    const double mean = acc / double(int64_t(N) * V);

    auto out = detail::make_node<R>("cross_entropy", {1}, {prob.impl()});
    out->data[0] = R(mean);
    detail::check_finite(out->data, "cross_entropy");
    if (out->requires_grad) {
        auto pi = prob.impl();
        std::vector<uint8_t> tgt(target.begin(), target.end());
        out->backward_fn = [pi, tgt = std::move(tgt), N, C, V](TensorImplT<R>& self) {
            if (!pi->requires_grad) return;
            detail::ensure_grad(*pi);
            const double g = double(self.grad[0]);
            const double scale = g / double(int64_t(N) * V);
            const R* p = pi->data.data();
            R* gp = pi->grad.data();
            for (int64_t t = 0; t < int64_t(N) * V; ++t) {
                const int64_t n = t / V, v = t % V;
                const int64_t i = n * C * V + int64_t(tgt[size_t(t)]) * V + v;
                const double pv = double(p[i]);
                if (pv > kFloor) gp[i] -= R(scale / pv);
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// global_avg_pool: [N,C,D,H,W] -> [N,C,1,1,1].

template <class R>
TensorT<R> global_avg_pool(const TensorT<R>& x) {
    const auto& xs = x.shape();
    if (xs.size() != 5) throw DimensionError("global_avg_pool: expects 5-d input");
    const int N = xs[0], C = xs[1];
    const int64_t V = int64_t(xs[2]) * xs[3] * xs[4];
    auto out = detail::make_node<R>("global_avg_pool", {N, C, 1, 1, 1}, {x.impl()});
    const R* xd = x.data().data();
    for (int64_t t = 0; t < int64_t(N) * C; ++t) {
        double acc = 0.0;
        const R* src = xd + t * V;
        for (int64_t i = 0; i < V; ++i) acc += double(src[i]);
        out->data[size_t(t)] = R(acc / double(V));
    }
    detail::check_finite(out->data, "global_avg_pool");
    if (out->requires_grad) {
        auto xi = x.impl();
        out->backward_fn = [xi, N, C, V](TensorImplT<R>& self) {
            if (!xi->requires_grad) return;
            detail::ensure_grad(*xi);
            R* gx = xi->grad.data();
            for (int64_t t = 0; t < int64_t(N) * C; ++t) {
                const R g = self.grad[size_t(t)] / R(V);
                R* dst = gx + t * V;
                for (int64_t i = 0; i < V; ++i) dst[i] += g;
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// concat_channels: concatenates [N,Ci,D,H,W] tensors along the channel axis.

template <class R>
TensorT<R> concat_channels(const std::vector<TensorT<R>>& xs) {
    if (xs.empty()) throw ParameterError("concat_channels: empty input list");
    const auto& s0 = xs[0].shape();
    if (s0.size() != 5) throw DimensionError("concat_channels: expects 5-d inputs");
    int Ctot = 0;
    std::vector<std::shared_ptr<TensorImplT<R>>> parents;
    for (const auto& t : xs) {
        const auto& s = t.shape();
        if (s.size() != 5 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[4] != s0[4])
            throw DimensionError("concat_channels: mismatched shapes");
        Ctot += s[1];
        parents.push_back(t.impl());
    }
    const int N = s0[0];
    const int64_t V = int64_t(s0[2]) * s0[3] * s0[4];
    auto out = detail::make_node<R>("concat_channels", {N, Ctot, s0[2], s0[3], s0[4]}, parents);
    R* o = out->data.data();
    int coff = 0;
    for (const auto& t : xs) {
        const int Ci = t.shape()[1];
        const R* src = t.data().data();
        for (int n = 0; n < N; ++n)
            std::memcpy(o + ((int64_t(n) * Ctot + coff) * V), src + (int64_t(n) * Ci * V),
                        size_t(Ci) * size_t(V) * sizeof(R));
        coff += Ci;
    }
    if (out->requires_grad) {
        std::vector<std::shared_ptr<TensorImplT<R>>> srcs = parents;
        out->backward_fn = [srcs, N, Ctot, V](TensorImplT<R>& self) {
            const R* g = self.grad.data();
            int coff = 0;
            for (auto& s : srcs) {
                const int Ci = s->shape[1];
                if (s->requires_grad) {
                    detail::ensure_grad(*s);
                    R* gs = s->grad.data();
                    for (int n = 0; n < N; ++n) {
                        const R* gsrc = g + (int64_t(n) * Ctot + coff) * V;
                        R* gdst = gs + int64_t(n) * Ci * V;
                        for (int64_t i = 0; i < int64_t(Ci) * V; ++i) gdst[i] += gsrc[i];
                    }
                }
                coff += Ci;
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// field_points: [N,C,D,H,W] -> [N*D*H*W, C]; row i is the channel vector of
// voxel i in scan order. This is the view the GMM and SWD modules consume.

template <class R>
TensorT<R> field_points(const TensorT<R>& x) {
    const auto& xs = x.shape();
    if (xs.size() != 5) throw DimensionError("field_points: expects 5-d input");
    const int N = xs[0], C = xs[1];
    const int64_t V = int64_t(xs[2]) * xs[3] * xs[4];
    auto out = detail::make_node<R>("field_points", {int(int64_t(N) * V), C}, {x.impl()});
    const R* xd = x.data().data();
    R* o = out->data.data();
    parallel_chunks(int64_t(N) * V, 16384, [&](int64_t b, int64_t e) {
        for (int64_t t = b; t < e; ++t) {
            const int64_t n = t / V, v = t % V;
            for (int c = 0; c < C; ++c) o[t * C + c] = xd[n * C * V + int64_t(c) * V + v];
        }
    });
    if (out->requires_grad) {
        auto xi = x.impl();
        out->backward_fn = [xi, N, C, V](TensorImplT<R>& self) {
            if (!xi->requires_grad) return;
            detail::ensure_grad(*xi);
            const R* g = self.grad.data();
            R* gx = xi->grad.data();
            for (int64_t t = 0; t < int64_t(N) * V; ++t) {
                const int64_t n = t / V, v = t % V;
                for (int c = 0; c < C; ++c) gx[n * C * V + int64_t(c) * V + v] += g[t * C + c];
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// sum and elementwise mul; loss plumbing used by tests and gradient checks.

template <class R>
TensorT<R> sum(const TensorT<R>& x) {
    auto out = detail::make_node<R>("sum", {1}, {x.impl()});
    double acc = 0.0;
    for (const R& v : x.data()) acc += double(v);
    out->data[0] = R(acc);
    detail::check_finite(out->data, "sum");
    if (out->requires_grad) {
        auto xi = x.impl();
        out->backward_fn = [xi](TensorImplT<R>& self) {
            if (!xi->requires_grad) return;
            detail::ensure_grad(*xi);
            const R g = self.grad[0];
            for (auto& v : xi->grad) v += g;
        };
    }
    return TensorT<R>(out);
}

template <class R>
TensorT<R> mul(const TensorT<R>& a, const TensorT<R>& b) {
    if (a.shape() != b.shape()) throw DimensionError("mul: shapes must match");
    auto out = detail::make_node<R>("mul", a.shape(), {a.impl(), b.impl()});
    const R* ad = a.data().data();
    const R* bd = b.data().data();
    R* o = out->data.data();
    for (int64_t i = 0; i < a.numel(); ++i) o[i] = ad[i] * bd[i];
    detail::check_finite(out->data, "mul");
    if (out->requires_grad) {
        auto ai = a.impl();
        auto bi = b.impl();
        out->backward_fn = [ai, bi](TensorImplT<R>& self) {
            const R* g = self.grad.data();
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
            }
        };
    }
    return TensorT<R>(out);
}

// ---------------------------------------------------------------------------
// backward: reverse-mode sweep from a scalar loss. Intermediate grads are
// reset per call; leaf grads accumulate across calls.

namespace detail {
template <class R>
void topo_collect(TensorImplT<R>* root, std::vector<TensorImplT<R>*>& order) {
    std::unordered_set<TensorImplT<R>*> seen;
    std::vector<std::pair<TensorImplT<R>*, size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImplT<R>* p = node->parents[idx++].get();
            if (!seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}
}  // namespace detail

template <class R>
void backward(const TensorT<R>& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
    auto* root = loss.impl().get();
    if (!root->requires_grad)
        throw ContractError("backward: loss does not depend on any requires_grad tensor");
    std::vector<TensorImplT<R>*> order;
    detail::topo_collect(root, order);
    for (auto* n : order) {
        if (!n->parents.empty()) {  // intermediate node: fresh grad per sweep
            n->grad.assign(n->data.size(), R(0));
        } else {
            detail::ensure_grad(*n);
        }
    }
    root->grad[0] = R(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// Text listing of the recorded graph feeding `t`, one node per line.
template <class R>
std::string dump_graph(const TensorT<R>& t) {
    std::vector<TensorImplT<R>*> order;
    detail::topo_collect(t.impl().get(), order);
    std::ostringstream os;
    auto shape_str = [](const std::vector<int>& s) {
        std::string r = "[";
        for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
        return r + "]";
    };
    for (auto* n : order) {
        os << n->op << " " << shape_str(n->shape);
        if (!n->parents.empty()) {
            os << " <-";
            for (const auto& p : n->parents) os << " " << shape_str(p->shape);
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Adam with bias correction. Moment buffers live alongside the parameter
// list; step order is fixed, so updates are bit-reproducible.

template <class R>
class AdamT {
public:
    AdamT(std::vector<TensorT<R>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].requires_grad())
                throw ContractError("AdamT: parameter without requires_grad");
            m_[i].assign(static_cast<size_t>(params_[i].numel()), R(0));
            v_[i].assign(static_cast<size_t>(params_[i].numel()), R(0));
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].data();
            auto& g = params_[i].grad();
            if (g.size() != p.size()) continue;  // never touched by backward: zero grad
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.size(); ++j) {
                const double gj = double(g[j]);
                const double mj = beta1_ * double(m[j]) + (1.0 - beta1_) * gj;
                const double vj = beta2_ * double(v[j]) + (1.0 - beta2_) * gj * gj;
                m[j] = R(mj);
                v[j] = R(vj);
                p[j] -= R(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    int64_t step_count() const { return t_; }
    double learning_rate() const { return lr_; }

private:
    std::vector<TensorT<R>> params_;
    std::vector<std::vector<R>> m_, v_;
    int64_t t_ = 0;
    double lr_, beta1_, beta2_, eps_;
};

using Adam = AdamT<float>;

}  // namespace sfuda3d
