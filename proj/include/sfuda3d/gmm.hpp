#pragma once

// Class-conditional diagonal-covariance Gaussian mixtures over latent
// vectors. Source-side mixtures are moment-fitted from labels (one Gaussian
// per present class) with an EM confirmation pass; target-side mixtures use
// seeded k-means++ EM. Scoring is a numerically stable mean log density;
// sampling supports the rho-truncation (central chi-square probability
// region). The SGMM file plus the model checkpoint is the complete
// source-free handoff.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "volume.hpp"

namespace sfuda3d {

constexpr float kVarianceFloor = 1e-6f;

struct GmmComponent {
    uint8_t cls = 0;             // class id (or component index for unlabeled fits)
    float weight = 0.f;
    std::vector<float> mean;
    std::vector<float> var;      // diagonal
};

struct Gmm {
    int dim = 0;
    uint32_t volume_id = 0;                  // source crop identity
    std::array<uint32_t, 3> origin{0, 0, 0};
    std::vector<GmmComponent> components;

    bool has_class(uint8_t c) const {
        for (const auto& g : components)
            if (g.cls == c) return true;
        return false;
    }
    const GmmComponent& component(uint8_t c) const {
        for (const auto& g : components)
            if (g.cls == c) return g;
        throw ClassError("gmm: class " + std::to_string(int(c)) + " not present");
    }
    void validate() const {
        if (components.empty()) throw ContractError("gmm: no components");
        double wsum = 0.0;
        for (const auto& g : components) {
            if (int(g.mean.size()) != dim || int(g.var.size()) != dim)
                throw ContractError("gmm: component dimension mismatch");
            wsum += double(g.weight);
            for (float m : g.mean)
                if (!std::isfinite(m)) throw ContractError("gmm: non-finite mean");
            for (float v : g.var)
                if (!(v >= kVarianceFloor)) throw ContractError("gmm: variance below floor");
        }
        if (std::abs(wsum - 1.0) > 1e-6) throw ContractError("gmm: weights do not sum to 1");
    }
};

struct GmmLibrary {
    int dim = 0;
    std::array<uint32_t, 3> stride{0, 0, 0};  // extraction stride
    uint64_t checkpoint_hash = 0;             // hash of the source model blob
    std::vector<Gmm> entries;
};

// ---------------------------------------------------------------------------
// Regularized lower incomplete gamma and the chi-square quantile used for
// rho-truncated sampling.

namespace detail_gamma {

inline double gammp(double a, double x) {
    if (x < 0 || a <= 0) throw ParameterError("gammp: bad arguments");
    if (x == 0) return 0.0;
    const double gln = std::lgamma(a);
    if (x < a + 1.0) {  // series
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-15) break;
        }
        return sum * std::exp(-x + a * std::log(x) - gln);
    }
    // continued fraction (modified Lentz)
    double b = x + 1.0 - a, c = 1.0 / 1e-300, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        const double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

}  // namespace detail_gamma

// x such that P(chi2_k <= x) = p.
inline double chi2_quantile(double p, int dof) {
    if (!(p > 0.0 && p < 1.0)) throw ParameterError("chi2_quantile: p must be in (0,1)");
    if (dof < 1) throw ParameterError("chi2_quantile: dof must be >= 1");
    const double a = dof / 2.0;
    double lo = 0.0, hi = std::max(4.0 * dof, 16.0);
    while (detail_gamma::gammp(a, hi / 2.0) < p) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (detail_gamma::gammp(a, mid / 2.0) < p)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Scoring.

namespace detail_gmm {

struct ScoreCache {
    // per component: log weight + Gaussian normalization constant, inverse vars
    std::vector<double> log_norm;
    std::vector<std::vector<double>> inv_var;
    std::vector<std::vector<double>> mean;
};

inline ScoreCache make_cache(const Gmm& g) {
    constexpr double kLog2Pi = 1.8378770664093454836;
    ScoreCache c;
    for (const auto& comp : g.components) {
        double ln = std::log(std::max(double(comp.weight), 1e-300));
        std::vector<double> iv(static_cast<size_t>(g.dim)), mu(static_cast<size_t>(g.dim));
        for (int d = 0; d < g.dim; ++d) {
            const double v = double(comp.var[size_t(d)]);
            ln -= 0.5 * (kLog2Pi + std::log(v));
            iv[size_t(d)] = 1.0 / v;
            mu[size_t(d)] = double(comp.mean[size_t(d)]);
        }
        c.log_norm.push_back(ln);
        c.inv_var.push_back(std::move(iv));
        c.mean.push_back(std::move(mu));
    }
    return c;
}

inline double point_log_density(const ScoreCache& c, const float* x, int dim) {
    double best = -std::numeric_limits<double>::infinity();
    const size_t K = c.log_norm.size();
    std::array<double, 16> lp_buf;
    std::vector<double> lp_vec;
    double* lp = K <= lp_buf.size() ? lp_buf.data() : (lp_vec.resize(K), lp_vec.data());
    for (size_t k = 0; k < K; ++k) {
        double q = 0.0;
        for (int d = 0; d < dim; ++d) {
            const double diff = double(x[d]) - c.mean[k][size_t(d)];
            q += diff * diff * c.inv_var[k][size_t(d)];
        }
        lp[k] = c.log_norm[k] - 0.5 * q;
        best = std::max(best, lp[k]);
    }
    double acc = 0.0;
    for (size_t k = 0; k < K; ++k) acc += std::exp(lp[k] - best);
    return best + std::log(acc);
}

}  // namespace detail_gmm

// Mean per-point log density of `pts` (n rows, row-major) under g.
inline double log_likelihood(const Gmm& g, const float* pts, int64_t n, int dim) {
    if (dim != g.dim) throw DimensionError("log_likelihood: dimension mismatch");
    if (n < 1) throw ParameterError("log_likelihood: empty point set");
    const auto cache = detail_gmm::make_cache(g);
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i)
        acc += detail_gmm::point_log_density(cache, pts + i * dim, dim);
    return acc / double(n);
}

// ---------------------------------------------------------------------------
// Moment fit from labeled latents: one Gaussian per present class, weights
// from voxel fractions; a single EM refinement pass confirms the
// log-likelihood does not decrease.

namespace detail_gmm {

// EM working state in double. Rounding to the float Gmm happens once, at the
// end of a fit, so the per-iteration monotonicity guarantee holds at double
// precision. mean/var are K x dim, row-major.
struct WorkGmm {
    int dim = 0;
    std::vector<double> weight;
    std::vector<double> mean;
    std::vector<double> var;

    size_t K() const { return weight.size(); }
};

inline WorkGmm work_from_gmm(const Gmm& g) {
    WorkGmm w;
    w.dim = g.dim;
    for (const auto& comp : g.components) {
        w.weight.push_back(double(comp.weight));
        for (int d = 0; d < g.dim; ++d) w.mean.push_back(double(comp.mean[size_t(d)]));
        for (int d = 0; d < g.dim; ++d) w.var.push_back(double(comp.var[size_t(d)]));
    }
    return w;
}

// One EM iteration: returns the mean log-likelihood under the parameters at
// entry, then applies the M-step update in place. Chunked double accumulation
// keeps results identical for any thread count.
inline double em_iteration(WorkGmm& g, const float* pts, int64_t n) {
    const int dim = g.dim;
    const size_t K = g.K();
    constexpr double kLog2Pi = 1.8378770664093454836;
    std::vector<double> log_norm(K);
    std::vector<double> inv_var(K * size_t(dim));
    for (size_t k = 0; k < K; ++k) {
        double ln = std::log(std::max(g.weight[k], 1e-300));
        for (int d = 0; d < dim; ++d) {
            const double v = g.var[k * size_t(dim) + size_t(d)];
            ln -= 0.5 * (kLog2Pi + std::log(v));
            inv_var[k * size_t(dim) + size_t(d)] = 1.0 / v;
        }
        log_norm[k] = ln;
    }

    const int64_t grain = 4096;
    const int64_t chunks = (n + grain - 1) / grain;
    // per chunk: ll, then per component: wsum, sum[dim], sqsum[dim]
    const size_t rec = 1 + K * (1 + 2 * size_t(dim));
    std::vector<double> partial(static_cast<size_t>(chunks) * rec, 0.0);
    parallel_chunks(n, grain, [&](int64_t b, int64_t e) {
        double* out = partial.data() + size_t(b / grain) * rec;
        std::vector<double> lp(K);
        for (int64_t i = b; i < e; ++i) {
            const float* x = pts + i * dim;
            double best = -std::numeric_limits<double>::infinity();
            for (size_t k = 0; k < K; ++k) {
                double q = 0.0;
                for (int d = 0; d < dim; ++d) {
                    const double diff = double(x[d]) - g.mean[k * size_t(dim) + size_t(d)];
                    q += diff * diff * inv_var[k * size_t(dim) + size_t(d)];
                }
                lp[k] = log_norm[k] - 0.5 * q;
                best = std::max(best, lp[k]);
            }
            double z = 0.0;
            for (size_t k = 0; k < K; ++k) z += std::exp(lp[k] - best);
            out[0] += best + std::log(z);
            const double inv_z = 1.0 / z;
            for (size_t k = 0; k < K; ++k) {
                const double r = std::exp(lp[k] - best) * inv_z;
                double* slot = out + 1 + k * (1 + 2 * size_t(dim));
                slot[0] += r;
                for (int d = 0; d < dim; ++d) {
                    slot[1 + d] += r * double(x[d]);
                    slot[1 + dim + d] += r * double(x[d]) * double(x[d]);
                }
            }
        }
    });
    // merge in chunk order
    std::vector<double> tot(rec, 0.0);
    for (int64_t c = 0; c < chunks; ++c)
        for (size_t r = 0; r < rec; ++r) tot[r] += partial[size_t(c) * rec + r];
    const double ll_before = tot[0] / double(n);
    double wtotal = 0.0;
    for (size_t k = 0; k < K; ++k) {
        const double* slot = tot.data() + 1 + k * (1 + 2 * size_t(dim));
        const double wsum = slot[0];
        if (wsum < 1e-12) {  // degenerate component: keep params, minimal mass
            g.weight[k] = 1e-12;
            wtotal += g.weight[k];
            continue;
        }
        g.weight[k] = wsum / double(n);
        wtotal += g.weight[k];
        for (int d = 0; d < dim; ++d) {
            const double mu = slot[1 + d] / wsum;
            const double var = std::max(slot[1 + dim + d] / wsum - mu * mu, double(kVarianceFloor));
            g.mean[k * size_t(dim) + size_t(d)] = mu;
            g.var[k * size_t(dim) + size_t(d)] = var;
        }
    }
    for (auto& w : g.weight) w /= wtotal;
    return ll_before;
}

// Mean log-likelihood under the current parameters, no update.
inline double work_log_likelihood(const WorkGmm& g, const float* pts, int64_t n) {
    WorkGmm probe = g;
    return em_iteration(probe, pts, n);
}

}  // namespace detail_gmm

inline Gmm fit_labeled(const float* pts, const uint8_t* labels, int64_t n, int dim) {
    if (n < 1) throw ParameterError("fit_labeled: empty input");
    Gmm g;
    g.dim = dim;
    // pass 1: which classes are present, per-class counts
    std::array<int64_t, 256> count{};
    for (int64_t i = 0; i < n; ++i) count[labels[i]]++;
    for (int cls = 0; cls < 256; ++cls) {
        if (count[size_t(cls)] == 0) continue;
        GmmComponent comp;
        comp.cls = uint8_t(cls);
        comp.weight = float(double(count[size_t(cls)]) / double(n));
        comp.mean.assign(static_cast<size_t>(dim), 0.f);
        comp.var.assign(static_cast<size_t>(dim), 0.f);
        g.components.push_back(std::move(comp));
    }
    // pass 2: moments in double
    std::vector<std::vector<double>> sum(g.components.size(), std::vector<double>(static_cast<size_t>(dim), 0.0));
    std::vector<std::vector<double>> sq(g.components.size(), std::vector<double>(static_cast<size_t>(dim), 0.0));
    std::array<int, 256> comp_of{};
    comp_of.fill(-1);
    for (size_t k = 0; k < g.components.size(); ++k) comp_of[g.components[k].cls] = int(k);
    for (int64_t i = 0; i < n; ++i) {
        const int k = comp_of[labels[i]];
        const float* x = pts + i * dim;
        for (int d = 0; d < dim; ++d) {
            sum[size_t(k)][size_t(d)] += double(x[d]);
            sq[size_t(k)][size_t(d)] += double(x[d]) * double(x[d]);
        }
    }
    for (size_t k = 0; k < g.components.size(); ++k) {
        const double cnt = double(count[g.components[k].cls]);
        for (int d = 0; d < dim; ++d) {
            const double mu = sum[k][size_t(d)] / cnt;
            const double var = std::max(sq[k][size_t(d)] / cnt - mu * mu, double(kVarianceFloor));
            g.components[k].mean[size_t(d)] = float(mu);
            g.components[k].var[size_t(d)] = float(var);
        }
    }
    g.validate();
    // EM confirmation pass on a working copy; the labeled moments are what we keep
    detail_gmm::WorkGmm probe = detail_gmm::work_from_gmm(g);
    const double before = detail_gmm::em_iteration(probe, pts, n);
    const double after = detail_gmm::work_log_likelihood(probe, pts, n);
    if (after < before - 1e-9)
        throw ContractError("fit_labeled: EM refinement decreased log-likelihood");
    return g;
}

// ---------------------------------------------------------------------------
// Unlabeled EM with k-means++ initialization. Component cls fields are the
// component indices. `ll_trace`, when given, receives the per-iteration mean
// log-likelihood (non-decreasing).

inline Gmm fit_em(const float* pts, int64_t n, int dim, int K, double tol = 1e-4,
                  int max_iter = 100, uint64_t seed = 0, std::vector<double>* ll_trace = nullptr) {
    if (K < 1) throw ParameterError("fit_em: K must be >= 1");
    if (n < K) throw ParameterError("fit_em: fewer points than components");

    Rng rng(derive_seed(seed, "em-init"));
    // k-means++ seeding
    std::vector<int64_t> centers;
    centers.push_back(int64_t(rng.uniform_index(uint64_t(n))));
    std::vector<double> d2(static_cast<size_t>(n), 0.0);
    for (int k = 1; k < K; ++k) {
        double total = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (int64_t c : centers) {
                double q = 0.0;
                for (int d = 0; d < dim; ++d) {
                    const double diff = double(pts[i * dim + d]) - double(pts[c * dim + d]);
                    q += diff * diff;
                }
                best = std::min(best, q);
            }
            d2[size_t(i)] = best;
            total += best;
        }
        int64_t pick;
        if (total <= 0.0) {
            pick = int64_t(rng.uniform_index(uint64_t(n)));
        } else {
            double r = rng.uniform() * total;
            pick = n - 1;
            for (int64_t i = 0; i < n; ++i) {
                r -= d2[size_t(i)];
                if (r <= 0) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(pick);
    }

    // initial parameters in double: hard assignment to nearest center
    detail_gmm::WorkGmm w;
    w.dim = dim;
    w.weight.assign(static_cast<size_t>(K), 0.0);
    w.mean.assign(static_cast<size_t>(K) * size_t(dim), 0.0);
    w.var.assign(static_cast<size_t>(K) * size_t(dim), 0.0);
    {
        std::vector<int> assign(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int bk = 0;
            for (int k = 0; k < K; ++k) {
                double q = 0.0;
                for (int d = 0; d < dim; ++d) {
                    const double diff =
                        double(pts[i * dim + d]) - double(pts[centers[size_t(k)] * dim + d]);
                    q += diff * diff;
                }
                if (q < best) {
                    best = q;
                    bk = k;
                }
            }
            assign[size_t(i)] = bk;
        }
        // global variance as fallback spread
        std::vector<double> gmu(static_cast<size_t>(dim), 0.0), gvar(static_cast<size_t>(dim), 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) gmu[size_t(d)] += double(pts[i * dim + d]);
        for (auto& m : gmu) m /= double(n);
        for (int64_t i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) {
                const double diff = double(pts[i * dim + d]) - gmu[size_t(d)];
                gvar[size_t(d)] += diff * diff;
            }
        for (auto& v : gvar) v = std::max(v / double(n), double(kVarianceFloor));

        for (int k = 0; k < K; ++k) {
            std::vector<double> sum(static_cast<size_t>(dim), 0.0), sq(static_cast<size_t>(dim), 0.0);
            int64_t cnt = 0;
            for (int64_t i = 0; i < n; ++i) {
                if (assign[size_t(i)] != k) continue;
                ++cnt;
                for (int d = 0; d < dim; ++d) {
                    sum[size_t(d)] += double(pts[i * dim + d]);
                    sq[size_t(d)] += double(pts[i * dim + d]) * double(pts[i * dim + d]);
                }
            }
            if (cnt == 0) {  // fall back to the seeded center with global spread
                for (int d = 0; d < dim; ++d) {
                    w.mean[size_t(k) * size_t(dim) + size_t(d)] =
                        double(pts[centers[size_t(k)] * dim + d]);
                    w.var[size_t(k) * size_t(dim) + size_t(d)] = gvar[size_t(d)];
                }
                w.weight[size_t(k)] = 1.0 / double(n);
            } else {
                for (int d = 0; d < dim; ++d) {
                    const double mu = sum[size_t(d)] / double(cnt);
                    const double var = std::max(sq[size_t(d)] / double(cnt) - mu * mu,
                                                std::max(gvar[size_t(d)] * 1e-4, double(kVarianceFloor)));
                    w.mean[size_t(k) * size_t(dim) + size_t(d)] = mu;
                    w.var[size_t(k) * size_t(dim) + size_t(d)] = var;
                }
                w.weight[size_t(k)] = double(cnt) / double(n);
            }
        }
        double wsum = 0.0;
        for (double x : w.weight) wsum += x;
        for (auto& x : w.weight) x /= wsum;
    }

    double prev = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
        const double ll = detail_gmm::em_iteration(w, pts, n);
        if (ll_trace) ll_trace->push_back(ll);
        if (it > 0) {
            const double rel = (ll - prev) / std::max(std::abs(prev), 1e-12);
            if (rel < tol) break;
        }
        prev = ll;
    }

    Gmm g;
    g.dim = dim;
    for (int k = 0; k < K; ++k) {
        GmmComponent comp;
        comp.cls = uint8_t(k);
        comp.weight = float(w.weight[size_t(k)]);
        comp.mean.resize(static_cast<size_t>(dim));
        comp.var.resize(static_cast<size_t>(dim));
        for (int d = 0; d < dim; ++d) {
            comp.mean[size_t(d)] = float(w.mean[size_t(k) * size_t(dim) + size_t(d)]);
            comp.var[size_t(d)] =
                std::max(float(w.var[size_t(k) * size_t(dim) + size_t(d)]), kVarianceFloor);
        }
        g.components.push_back(std::move(comp));
    }
    g.validate();
    return g;
}

// ---------------------------------------------------------------------------
// rho-truncated sampling from one class component: accepted draws lie inside
// the central chi-square(rho) Mahalanobis ball. rho = 1 disables truncation.

inline std::vector<float> sample_class(const Gmm& g, uint8_t cls, int64_t num, double rho, Rng& rng) {
    if (!(rho > 0.0 && rho <= 1.0)) throw ParameterError("sample_class: rho must be in (0,1]");
    if (num < 0) throw ParameterError("sample_class: negative sample count");
    const auto& comp = g.component(cls);  // throws ClassError if absent
    const int dim = g.dim;
    const double threshold =
        rho < 1.0 ? chi2_quantile(rho, dim) : std::numeric_limits<double>::infinity();
    std::vector<float> out(static_cast<size_t>(num) * size_t(dim));
    std::vector<double> z(static_cast<size_t>(dim));
    const int64_t cap = 1000 * std::max<int64_t>(num, 1);
    int64_t attempts = 0;
    for (int64_t i = 0; i < num; ++i) {
        for (;;) {
            if (++attempts > cap) throw SamplingError("sample_class: retry cap exceeded");
            double r2 = 0.0;
            for (int d = 0; d < dim; ++d) {
                z[size_t(d)] = rng.normal();
                r2 += z[size_t(d)] * z[size_t(d)];
            }
            if (r2 <= threshold) {
                for (int d = 0; d < dim; ++d)
                    out[size_t(i) * dim + size_t(d)] =
                        comp.mean[size_t(d)] +
                        float(std::sqrt(double(comp.var[size_t(d)])) * z[size_t(d)]);
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// match: argmax over library entries of the mean log-likelihood of (up to
// `subsample`) points; ties resolve to the lowest index.

inline size_t match(const GmmLibrary& lib, const float* pts, int64_t n, int dim,
                    int64_t subsample = 1024, uint64_t seed = 0) {
    if (lib.entries.empty()) throw ParameterError("match: empty library");
    if (n < 1) throw ParameterError("match: empty point set");
    if (dim != lib.dim) throw DimensionError("match: dimension mismatch");

    std::vector<float> picked;
    const float* eval_pts = pts;
    int64_t eval_n = n;
    if (subsample > 0 && n > subsample) {
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng(derive_seed(seed, "match-subsample"));
        for (int64_t i = 0; i < subsample; ++i) {
            const int64_t j = i + int64_t(rng.uniform_index(uint64_t(n - i)));
            std::swap(idx[size_t(i)], idx[size_t(j)]);
        }
        picked.resize(static_cast<size_t>(subsample) * size_t(dim));
        for (int64_t i = 0; i < subsample; ++i)
            std::copy_n(pts + idx[size_t(i)] * dim, dim, picked.begin() + i * dim);
        eval_pts = picked.data();
        eval_n = subsample;
    }

    std::vector<double> scores(lib.entries.size());
    parallel_for(int64_t(lib.entries.size()), 1, [&](int64_t e) {
        scores[size_t(e)] = log_likelihood(lib.entries[size_t(e)], eval_pts, eval_n, dim);
    });
    size_t best = 0;
    for (size_t e = 1; e < scores.size(); ++e)
        if (scores[e] > scores[best]) best = e;
    return best;
}

// ---------------------------------------------------------------------------
// SGMM file: "SGMM" | version u8 | body | fnv1a64(body) u64.
// body: dim u32 | stride 3*u32 | checkpoint_hash u64 | entry_count u32 |
// entries { volume_id u32 | origin 3*u32 | comp_count u8 |
//           comps { cls u8 | weight f32 | mean dim*f32 | var dim*f32 } }.

namespace detail_io {

template <class T>
void put(std::vector<char>& buf, T v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

template <class T>
T take(const std::vector<char>& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw FormatError("truncated payload");
    T v{};
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace detail_io

inline void write_gmm_library(const std::string& path, const GmmLibrary& lib) {
    std::vector<char> body;
    detail_io::put<uint32_t>(body, uint32_t(lib.dim));
    for (uint32_t s : lib.stride) detail_io::put<uint32_t>(body, s);
    detail_io::put<uint64_t>(body, lib.checkpoint_hash);
    detail_io::put<uint32_t>(body, uint32_t(lib.entries.size()));
    for (const auto& g : lib.entries) {
        detail_io::put<uint32_t>(body, g.volume_id);
        for (uint32_t o : g.origin) detail_io::put<uint32_t>(body, o);
        detail_io::put<uint8_t>(body, uint8_t(g.components.size()));
        for (const auto& c : g.components) {
            detail_io::put<uint8_t>(body, c.cls);
            detail_io::put<float>(body, c.weight);
            for (float m : c.mean) detail_io::put<float>(body, m);
            for (float v : c.var) detail_io::put<float>(body, v);
        }
    }
    auto f = open_output(path);
    f.write("SGMM", 4);
    detail_io::write_le<uint8_t>(f, 1);
    f.write(body.data(), std::streamsize(body.size()));
    detail_io::write_le<uint64_t>(f, fnv1a64(body.data(), body.size()));
    if (!f) throw DataError("write failed: " + path);
}

inline GmmLibrary read_gmm_library(const std::string& path) {
    auto f = open_input(path);
    detail_io::read_magic(f, "SGMM");
    if (detail_io::read_le<uint8_t>(f) != 1) throw FormatError("unsupported SGMM version");
    std::vector<char> rest((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (rest.size() < 8) throw FormatError("truncated SGMM file");
    std::vector<char> body(rest.begin(), rest.end() - 8);
    uint64_t expect;
    std::memcpy(&expect, rest.data() + rest.size() - 8, 8);
    if (fnv1a64(body.data(), body.size()) != expect) throw ChecksumError("SGMM checksum mismatch");

    size_t pos = 0;
    GmmLibrary lib;
    lib.dim = int(detail_io::take<uint32_t>(body, pos));
    for (auto& s : lib.stride) s = detail_io::take<uint32_t>(body, pos);
    lib.checkpoint_hash = detail_io::take<uint64_t>(body, pos);
    const uint32_t count = detail_io::take<uint32_t>(body, pos);
    for (uint32_t e = 0; e < count; ++e) {
        Gmm g;
        g.dim = lib.dim;
        g.volume_id = detail_io::take<uint32_t>(body, pos);
        for (auto& o : g.origin) o = detail_io::take<uint32_t>(body, pos);
        const uint8_t nc = detail_io::take<uint8_t>(body, pos);
        for (uint8_t c = 0; c < nc; ++c) {
            GmmComponent comp;
            comp.cls = detail_io::take<uint8_t>(body, pos);
            comp.weight = detail_io::take<float>(body, pos);
            comp.mean.resize(static_cast<size_t>(lib.dim));
            comp.var.resize(static_cast<size_t>(lib.dim));
            for (auto& m : comp.mean) m = detail_io::take<float>(body, pos);
            for (auto& v : comp.var) v = detail_io::take<float>(body, pos);
            g.components.push_back(std::move(comp));
        }
        try {
            g.validate();
        } catch (const ContractError& err) {
            throw FormatError(std::string("SGMM entry invalid: ") + err.what());
        }
        lib.entries.push_back(std::move(g));
    }
    if (pos != body.size()) throw FormatError("SGMM trailing bytes");
    if (lib.entries.empty()) throw FormatError("SGMM library is empty");
    return lib;
}

}  // namespace sfuda3d
