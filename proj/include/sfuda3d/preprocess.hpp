#pragma once

// Preprocessing pipeline (foreground crop -> isotropic resample -> percentile
// clip -> z-normalization), crop-grid enumeration and training-time
// augmentation. Intensities are interpolated trilinearly, labels with nearest
// neighbor; labels only ever receive geometric transforms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "common.hpp"
#include "volume.hpp"

namespace sfuda3d {

struct Crop {
    uint32_t i = 0, j = 0, k = 0;  // origin voxel
    uint32_t size = 0;             // cubic edge length
};

// Window origins at stride multiples per axis, plus one clamped origin so the
// final window touches the boundary when the stride does not divide evenly.
inline std::vector<Crop> crop_grid(std::array<uint32_t, 3> dims, uint32_t patch,
                                   std::array<uint32_t, 3> stride) {
    for (int a = 0; a < 3; ++a) {
        if (stride[size_t(a)] < 1) throw ParameterError("crop_grid: stride components must be >= 1");
        if (patch > dims[size_t(a)]) throw ParameterError("crop_grid: patch exceeds volume dimension");
    }
    std::array<std::vector<uint32_t>, 3> origins;
    for (int a = 0; a < 3; ++a) {
        const uint32_t span = dims[size_t(a)] - patch;
        const uint32_t s = stride[size_t(a)];
        for (uint32_t o = 0; o <= span; o += s) origins[size_t(a)].push_back(o);
        if (span % s != 0) origins[size_t(a)].push_back(span);
    }
    std::vector<Crop> crops;
    crops.reserve(origins[0].size() * origins[1].size() * origins[2].size());
    for (uint32_t k : origins[2])
        for (uint32_t j : origins[1])
            for (uint32_t i : origins[0]) crops.push_back({i, j, k, patch});
    return crops;
}

// ---------------------------------------------------------------------------
// Interpolating samplers with edge clamping.

inline float sample_trilinear(const Volume& v, double x, double y, double z) {
    auto prep = [](double c, uint32_t n) {
        c = std::min(std::max(c, 0.0), double(n - 1));
        const double f = std::floor(c);
        int i0 = int(f);
        int i1 = std::min(i0 + 1, int(n - 1));
        return std::tuple<int, int, double>(i0, i1, c - f);
    };
    auto [x0, x1, tx] = prep(x, v.dims[0]);
    auto [y0, y1, ty] = prep(y, v.dims[1]);
    auto [z0, z1, tz] = prep(z, v.dims[2]);
    auto at = [&](int i, int j, int k) {
        return double(v.at(uint32_t(i), uint32_t(j), uint32_t(k)));
    };
    const double v00 = at(x0, y0, z0) * (1 - tx) + at(x1, y0, z0) * tx;
    const double v10 = at(x0, y1, z0) * (1 - tx) + at(x1, y1, z0) * tx;
    const double v01 = at(x0, y0, z1) * (1 - tx) + at(x1, y0, z1) * tx;
    const double v11 = at(x0, y1, z1) * (1 - tx) + at(x1, y1, z1) * tx;
    const double v0 = v00 * (1 - ty) + v10 * ty;
    const double v1 = v01 * (1 - ty) + v11 * ty;
    return float(v0 * (1 - tz) + v1 * tz);
}

inline uint8_t sample_nearest(const LabelMap& v, double x, double y, double z) {
    auto idx = [](double c, uint32_t n) {
        const long r = std::lround(c);
        return uint32_t(std::min<long>(std::max<long>(r, 0), long(n - 1)));
    };
    return v.at(idx(x, v.dims[0]), idx(y, v.dims[1]), idx(z, v.dims[2]));
}

// ---------------------------------------------------------------------------
// preprocess: crop to the nonzero-label bounding box (4-voxel margin, clamped),
// resample to isotropic 1.0 mm, clip above the 98th percentile, z-normalize.

inline std::pair<Volume, LabelMap> preprocess(const Volume& vol, const LabelMap& labels) {
    if (vol.dims != labels.dims) throw DimensionError("preprocess: volume/label dims differ");

    // 1. bounding box of nonzero labels, 4-voxel margin
    std::array<int64_t, 3> lo{int64_t(vol.dims[0]), int64_t(vol.dims[1]), int64_t(vol.dims[2])};
    std::array<int64_t, 3> hi{-1, -1, -1};
    for (uint32_t k = 0; k < labels.dims[2]; ++k)
        for (uint32_t j = 0; j < labels.dims[1]; ++j)
            for (uint32_t i = 0; i < labels.dims[0]; ++i)
                if (labels.at(i, j, k) != 0) {
                    lo[0] = std::min<int64_t>(lo[0], i);
                    lo[1] = std::min<int64_t>(lo[1], j);
                    lo[2] = std::min<int64_t>(lo[2], k);
                    hi[0] = std::max<int64_t>(hi[0], i);
                    hi[1] = std::max<int64_t>(hi[1], j);
                    hi[2] = std::max<int64_t>(hi[2], k);
                }
    if (hi[0] < 0) throw DataError("preprocess: labels contain no foreground");
    constexpr int64_t kMargin = 4;
    for (int a = 0; a < 3; ++a) {
        lo[size_t(a)] = std::max<int64_t>(0, lo[size_t(a)] - kMargin);
        hi[size_t(a)] = std::min<int64_t>(int64_t(vol.dims[size_t(a)]) - 1, hi[size_t(a)] + kMargin);
    }
    Volume cv;
    LabelMap cl;
    cv.spacing = vol.spacing;
    cl.spacing = labels.spacing;
    for (int a = 0; a < 3; ++a)
        cv.dims[size_t(a)] = cl.dims[size_t(a)] = uint32_t(hi[size_t(a)] - lo[size_t(a)] + 1);
    cv.values.resize(static_cast<size_t>(cv.numel()));
    cl.values.resize(static_cast<size_t>(cl.numel()));
    for (uint32_t k = 0; k < cv.dims[2]; ++k)
        for (uint32_t j = 0; j < cv.dims[1]; ++j)
            for (uint32_t i = 0; i < cv.dims[0]; ++i) {
                cv.at(i, j, k) = vol.at(uint32_t(lo[0] + i), uint32_t(lo[1] + j), uint32_t(lo[2] + k));
                cl.at(i, j, k) = labels.at(uint32_t(lo[0] + i), uint32_t(lo[1] + j), uint32_t(lo[2] + k));
            }

    // 2. resample to 1.0 mm isotropic (trilinear image, nearest labels)
    std::array<uint32_t, 3> nd;
    bool already_iso = true;
    for (int a = 0; a < 3; ++a) {
        const double phys = double(cv.dims[size_t(a)]) * double(cv.spacing[size_t(a)]);
        nd[size_t(a)] = uint32_t(std::max<long>(1, std::lround(phys)));
        already_iso = already_iso && cv.spacing[size_t(a)] == 1.f;
    }
    Volume rv;
    LabelMap rl;
    if (already_iso) {
        rv = std::move(cv);
        rl = std::move(cl);
    } else {
        rv.dims = nd;
        rl.dims = nd;
        rv.values.resize(static_cast<size_t>(rv.numel()));
        rl.values.resize(static_cast<size_t>(rl.numel()));
        for (uint32_t k = 0; k < nd[2]; ++k)
            for (uint32_t j = 0; j < nd[1]; ++j)
                for (uint32_t i = 0; i < nd[0]; ++i) {
                    const double x = ((i + 0.5) * 1.0) / double(cv.spacing[0]) - 0.5;
                    const double y = ((j + 0.5) * 1.0) / double(cv.spacing[1]) - 0.5;
                    const double z = ((k + 0.5) * 1.0) / double(cv.spacing[2]) - 0.5;
                    rv.at(i, j, k) = sample_trilinear(cv, x, y, z);
                    rl.at(i, j, k) = sample_nearest(cl, x, y, z);
                }
    }
    rv.spacing = {1.f, 1.f, 1.f};
    rl.spacing = {1.f, 1.f, 1.f};

    // 3. clip above the 98th percentile (exact sort, nearest-rank)
    std::vector<float> sorted(rv.values);
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    size_t idx = size_t(std::ceil(0.98 * double(n)));
    idx = idx > 0 ? idx - 1 : 0;
    if (idx >= n) idx = n - 1;
    const float q98 = sorted[idx];
    for (auto& v : rv.values) v = std::min(v, q98);

    // 4. z-normalize
    double mean = 0.0;
    for (float v : rv.values) mean += double(v);
    mean /= double(n);
    double var = 0.0;
    for (float v : rv.values) {
        const double d = double(v) - mean;
        var += d * d;
    }
    var /= double(n);
    const double sd = std::max(std::sqrt(var), 1e-12);
    for (auto& v : rv.values) v = float((double(v) - mean) / sd);

    return {std::move(rv), std::move(rl)};
}

// ---------------------------------------------------------------------------
// Augmentation primitives. Geometric ones apply to both image and labels;
// intensity jitter applies to the image only.

template <class Vol>
Vol flip_axis(const Vol& v, int axis) {
    if (axis < 0 || axis > 2) throw ParameterError("flip_axis: axis must be 0..2");
    Vol out = v;
    for (uint32_t k = 0; k < v.dims[2]; ++k)
        for (uint32_t j = 0; j < v.dims[1]; ++j)
            for (uint32_t i = 0; i < v.dims[0]; ++i) {
                uint32_t si = i, sj = j, sk = k;
                if (axis == 0) si = v.dims[0] - 1 - i;
                if (axis == 1) sj = v.dims[1] - 1 - j;
                if (axis == 2) sk = v.dims[2] - 1 - k;
                out.at(i, j, k) = v.at(si, sj, sk);
            }
    return out;
}

// Quarter-turn rotations about an axis; requires equal extents in the rotated
// plane (cubic patches qualify).
template <class Vol>
Vol rotate90(const Vol& v, int axis, int turns) {
    if (axis < 0 || axis > 2) throw ParameterError("rotate90: axis must be 0..2");
    turns = ((turns % 4) + 4) % 4;
    Vol cur = v;
    for (int t = 0; t < turns; ++t) {
        const auto& d = cur.dims;
        if ((axis == 0 && d[1] != d[2]) || (axis == 1 && d[0] != d[2]) || (axis == 2 && d[0] != d[1]))
            throw ParameterError("rotate90: rotated plane must be square");
        Vol next = cur;
        for (uint32_t k = 0; k < d[2]; ++k)
            for (uint32_t j = 0; j < d[1]; ++j)
                for (uint32_t i = 0; i < d[0]; ++i) {
                    uint32_t si = i, sj = j, sk = k;
                    if (axis == 2) {          // (i,j) <- (j, N-1-i)
                        si = j;
                        sj = d[0] - 1 - i;
                    } else if (axis == 1) {   // (i,k) <- (k, N-1-i)
                        si = k;
                        sk = d[0] - 1 - i;
                    } else {                  // (j,k) <- (k, N-1-j)
                        sj = k;
                        sk = d[1] - 1 - j;
                    }
                    next.at(i, j, k) = cur.at(si, sj, sk);
                }
        cur = std::move(next);
    }
    return cur;
}

inline Volume intensity_jitter(const Volume& v, float scale, float shift) {
    Volume out = v;
    for (auto& x : out.values) x = x * scale + shift;
    return out;
}

// Zoom about the patch center by factor s, resampled back to the same dims.
inline std::pair<Volume, LabelMap> scale_about_center(const Volume& v, const LabelMap& l, double s) {
    if (s <= 0) throw ParameterError("scale_about_center: factor must be positive");
    Volume ov = v;
    LabelMap ol = l;
    const double cx = (v.dims[0] - 1) / 2.0, cy = (v.dims[1] - 1) / 2.0, cz = (v.dims[2] - 1) / 2.0;
    for (uint32_t k = 0; k < v.dims[2]; ++k)
        for (uint32_t j = 0; j < v.dims[1]; ++j)
            for (uint32_t i = 0; i < v.dims[0]; ++i) {
                const double x = cx + (i - cx) / s;
                const double y = cy + (j - cy) / s;
                const double z = cz + (k - cz) / s;
                ov.at(i, j, k) = sample_trilinear(v, x, y, z);
                ol.at(i, j, k) = sample_nearest(l, x, y, z);
            }
    return {std::move(ov), std::move(ol)};
}

// Coarse-grid elastic deformation: grid^3 displacement vectors ~ N(0, sigma),
// trilinearly interpolated to a dense field, then a backward warp.
inline std::pair<Volume, LabelMap> elastic_warp(const Volume& v, const LabelMap& l, Rng& rng,
                                                int grid = 4, double sigma = 2.0) {
    const int G = grid;
    std::vector<std::array<double, 3>> disp(static_cast<size_t>(G) * G * G);
    for (auto& d : disp)
        for (auto& c : d) c = sigma * rng.normal();
    auto disp_at = [&](uint32_t i, uint32_t j, uint32_t k, int axis) {
        auto prep = [&](uint32_t c, uint32_t n) {
            const double g = n > 1 ? double(c) * (G - 1) / double(n - 1) : 0.0;
            const int g0 = std::min(G - 2, int(g));
            return std::pair<int, double>(g0, g - g0);
        };
        auto [i0, ti] = prep(i, v.dims[0]);
        auto [j0, tj] = prep(j, v.dims[1]);
        auto [k0, tk] = prep(k, v.dims[2]);
        double acc = 0.0;
        for (int dk = 0; dk < 2; ++dk)
            for (int dj = 0; dj < 2; ++dj)
                for (int di = 0; di < 2; ++di) {
                    const double w = (di ? ti : 1 - ti) * (dj ? tj : 1 - tj) * (dk ? tk : 1 - tk);
                    acc += w * disp[size_t(((k0 + dk) * G + (j0 + dj)) * G + (i0 + di))][size_t(axis)];
                }
        return acc;
    };
    Volume ov = v;
    LabelMap ol = l;
    for (uint32_t k = 0; k < v.dims[2]; ++k)
        for (uint32_t j = 0; j < v.dims[1]; ++j)
            for (uint32_t i = 0; i < v.dims[0]; ++i) {
                const double x = i + disp_at(i, j, k, 0);
                const double y = j + disp_at(i, j, k, 1);
                const double z = k + disp_at(i, j, k, 2);
                ov.at(i, j, k) = sample_trilinear(v, x, y, z);
                ol.at(i, j, k) = sample_nearest(l, x, y, z);
            }
    return {std::move(ov), std::move(ol)};
}

// Random training-time augmentation: each transform group fires with
// probability 0.5. Labels receive geometric transforms only.
inline std::pair<Volume, LabelMap> augment(const Volume& patch, const LabelMap& labels, Rng& rng) {
    if (patch.dims[0] != patch.dims[1] || patch.dims[0] != patch.dims[2])
        throw ParameterError("augment: expects a cubic patch");
    Volume v = patch;
    LabelMap l = labels;
    if (rng.coin()) {
        const int axis = int(rng.uniform_index(3));
        v = flip_axis(v, axis);
        l = flip_axis(l, axis);
    }
    if (rng.coin()) {
        const int axis = int(rng.uniform_index(3));
        const int turns = 1 + int(rng.uniform_index(3));
        v = rotate90(v, axis, turns);
        l = rotate90(l, axis, turns);
    }
    if (rng.coin()) {
        const double s = rng.uniform(0.9, 1.1);
        std::tie(v, l) = scale_about_center(v, l, s);
    }
    if (rng.coin()) {
        std::tie(v, l) = elastic_warp(v, l, rng);
    }
    if (rng.coin()) {
        const float scale = float(rng.uniform(0.9, 1.1));
        const float shift = float(rng.uniform(-0.1, 0.1));
        v = intensity_jitter(v, scale, shift);
    }
    return {std::move(v), std::move(l)};
}

}  // namespace sfuda3d
