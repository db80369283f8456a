#pragma once

// Synthetic two-modality phantom volumes. Four ellipsoidal structures with
// class-distinctive geometry (small ball / flat elongated ellipsoid / shell /
// core inside the shell) are painted into a 64^3 grid; modality A and B share
// geometry for a given seed and differ in intensity mapping, noise, bias and
// gamma. Later class ids overwrite earlier ones where ellipsoids overlap.

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "common.hpp"
#include "volume.hpp"

namespace sfuda3d {

struct EllipsoidSpec {
    std::array<double, 3> center;        // nominal center, voxels
    double center_jitter = 3.0;          // uniform +/- per axis
    std::array<double, 2> rx{6.0, 8.0};  // radii ranges, voxels
    std::array<double, 2> ry{6.0, 8.0};
    std::array<double, 2> rz{6.0, 8.0};
    bool anchor_to_previous = false;     // center follows the previous class
};

struct PhantomSpec {
    uint64_t seed = 0;
    char modality = 'A';                 // 'A' or 'B'
    uint32_t dims = 64;
    std::vector<EllipsoidSpec> classes;  // ids 1..classes.size(), painted in order
    struct Intensity {
        float mean = 0.f;
        float sigma = 0.05f;
    };
    std::vector<Intensity> intensity;    // index = class id, [0] = background
    float bias_strength = 0.25f;         // multiplicative bias field (modality A)
    float gamma = 1.5f;                  // intensity gamma (modality B)
};

inline PhantomSpec make_phantom_spec(uint64_t seed, char modality) {
    if (modality != 'A' && modality != 'B') throw ParameterError("phantom: modality must be A or B");
    PhantomSpec s;
    s.seed = seed;
    s.modality = modality;
    s.classes = {
        // id 1: small ball, upper region
        {{22, 22, 44}, 3.0, {4.5, 6.5}, {4.5, 6.5}, {4.5, 6.5}, false},
        // id 2: flat elongated ellipsoid
        {{42, 22, 24}, 3.0, {11, 13}, {7, 9}, {5, 7}, false},
        // id 3: large ball; becomes a shell once id 4 is painted inside it
        {{24, 42, 24}, 3.0, {10, 13}, {10, 13}, {10, 13}, false},
        // id 4: core concentric with id 3
        {{0, 0, 0}, 1.0, {5, 7}, {5, 7}, {5, 7}, true},
    };
    if (modality == 'A') {
        s.intensity = {{0.10f, 0.05f}, {0.80f, 0.05f}, {0.55f, 0.05f}, {0.35f, 0.05f}, {0.65f, 0.05f}};
    } else {
        s.intensity = {{0.20f, 0.08f}, {0.30f, 0.08f}, {0.70f, 0.08f}, {0.85f, 0.08f}, {0.45f, 0.08f}};
    }
    return s;
}

inline std::pair<Volume, LabelMap> gen_phantom(const PhantomSpec& spec) {
    const uint32_t L = spec.dims;
    LabelMap labels;
    labels.dims = {L, L, L};
    labels.values.assign(static_cast<size_t>(labels.numel()), 0);

    // geometry is a function of the seed only, shared between modalities
    Rng geom(derive_seed(spec.seed, "phantom-geom"));
    std::array<double, 3> prev_center{0, 0, 0};
    for (size_t ci = 0; ci < spec.classes.size(); ++ci) {
        const auto& e = spec.classes[ci];
        std::array<double, 3> c;
        for (int a = 0; a < 3; ++a) {
            const double base = e.anchor_to_previous ? prev_center[size_t(a)] : e.center[size_t(a)];
            c[size_t(a)] = base + geom.uniform(-e.center_jitter, e.center_jitter);
        }
        const double rx = geom.uniform(e.rx[0], e.rx[1]);
        const double ry = geom.uniform(e.ry[0], e.ry[1]);
        const double rz = geom.uniform(e.rz[0], e.rz[1]);
        prev_center = c;
        const uint8_t id = uint8_t(ci + 1);
        const int ilo = std::max(0, int(std::floor(c[0] - rx)));
        const int ihi = std::min(int(L) - 1, int(std::ceil(c[0] + rx)));
        const int jlo = std::max(0, int(std::floor(c[1] - ry)));
        const int jhi = std::min(int(L) - 1, int(std::ceil(c[1] + ry)));
        const int klo = std::max(0, int(std::floor(c[2] - rz)));
        const int khi = std::min(int(L) - 1, int(std::ceil(c[2] + rz)));
        for (int k = klo; k <= khi; ++k)
            for (int j = jlo; j <= jhi; ++j)
                for (int i = ilo; i <= ihi; ++i) {
                    const double dx = (i - c[0]) / rx;
                    const double dy = (j - c[1]) / ry;
                    const double dz = (k - c[2]) / rz;
                    if (dx * dx + dy * dy + dz * dz <= 1.0)
                        labels.at(uint32_t(i), uint32_t(j), uint32_t(k)) = id;
                }
    }

    Volume vol;
    vol.dims = labels.dims;
    vol.values.resize(static_cast<size_t>(vol.numel()));

    const std::string tag = std::string("phantom-intensity-") + spec.modality;
    Rng noise(derive_seed(spec.seed, tag));

    // coarse multiplicative bias field (modality A), trilinearly interpolated
    constexpr int G = 4;
    std::array<float, G * G * G> bias{};
    const bool use_bias = spec.modality == 'A' && spec.bias_strength > 0.f;
    for (auto& b : bias) b = use_bias ? float(1.0 + spec.bias_strength * noise.uniform(-1.0, 1.0)) : 1.f;
    auto bias_at = [&](uint32_t i, uint32_t j, uint32_t k) -> float {
        if (!use_bias) return 1.f;
        auto axis = [&](uint32_t v) {
            const double g = double(v) * (G - 1) / double(L - 1);
            const int g0 = std::min(G - 2, int(g));
            return std::pair<int, double>(g0, g - g0);
        };
        auto [i0, ti] = axis(i);
        auto [j0, tj] = axis(j);
        auto [k0, tk] = axis(k);
        double acc = 0.0;
        for (int dk = 0; dk < 2; ++dk)
            for (int dj = 0; dj < 2; ++dj)
                for (int di = 0; di < 2; ++di) {
                    const double w = (di ? ti : 1 - ti) * (dj ? tj : 1 - tj) * (dk ? tk : 1 - tk);
                    acc += w * double(bias[size_t(((k0 + dk) * G + (j0 + dj)) * G + (i0 + di))]);
                }
        return float(acc);
    };

    const bool use_gamma = spec.modality == 'B';
    for (uint32_t k = 0; k < L; ++k)
        for (uint32_t j = 0; j < L; ++j)
            for (uint32_t i = 0; i < L; ++i) {
                const uint8_t cls = labels.at(i, j, k);
                const auto& inten = spec.intensity[size_t(cls)];
                double v = double(inten.mean);
                if (use_gamma) v = std::pow(std::max(v, 0.0), double(spec.gamma));
                v *= double(bias_at(i, j, k));
                v += double(inten.sigma) * noise.normal();
                vol.at(i, j, k) = float(v);
            }
    return {std::move(vol), std::move(labels)};
}

}  // namespace sfuda3d
