#pragma once

// End-to-end orchestration: supervised source training, extraction of the
// per-crop class-conditional GMM library from the trained model, and the
// source-free target adaptation loop. Each adaptation step estimates the
// per-class boundary with the frozen source model, fits a target GMM to the
// current latents, matches the best library entry by mean log-likelihood,
// arranges rho-truncated pseudo-latents inside the boundary, and minimizes
// the SWD between the latent point set and the arranged pseudo-latents.
// Only encoder/ASPP/decoder parameters are updated; the classifier stays
// frozen.

#include <array>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "gmm.hpp"
#include "model.hpp"
#include "preprocess.hpp"
#include "swd.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace sfuda3d {

struct TrainConfig {
    int epochs = 30;
    int crops_per_epoch = 40;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (epochs < 0 || crops_per_epoch < 1 || learning_rate <= 0)
            throw ConfigError("train config: epochs/crops/lr out of range");
    }
};

enum class Ablation { kNone, kNoShape, kNoShapeCount };

inline Ablation parse_ablation(const std::string& s) {
    if (s == "none") return Ablation::kNone;
    if (s == "no-shape") return Ablation::kNoShape;
    if (s == "no-shape-count") return Ablation::kNoShapeCount;
    throw ConfigError("unknown ablation mode: " + s);
}

inline std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::kNone: return "none";
        case Ablation::kNoShape: return "no-shape";
        default: return "no-shape-count";
    }
}

struct AdaptConfig {
    uint32_t patch = 32;
    std::array<uint32_t, 3> extract_stride{16, 16, 16};
    int epochs = 20;
    int crops_per_epoch = 20;
    double learning_rate = 3e-4;
    double rho = 0.9;
    int num_projections = 128;
    int match_subsample = 1024;
    Ablation ablation = Ablation::kNone;

    void validate() const {
        if (patch < 4 || patch % 4 != 0) throw ConfigError("adapt config: patch must be a multiple of 4");
        for (uint32_t s : extract_stride)
            if (s < 1) throw ConfigError("adapt config: stride components must be >= 1");
        if (epochs < 0 || crops_per_epoch < 1 || learning_rate <= 0)
            throw ConfigError("adapt config: epochs/crops/lr out of range");
        if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("adapt config: rho must be in (0,1]");
        if (num_projections < 1 || match_subsample < 1)
            throw ConfigError("adapt config: projections/subsample must be positive");
    }
};

// ---------------------------------------------------------------------------
// Dataset in memory: preprocessed volumes of one (modality, split) selection.

struct NamedVolume {
    std::string id;
    Volume image;
    LabelMap labels;
};

inline std::vector<NamedVolume> load_split(const Manifest& manifest, const std::string& modality,
                                           const std::string& split) {
    auto entries = manifest.select(modality, split);
    if (entries.empty())
        throw DataError("no volumes for modality " + modality + ", split " + split);
    std::vector<NamedVolume> out;
    for (const auto& e : entries) {
        auto vol = read_volume_f32(e.image_path);
        auto lab = read_volume_u8(e.label_path);
        auto [pv, pl] = preprocess(vol, lab);
        out.push_back({e.id, std::move(pv), std::move(pl)});
    }
    return out;
}

inline Crop random_crop(const NamedVolume& v, uint32_t patch, Rng& rng) {
    Crop c;
    c.size = patch;
    c.i = uint32_t(rng.uniform_index(v.image.dims[0] - patch + 1));
    c.j = uint32_t(rng.uniform_index(v.image.dims[1] - patch + 1));
    c.k = uint32_t(rng.uniform_index(v.image.dims[2] - patch + 1));
    return c;
}

// ---------------------------------------------------------------------------
// Source training: per step sample a volume, crop 32^3, augment, CE + Adam.

struct TrainTrace {
    std::vector<float> epoch_mean_ce;
    std::vector<double> epoch_wall_seconds;
};

inline TrainTrace train_source(SegModel& model, const std::vector<NamedVolume>& train,
                               const TrainConfig& cfg, uint32_t patch, uint64_t seed) {
    cfg.validate();
    if (train.empty()) throw DataError("train_source: empty training set");
    for (const auto& v : train)
        for (int a = 0; a < 3; ++a)
            if (v.image.dims[size_t(a)] < patch)
                throw DataError("train_source: volume " + v.id + " smaller than patch");

    model.set_trainable(true);
    Adam opt(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng rng(derive_seed(seed, "train-source"));
    TrainTrace trace;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double epoch_loss = 0.0;
        for (int step = 0; step < cfg.crops_per_epoch; ++step) {
            const auto& v = train[rng.uniform_index(train.size())];
            const Crop c = random_crop(v, patch, rng);
            Volume pv;
            pv.dims = {patch, patch, patch};
            pv.values = patch_to_tensor(v.image, c).data();
            LabelMap pl;
            pl.dims = {patch, patch, patch};
            pl.values = patch_labels(v.labels, c);
            auto [av, al] = augment(pv, pl, rng);
            auto x = Tensor::from({1, 1, int(patch), int(patch), int(patch)}, std::move(av.values));
            auto probs = model.forward(x);
            auto loss = cross_entropy<float>(probs, al.values);
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_loss += double(loss.item());
        }
        trace.epoch_mean_ce.push_back(float(epoch_loss / cfg.crops_per_epoch));
        trace.epoch_wall_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    model.meta.epochs = uint32_t(cfg.epochs);
    model.meta.seed = seed;
    model.meta.loss_curve = trace.epoch_mean_ce;
    return trace;
}

// ---------------------------------------------------------------------------
// GMM library extraction: latent field per crop-grid window, one
// class-conditional mixture per crop, keyed by (volume index, crop origin).

inline GmmLibrary extract_gmm_library(const SegModel& frozen, const std::vector<NamedVolume>& source,
                                      uint32_t patch, std::array<uint32_t, 3> stride) {
    if (source.empty()) throw DataError("extract_gmm_library: empty source set");
    GmmLibrary lib;
    lib.dim = frozen.num_classes();
    lib.stride = stride;
    lib.checkpoint_hash = frozen.param_hash();
    for (size_t vi = 0; vi < source.size(); ++vi) {
        const auto& v = source[vi];
        for (const Crop& c : crop_grid(v.image.dims, patch, stride)) {
            auto z = frozen.latent(patch_to_tensor(v.image, c));
            auto pts = field_points(z);
            const auto labels = patch_labels(v.labels, c);
            Gmm g = fit_labeled(pts.data().data(), labels.data(), pts.shape()[0], lib.dim);
            g.volume_id = uint32_t(vi);
            g.origin = {c.i, c.j, c.k};
            lib.entries.push_back(std::move(g));
        }
    }
    return lib;
}

// ---------------------------------------------------------------------------
// Boundary estimation: frozen-model argmax over a patch, voxel indices
// grouped by class. Index lists partition the patch.

struct BoundaryEstimate {
    uint32_t patch = 0;
    std::vector<std::vector<int32_t>> voxels_of_class;  // size = num classes

    int64_t count(size_t cls) const { return int64_t(voxels_of_class[cls].size()); }
    int num_present() const {
        int n = 0;
        for (const auto& v : voxels_of_class) n += !v.empty();
        return n;
    }
};

inline BoundaryEstimate estimate_boundary(const SegModel& frozen, const Tensor& patch) {
    auto probs = frozen.classify(frozen.latent(patch));
    const int C = frozen.num_classes();
    const int P = patch.shape()[2];
    const int64_t V = int64_t(P) * P * P;
    BoundaryEstimate b;
    b.patch = uint32_t(P);
    b.voxels_of_class.resize(static_cast<size_t>(C));
    const float* p = probs.data().data();
    for (int64_t v = 0; v < V; ++v) {
        int best = 0;
        float bv = p[v];
        for (int c = 1; c < C; ++c) {
            const float x = p[int64_t(c) * V + v];
            if (x > bv) {
                bv = x;
                best = c;
            }
        }
        b.voxels_of_class[size_t(best)].push_back(int32_t(v));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Pseudo-latent arrangement. For every class the boundary assigns voxels to,
// draw that many rho-truncated samples from the matched GMM's class component
// and place them at those voxel indices. A class missing from the mixture
// falls back to the present class whose mean is nearest to the global mixture
// mean. Returns the P^3 x C pseudo-latent field (voxel-major) plus per-voxel
// class tags.

struct PseudoLatents {
    std::vector<float> points;  // P^3 x C, row per voxel
    std::vector<uint8_t> tags;  // class drawn for each voxel
};

namespace detail_adapt {

inline uint8_t fallback_class(const Gmm& g) {
    std::vector<double> global_mean(static_cast<size_t>(g.dim), 0.0);
    for (const auto& comp : g.components)
        for (int d = 0; d < g.dim; ++d)
            global_mean[size_t(d)] += double(comp.weight) * double(comp.mean[size_t(d)]);
    double best = std::numeric_limits<double>::infinity();
    uint8_t cls = g.components.front().cls;
    for (const auto& comp : g.components) {
        double q = 0.0;
        for (int d = 0; d < g.dim; ++d) {
            const double diff = double(comp.mean[size_t(d)]) - global_mean[size_t(d)];
            q += diff * diff;
        }
        if (q < best) {
            best = q;
            cls = comp.cls;
        }
    }
    return cls;
}

}  // namespace detail_adapt

inline PseudoLatents arrange_pseudo_latents(const Gmm& g, const BoundaryEstimate& b, double rho,
                                            Rng& rng) {
    if (g.components.empty()) throw FormatError("arrange_pseudo_latents: mixture has no classes");
    const int dim = g.dim;
    const int64_t V = int64_t(b.patch) * b.patch * b.patch;
    PseudoLatents out;
    out.points.assign(static_cast<size_t>(V) * size_t(dim), 0.f);
    out.tags.assign(static_cast<size_t>(V), 0);
    for (size_t cls = 0; cls < b.voxels_of_class.size(); ++cls) {
        const auto& voxels = b.voxels_of_class[cls];
        if (voxels.empty()) continue;
        const uint8_t draw_cls =
            g.has_class(uint8_t(cls)) ? uint8_t(cls) : detail_adapt::fallback_class(g);
        const auto samples = sample_class(g, draw_cls, int64_t(voxels.size()), rho, rng);
        for (size_t i = 0; i < voxels.size(); ++i) {
            const int64_t v = voxels[i];
            std::copy_n(samples.begin() + int64_t(i) * dim, dim,
                        out.points.begin() + v * dim);
            out.tags[size_t(v)] = uint8_t(cls);
        }
    }
    return out;
}

// Ablation variants of the arrangement. "no-shape" keeps the per-class counts
// but scatters the samples over random voxel positions; "no-shape-count"
// draws every voxel's class from the mixture weights instead of the boundary.
inline PseudoLatents arrange_for_ablation(const Gmm& g, const BoundaryEstimate& b, double rho,
                                          Ablation mode, Rng& rng) {
    if (mode == Ablation::kNone) return arrange_pseudo_latents(g, b, rho, rng);
    if (g.components.empty()) throw FormatError("arrange_pseudo_latents: mixture has no classes");
    const int dim = g.dim;
    const int64_t V = int64_t(b.patch) * b.patch * b.patch;
    PseudoLatents out;
    out.points.assign(static_cast<size_t>(V) * size_t(dim), 0.f);
    out.tags.assign(static_cast<size_t>(V), 0);

    // random voxel order
    std::vector<int64_t> order(static_cast<size_t>(V));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = V - 1; i > 0; --i)
        std::swap(order[size_t(i)], order[size_t(rng.uniform_index(uint64_t(i + 1)))]);

    if (mode == Ablation::kNoShape) {
        int64_t pos = 0;
        for (size_t cls = 0; cls < b.voxels_of_class.size(); ++cls) {
            const int64_t n = b.count(cls);
            if (n == 0) continue;
            const uint8_t draw_cls =
                g.has_class(uint8_t(cls)) ? uint8_t(cls) : detail_adapt::fallback_class(g);
            const auto samples = sample_class(g, draw_cls, n, rho, rng);
            for (int64_t i = 0; i < n; ++i) {
                const int64_t v = order[size_t(pos++)];
                std::copy_n(samples.begin() + i * dim, dim, out.points.begin() + v * dim);
                out.tags[size_t(v)] = uint8_t(cls);
            }
        }
        return out;
    }

    // no-shape-count: class proportions come from the mixture weights
    for (int64_t i = 0; i < V; ++i) {
        double r = rng.uniform();
        uint8_t cls = g.components.back().cls;
        for (const auto& comp : g.components) {
            r -= double(comp.weight);
            if (r <= 0) {
                cls = comp.cls;
                break;
            }
        }
        const auto sample = sample_class(g, cls, 1, rho, rng);
        const int64_t v = order[size_t(i)];
        std::copy_n(sample.begin(), dim, out.points.begin() + v * dim);
        out.tags[size_t(v)] = cls;
    }
    return out;
}

// ---------------------------------------------------------------------------
// One adaptation step on a preprocessed target crop (no augmentation).

struct AdaptStepStats {
    float swd = 0.f;
    size_t matched_index = 0;
    double target_gmm_ll = 0.0;  // mean log-likelihood of the fitted target GMM
};

inline AdaptStepStats adapt_step(SegModel& model, const SegModel& frozen, const Tensor& patch,
                                 const GmmLibrary& lib, const AdaptConfig& cfg, Adam& opt,
                                 uint64_t step_seed) {
    auto z = model.latent(patch);
    auto x_points = field_points(z);
    const int64_t n = x_points.shape()[0];
    const int dim = x_points.shape()[1];

    const BoundaryEstimate b = estimate_boundary(frozen, patch);

    AdaptStepStats stats;
    {
        // target-side mixture, K tied to the boundary's class count
        const int K = std::max(1, b.num_present());
        Gmm gt = fit_em(x_points.data().data(), n, dim, K, 1e-4, 100,
                        derive_seed(step_seed, "target-em"));
        stats.target_gmm_ll = log_likelihood(gt, x_points.data().data(), n, dim);
    }

    stats.matched_index = match(lib, x_points.data().data(), n, dim, cfg.match_subsample,
                                derive_seed(step_seed, "match"));

    Rng arrange_rng(derive_seed(step_seed, "arrange"));
    const PseudoLatents pseudo =
        arrange_for_ablation(lib.entries[stats.matched_index], b, cfg.rho, cfg.ablation, arrange_rng);
    auto y = Tensor::from({int(n), dim}, pseudo.points);

    auto loss = swd_loss(x_points, y, cfg.num_projections, derive_seed(step_seed, "swd"));
    opt.zero_grad();
    backward(loss);
    opt.step();
    stats.swd = loss.item();
    return stats;
}

// ---------------------------------------------------------------------------
// Full adaptation loop. The frozen model must be bit-identical before and
// after; this is checked by hash.

struct AdaptTrace {
    std::vector<double> epoch_mean_swd;
    std::vector<double> epoch_wall_seconds;
    std::vector<size_t> matched_histogram;  // per library entry
};

inline AdaptTrace adapt(SegModel& model, const SegModel& frozen,
                        const std::vector<NamedVolume>& target, const GmmLibrary& lib,
                        const AdaptConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (target.empty()) throw DataError("adapt: empty target set");
    for (const auto& v : target)
        for (int a = 0; a < 3; ++a)
            if (v.image.dims[size_t(a)] < cfg.patch)
                throw DataError("adapt: volume " + v.id + " smaller than patch");
    if (lib.dim != model.num_classes()) throw DimensionError("adapt: library dimension mismatch");

    const uint64_t frozen_hash = frozen.param_hash();
    model.set_trainable(true);
    // classifier (phi) excluded from the optimizer; the SWD graph never reaches it
    Adam opt(model.params_alpha_beta(), cfg.learning_rate);
    Rng rng(derive_seed(seed, "adapt-crops"));

    AdaptTrace trace;
    trace.matched_histogram.assign(lib.entries.size(), 0);
    uint64_t step_counter = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double epoch_swd = 0.0;
        for (int s = 0; s < cfg.crops_per_epoch; ++s) {
            const auto& v = target[rng.uniform_index(target.size())];
            const Crop c = random_crop(v, cfg.patch, rng);
            const auto patch = patch_to_tensor(v.image, c);
            const uint64_t step_seed = derive_seed(seed, "adapt-step") + (++step_counter);
            const auto stats = adapt_step(model, frozen, patch, lib, cfg, opt, step_seed);
            epoch_swd += double(stats.swd);
            trace.matched_histogram[stats.matched_index]++;
        }
        trace.epoch_mean_swd.push_back(epoch_swd / cfg.crops_per_epoch);
        trace.epoch_wall_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    if (frozen.param_hash() != frozen_hash)
        throw ContractError("adapt: frozen model parameters changed");
    return trace;
}

}  // namespace sfuda3d
