#pragma once

// The five pipeline commands behind the CLI. Each is an ordinary function so
// tests and the acceptance suite drive the exact code paths the binary does.

#include <filesystem>
#include <string>
#include <vector>

#include "adapt.hpp"
#include "config.hpp"
#include "eval.hpp"
#include "gmm.hpp"
#include "model.hpp"
#include "phantom.hpp"
#include "volume.hpp"

namespace sfuda3d::pipeline {

// ---------------------------------------------------------------------------
// gen-data: paired A/B phantoms (same geometry per index) plus the manifest.

inline Manifest cmd_gen_data(const RunConfig& cfg) {
    cfg.validate();
    Manifest manifest;
    const int total = cfg.gen.train_per_modality + cfg.gen.test_per_modality;
    for (char modality : {'A', 'B'}) {
        for (int i = 0; i < total; ++i) {
            auto spec = make_phantom_spec(derive_seed(cfg.seed, "phantom") + uint64_t(i), modality);
            spec.dims = cfg.gen.dims;
            spec.bias_strength = float(cfg.gen.bias_strength);
            auto [vol, labels] = gen_phantom(spec);
            const std::string split = i < cfg.gen.train_per_modality ? "train" : "test";
            char idbuf[32];
            std::snprintf(idbuf, sizeof(idbuf), "%c_%s_%02d", modality, split.c_str(), i);
            ManifestEntry e;
            e.id = idbuf;
            e.modality = std::string(1, modality);
            e.split = split;
            e.image_path = cfg.data_dir + "/" + e.id + "_img.svol";
            e.label_path = cfg.data_dir + "/" + e.id + "_lbl.svol";
            write_volume(e.image_path, vol);
            write_volume(e.label_path, labels);
            manifest.entries.push_back(std::move(e));
        }
    }
    write_manifest(cfg.manifest_path(), manifest);
    return manifest;
}

// ---------------------------------------------------------------------------
// train-source: supervised training on the source modality, checkpoint + trace.

inline TrainTrace cmd_train_source(const RunConfig& cfg) {
    cfg.validate();
    const auto manifest = read_manifest(cfg.manifest_path());
    const auto train = load_split(manifest, cfg.source_modality, "train");
    SegModel model = SegModel::build(cfg.num_classes, cfg.seed);
    const auto trace = train_source(model, train, cfg.train_config(), cfg.patch, cfg.seed);
    save_checkpoint(cfg.checkpoint, model);
    std::string csv = "epoch,mean_ce,wall_seconds\n";
    for (size_t e = 0; e < trace.epoch_mean_ce.size(); ++e)
        csv += std::to_string(e) + "," + format_double(double(trace.epoch_mean_ce[e])) + "," +
               format_double(trace.epoch_wall_seconds[e]) + "\n";
    open_output(cfg.report_dir + "/train_trace.csv") << csv;
    return trace;
}

// ---------------------------------------------------------------------------
// extract-gmms: frozen source model -> per-crop GMM library.

inline GmmLibrary cmd_extract_gmms(const RunConfig& cfg) {
    cfg.validate();
    const auto manifest = read_manifest(cfg.manifest_path());
    const auto source = load_split(manifest, cfg.source_modality, "train");
    SegModel frozen = load_checkpoint(cfg.checkpoint);
    frozen.set_trainable(false);
    const auto lib = extract_gmm_library(frozen, source, cfg.patch, cfg.extract_stride);
    write_gmm_library(cfg.library, lib);
    return lib;
}

// ---------------------------------------------------------------------------
// adapt: source-free target adaptation. Inputs are exactly {checkpoint, GMM
// library, target volumes, config}; the audit log records every file opened
// while the command runs.

struct AdaptResult {
    AdaptTrace trace;
    std::vector<std::string> audit;
    std::string adapted_checkpoint;
};

inline AdaptResult cmd_adapt(const RunConfig& cfg) {
    cfg.validate();
    io_audit::begin();
    AdaptResult result;

    const auto manifest = read_manifest(cfg.manifest_path());
    SegModel frozen = load_checkpoint(cfg.checkpoint);
    frozen.set_trainable(false);
    const auto lib = read_gmm_library(cfg.library);
    if (lib.checkpoint_hash != frozen.param_hash())
        throw DataError("adapt: GMM library was extracted from a different checkpoint");
    const auto target = load_split(manifest, cfg.target_modality, "train");

    SegModel model = frozen.clone();
    const auto acfg = cfg.adapt_config();
    result.trace = adapt(model, frozen, target, lib, acfg, cfg.seed);
    model.meta.epochs = uint32_t(acfg.epochs);
    model.meta.seed = cfg.seed;
    model.meta.loss_curve.assign(result.trace.epoch_mean_swd.begin(),
                                 result.trace.epoch_mean_swd.end());
    save_checkpoint(cfg.adapted_checkpoint, model);
    result.adapted_checkpoint = cfg.adapted_checkpoint;

    std::string csv = "epoch,mean_swd,wall_seconds\n";
    for (size_t e = 0; e < result.trace.epoch_mean_swd.size(); ++e)
        csv += std::to_string(e) + "," + format_double(result.trace.epoch_mean_swd[e]) + "," +
               format_double(result.trace.epoch_wall_seconds[e]) + "\n";
    open_output(cfg.report_dir + "/adapt_trace.csv") << csv;

    nlohmann::json metrics;
    metrics["ablation"] = cfg.adapt.ablation;
    metrics["epochs"] = acfg.epochs;
    metrics["steps"] = acfg.epochs * acfg.crops_per_epoch;
    if (!result.trace.epoch_mean_swd.empty()) {
        metrics["first_epoch_mean_swd"] = result.trace.epoch_mean_swd.front();
        metrics["final_epoch_mean_swd"] = result.trace.epoch_mean_swd.back();
    }
    metrics["matched_entries_used"] = 0;
    for (size_t h : result.trace.matched_histogram)
        if (h > 0) metrics["matched_entries_used"] = int(metrics["matched_entries_used"]) + 1;
    open_output(cfg.report_dir + "/adapt_metrics.json") << metrics.dump(2) << "\n";

    // latent export for external plotting: adapted-model latents of one
    // center crop per target volume, tagged with the frozen-model boundary
    if (!cfg.adapt.export_latents.empty()) {
        std::string out = "volume,voxel,tag";
        for (int d = 0; d < cfg.num_classes; ++d) out += ",z" + std::to_string(d);
        out += "\n";
        for (const auto& v : target) {
            Crop c;
            c.size = cfg.patch;
            c.i = (v.image.dims[0] - cfg.patch) / 2;
            c.j = (v.image.dims[1] - cfg.patch) / 2;
            c.k = (v.image.dims[2] - cfg.patch) / 2;
            const auto patch = patch_to_tensor(v.image, c);
            auto pts = field_points(model.latent(patch));
            const auto boundary = estimate_boundary(frozen, patch);
            std::vector<uint8_t> tag(static_cast<size_t>(pts.shape()[0]), 0);
            for (size_t cls = 0; cls < boundary.voxels_of_class.size(); ++cls)
                for (int32_t vox : boundary.voxels_of_class[cls]) tag[size_t(vox)] = uint8_t(cls);
            const float* z = pts.data().data();
            for (int64_t i = 0; i < pts.shape()[0]; ++i) {
                out += v.id + "," + std::to_string(i) + "," + std::to_string(int(tag[size_t(i)]));
                for (int d = 0; d < cfg.num_classes; ++d)
                    out += "," + format_double(double(z[i * cfg.num_classes + d]));
                out += "\n";
            }
        }
        open_output(cfg.adapt.export_latents) << out;
    }

    result.audit = io_audit::entries();
    io_audit::end();
    std::string audit_text;
    for (const auto& line : result.audit) audit_text += line + "\n";
    open_output(cfg.report_dir + "/adapt_io_audit.log") << audit_text;
    return result;
}

// ---------------------------------------------------------------------------
// evaluate: Dice reports for each requested stride.

inline std::vector<DiceReport> cmd_evaluate(const RunConfig& cfg) {
    cfg.validate();
    const auto manifest = read_manifest(cfg.manifest_path());
    const std::string model_path = cfg.evaluate.model.empty() ? cfg.checkpoint : cfg.evaluate.model;
    SegModel model = load_checkpoint(model_path);
    model.set_trainable(false);
    const auto split = load_split(manifest, cfg.evaluate.modality, cfg.evaluate.split);
    std::vector<EvalVolume> volumes;
    for (const auto& v : split) volumes.push_back({v.id, v.image, v.labels});

    const std::string tag = std::filesystem::path(model_path).stem().string();
    std::vector<DiceReport> reports;
    for (const auto& stride : cfg.evaluate.strides) {
        auto rep = evaluate(model, volumes, cfg.patch, stride);
        const std::string base = cfg.report_dir + "/dice_" + tag + "_" + cfg.evaluate.modality +
                                 cfg.evaluate.split + "_s" + std::to_string(stride[0]) + "-" +
                                 std::to_string(stride[1]) + "-" + std::to_string(stride[2]);
        write_dice_report(base + ".csv", base + ".json", rep);
        reports.push_back(std::move(rep));
    }
    return reports;
}

}  // namespace sfuda3d::pipeline
