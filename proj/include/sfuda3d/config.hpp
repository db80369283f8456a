#pragma once

// Run configuration: one JSON file with per-command sections. Every field has
// a default; unknown keys are rejected so typos fail loudly instead of being
// silently ignored.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "adapt.hpp"
#include "common.hpp"
#include "volume.hpp"

namespace sfuda3d {

struct GenConfig {
    int train_per_modality = 10;
    int test_per_modality = 4;
    uint32_t dims = 64;
    double bias_strength = 0.25;

    bool operator==(const GenConfig&) const = default;
};

struct AdaptSection {
    int epochs = 20;
    int crops_per_epoch = 20;
    double learning_rate = 3e-4;
    double rho = 0.9;
    int num_projections = 128;
    int match_subsample = 1024;
    std::string ablation = "none";
    std::string export_latents;  // CSV path; empty disables the export

    bool operator==(const AdaptSection&) const = default;
};

struct EvalSection {
    std::string model;  // checkpoint path; empty means the top-level checkpoint
    std::string modality = "B";
    std::string split = "test";
    std::vector<std::array<uint32_t, 3>> strides{{8, 8, 8}};

    bool operator==(const EvalSection&) const = default;
};

struct TrainSection {
    int epochs = 30;
    int crops_per_epoch = 40;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    bool operator==(const TrainSection&) const = default;
};

struct RunConfig {
    uint64_t seed = 42;
    std::string data_dir = "data";
    std::string checkpoint = "out/source.sf3d";
    std::string adapted_checkpoint = "out/adapted.sf3d";
    std::string library = "out/library.sgmm";
    std::string report_dir = "out/reports";
    int num_classes = 5;
    uint32_t patch = 32;
    std::string source_modality = "A";
    std::string target_modality = "B";
    GenConfig gen;
    TrainSection train;
    std::array<uint32_t, 3> extract_stride{16, 16, 16};
    AdaptSection adapt;
    EvalSection evaluate;

    bool operator==(const RunConfig&) const = default;

    std::string manifest_path() const { return data_dir + "/manifest.json"; }

    TrainConfig train_config() const {
        TrainConfig t;
        t.epochs = train.epochs;
        t.crops_per_epoch = train.crops_per_epoch;
        t.learning_rate = train.learning_rate;
        t.adam_beta1 = train.adam_beta1;
        t.adam_beta2 = train.adam_beta2;
        t.adam_eps = train.adam_eps;
        return t;
    }

    AdaptConfig adapt_config() const {
        AdaptConfig a;
        a.patch = patch;
        a.extract_stride = extract_stride;
        a.epochs = adapt.epochs;
        a.crops_per_epoch = adapt.crops_per_epoch;
        a.learning_rate = adapt.learning_rate;
        a.rho = adapt.rho;
        a.num_projections = adapt.num_projections;
        a.match_subsample = adapt.match_subsample;
        a.ablation = parse_ablation(adapt.ablation);
        return a;
    }

    void validate() const {
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (patch < 4 || patch % 4 != 0) throw ConfigError("patch must be a positive multiple of 4");
        if (source_modality == target_modality) throw ConfigError("source and target modality must differ");
        for (const auto& m : {source_modality, target_modality})
            if (m != "A" && m != "B") throw ConfigError("modality must be A or B");
        if (gen.train_per_modality < 1 || gen.test_per_modality < 1 || gen.dims < patch)
            throw ConfigError("gen section out of range");
        if (evaluate.strides.empty()) throw ConfigError("evaluate.strides must be non-empty");
        for (const auto& s : evaluate.strides)
            for (uint32_t v : s)
                if (v < 1) throw ConfigError("evaluate stride components must be >= 1");
        for (uint32_t v : extract_stride)
            if (v < 1) throw ConfigError("extract stride components must be >= 1");
        train_config().validate();
        adapt_config().validate();
        if (evaluate.modality != "A" && evaluate.modality != "B")
            throw ConfigError("evaluate.modality must be A or B");
        if (evaluate.split != "train" && evaluate.split != "test")
            throw ConfigError("evaluate.split must be train or test");
    }
};

// ---------------------------------------------------------------------------
// JSON round trip with unknown-key rejection.

namespace detail_cfg {

class StrictObject {
public:
    StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
    }
    ~StrictObject() = default;

    template <class T>
    void get(const char* key, T& target) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;  // default stands
        try {
            target = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }

    const nlohmann::json* child(const char* key) {
        seen_.push_back(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            bool known = false;
            for (const auto& s : seen_) known = known || s == key;
            if (!known) throw ConfigError(path_ + ": unknown key '" + key + "'");
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

}  // namespace detail_cfg

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["data_dir"] = c.data_dir;
    j["checkpoint"] = c.checkpoint;
    j["adapted_checkpoint"] = c.adapted_checkpoint;
    j["library"] = c.library;
    j["report_dir"] = c.report_dir;
    j["num_classes"] = c.num_classes;
    j["patch"] = c.patch;
    j["source_modality"] = c.source_modality;
    j["target_modality"] = c.target_modality;
    j["gen"] = {{"train_per_modality", c.gen.train_per_modality},
                {"test_per_modality", c.gen.test_per_modality},
                {"dims", c.gen.dims},
                {"bias_strength", c.gen.bias_strength}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"crops_per_epoch", c.train.crops_per_epoch},
                  {"learning_rate", c.train.learning_rate},
                  {"adam_beta1", c.train.adam_beta1},
                  {"adam_beta2", c.train.adam_beta2},
                  {"adam_eps", c.train.adam_eps}};
    j["extract"] = {{"stride", c.extract_stride}};
    j["adapt"] = {{"epochs", c.adapt.epochs},
                  {"crops_per_epoch", c.adapt.crops_per_epoch},
                  {"learning_rate", c.adapt.learning_rate},
                  {"rho", c.adapt.rho},
                  {"num_projections", c.adapt.num_projections},
                  {"match_subsample", c.adapt.match_subsample},
                  {"ablation", c.adapt.ablation},
                  {"export_latents", c.adapt.export_latents}};
    j["evaluate"] = {{"model", c.evaluate.model},
                     {"modality", c.evaluate.modality},
                     {"split", c.evaluate.split},
                     {"strides", c.evaluate.strides}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail_cfg::StrictObject root(j, "config");
    root.get("seed", c.seed);
    root.get("data_dir", c.data_dir);
    root.get("checkpoint", c.checkpoint);
    root.get("adapted_checkpoint", c.adapted_checkpoint);
    root.get("library", c.library);
    root.get("report_dir", c.report_dir);
    root.get("num_classes", c.num_classes);
    root.get("patch", c.patch);
    root.get("source_modality", c.source_modality);
    root.get("target_modality", c.target_modality);
    if (const auto* g = root.child("gen")) {
        detail_cfg::StrictObject s(*g, "config.gen");
        s.get("train_per_modality", c.gen.train_per_modality);
        s.get("test_per_modality", c.gen.test_per_modality);
        s.get("dims", c.gen.dims);
        s.get("bias_strength", c.gen.bias_strength);
        s.finish();
    }
    if (const auto* t = root.child("train")) {
        detail_cfg::StrictObject s(*t, "config.train");
        s.get("epochs", c.train.epochs);
        s.get("crops_per_epoch", c.train.crops_per_epoch);
        s.get("learning_rate", c.train.learning_rate);
        s.get("adam_beta1", c.train.adam_beta1);
        s.get("adam_beta2", c.train.adam_beta2);
        s.get("adam_eps", c.train.adam_eps);
        s.finish();
    }
    if (const auto* e = root.child("extract")) {
        detail_cfg::StrictObject s(*e, "config.extract");
        s.get("stride", c.extract_stride);
        s.finish();
    }
    if (const auto* a = root.child("adapt")) {
        detail_cfg::StrictObject s(*a, "config.adapt");
        s.get("epochs", c.adapt.epochs);
        s.get("crops_per_epoch", c.adapt.crops_per_epoch);
        s.get("learning_rate", c.adapt.learning_rate);
        s.get("rho", c.adapt.rho);
        s.get("num_projections", c.adapt.num_projections);
        s.get("match_subsample", c.adapt.match_subsample);
        s.get("ablation", c.adapt.ablation);
        s.get("export_latents", c.adapt.export_latents);
        s.finish();
    }
    if (const auto* e = root.child("evaluate")) {
        detail_cfg::StrictObject s(*e, "config.evaluate");
        s.get("model", c.evaluate.model);
        s.get("modality", c.evaluate.modality);
        s.get("split", c.evaluate.split);
        s.get("strides", c.evaluate.strides);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    auto f = open_input(path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    return config_from_json(j);
}

inline void save_config(const std::string& path, const RunConfig& c) {
    open_output(path) << to_json(c).dump(2) << "\n";
}

}  // namespace sfuda3d
