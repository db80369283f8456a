#pragma once

// Dice computation and dataset-level evaluation. Dice is computed per volume
// per foreground class; volumes are pooled macro-style (per-volume scores
// averaged over volumes). Reports mirror the AA | LAC | LVC | MYO | Avg.
// table layout as CSV and JSON with identical numbers.

#include <array>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "model.hpp"
#include "volume.hpp"

namespace sfuda3d {

// 2|A n B| / (|A| + |B|); both-empty defined as 1.
inline double dice(const LabelMap& pred, const LabelMap& truth, uint8_t cls) {
    if (pred.dims != truth.dims) throw DimensionError("dice: dimension mismatch");
    int64_t a = 0, b = 0, inter = 0;
    for (size_t i = 0; i < pred.values.size(); ++i) {
        const bool pa = pred.values[i] == cls;
        const bool pb = truth.values[i] == cls;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(inter) / double(a + b);
}

inline std::vector<std::string> class_names(int num_classes) {
    if (num_classes == 5) return {"AA", "LAC", "LVC", "MYO"};
    std::vector<std::string> names;
    for (int c = 1; c < num_classes; ++c) names.push_back("C" + std::to_string(c));
    return names;
}

struct DiceReport {
    std::array<uint32_t, 3> stride{0, 0, 0};
    std::vector<std::string> classes;  // foreground class names, ids 1..C-1
    struct PerVolume {
        std::string id;
        std::vector<double> dice;  // per foreground class
        double avg = 0.0;
    };
    std::vector<PerVolume> volumes;
    std::vector<double> mean_dice;  // per class, averaged over volumes
    double mean_avg = 0.0;
};

struct EvalVolume {
    std::string id;
    Volume image;
    LabelMap labels;
};

// Core evaluation over an arbitrary predictor; the rigged-oracle and
// constant-model tests plug in here.
inline DiceReport evaluate_with(const std::function<LabelMap(const Volume&)>& predict,
                                const std::vector<EvalVolume>& volumes, int num_classes,
                                std::array<uint32_t, 3> stride) {
    if (volumes.empty()) throw DataError("evaluate: no volumes");
    DiceReport rep;
    rep.stride = stride;
    rep.classes = class_names(num_classes);
    const size_t nc = rep.classes.size();
    rep.mean_dice.assign(nc, 0.0);
    for (const auto& v : volumes) {
        const LabelMap pred = predict(v.image);
        DiceReport::PerVolume pv;
        pv.id = v.id;
        double acc = 0.0;
        for (size_t c = 0; c < nc; ++c) {
            const double d = dice(pred, v.labels, uint8_t(c + 1));
            pv.dice.push_back(d);
            acc += d;
        }
        pv.avg = acc / double(nc);
        for (size_t c = 0; c < nc; ++c) rep.mean_dice[c] += pv.dice[c];
        rep.volumes.push_back(std::move(pv));
    }
    double acc = 0.0;
    for (auto& m : rep.mean_dice) {
        m /= double(rep.volumes.size());
        acc += m;
    }
    rep.mean_avg = acc / double(nc);
    return rep;
}

inline DiceReport evaluate(const SegModel& model, const std::vector<EvalVolume>& volumes,
                           uint32_t patch, std::array<uint32_t, 3> stride) {
    return evaluate_with(
        [&](const Volume& v) { return sliding_window_predict(model, v, patch, stride); }, volumes,
        model.num_classes(), stride);
}

// ---------------------------------------------------------------------------
// Report emission. Numbers are written with round-trip precision so CSV and
// JSON parse back to identical doubles.

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string dice_report_csv(const DiceReport& rep) {
    std::string out = "volume";
    for (const auto& c : rep.classes) out += "," + c;
    out += ",Avg\n";
    for (const auto& v : rep.volumes) {
        out += v.id;
        for (double d : v.dice) out += "," + format_double(d);
        out += "," + format_double(v.avg) + "\n";
    }
    out += "mean";
    for (double d : rep.mean_dice) out += "," + format_double(d);
    out += "," + format_double(rep.mean_avg) + "\n";
    return out;
}

inline nlohmann::json dice_report_json(const DiceReport& rep) {
    nlohmann::json j;
    j["stride"] = rep.stride;
    j["classes"] = rep.classes;
    j["volumes"] = nlohmann::json::array();
    for (const auto& v : rep.volumes) {
        nlohmann::json jv;
        jv["id"] = v.id;
        for (size_t c = 0; c < rep.classes.size(); ++c) jv["dice"][rep.classes[c]] = v.dice[c];
        jv["avg"] = v.avg;
        j["volumes"].push_back(jv);
    }
    for (size_t c = 0; c < rep.classes.size(); ++c) j["mean"][rep.classes[c]] = rep.mean_dice[c];
    j["mean"]["Avg"] = rep.mean_avg;
    return j;
}

inline void write_dice_report(const std::string& csv_path, const std::string& json_path,
                              const DiceReport& rep) {
    open_output(csv_path) << dice_report_csv(rep);
    open_output(json_path) << dice_report_json(rep).dump(2) << "\n";
}

}  // namespace sfuda3d
