// sfuda3d command-line tool: phantom data generation, source training, GMM
// library extraction, source-free adaptation and Dice evaluation.
//
//   sfuda3d <gen-data|train-source|extract-gmms|adapt|evaluate> --config <path> [overrides]
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <sfuda3d/sfuda3d.hpp>

namespace {

struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> data_dir, checkpoint, adapted_checkpoint, library, report_dir;
    std::optional<std::string> ablation, export_latents, model, modality, split;
    std::optional<int> epochs;
    std::optional<std::vector<uint32_t>> stride;

    void apply(sfuda3d::RunConfig& cfg, const std::string& command) const {
        if (seed) cfg.seed = *seed;
        if (data_dir) cfg.data_dir = *data_dir;
        if (checkpoint) cfg.checkpoint = *checkpoint;
        if (adapted_checkpoint) cfg.adapted_checkpoint = *adapted_checkpoint;
        if (library) cfg.library = *library;
        if (report_dir) cfg.report_dir = *report_dir;
        if (ablation) cfg.adapt.ablation = *ablation;
        if (export_latents) cfg.adapt.export_latents = *export_latents;
        if (model) cfg.evaluate.model = *model;
        if (modality) cfg.evaluate.modality = *modality;
        if (split) cfg.evaluate.split = *split;
        if (epochs) {
            if (command == "train-source")
                cfg.train.epochs = *epochs;
            else if (command == "adapt")
                cfg.adapt.epochs = *epochs;
        }
        if (stride) {
            if (stride->size() != 3) throw sfuda3d::ConfigError("--stride expects three components");
            cfg.evaluate.strides = {{(*stride)[0], (*stride)[1], (*stride)[2]}};
        }
        cfg.validate();
    }
};

void add_common_overrides(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--seed", ov.seed, "override the global seed");
    cmd->add_option("--data-dir", ov.data_dir, "override the dataset directory");
    cmd->add_option("--checkpoint", ov.checkpoint, "override the source checkpoint path");
    cmd->add_option("--library", ov.library, "override the GMM library path");
    cmd->add_option("--report-dir", ov.report_dir, "override the report directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"source-free domain adaptation for 3D volumetric segmentation"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;

    auto* gen = app.add_subcommand("gen-data", "generate the paired two-modality phantom dataset");
    auto* train = app.add_subcommand("train-source", "train the segmentation model on the source modality");
    auto* extract = app.add_subcommand("extract-gmms", "extract the per-crop GMM library from a checkpoint");
    auto* adapt = app.add_subcommand("adapt", "source-free adaptation to the target modality");
    auto* evaluate = app.add_subcommand("evaluate", "Dice evaluation with sliding-window inference");

    for (auto* cmd : {gen, train, extract, adapt, evaluate}) {
        cmd->add_option("--config", config_path, "run configuration JSON")->required();
        add_common_overrides(cmd, ov);
    }
    train->add_option("--epochs", ov.epochs, "override training epochs");
    adapt->add_option("--epochs", ov.epochs, "override adaptation epochs");
    adapt->add_option("--ablation", ov.ablation, "none | no-shape | no-shape-count");
    adapt->add_option("--adapted-checkpoint", ov.adapted_checkpoint, "override the adapted checkpoint path");
    adapt->add_option("--export-latents", ov.export_latents, "write latent points with boundary tags to CSV");
    evaluate->add_option("--model", ov.model, "checkpoint to evaluate (defaults to the source checkpoint)");
    evaluate->add_option("--modality", ov.modality, "modality to evaluate (A or B)");
    evaluate->add_option("--split", ov.split, "split to evaluate (train or test)");
    evaluate->add_option("--stride", ov.stride, "evaluation stride, e.g. --stride 8 8 8")->expected(3);

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = sfuda3d::load_config(config_path);
        const std::string command = app.get_subcommands().front()->get_name();
        ov.apply(cfg, command);

        if (command == "gen-data") {
            const auto manifest = sfuda3d::pipeline::cmd_gen_data(cfg);
            std::printf("wrote %zu volumes to %s\n", manifest.entries.size(), cfg.data_dir.c_str());
        } else if (command == "train-source") {
            const auto trace = sfuda3d::pipeline::cmd_train_source(cfg);
            std::printf("trained %zu epochs, first/last mean CE %.4f / %.4f -> %s\n",
                        trace.epoch_mean_ce.size(),
                        trace.epoch_mean_ce.empty() ? 0.0 : double(trace.epoch_mean_ce.front()),
                        trace.epoch_mean_ce.empty() ? 0.0 : double(trace.epoch_mean_ce.back()),
                        cfg.checkpoint.c_str());
        } else if (command == "extract-gmms") {
            const auto lib = sfuda3d::pipeline::cmd_extract_gmms(cfg);
            std::printf("extracted %zu GMMs (stride %u,%u,%u) -> %s\n", lib.entries.size(),
                        lib.stride[0], lib.stride[1], lib.stride[2], cfg.library.c_str());
        } else if (command == "adapt") {
            const auto result = sfuda3d::pipeline::cmd_adapt(cfg);
            std::printf("adapted %zu epochs (%s), first/last mean SWD %.5f / %.5f -> %s\n",
                        result.trace.epoch_mean_swd.size(), cfg.adapt.ablation.c_str(),
                        result.trace.epoch_mean_swd.empty() ? 0.0 : result.trace.epoch_mean_swd.front(),
                        result.trace.epoch_mean_swd.empty() ? 0.0 : result.trace.epoch_mean_swd.back(),
                        result.adapted_checkpoint.c_str());
        } else if (command == "evaluate") {
            const auto reports = sfuda3d::pipeline::cmd_evaluate(cfg);
            for (const auto& rep : reports) {
                std::printf("stride (%u,%u,%u):", rep.stride[0], rep.stride[1], rep.stride[2]);
                for (size_t c = 0; c < rep.classes.size(); ++c)
                    std::printf(" %s %.3f", rep.classes[c].c_str(), rep.mean_dice[c]);
                std::printf(" | Avg %.3f\n", rep.mean_avg);
            }
        }
        return 0;
    } catch (const sfuda3d::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const sfuda3d::NumericError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 4;
    } catch (const sfuda3d::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const sfuda3d::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
