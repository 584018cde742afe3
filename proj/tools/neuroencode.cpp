#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "neuroencode/pipeline.hpp"

// Command-line front end: every subcommand loads one JSON config, applies the
// flag overrides, runs the corresponding pipeline stage, and prints a JSON
// summary on success. Any failure exits 1 with a diagnostic on stderr; staged
// partial outputs are cleaned up by the pipeline layer.

int main(int argc, char** argv) {
    CLI::App app{"synthetic brain-encoding pipeline"};
    app.require_subcommand(1);

    static const struct {
        const char* name;
        const char* help;
    } kCommands[] = {
        {"gen", "generate the synthetic dataset"},
        {"features", "extract pretrained design matrices per story"},
        {"fit", "fit and score pretrained baselines per subject"},
        {"finetune", "fine-tune the encoder per training subject"},
        {"eval", "score the best checkpoints against the baselines"},
        {"transfer", "cross-subject transfer matrix"},
        {"probe", "layerwise filterbank and embedding probes"},
        {"report", "consolidate run outputs into CSV tables"},
    };

    std::string config_path, roi, out;
    int subject = -1;
    std::uint64_t seed = 0;
    for (const auto& c : kCommands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", config_path, "JSON run configuration")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--roi", roi, "training voxel scope")
            ->check(CLI::IsMember({"all", "ac", "non_ac", "left", "right"}));
        sub->add_option("--subject", subject, "restrict to a single subject id");
        sub->add_option("--out", out, "output directory override");
        sub->add_option("--seed", seed, "dataset and training seed override");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    CLI::App* sub = app.get_subcommands().front();

    try {
        neuroencode::RunConfig cfg = neuroencode::load_run_config(config_path);
        neuroencode::RunOverrides ov;
        if (sub->count("--roi")) ov.roi = roi;
        if (sub->count("--subject")) ov.subject = subject;
        if (sub->count("--out")) ov.out = out;
        if (sub->count("--seed")) ov.seed = seed;
        neuroencode::apply_overrides(cfg, ov);

        const nlohmann::json summary = neuroencode::run_command(sub->get_name(), cfg);
        std::cout << summary.dump(2) << std::endl;
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
