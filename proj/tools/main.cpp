#include <CLI11.hpp>

#include <iostream>
#include <vector>

#include "commands.hpp"
#include "echosynth/errors.hpp"

namespace cli = echosynth::cli;

int main(int argc, char** argv) {
    CLI::App app{"echosynth: controlled echo video synthesis and EF evaluation pipeline"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* desc;
        void (*fn)(const cli::CliArgs&);
    };
    const std::vector<Sub> subs = {
        {"phantom-gen", "generate a paired phantom dataset with known EF", cli::cmd_phantom_gen},
        {"train-uncond", "phase 1: train the unconditional video denoiser", cli::cmd_train_uncond},
        {"train-control", "phase 2: attach and train the control branch", cli::cmd_train_control},
        {"sample", "sample clips from a checkpoint; export grid + animations", cli::cmd_sample},
        {"curate", "generate, rank and select synthetic A2C candidates", cli::cmd_curate},
        {"train-ef", "train the EF regressor (single config or full grid)", cli::cmd_train_ef},
        {"evaluate", "EF report rows and optional video-quality metrics", cli::cmd_evaluate},
    };

    std::vector<cli::CliArgs> args(subs.size());
    for (size_t i = 0; i < subs.size(); ++i) {
        auto* sc = app.add_subcommand(subs[i].name, subs[i].desc);
        sc->add_option("-c,--config", args[i].config_path, "JSON run config")->required();
        sc->add_option("-o,--out", args[i].out_override, "override the config's out_dir");
        sc->add_option("-s,--seed", args[i].seed_override, "override the config's seed");
        sc->add_flag("-f,--force", args[i].force, "overwrite a completed output directory");
        sc->callback([&subs, &args, i] { subs[i].fn(args[i]); });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // bad flags are config errors
    } catch (const echosynth::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
