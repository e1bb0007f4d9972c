#pragma once

#include "run_config.hpp"

namespace echosynth::cli {

// One function per subcommand. Each merges the user config over the
// command's defaults (the defaults double as the accepted schema), runs the
// stage and writes config.resolved.json + summary.json into out_dir.
void cmd_phantom_gen(const CliArgs& args);
void cmd_train_uncond(const CliArgs& args);
void cmd_train_control(const CliArgs& args);
void cmd_sample(const CliArgs& args);
void cmd_curate(const CliArgs& args);
void cmd_train_ef(const CliArgs& args);
void cmd_evaluate(const CliArgs& args);

}  // namespace echosynth::cli
