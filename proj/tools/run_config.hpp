#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace echosynth::cli {

// Flags shared by every subcommand; scalar flags override config values.
struct CliArgs {
    std::string config_path;
    std::string out_override;
    int64_t seed_override = -1;  // < 0 keeps the config's seed
    bool force = false;
};

// Everything a command needs: the merged config, where its inputs resolve
// and where its outputs go.
struct RunContext {
    std::string command;
    nlohmann::json config;
    std::filesystem::path config_dir;  // input paths resolve against this
    std::filesystem::path out_dir;
    uint64_t seed = 0;
    bool force = false;
};

// Reads a JSON config file; parse failures and non-object roots raise
// ConfigError.
nlohmann::json load_config_file(const std::filesystem::path& path);

// Overlays `user` onto `defaults`. The defaults enumerate the schema: a user
// key absent from the defaults raises ConfigError("unknown key ..."), and a
// type clash (object vs scalar, string vs number) is rejected the same way.
// Objects merge recursively; arrays and scalars replace wholesale. A null
// default accepts any value.
nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& user,
                            const std::string& where);

// Loads + merges the config, applies flag overrides, resolves out_dir
// (relative paths go under $ECHOSYNTH_OUT_ROOT when set), refuses to reuse a
// completed output directory without --force, and writes
// <out_dir>/config.resolved.json before any heavy work starts.
RunContext make_run_context(const std::string& command, const CliArgs& args,
                            const nlohmann::json& defaults);

// Absolute paths pass through; relative ones resolve against the config
// file's directory. Empty paths raise ConfigError mentioning `key`.
std::filesystem::path resolve_input(const RunContext& ctx, const std::string& path,
                                    const std::string& key);

// Machine-readable run outcome: <out_dir>/summary.json. Deliberately free of
// timestamps so reruns with identical config produce identical bytes.
void write_summary(const RunContext& ctx, nlohmann::json summary);

void log_line(const std::string& msg);

}  // namespace echosynth::cli
