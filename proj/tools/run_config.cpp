#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "echosynth/errors.hpp"

namespace echosynth::cli {

namespace fs = std::filesystem;

nlohmann::json load_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file " + path.string() + " must hold a JSON object");
    return j;
}

namespace {

bool types_compatible(const nlohmann::json& def, const nlohmann::json& user) {
    if (def.is_null() || user.is_null()) return true;  // null default: free slot
    if (def.is_number() && user.is_number()) return true;
    return def.type() == user.type();
}

}  // namespace

nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& user,
                            const std::string& where) {
    nlohmann::json merged = defaults;
    for (const auto& [key, value] : user.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!merged.contains(key)) throw ConfigError("unknown key '" + path + "'");
        if (!types_compatible(merged[key], value))
            throw ConfigError("key '" + path + "' expects " + std::string(merged[key].type_name()) +
                              ", got " + value.type_name());
        if (merged[key].is_object() && value.is_object())
            merged[key] = merge_config(merged[key], value, path);
        else
            merged[key] = value;
    }
    return merged;
}

RunContext make_run_context(const std::string& command, const CliArgs& args,
                            const nlohmann::json& defaults) {
    RunContext ctx;
    ctx.command = command;
    ctx.force = args.force;

    const fs::path config_path(args.config_path);
    ctx.config_dir = config_path.has_parent_path() ? config_path.parent_path() : fs::path(".");
    ctx.config = merge_config(defaults, load_config_file(config_path), "");

    if (!args.out_override.empty()) ctx.config["out_dir"] = args.out_override;
    if (args.seed_override >= 0) ctx.config["seed"] = static_cast<uint64_t>(args.seed_override);
    ctx.seed = ctx.config.at("seed").get<uint64_t>();

    const std::string out_raw = ctx.config.at("out_dir").get<std::string>();
    if (out_raw.empty())
        throw ConfigError("out_dir is required (config key or --out flag)");
    fs::path out(out_raw);
    if (out.is_relative()) {
        if (const char* root = std::getenv("ECHOSYNTH_OUT_ROOT"); root && *root)
            out = fs::path(root) / out;
    }
    ctx.out_dir = out;

    if (fs::exists(ctx.out_dir / "summary.json") && !ctx.force)
        throw ConfigError("output directory " + ctx.out_dir.string() +
                          " already holds a completed run; pass --force to overwrite");
    fs::create_directories(ctx.out_dir);

    // Provenance first: the resolved config is on disk before heavy work.
    nlohmann::json resolved = ctx.config;
    resolved["command"] = command;
    std::ofstream out_cfg(ctx.out_dir / "config.resolved.json");
    out_cfg << resolved.dump(2) << "\n";
    if (!out_cfg) throw ConfigError("cannot write " + (ctx.out_dir / "config.resolved.json").string());
    return ctx;
}

fs::path resolve_input(const RunContext& ctx, const std::string& path, const std::string& key) {
    if (path.empty()) throw ConfigError("config key '" + key + "' is required");
    fs::path p(path);
    return p.is_absolute() ? p : ctx.config_dir / p;
}

void write_summary(const RunContext& ctx, nlohmann::json summary) {
    summary["command"] = ctx.command;
    summary["status"] = "ok";
    std::ofstream out(ctx.out_dir / "summary.json");
    out << summary.dump(2) << "\n";
    if (!out) throw ConfigError("cannot write " + (ctx.out_dir / "summary.json").string());
}

void log_line(const std::string& msg) { std::cerr << msg << "\n"; }

}  // namespace echosynth::cli
