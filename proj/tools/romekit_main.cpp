// romekit: command-line front end for the editing harness.
//
//   romekit make-data  [--config F] [--seed S] [--count N] [--out DIR]
//   romekit edit       [--method M] [--facts F] [--config F] [--seed S] [--out DIR]
//   romekit sequential [--method M] [--facts F] [--config F] [--seed S] [--cadence C]
//                      [--halt-on-collapse] [--out DIR]
//   romekit diagnose   [--facts F] [--config F] [--seed S] [--out DIR]
//   romekit report     [--out DIR]
//
// Exit codes: 0 success, 2 input error, 3 config error, 4 I/O error,
// 5 numerical failure, 64 usage error, 1 anything else. A collapsed run is
// still a success.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "romekit/harness.hpp"

using namespace romekit;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitConfig = 3;
constexpr int kExitIo = 4;
constexpr int kExitNumerical = 5;
constexpr int kExitUsage = 64;

constexpr const char* kOutEnv = "ROMEKIT_OUT_DIR";

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    std::string out;
    std::string facts_path;
    std::string method = "r-rome";
    std::optional<int> cadence;
    bool halt = false;
    std::optional<int> count;
};

std::string default_out() {
    const char* env = std::getenv(kOutEnv);
    return env && *env ? env : "romekit-out";
}

RunConfig resolve_config(const CommonOptions& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.cadence) {
        cfg.cadence = *o.cadence;
    }
    if (o.halt) {
        cfg.halt_on_collapse = true;
    }
    cfg.validate();
    return cfg;
}

SyntheticFactSet resolve_facts(const CommonOptions& o, const Workbench& wb) {
    if (o.facts_path.empty()) {
        return make_dataset(wb, wb.config.dataset.facts);
    }
    SyntheticFactSet set = load_facts(o.facts_path);
    validate_fact_set(set, wb.config.model);
    return set;
}

void print_summary(const EditTrace& trace, const std::string& dir) {
    const MetricRecord agg = trace.aggregate();
    std::printf("%s %s: %zu edits, collapsed=%s", std::string(to_string(trace.mode)).c_str(),
                std::string(to_string(trace.method)).c_str(), trace.rows.size(),
                trace.collapsed() ? "yes" : "no");
    if (trace.first_collapse) {
        std::printf(" (first at edit %d)", *trace.first_collapse);
    }
    std::printf("\n  max delta_norm %.4g  ES %.2f  PS %.2f  NS %.2f  S %.2f", trace.max_delta_norm(),
                agg.es, agg.ps.value_or(0.0), agg.ns, agg.s);
    if (const auto r = trace.final_probe_retention()) {
        std::printf("  probe retention %.3f", *r);
    }
    std::printf("\n  outputs in %s\n", dir.c_str());
}

int cmd_make_data(const CommonOptions& o) {
    const RunConfig cfg = resolve_config(o);
    const Workbench wb = make_workbench(cfg);
    const SyntheticFactSet set = make_dataset(wb, o.count.value_or(cfg.dataset.facts));
    std::filesystem::create_directories(o.out);
    const std::string path = (std::filesystem::path(o.out) / "facts.json").string();
    save_facts(set, path);
    int adversarial = 0;
    for (const auto& f : set.facts) {
        adversarial += f.adversarial ? 1 : 0;
    }
    std::printf("wrote %zu facts (%d adversarial) to %s\n", set.facts.size(), adversarial,
                path.c_str());
    return 0;
}

int cmd_edit(const CommonOptions& o, bool sequential) {
    const RunConfig cfg = resolve_config(o);
    const EditMethod method = parse_edit_method(o.method);
    const Workbench wb = make_workbench(cfg);
    const SyntheticFactSet set = resolve_facts(o, wb);
    const EditTrace trace = sequential
                                ? run_sequential(wb, set.facts, method, cfg.cadence,
                                                 cfg.halt_on_collapse)
                                : run_single(wb, set.facts, method);
    emit_outputs(trace, cfg, o.out);
    print_summary(trace, o.out);
    return 0;
}

int cmd_diagnose(const CommonOptions& o) {
    const RunConfig cfg = resolve_config(o);
    const Workbench wb = make_workbench(cfg);
    const SyntheticFactSet set = resolve_facts(o, wb);
    const EditSettings settings = wb.edit_settings();
    std::string csv =
        "fact_id,adversarial,key_cosine,inflation_ratio,delta_norm_original,delta_norm_r_rome,"
        "delta_norm_p_rome\n";
    for (const auto& f : set.facts) {
        const EditOutcome orig = compute_edit(wb.base, f, EditMethod::original, wb.c0, settings);
        const EditOutcome r = compute_edit(wb.base, f, EditMethod::r_rome, wb.c0, settings);
        const EditOutcome p = compute_edit(wb.base, f, EditMethod::p_rome, wb.c0, settings);
        csv += std::to_string(f.id) + ',' + (f.adversarial ? "1" : "0") + ',' +
               format_real(key_cosine(wb.c0, r.key.values, r.key_original.values)) + ',' +
               format_real(inflation_ratio(wb.c0, r.key.values, r.key_original.values)) + ',' +
               format_real(orig.delta_norm) + ',' + format_real(r.delta_norm) + ',' +
               format_real(p.delta_norm) + '\n';
    }
    std::filesystem::create_directories(o.out);
    const std::string path = (std::filesystem::path(o.out) / "diagnose.csv").string();
    std::ofstream out(path);
    if (!(out << csv)) {
        throw IoError("cannot write " + path);
    }
    std::printf("wrote key diagnostics for %zu facts to %s\n", set.facts.size(), path.c_str());
    return 0;
}

int cmd_report(const CommonOptions& o) {
    const std::filesystem::path root(o.out);
    std::ifstream summary_in(root / "summary.json");
    std::ifstream trace_in(root / "trace.csv");
    if (!summary_in || !trace_in) {
        throw IoError("no campaign outputs in " + o.out);
    }
    nlohmann::json summary;
    try {
        summary_in >> summary;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed summary.json: ") + e.what());
    }
    std::stringstream buf;
    buf << trace_in.rdbuf();
    const auto rows = parse_trace_csv(buf.str());
    std::printf("%s campaign, method %s, seed %s\n", summary.value("mode", "?").c_str(),
                summary.value("method", "?").c_str(), summary["seed"].dump().c_str());
    std::printf("  edits %zu, collapsed %s, first collapse %s, halted %s\n", rows.size(),
                summary["collapsed"].dump().c_str(), summary["first_collapse_index"].dump().c_str(),
                summary["halted"].dump().c_str());
    std::printf("  max delta_norm %s, min entropy %s, final probe retention %s\n",
                summary["max_delta_norm"].dump().c_str(),
                summary["min_normalized_entropy"].dump().c_str(),
                summary["final_probe_retention"].dump().c_str());
    const auto& agg = summary["aggregate"];
    std::printf("  ES %s  EM %s  PS %s  PM %s  NS %s  NM %s  GE %s  S %s\n",
                agg["es"].dump().c_str(), agg["em"].dump().c_str(), agg["ps"].dump().c_str(),
                agg["pm"].dump().c_str(), agg["ns"].dump().c_str(), agg["nm"].dump().c_str(),
                agg["ge"].dump().c_str(), agg["s"].dump().c_str());
    return 0;
}

void add_config_options(CLI::App* sub, CommonOptions& o) {
    sub->add_option("--config", o.config_path, "Config file (JSON object or key=value lines)");
    sub->add_option("--seed", o.seed, "Master seed (overrides the config)");
    sub->add_option("--set", o.overrides, "Override one config key: key=value");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rank-one knowledge editing on a toy transformer"};
    app.require_subcommand(1);
    CommonOptions o;
    o.out = default_out();

    auto* make_data = app.add_subcommand("make-data", "Generate a synthetic fact set");
    add_config_options(make_data, o);
    make_data->add_option("--count", o.count, "Number of facts (default: config 'facts')");
    make_data->add_option("--out", o.out, "Output directory");

    auto* edit = app.add_subcommand("edit", "Independent single edits from the base model");
    auto* seq = app.add_subcommand("sequential", "Cumulative edits on one model");
    for (auto* sub : {edit, seq}) {
        add_config_options(sub, o);
        sub->add_option("--method", o.method, "original | r-rome | p-rome");
        sub->add_option("--facts", o.facts_path, "Facts JSON (default: generate from config)");
        sub->add_option("--out", o.out, "Output directory");
    }
    seq->add_option("--cadence", o.cadence, "Diagnostics every N edits");
    seq->add_flag("--halt-on-collapse", o.halt, "Stop at the first collapsed edit");

    auto* diagnose = app.add_subcommand("diagnose", "Key geometry and update norms per fact");
    add_config_options(diagnose, o);
    diagnose->add_option("--facts", o.facts_path, "Facts JSON (default: generate from config)");
    diagnose->add_option("--out", o.out, "Output directory");

    auto* report = app.add_subcommand("report", "Summarize a campaign's outputs");
    report->add_option("--out", o.out, "Campaign output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (make_data->parsed()) return cmd_make_data(o);
        if (edit->parsed()) return cmd_edit(o, false);
        if (seq->parsed()) return cmd_edit(o, true);
        if (diagnose->parsed()) return cmd_diagnose(o);
        if (report->parsed()) return cmd_report(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kExitInput;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kExitUsage;
}
