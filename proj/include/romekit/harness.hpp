#pragma once

// Synthetic fact sets, single and sequential edit campaigns, and their
// on-disk outputs (trace.csv, summary.json, scatter.csv, timing.csv).

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "romekit/diagnostics.hpp"
#include "romekit/editor.hpp"
#include "romekit/evalsuite.hpp"
#include "romekit/keyvalue.hpp"
#include "romekit/tiny_lm.hpp"

namespace romekit {

struct DatasetSettings {
    int facts = 100;
    int paraphrases = 3;
    int neighbors = 3;
    double adversarial_fraction = 0.1;
    int context_min = 2;  // general-pool tokens before the subject
    int context_max = 4;
    int plausible_rank = 5;  // target_new drawn from base ranks 2 .. 1 + plausible_rank
};

struct RunConfig {
    ModelConfig model;
    std::uint64_t seed = 1;
    SolverSettings solver;
    int prefix_count = 5;
    int prefix_min_len = 2;
    int prefix_max_len = 5;
    Ridge ridge;
    int corpus_sequences = 64;
    int corpus_length = 32;
    CollapseThresholds thresholds;
    int entropy_probes = 10;
    int entropy_steps = 10;
    int probe_length = 4;
    int retention_probes = 50;
    double retention_confidence = 0.6;
    int cadence = 10;
    bool halt_on_collapse = false;
    DatasetSettings dataset;

    /// Throws ConfigError.
    void validate() const;
    /// Sets one field from its textual value. Throws ConfigError for unknown
    /// keys and malformed values.
    void set(std::string_view key, std::string_view value);
    nlohmann::json to_json() const;
};

/// Flat JSON object or key=value lines ('#' starts a comment). The format is
/// chosen by the first non-blank character.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::string& path);

/// Tokens [0, vocab/2) name subjects; [vocab/2, vocab) fill contexts and
/// probes, so probes never mention a subject.
int subject_pool_size(const ModelConfig& config);

/// Everything a campaign derives from the master seed before any edit.
struct Workbench {
    RunConfig config;
    ModelParams base;
    CovarianceEstimate c0;
    std::vector<TokenSeq> prefixes;
    std::vector<TokenSeq> entropy_probes;
    std::vector<TokenSeq> retention_probes;
    std::vector<Token> retention_baseline;

    EditSettings edit_settings() const;
};

Workbench make_workbench(const RunConfig& config);

struct SyntheticFactSet {
    std::uint64_t seed = 0;
    std::vector<Fact> facts;

    bool operator==(const SyntheticFactSet&) const = default;
};

/// Deterministic per (workbench, n). Adversarial facts put the subject first
/// so its bare-prompt key sits at position 0; the ones whose keys are most
/// nearly C0-orthogonal are chosen and spread evenly through the set.
/// Throws InputError when n exceeds the number of distinct subjects.
SyntheticFactSet make_dataset(const Workbench& wb, int n);

/// Every fact valid for `config` and no two prompts equal. Throws InputError.
void validate_fact_set(const SyntheticFactSet& set, const ModelConfig& config);

nlohmann::json facts_to_json(const SyntheticFactSet& set);
SyntheticFactSet facts_from_json(const nlohmann::json& doc);
void save_facts(const SyntheticFactSet& set, const std::string& path);
SyntheticFactSet load_facts(const std::string& path);

struct TraceRow {
    int edit_index = 0;
    int fact_id = 0;
    EditMethod method = EditMethod::r_rome;
    bool adversarial = false;
    double delta_norm = 0.0;
    double denominator = 0.0;
    std::optional<double> normalized_entropy;
    bool collapsed = false;
    MetricRecord metrics;
    double wall_time = 0.0;  // seconds; kept out of trace.csv

    bool operator==(const TraceRow&) const = default;
};

enum class CampaignMode { single, sequential };

std::string_view to_string(CampaignMode mode);

struct EditTrace {
    CampaignMode mode = CampaignMode::single;
    EditMethod method = EditMethod::r_rome;
    std::uint64_t seed = 0;
    int cadence = 1;
    std::vector<TraceRow> rows;
    std::optional<int> first_collapse;  // edit index
    bool halted = false;

    bool collapsed() const { return first_collapse.has_value(); }
    double max_delta_norm() const;
    /// Last recorded retention, or nullopt if none was measured.
    std::optional<double> final_probe_retention() const;
    std::optional<double> min_probe_retention() const;
    MetricRecord aggregate() const;
};

/// Every fact edited from a fresh copy of the base model, with full
/// diagnostics per edit.
EditTrace run_single(const Workbench& wb, std::span<const Fact> facts, EditMethod method);

/// Edits applied cumulatively. Entropy, fluency and probe retention are
/// measured every `cadence` edits, after the last edit, and on a halting edit;
/// the norm test runs on every edit.
EditTrace run_sequential(const Workbench& wb, std::span<const Fact> facts, EditMethod method,
                         int cadence, bool halt_on_collapse);

/// Column order of trace.csv.
inline constexpr std::string_view kTraceHeader =
    "edit_index,fact_id,method,adversarial,delta_norm,denominator,normalized_entropy,collapsed,"
    "es,em,ps,pm,ns,nm,ge,s,probe_retention";

/// Floats in shortest round-trip form; absent values are empty fields.
std::string format_trace_csv(const EditTrace& trace);
/// Rows of a trace.csv document. Throws InputError on a malformed document.
std::vector<TraceRow> parse_trace_csv(std::string_view text);
std::string format_scatter_csv(const EditTrace& trace);
nlohmann::json summary_json(const EditTrace& trace, const RunConfig& config);

/// Writes trace.csv, summary.json, scatter.csv and timing.csv into `dir`,
/// creating it if needed. Throws IoError.
void emit_outputs(const EditTrace& trace, const RunConfig& config, const std::string& dir);

/// Shortest decimal form that parses back to the same double.
std::string format_real(double x);

}  // namespace romekit
