#include "romekit/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace romekit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

template <class T>
T parse_value(std::string_view key, std::string_view text) {
    text = trim(text);
    if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes") return true;
        if (text == "false" || text == "0" || text == "no") return false;
        throw ConfigError("config key '" + std::string(key) + "': expected a boolean, got '" +
                          std::string(text) + "'");
    } else {
        T out{};
        const char* end = text.data() + text.size();
        const auto [ptr, ec] = std::from_chars(text.data(), end, out);
        if (ec != std::errc() || ptr != end || text.empty()) {
            throw ConfigError("config key '" + std::string(key) + "': cannot parse '" +
                              std::string(text) + "'");
        }
        return out;
    }
}

struct Binding {
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
    std::function<json(const RunConfig&)> get;
};

template <class T, class Ref>
Binding bind(Ref ref) {
    return Binding{
        [ref](RunConfig& c, std::string_view key, std::string_view v) {
            ref(c) = parse_value<T>(key, v);
        },
        [ref](const RunConfig& c) { return json(ref(const_cast<RunConfig&>(c))); }};
}

#define ROMEKIT_FIELD(type, name, expr) \
    {name, bind<type>([](RunConfig& c) -> type& { return c.expr; })}

const std::map<std::string, Binding, std::less<>>& bindings() {
    static const std::map<std::string, Binding, std::less<>> table = {
        ROMEKIT_FIELD(int, "vocab_size", model.vocab_size),
        ROMEKIT_FIELD(int, "d_model", model.d_model),
        ROMEKIT_FIELD(int, "d_mlp", model.d_mlp),
        ROMEKIT_FIELD(int, "n_layers", model.n_layers),
        ROMEKIT_FIELD(int, "n_heads", model.n_heads),
        ROMEKIT_FIELD(int, "max_seq", model.max_seq),
        ROMEKIT_FIELD(int, "edit_layer", model.edit_layer),
        ROMEKIT_FIELD(double, "embed_std", model.embed_std),
        ROMEKIT_FIELD(double, "pos_std", model.pos_std),
        ROMEKIT_FIELD(double, "sink_gain", model.sink_gain),
        ROMEKIT_FIELD(double, "attn_gain", model.attn_gain),
        ROMEKIT_FIELD(double, "attn_out_gain", model.attn_out_gain),
        ROMEKIT_FIELD(double, "fc_gain", model.fc_gain),
        ROMEKIT_FIELD(double, "fc_bias_std", model.fc_bias_std),
        ROMEKIT_FIELD(double, "proj_gain", model.proj_gain),
        ROMEKIT_FIELD(double, "unembed_gain", model.unembed_gain),
        ROMEKIT_FIELD(std::uint64_t, "seed", seed),
        ROMEKIT_FIELD(int, "solver_steps", solver.steps),
        ROMEKIT_FIELD(double, "proximity", solver.proximity),
        ROMEKIT_FIELD(double, "step_size", solver.step_size),
        ROMEKIT_FIELD(int, "max_halvings", solver.max_halvings),
        ROMEKIT_FIELD(int, "prefix_count", prefix_count),
        ROMEKIT_FIELD(int, "prefix_min_len", prefix_min_len),
        ROMEKIT_FIELD(int, "prefix_max_len", prefix_max_len),
        ROMEKIT_FIELD(double, "ridge_relative", ridge.relative),
        ROMEKIT_FIELD(double, "ridge_absolute", ridge.absolute),
        ROMEKIT_FIELD(int, "corpus_sequences", corpus_sequences),
        ROMEKIT_FIELD(int, "corpus_length", corpus_length),
        ROMEKIT_FIELD(double, "entropy_floor", thresholds.entropy_floor),
        ROMEKIT_FIELD(double, "norm_multiple", thresholds.norm_multiple),
        ROMEKIT_FIELD(int, "entropy_probes", entropy_probes),
        ROMEKIT_FIELD(int, "entropy_steps", entropy_steps),
        ROMEKIT_FIELD(int, "probe_length", probe_length),
        ROMEKIT_FIELD(int, "retention_probes", retention_probes),
        ROMEKIT_FIELD(double, "retention_confidence", retention_confidence),
        ROMEKIT_FIELD(int, "cadence", cadence),
        ROMEKIT_FIELD(bool, "halt_on_collapse", halt_on_collapse),
        ROMEKIT_FIELD(int, "facts", dataset.facts),
        ROMEKIT_FIELD(int, "paraphrases", dataset.paraphrases),
        ROMEKIT_FIELD(int, "neighbors", dataset.neighbors),
        ROMEKIT_FIELD(double, "adversarial_fraction", dataset.adversarial_fraction),
        ROMEKIT_FIELD(int, "context_min", dataset.context_min),
        ROMEKIT_FIELD(int, "context_max", dataset.context_max),
        ROMEKIT_FIELD(int, "plausible_rank", dataset.plausible_rank),
    };
    return table;
}

#undef ROMEKIT_FIELD

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ConfigError("invalid config: " + what);
    }
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
    const auto it = bindings().find(key);
    if (it == bindings().end()) {
        throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
    it->second.set(*this, key, value);
}

json RunConfig::to_json() const {
    json out = json::object();
    for (const auto& [name, b] : bindings()) {
        out[name] = b.get(*this);
    }
    return out;
}

void RunConfig::validate() const {
    model.validate();
    require(solver.steps >= 0, "solver_steps must be >= 0");
    require(solver.proximity >= 0.0, "proximity must be >= 0");
    require(solver.step_size > 0.0, "step_size must be > 0");
    require(solver.max_halvings >= 0, "max_halvings must be >= 0");
    require(prefix_count >= 1, "prefix_count must be >= 1");
    require(prefix_min_len >= 0 && prefix_max_len >= prefix_min_len, "prefix length range");
    require(ridge.relative >= 0.0 && ridge.absolute >= 0.0 &&
                ridge.relative + ridge.absolute > 0.0,
            "ridge must be non-negative and not both zero");
    require(corpus_sequences >= 1, "corpus_sequences must be >= 1");
    require(corpus_length >= 1 && corpus_length <= model.max_seq,
            "corpus_length must be in [1, max_seq]");
    require(thresholds.entropy_floor >= 0.0 && thresholds.entropy_floor <= 1.0,
            "entropy_floor must be in [0, 1]");
    require(thresholds.norm_multiple > 0.0, "norm_multiple must be > 0");
    require(entropy_probes >= 1 && entropy_steps >= 1, "entropy probes and steps must be >= 1");
    require(probe_length >= 1, "probe_length must be >= 1");
    require(probe_length + entropy_steps <= model.max_seq,
            "probe_length + entropy_steps exceeds max_seq");
    require(probe_length + entropy_steps >= 3, "generations need at least 3 tokens");
    require(retention_probes >= 1, "retention_probes must be >= 1");
    require(retention_confidence >= 0.0 && retention_confidence < 1.0,
            "retention_confidence must be in [0, 1)");
    require(cadence >= 1, "cadence must be >= 1");
    require(dataset.facts >= 1, "facts must be >= 1");
    require(dataset.paraphrases >= 0 && dataset.neighbors >= 0,
            "paraphrases and neighbors must be >= 0");
    require(dataset.adversarial_fraction >= 0.0 && dataset.adversarial_fraction <= 1.0,
            "adversarial_fraction must be in [0, 1]");
    require(dataset.context_min >= 1 && dataset.context_max >= dataset.context_min,
            "context length range");
    require(dataset.context_max + 1 + prefix_max_len <= model.max_seq,
            "prefixed prompts exceed max_seq");
    require(dataset.plausible_rank >= 1 && dataset.plausible_rank < model.vocab_size,
            "plausible_rank must be in [1, vocab_size)");
}

RunConfig parse_run_config(std::string_view text) {
    RunConfig cfg;
    const std::string_view body = trim(text);
    if (!body.empty() && body.front() == '{') {
        json doc;
        try {
            doc = json::parse(body);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("malformed JSON config: ") + e.what());
        }
        for (const auto& [key, value] : doc.items()) {
            if (value.is_string()) {
                cfg.set(key, value.get<std::string>());
            } else if (value.is_number() || value.is_boolean()) {
                cfg.set(key, value.dump());
            } else {
                throw ConfigError("config key '" + key + "' must be a scalar");
            }
        }
    } else {
        std::istringstream in{std::string(text)};
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string_view l = line;
            if (const auto hash = l.find('#'); hash != std::string_view::npos) {
                l = l.substr(0, hash);
            }
            l = trim(l);
            if (l.empty()) {
                continue;
            }
            const auto eq = l.find('=');
            if (eq == std::string_view::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            }
            cfg.set(trim(l.substr(0, eq)), trim(l.substr(eq + 1)));
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config: " + path);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

// ---------------------------------------------------------------------------
// Workbench and dataset

int subject_pool_size(const ModelConfig& config) { return config.vocab_size / 2; }

namespace {

enum Stream : std::uint64_t {
    kModelStream = 1,
    kCorpusStream = 2,
    kPrefixStream = 3,
    kParaphraseStream = 4,
    kProbeStream = 5,
    kDatasetStream = 6,
};

Token general_token(std::mt19937_64& rng, const ModelConfig& cfg) {
    const int pool = subject_pool_size(cfg);
    return static_cast<Token>(
        pool + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.vocab_size - pool))));
}

TokenSeq general_sequence(std::mt19937_64& rng, const ModelConfig& cfg, int length) {
    TokenSeq seq(static_cast<std::size_t>(length));
    for (auto& t : seq) {
        t = general_token(rng, cfg);
    }
    return seq;
}

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[uniform_index(rng, i)]);
    }
}

}  // namespace

EditSettings Workbench::edit_settings() const {
    EditSettings s;
    s.prefixes = prefixes;
    s.solver = config.solver;
    return s;
}

Workbench make_workbench(const RunConfig& config) {
    config.validate();
    Workbench wb;
    wb.config = config;
    const ModelConfig& mc = config.model;
    wb.base = init_model(mc, mix_seed(config.seed, kModelStream));
    const auto corpus = make_corpus(config.corpus_sequences, config.corpus_length, mc.vocab_size,
                                    mix_seed(config.seed, kCorpusStream));
    wb.c0 = estimate_c0(wb.base, corpus, config.ridge);
    wb.prefixes = make_prefixes(config.prefix_count, mc.vocab_size,
                                mix_seed(config.seed, kPrefixStream), config.prefix_min_len,
                                config.prefix_max_len);

    std::mt19937_64 rng(mix_seed(config.seed, kProbeStream));
    for (int i = 0; i < config.entropy_probes; ++i) {
        wb.entropy_probes.push_back(general_sequence(rng, mc, config.probe_length));
    }
    const long max_attempts = 1000L * config.retention_probes;
    long attempts = 0;
    while (static_cast<int>(wb.retention_probes.size()) < config.retention_probes) {
        if (++attempts > max_attempts) {
            throw ConfigError("could not draw enough retention probes above confidence " +
                              std::to_string(config.retention_confidence));
        }
        TokenSeq p = general_sequence(rng, mc, config.probe_length);
        if (next_token_probs(wb.base, p).maxCoeff() >= config.retention_confidence) {
            wb.retention_probes.push_back(std::move(p));
        }
    }
    wb.retention_baseline = probe_answers(wb.base, wb.retention_probes);
    return wb;
}

void validate_fact_set(const SyntheticFactSet& set, const ModelConfig& config) {
    std::set<TokenSeq> prompts;
    for (const auto& f : set.facts) {
        f.validate(config);
        if (!prompts.insert(f.prompt).second) {
            throw InputError("fact " + std::to_string(f.id) + ": duplicate prompt");
        }
    }
}

SyntheticFactSet make_dataset(const Workbench& wb, int n) {
    const RunConfig& cfg = wb.config;
    const ModelConfig& mc = cfg.model;
    const DatasetSettings& ds = cfg.dataset;
    if (n < 1) {
        throw InputError("make_dataset: n must be >= 1");
    }
    const int pool = subject_pool_size(mc);
    if (n > pool) {
        throw InputError("make_dataset: " + std::to_string(n) + " facts exceed the " +
                         std::to_string(pool) + " distinct subjects available");
    }
    const int n_adv = static_cast<int>(std::lround(ds.adversarial_fraction * n));

    // Rank subject-first prompts by how close to C0-orthogonal their two keys are.
    std::vector<std::pair<double, Token>> ranked;
    ranked.reserve(static_cast<std::size_t>(pool));
    for (Token s = 0; s < pool; ++s) {
        Fact probe;
        probe.prompt = {s};
        const Vector ko = key_original(wb.base, probe).values;
        const Vector ke = key_averaged(wb.base, probe, wb.prefixes).values;
        ranked.emplace_back(std::abs(key_cosine(wb.c0, ke, ko)), s);
    }
    std::sort(ranked.begin(), ranked.end());

    std::vector<Token> adversarial_subjects;
    std::vector<Token> standard_subjects;
    for (int i = 0; i < pool; ++i) {
        (i < n_adv ? adversarial_subjects : standard_subjects).push_back(ranked[static_cast<std::size_t>(i)].second);
    }
    std::sort(standard_subjects.begin(), standard_subjects.end());

    std::mt19937_64 rng(mix_seed(cfg.seed, kDatasetStream));
    shuffle(standard_subjects, rng);

    std::vector<bool> is_adv(static_cast<std::size_t>(n), false);
    for (int j = 0; j < n_adv; ++j) {
        is_adv[static_cast<std::size_t>(((2 * j + 1) * n) / (2 * n_adv))] = true;
    }

    SyntheticFactSet out;
    out.seed = cfg.seed;
    std::size_t next_adv = 0;
    std::size_t next_std = 0;
    for (int i = 0; i < n; ++i) {
        Fact f;
        f.id = i;
        f.adversarial = is_adv[static_cast<std::size_t>(i)];
        TokenSeq context;
        Token subject = 0;
        if (f.adversarial) {
            subject = adversarial_subjects[next_adv++];
        } else {
            const int len = ds.context_min + static_cast<int>(uniform_index(
                                                 rng, static_cast<std::uint64_t>(
                                                          ds.context_max - ds.context_min + 1)));
            context = general_sequence(rng, mc, len);
            subject = standard_subjects[next_std++];
        }
        f.prompt = context;
        f.prompt.push_back(subject);
        f.subject_last_index = static_cast<int>(context.size());

        const Vector p = next_token_probs(wb.base, f.prompt);
        std::vector<Token> order(static_cast<std::size_t>(mc.vocab_size));
        for (int t = 0; t < mc.vocab_size; ++t) {
            order[static_cast<std::size_t>(t)] = t;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](Token a, Token b) { return p(a) > p(b); });
        f.target_old = order[0];
        f.target_new = order[1 + uniform_index(rng, static_cast<std::uint64_t>(ds.plausible_rank))];

        const auto held = make_prefixes(ds.paraphrases, mc.vocab_size,
                                        mix_seed(mix_seed(cfg.seed, kParaphraseStream),
                                                 static_cast<std::uint64_t>(i)),
                                        cfg.prefix_min_len, cfg.prefix_max_len);
        for (const auto& h : held) {
            f.paraphrases.push_back(concat(h, f.prompt));
        }
        for (int j = 0; j < ds.neighbors; ++j) {
            Token other = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(pool - 1)));
            if (other >= subject) {
                ++other;
            }
            NeighborPrompt nb;
            nb.prompt = context;
            nb.prompt.push_back(other);
            nb.expected = greedy_next(wb.base, nb.prompt);
            f.neighborhood.push_back(std::move(nb));
        }
        out.facts.push_back(std::move(f));
    }
    validate_fact_set(out, mc);
    return out;
}

json facts_to_json(const SyntheticFactSet& set) {
    json facts = json::array();
    for (const auto& f : set.facts) {
        json nbs = json::array();
        for (const auto& nb : f.neighborhood) {
            nbs.push_back({{"prompt", nb.prompt}, {"expected", nb.expected}});
        }
        json j = {{"id", f.id},
                  {"prompt", f.prompt},
                  {"subject_last_index", f.subject_last_index},
                  {"target_new", f.target_new},
                  {"target_old", f.target_old},
                  {"paraphrases", f.paraphrases},
                  {"neighborhood", nbs},
                  {"adversarial", f.adversarial}};
        if (f.subject_length != 1) {
            j["subject_length"] = f.subject_length;
        }
        facts.push_back(std::move(j));
    }
    return json{{"format", "romekit-facts-v1"}, {"seed", set.seed}, {"facts", facts}};
}

SyntheticFactSet facts_from_json(const json& doc) {
    try {
        SyntheticFactSet set;
        const json* facts = &doc;
        if (doc.is_object()) {
            set.seed = doc.value("seed", std::uint64_t{0});
            facts = &doc.at("facts");
        }
        if (!facts->is_array()) {
            throw InputError("facts document must be an array or an object with 'facts'");
        }
        for (const auto& j : *facts) {
            Fact f;
            f.id = j.at("id").get<int>();
            f.prompt = j.at("prompt").get<TokenSeq>();
            f.subject_last_index = j.at("subject_last_index").get<int>();
            f.subject_length = j.value("subject_length", 1);
            f.target_new = j.at("target_new").get<Token>();
            f.target_old = j.at("target_old").get<Token>();
            f.paraphrases = j.value("paraphrases", std::vector<TokenSeq>{});
            if (j.contains("neighborhood")) {
                for (const auto& nb : j.at("neighborhood")) {
                    f.neighborhood.push_back(
                        {nb.at("prompt").get<TokenSeq>(), nb.at("expected").get<Token>()});
                }
            }
            f.adversarial = j.value("adversarial", false);
            set.facts.push_back(std::move(f));
        }
        return set;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed facts document: ") + e.what());
    }
}

void save_facts(const SyntheticFactSet& set, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write facts: " + path);
    }
    out << facts_to_json(set).dump(1) << '\n';
    if (!out) {
        throw IoError("failed writing facts: " + path);
    }
}

SyntheticFactSet load_facts(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read facts: " + path);
    }
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed facts file: ") + e.what());
    }
    return facts_from_json(doc);
}

// ---------------------------------------------------------------------------
// Campaigns

std::string_view to_string(CampaignMode mode) {
    return mode == CampaignMode::single ? "single" : "sequential";
}

double EditTrace::max_delta_norm() const {
    double mx = 0.0;
    for (const auto& r : rows) {
        mx = std::max(mx, r.delta_norm);
    }
    return mx;
}

std::optional<double> EditTrace::final_probe_retention() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        if (it->metrics.probe_retention) {
            return it->metrics.probe_retention;
        }
    }
    return std::nullopt;
}

std::optional<double> EditTrace::min_probe_retention() const {
    std::optional<double> out;
    for (const auto& r : rows) {
        if (r.metrics.probe_retention) {
            out = std::min(out.value_or(1.0), *r.metrics.probe_retention);
        }
    }
    return out;
}

MetricRecord EditTrace::aggregate() const {
    std::vector<MetricRecord> records;
    records.reserve(rows.size());
    for (const auto& r : rows) {
        records.push_back(r.metrics);
    }
    return romekit::aggregate(records);
}

namespace {

struct Diagnostics {
    double entropy = 0.0;
    double ge = 0.0;
    double retention = 0.0;
};

Diagnostics diagnose_model(const Workbench& wb, const ModelParams& params) {
    const auto sample = generation_entropy(params, wb.entropy_probes, wb.config.entropy_steps);
    std::vector<TokenSeq> texts;
    texts.reserve(sample.continuations.size());
    for (std::size_t i = 0; i < sample.continuations.size(); ++i) {
        texts.push_back(concat(wb.entropy_probes[i], sample.continuations[i]));
    }
    return {sample.normalized_entropy, ngram_fluency(texts),
            probe_retention(params, wb.retention_probes, wb.retention_baseline)};
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

TraceRow base_row(int index, const Fact& fact, const EditOutcome& out) {
    TraceRow row;
    row.edit_index = index;
    row.fact_id = fact.id;
    row.method = out.method;
    row.adversarial = fact.adversarial;
    row.delta_norm = out.delta_norm;
    row.denominator = out.delta.denominator;
    return row;
}

}  // namespace

EditTrace run_single(const Workbench& wb, std::span<const Fact> facts, EditMethod method) {
    EditTrace trace;
    trace.mode = CampaignMode::single;
    trace.method = method;
    trace.seed = wb.config.seed;
    trace.cadence = 1;
    const EditSettings settings = wb.edit_settings();
    std::vector<double> prior;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        const auto start = Clock::now();
        const Fact& fact = facts[i];
        auto [post, out] = edit(wb.base, fact, method, wb.c0, settings);
        TraceRow row = base_row(static_cast<int>(i), fact, out);
        const Diagnostics d = diagnose_model(wb, post);
        row.normalized_entropy = d.entropy;
        row.collapsed = classify_collapse(d.entropy, row.delta_norm, prior, wb.config.thresholds);
        row.metrics = make_record(efficacy(post, fact), generalization(post, fact),
                                  locality(post, wb.base, fact), d.ge, d.retention);
        prior.push_back(row.delta_norm);
        if (row.collapsed && !trace.first_collapse) {
            trace.first_collapse = row.edit_index;
        }
        row.wall_time = seconds_since(start);
        trace.rows.push_back(std::move(row));
    }
    return trace;
}

EditTrace run_sequential(const Workbench& wb, std::span<const Fact> facts, EditMethod method,
                         int cadence, bool halt_on_collapse) {
    if (cadence < 1) {
        throw ConfigError("run_sequential: cadence must be >= 1");
    }
    EditTrace trace;
    trace.mode = CampaignMode::sequential;
    trace.method = method;
    trace.seed = wb.config.seed;
    trace.cadence = cadence;
    const EditSettings settings = wb.edit_settings();
    ModelParams current = wb.base;
    std::vector<double> prior;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        const auto start = Clock::now();
        const Fact& fact = facts[i];
        auto [post, out] = edit(current, fact, method, wb.c0, settings);
        TraceRow row = base_row(static_cast<int>(i), fact, out);

        const bool norm_collapse =
            classify_collapse(std::nullopt, row.delta_norm, prior, wb.config.thresholds);
        const bool on_cadence = (i + 1) % static_cast<std::size_t>(cadence) == 0 ||
                                i + 1 == facts.size() || (halt_on_collapse && norm_collapse);
        std::optional<double> ge;
        std::optional<double> retention;
        if (on_cadence) {
            const Diagnostics d = diagnose_model(wb, post);
            row.normalized_entropy = d.entropy;
            ge = d.ge;
            retention = d.retention;
        }
        row.collapsed = classify_collapse(row.normalized_entropy, row.delta_norm, prior,
                                          wb.config.thresholds);
        row.metrics = make_record(efficacy(post, fact), generalization(post, fact),
                                  locality(post, current, fact), ge, retention);
        prior.push_back(row.delta_norm);
        current = std::move(post);
        if (row.collapsed && !trace.first_collapse) {
            trace.first_collapse = row.edit_index;
        }
        row.wall_time = seconds_since(start);
        trace.rows.push_back(std::move(row));
        if (halt_on_collapse && trace.rows.back().collapsed) {
            trace.halted = true;
            break;
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Outputs

std::string format_real(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

namespace {

std::string opt(const std::optional<double>& x) { return x ? format_real(*x) : std::string(); }

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

double parse_real(std::string_view field) {
    const std::string s(field);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw InputError("trace.csv: bad number '" + s + "'");
    }
    return v;
}

std::optional<double> parse_opt(std::string_view field) {
    if (field.empty()) {
        return std::nullopt;
    }
    return parse_real(field);
}

int parse_int(std::string_view field) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
        throw InputError("trace.csv: bad integer '" + std::string(field) + "'");
    }
    return v;
}

bool parse_flag(std::string_view field) {
    if (field == "1") return true;
    if (field == "0") return false;
    throw InputError("trace.csv: bad flag '" + std::string(field) + "'");
}

}  // namespace

std::string format_trace_csv(const EditTrace& trace) {
    std::string out(kTraceHeader);
    out += '\n';
    for (const auto& r : trace.rows) {
        const MetricRecord& m = r.metrics;
        out += std::to_string(r.edit_index) + ',' + std::to_string(r.fact_id) + ',' +
               std::string(to_string(r.method)) + ',' + (r.adversarial ? "1" : "0") + ',' +
               format_real(r.delta_norm) + ',' + format_real(r.denominator) + ',' +
               opt(r.normalized_entropy) + ',' + (r.collapsed ? "1" : "0") + ',' +
               format_real(m.es) + ',' + format_real(m.em) + ',' + opt(m.ps) + ',' + opt(m.pm) +
               ',' + format_real(m.ns) + ',' + format_real(m.nm) + ',' + opt(m.ge) + ',' +
               format_real(m.s) + ',' + opt(m.probe_retention) + '\n';
    }
    return out;
}

std::vector<TraceRow> parse_trace_csv(std::string_view text) {
    std::vector<TraceRow> rows;
    const auto lines = split(text, '\n');
    if (lines.empty() || trim(lines[0]) != kTraceHeader) {
        throw InputError("trace.csv: missing or unexpected header");
    }
    const std::size_t columns = split(kTraceHeader, ',').size();
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::string_view line = lines[i];
        if (line.empty()) {
            continue;
        }
        const auto f = split(line, ',');
        if (f.size() != columns) {
            throw InputError("trace.csv line " + std::to_string(i + 1) + ": expected " +
                             std::to_string(columns) + " fields");
        }
        TraceRow r;
        r.edit_index = parse_int(f[0]);
        r.fact_id = parse_int(f[1]);
        try {
            r.method = parse_edit_method(f[2]);
        } catch (const ConfigError& e) {
            throw InputError(std::string("trace.csv: ") + e.what());
        }
        r.adversarial = parse_flag(f[3]);
        r.delta_norm = parse_real(f[4]);
        r.denominator = parse_real(f[5]);
        r.normalized_entropy = parse_opt(f[6]);
        r.collapsed = parse_flag(f[7]);
        r.metrics.es = parse_real(f[8]);
        r.metrics.em = parse_real(f[9]);
        r.metrics.ps = parse_opt(f[10]);
        r.metrics.pm = parse_opt(f[11]);
        r.metrics.ns = parse_real(f[12]);
        r.metrics.nm = parse_real(f[13]);
        r.metrics.ge = parse_opt(f[14]);
        r.metrics.s = parse_real(f[15]);
        r.metrics.probe_retention = parse_opt(f[16]);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string format_scatter_csv(const EditTrace& trace) {
    std::string out = "edit_index,delta_norm,normalized_entropy\n";
    for (const auto& r : trace.rows) {
        out += std::to_string(r.edit_index) + ',' + format_real(r.delta_norm) + ',' +
               opt(r.normalized_entropy) + '\n';
    }
    return out;
}

json summary_json(const EditTrace& trace, const RunConfig& config) {
    auto num = [](const std::optional<double>& x) { return x ? json(*x) : json(nullptr); };
    const MetricRecord agg = trace.aggregate();
    std::optional<double> min_entropy;
    for (const auto& r : trace.rows) {
        if (r.normalized_entropy) {
            min_entropy = std::min(min_entropy.value_or(1.0), *r.normalized_entropy);
        }
    }
    return json{
        {"mode", std::string(to_string(trace.mode))},
        {"method", std::string(to_string(trace.method))},
        {"seed", trace.seed},
        {"cadence", trace.cadence},
        {"edits", trace.rows.size()},
        {"collapsed", trace.collapsed()},
        {"first_collapse_index", trace.first_collapse ? json(*trace.first_collapse) : json(nullptr)},
        {"halted", trace.halted},
        {"max_delta_norm", trace.max_delta_norm()},
        {"min_normalized_entropy", num(min_entropy)},
        {"final_probe_retention", num(trace.final_probe_retention())},
        {"min_probe_retention", num(trace.min_probe_retention())},
        {"aggregate",
         {{"es", agg.es},
          {"em", agg.em},
          {"ps", num(agg.ps)},
          {"pm", num(agg.pm)},
          {"ns", agg.ns},
          {"nm", agg.nm},
          {"ge", num(agg.ge)},
          {"s", agg.s},
          {"probe_retention", num(agg.probe_retention)}}},
        {"config", config.to_json()}};
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << content;
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

}  // namespace

void emit_outputs(const EditTrace& trace, const RunConfig& config, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + dir + ": " + ec.message());
    }
    const std::filesystem::path root(dir);
    write_file(root / "trace.csv", format_trace_csv(trace));
    write_file(root / "scatter.csv", format_scatter_csv(trace));
    write_file(root / "summary.json", summary_json(trace, config).dump(2) + "\n");
    std::string timing = "edit_index,wall_time\n";
    for (const auto& r : trace.rows) {
        timing += std::to_string(r.edit_index) + ',' + format_real(r.wall_time) + '\n';
    }
    write_file(root / "timing.csv", timing);
}

}  // namespace romekit
