#include "romekit/keyvalue.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace romekit {

namespace {

bool contains_span(std::span<const Token> haystack, std::span<const Token> needle) {
    if (needle.empty()) {
        return true;
    }
    return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
           haystack.end();
}

struct SolverPrompt {
    EditSiteState site;
    int position = 0;
};

}  // namespace

void Fact::validate(const ModelConfig& config) const {
    validate_tokens(config, prompt);
    if (subject_last_index < 0 || subject_last_index >= static_cast<int>(prompt.size())) {
        throw InputError("fact " + std::to_string(id) + ": subject_last_index outside prompt");
    }
    if (subject_length < 1 || subject_length > subject_last_index + 1) {
        throw InputError("fact " + std::to_string(id) + ": invalid subject_length");
    }
    for (Token t : {target_new, target_old}) {
        if (t < 0 || t >= config.vocab_size) {
            throw InputError("fact " + std::to_string(id) + ": target outside vocabulary");
        }
    }
    if (target_new == target_old) {
        throw InputError("fact " + std::to_string(id) + ": target_new equals target_old");
    }
    const std::span<const Token> subject(prompt.data() + subject_last_index - subject_length + 1,
                                         static_cast<std::size_t>(subject_length));
    for (const auto& n : neighborhood) {
        validate_tokens(config, n.prompt);
        if (contains_span(n.prompt, subject)) {
            throw InputError("fact " + std::to_string(id) +
                             ": neighborhood prompt contains the subject span");
        }
    }
    for (const auto& p : paraphrases) {
        validate_tokens(config, p);
    }
}

std::string_view to_string(KeyKind kind) {
    return kind == KeyKind::averaged ? "averaged" : "original";
}

std::vector<TokenSeq> make_prefixes(int n, int vocab_size, std::uint64_t seed, int min_len,
                                    int max_len) {
    if (n < 0) {
        throw InputError("make_prefixes: n must be >= 0");
    }
    if (min_len < 0 || max_len < min_len) {
        throw InputError("make_prefixes: invalid length range");
    }
    std::mt19937_64 rng(seed);
    std::vector<TokenSeq> out;
    out.reserve(static_cast<std::size_t>(n));
    const auto span = static_cast<std::uint64_t>(max_len - min_len + 1);
    for (int i = 0; i < n; ++i) {
        const int len = min_len + static_cast<int>(uniform_index(rng, span));
        TokenSeq seq(static_cast<std::size_t>(len));
        for (auto& t : seq) {
            t = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(vocab_size)));
        }
        out.push_back(std::move(seq));
    }
    return out;
}

TokenSeq concat(std::span<const Token> prefix, std::span<const Token> prompt) {
    TokenSeq out(prefix.begin(), prefix.end());
    out.insert(out.end(), prompt.begin(), prompt.end());
    return out;
}

Vector prefixed_key(const ModelParams& params, const Fact& fact, std::span<const Token> prefix) {
    const TokenSeq tokens = concat(prefix, fact.prompt);
    const int pos = fact.subject_last_index + static_cast<int>(prefix.size());
    const EditSiteState site = prepare_edit_site(params, tokens);
    return site.key.row(pos).transpose();
}

KeyVector key_original(const ModelParams& params, const Fact& fact) {
    return KeyVector{prefixed_key(params, fact, {}), KeyKind::original, 1};
}

KeyVector key_averaged(const ModelParams& params, const Fact& fact,
                       std::span<const TokenSeq> prefixes) {
    if (prefixes.empty()) {
        throw InputError("key_averaged: at least one prefix required");
    }
    Vector sum = Vector::Zero(params.config.d_mlp);
    for (const auto& prefix : prefixes) {
        sum += prefixed_key(params, fact, prefix);
    }
    return KeyVector{sum / static_cast<double>(prefixes.size()), KeyKind::averaged,
                     static_cast<int>(prefixes.size())};
}

ValueVector solve_value(const ModelParams& params, const Fact& fact, const KeyVector& key,
                        std::span<const TokenSeq> prefixes, const SolverSettings& settings) {
    if (fact.target_new < 0 || fact.target_new >= params.config.vocab_size) {
        throw InputError("solve_value: target_new outside vocabulary");
    }
    if (key.values.size() != params.config.d_mlp) {
        throw InputError("solve_value: key has wrong dimension");
    }
    if (settings.steps < 0 || settings.proximity < 0.0 || !(settings.step_size > 0.0)) {
        throw ConfigError("solve_value: invalid solver settings");
    }

    std::vector<SolverPrompt> prompts;
    if (key.kind == KeyKind::original || prefixes.empty()) {
        prompts.push_back({prepare_edit_site(params, fact.prompt), fact.subject_last_index});
    } else {
        for (const auto& prefix : prefixes) {
            const TokenSeq tokens = concat(prefix, fact.prompt);
            prompts.push_back({prepare_edit_site(params, tokens),
                               fact.subject_last_index + static_cast<int>(prefix.size())});
        }
    }

    const Vector v_init = params.edited_matrix() * key.values;
    const ValueLoss log_prob = target_log_prob_loss(fact.target_new);
    const double weight = 1.0 / static_cast<double>(prompts.size());

    struct Eval {
        double objective;
        double mean_logprob;
        Vector gradient;
    };
    auto evaluate = [&](const Vector& v, bool with_gradient) {
        Eval e{0.0, 0.0, Vector::Zero(v.size())};
        for (const auto& sp : prompts) {
            const auto r = evaluate_injection(params, sp.site, sp.position, v, log_prob,
                                              with_gradient);
            e.mean_logprob += weight * r.loss;
            if (with_gradient) {
                e.gradient += weight * r.gradient;
            }
        }
        const Vector diff = v - v_init;
        e.objective = e.mean_logprob - settings.proximity * diff.squaredNorm();
        if (with_gradient) {
            e.gradient -= 2.0 * settings.proximity * diff;
        }
        if (!std::isfinite(e.objective) || (with_gradient && !e.gradient.allFinite())) {
            throw SolverDivergence("solve_value: non-finite objective for fact " +
                                   std::to_string(fact.id));
        }
        return e;
    };

    ValueVector out;
    out.initial = v_init;
    Vector v = v_init;
    Eval current = evaluate(v, true);
    out.initial_target_logprob = current.mean_logprob;
    out.initial_objective = current.objective;

    int accepted = 0;
    for (int step = 0; step < settings.steps; ++step) {
        double eta = settings.step_size;
        bool moved = false;
        for (int h = 0; h <= settings.max_halvings; ++h, eta *= 0.5) {
            const Vector trial = v + eta * current.gradient;
            const Eval e = evaluate(trial, false);
            if (e.objective > current.objective) {
                v = trial;
                current = evaluate(v, true);
                moved = true;
                break;
            }
        }
        if (!moved) {
            break;
        }
        ++accepted;
    }
    out.values = v;
    out.solver_steps = accepted;
    out.final_target_logprob = current.mean_logprob;
    out.final_objective = current.objective;
    return out;
}

}  // namespace romekit
