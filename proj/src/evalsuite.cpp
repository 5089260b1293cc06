#include "romekit/evalsuite.hpp"

#include <cmath>
#include <map>

namespace romekit {

namespace {

Eigen::Index argmax(const Vector& v) {
    Eigen::Index i = 0;
    v.maxCoeff(&i);
    return i;
}

}  // namespace

Contribution efficacy(const ModelParams& post, const Fact& fact) {
    const Vector p = next_token_probs(post, fact.prompt);
    const double diff = p(fact.target_new) - p(fact.target_old);
    return {diff > 0.0 ? 1.0 : 0.0, diff};
}

std::optional<Contribution> generalization(const ModelParams& post, const Fact& fact) {
    if (fact.paraphrases.empty()) {
        return std::nullopt;
    }
    Contribution acc;
    for (const auto& para : fact.paraphrases) {
        const Vector p = next_token_probs(post, para);
        const double diff = p(fact.target_new) - p(fact.target_old);
        acc.success += diff > 0.0 ? 1.0 : 0.0;
        acc.magnitude += diff;
    }
    const double n = static_cast<double>(fact.paraphrases.size());
    return Contribution{acc.success / n, acc.magnitude / n};
}

Contribution locality(const ModelParams& post, const ModelParams& pre, const Fact& fact) {
    if (fact.neighborhood.empty()) {
        return {1.0, 0.0};
    }
    Contribution acc;
    for (const auto& nb : fact.neighborhood) {
        const Vector before = next_token_probs(pre, nb.prompt);
        const Vector after = next_token_probs(post, nb.prompt);
        const Eigen::Index answer = argmax(before);
        acc.success += argmax(after) == answer ? 1.0 : 0.0;
        acc.magnitude += after(answer) - before(answer);
    }
    const double n = static_cast<double>(fact.neighborhood.size());
    return {acc.success / n, acc.magnitude / n};
}

double ngram_entropy(std::span<const Token> tokens, int n) {
    if (n < 1) {
        throw InputError("ngram_entropy: n must be >= 1");
    }
    if (static_cast<int>(tokens.size()) < n) {
        throw InputError("ngram_entropy: sequence shorter than n");
    }
    std::map<std::vector<Token>, std::size_t> counts;
    std::size_t total = 0;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
        ++counts[std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(i) + n)];
        ++total;
    }
    double h = 0.0;
    for (const auto& [gram, c] : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return h;
}

double ngram_fluency(std::span<const TokenSeq> samples) {
    if (samples.empty()) {
        throw InputError("ngram_fluency: no samples");
    }
    double total = 0.0;
    for (const auto& s : samples) {
        if (s.size() < 3) {
            throw InputError("ngram_fluency: sample shorter than 3 tokens");
        }
        total += (2.0 / 3.0) * ngram_entropy(s, 3) + (1.0 / 3.0) * ngram_entropy(s, 2);
    }
    return total / static_cast<double>(samples.size());
}

double fluency_ge(const ModelParams& params, std::span<const TokenSeq> probes, int steps) {
    std::vector<TokenSeq> texts;
    texts.reserve(probes.size());
    for (const auto& p : probes) {
        texts.push_back(generate(params, p, steps));
    }
    return ngram_fluency(texts);
}

double composite_score(double es, double ps, double ns) {
    if (es < 0.0 || ps < 0.0 || ns < 0.0) {
        throw InputError("composite_score: scores must be non-negative");
    }
    if (es == 0.0 || ps == 0.0 || ns == 0.0) {
        return 0.0;
    }
    return 3.0 / (1.0 / es + 1.0 / ps + 1.0 / ns);
}

std::vector<Token> probe_answers(const ModelParams& params, std::span<const TokenSeq> probes) {
    std::vector<Token> out;
    out.reserve(probes.size());
    for (const auto& p : probes) {
        out.push_back(greedy_next(params, p));
    }
    return out;
}

double probe_retention(const ModelParams& params, std::span<const TokenSeq> probes,
                       std::span<const Token> baseline) {
    if (probes.empty()) {
        throw InputError("probe_retention: empty probe set");
    }
    if (baseline.size() != probes.size()) {
        throw InputError("probe_retention: baseline size does not match probe set");
    }
    std::size_t kept = 0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        kept += greedy_next(params, probes[i]) == baseline[i] ? 1 : 0;
    }
    return static_cast<double>(kept) / static_cast<double>(probes.size());
}

MetricRecord make_record(const Contribution& eff, const std::optional<Contribution>& gen,
                         const Contribution& loc, std::optional<double> ge,
                         std::optional<double> retention) {
    MetricRecord r;
    r.es = 100.0 * eff.success;
    r.em = 100.0 * eff.magnitude;
    if (gen) {
        r.ps = 100.0 * gen->success;
        r.pm = 100.0 * gen->magnitude;
    }
    r.ns = 100.0 * loc.success;
    r.nm = 100.0 * loc.magnitude;
    r.ge = ge;
    r.probe_retention = retention;
    r.s = composite_score(r.es, r.ps.value_or(r.es), r.ns);
    return r;
}

MetricRecord aggregate(std::span<const MetricRecord> rows) {
    MetricRecord out;
    if (rows.empty()) {
        out.ns = 0.0;
        return out;
    }
    struct Mean {
        double sum = 0.0;
        std::size_t n = 0;
        void add(double v) {
            sum += v;
            ++n;
        }
        void add(const std::optional<double>& v) {
            if (v) add(*v);
        }
        std::optional<double> get() const {
            return n == 0 ? std::nullopt : std::optional<double>(sum / static_cast<double>(n));
        }
    };
    Mean es, em, ps, pm, ns, nm, ge, ret;
    for (const auto& r : rows) {
        es.add(r.es);
        em.add(r.em);
        ps.add(r.ps);
        pm.add(r.pm);
        ns.add(r.ns);
        nm.add(r.nm);
        ge.add(r.ge);
        ret.add(r.probe_retention);
    }
    out.es = *es.get();
    out.em = *em.get();
    out.ps = ps.get();
    out.pm = pm.get();
    out.ns = *ns.get();
    out.nm = *nm.get();
    out.ge = ge.get();
    out.probe_retention = ret.get();
    out.s = composite_score(out.es, out.ps.value_or(out.es), out.ns);
    return out;
}

}  // namespace romekit
