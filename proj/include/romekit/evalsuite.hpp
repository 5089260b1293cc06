#pragma once

// Edit-quality metrics. Per-fact contributions are fractions/probability
// differences; aggregate records are scaled to percentages.
//
//   ES/EM  efficacy on the edit prompt        success: P(new) > P(old)
//   PS/PM  same, averaged over paraphrases
//   NS/NM  neighborhood prompts keep their pre-edit argmax;
//          NM is the change in that token's probability
//   GE     (2/3) H3 + (1/3) H2 of generated text, nats
//   S      harmonic mean of ES, PS, NS

#include <optional>
#include <span>
#include <vector>

#include "romekit/common.hpp"
#include "romekit/keyvalue.hpp"
#include "romekit/tiny_lm.hpp"

namespace romekit {

struct Contribution {
    double success = 0.0;    // in [0, 1]
    double magnitude = 0.0;  // probability difference in [-1, 1]
};

Contribution efficacy(const ModelParams& post, const Fact& fact);
/// Averaged over paraphrases; nullopt when the fact has none.
std::optional<Contribution> generalization(const ModelParams& post, const Fact& fact);
/// Averaged over neighborhood prompts; a fact without neighbors counts as intact.
Contribution locality(const ModelParams& post, const ModelParams& pre, const Fact& fact);

/// Entropy (nats) of the n-gram distribution of one sequence.
double ngram_entropy(std::span<const Token> tokens, int n);
/// Mean over samples of (2/3) H3 + (1/3) H2. Each sample needs >= 3 tokens.
double ngram_fluency(std::span<const TokenSeq> samples);
/// Greedy generations from each probe, scored with ngram_fluency over the
/// full prompt + continuation.
double fluency_ge(const ModelParams& params, std::span<const TokenSeq> probes, int steps);

/// Harmonic mean of the three scores; 0 if any of them is 0.
double composite_score(double es, double ps, double ns);

/// Greedy answers, one per probe.
std::vector<Token> probe_answers(const ModelParams& params, std::span<const TokenSeq> probes);
/// Fraction of probes whose greedy answer still matches `baseline`.
double probe_retention(const ModelParams& params, std::span<const TokenSeq> probes,
                       std::span<const Token> baseline);

struct MetricRecord {
    double es = 0.0, em = 0.0;
    std::optional<double> ps, pm;
    double ns = 100.0, nm = 0.0;
    std::optional<double> ge;
    double s = 0.0;
    std::optional<double> probe_retention;

    bool operator==(const MetricRecord&) const = default;
};

/// Scales one fact's contributions to a record (percentages).
MetricRecord make_record(const Contribution& eff, const std::optional<Contribution>& gen,
                         const Contribution& loc, std::optional<double> ge,
                         std::optional<double> retention);

/// Means of every field over the rows where it is present; S recomputed from
/// the aggregated ES, PS and NS.
MetricRecord aggregate(std::span<const MetricRecord> rows);

}  // namespace romekit
