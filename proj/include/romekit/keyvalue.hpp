#pragma once

// Key and value vectors for a fact: the prefix-averaged key, the bare-prompt
// key, and the value vector found by gradient ascent on the target log-prob.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "romekit/common.hpp"
#include "romekit/tiny_lm.hpp"

namespace romekit {

struct NeighborPrompt {
    TokenSeq prompt;
    Token expected = 0;

    bool operator==(const NeighborPrompt&) const = default;
};

struct Fact {
    int id = 0;
    TokenSeq prompt;
    int subject_last_index = 0;
    int subject_length = 1;
    Token target_new = 0;
    Token target_old = 0;
    std::vector<TokenSeq> paraphrases;
    std::vector<NeighborPrompt> neighborhood;
    bool adversarial = false;

    /// Throws InputError when the fact's own invariants are violated.
    void validate(const ModelConfig& config) const;

    bool operator==(const Fact&) const = default;
};

enum class KeyKind { averaged, original };

std::string_view to_string(KeyKind kind);

struct KeyVector {
    Vector values;  // d_mlp
    KeyKind kind = KeyKind::original;
    int prefix_count = 1;
};

struct ValueVector {
    Vector values;  // d_model
    Vector initial;  // unedited MLP output the solver started from
    int solver_steps = 0;
    double initial_target_logprob = 0.0;
    double final_target_logprob = 0.0;
    double initial_objective = 0.0;
    double final_objective = 0.0;
};

struct SolverSettings {
    int steps = 100;
    double proximity = 0.05;  // weight of ||v - v_init||^2
    double step_size = 1.0;
    int max_halvings = 10;
};

/// `n` random token strings with lengths in [min_len, max_len], uniform over
/// the vocabulary. Deterministic per seed.
std::vector<TokenSeq> make_prefixes(int n, int vocab_size, std::uint64_t seed, int min_len = 2,
                                    int max_len = 5);

/// prefix followed by prompt.
TokenSeq concat(std::span<const Token> prefix, std::span<const Token> prompt);

/// Edit-layer key at the fact's subject position for the bare prompt.
KeyVector key_original(const ModelParams& params, const Fact& fact);

/// Mean of the edit-layer keys over prefix + prompt, read at the shifted
/// subject position.
KeyVector key_averaged(const ModelParams& params, const Fact& fact,
                       std::span<const TokenSeq> prefixes);

/// Key for one prefixed prompt; an empty prefix gives the bare-prompt key.
Vector prefixed_key(const ModelParams& params, const Fact& fact, std::span<const Token> prefix);

/// Maximizes the mean target log-prob over the prompts associated with the
/// key kind (bare prompt only for `original`; every prefixed prompt for
/// `averaged`) minus proximity * ||v - W_proj k||^2, with v injected at
/// the subject position. Gradient ascent with backtracking; every accepted
/// step increases the objective.
ValueVector solve_value(const ModelParams& params, const Fact& fact, const KeyVector& key,
                        std::span<const TokenSeq> prefixes, const SolverSettings& settings);

}  // namespace romekit
