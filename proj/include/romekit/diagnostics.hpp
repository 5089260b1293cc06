#pragma once

// Disabling-edit indicators: the element-normalized update norm and the
// normalized unigram entropy of sampled generations.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "romekit/common.hpp"
#include "romekit/editor.hpp"
#include "romekit/tiny_lm.hpp"

namespace romekit {

/// Frobenius norm divided by the number of matrix elements.
double delta_norm(const UpdateDelta& delta);
double delta_norm(const Matrix& delta);

/// Entropy of the pooled unigram distribution of `samples`, divided by
/// log(vocab_size). Throws InputError when the samples hold no tokens.
double normalized_entropy(std::span<const TokenSeq> samples, int vocab_size);

struct GenerationSample {
    std::vector<TokenSeq> continuations;  // generated tokens only, prompt stripped
    double normalized_entropy = 0.0;
};

/// Generates `steps` tokens after each probe prompt and scores the pooled
/// continuations.
GenerationSample generation_entropy(const ModelParams& params, std::span<const TokenSeq> probes,
                                    int steps, const GenerationSettings& settings = {});

/// k^T C0^-1 k_o / k^T C0^-1 k. The asymmetric update is larger than the
/// symmetric one by roughly 1 / |ratio|.
double inflation_ratio(const CovarianceEstimate& c0, const Vector& key, const Vector& key_original);
/// Cosine of the two keys under the C0^-1 inner product.
double key_cosine(const CovarianceEstimate& c0, const Vector& key, const Vector& key_original);

struct CollapseThresholds {
    double entropy_floor = 0.2;   // tau
    double norm_multiple = 100.0;  // kappa
};

double median(std::vector<double> values);

/// Collapsed when the entropy is below tau, or when delta_norm exceeds kappa
/// times the median of `prior_norms`. Either test is skipped when its input
/// is missing.
bool classify_collapse(std::optional<double> entropy, double delta_norm,
                       std::span<const double> prior_norms, const CollapseThresholds& thresholds);

struct DiagnosticReport {
    double delta_norm = 0.0;
    std::optional<double> normalized_entropy;
    bool collapsed = false;
    std::vector<TokenSeq> generation_sample;
};

}  // namespace romekit
