#include "romekit/diagnostics.hpp"

#include <algorithm>
#include <cmath>

namespace romekit {

double delta_norm(const UpdateDelta& delta) {
    const double elements = static_cast<double>(delta.rows() * delta.cols());
    if (elements == 0.0) {
        return 0.0;
    }
    return delta.column.norm() * delta.row.norm() / elements;
}

double delta_norm(const Matrix& delta) {
    if (delta.size() == 0) {
        return 0.0;
    }
    return delta.norm() / static_cast<double>(delta.size());
}

double normalized_entropy(std::span<const TokenSeq> samples, int vocab_size) {
    if (vocab_size < 2) {
        throw InputError("normalized_entropy: vocab_size must be >= 2");
    }
    std::vector<std::size_t> counts(static_cast<std::size_t>(vocab_size), 0);
    std::size_t total = 0;
    for (const auto& seq : samples) {
        for (Token t : seq) {
            if (t < 0 || t >= vocab_size) {
                throw InputError("normalized_entropy: token outside vocabulary");
            }
            ++counts[static_cast<std::size_t>(t)];
            ++total;
        }
    }
    if (total == 0) {
        throw InputError("normalized_entropy: no generated tokens");
    }
    double h = 0.0;
    const double n = static_cast<double>(total);
    for (std::size_t c : counts) {
        if (c > 0) {
            const double p = static_cast<double>(c) / n;
            h -= p * std::log(p);
        }
    }
    // Round-off can push a point mass to -0 or a uniform sample just past 1.
    return std::clamp(h / std::log(static_cast<double>(vocab_size)), 0.0, 1.0);
}

GenerationSample generation_entropy(const ModelParams& params, std::span<const TokenSeq> probes,
                                    int steps, const GenerationSettings& settings) {
    if (probes.empty()) {
        throw InputError("generation_entropy: at least one probe prompt required");
    }
    GenerationSample out;
    out.continuations.reserve(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) {
        GenerationSettings s = settings;
        s.seed = mix_seed(settings.seed, i);
        const TokenSeq full = generate(params, probes[i], steps, s);
        out.continuations.emplace_back(full.begin() + static_cast<std::ptrdiff_t>(probes[i].size()),
                                       full.end());
    }
    out.normalized_entropy = normalized_entropy(out.continuations, params.config.vocab_size);
    return out;
}

double inflation_ratio(const CovarianceEstimate& c0, const Vector& key,
                       const Vector& key_original) {
    const Vector c_inv_k = c0.solve(key);
    const double self = key.dot(c_inv_k);
    if (!(self > 0.0)) {
        throw DegenerateKey("inflation_ratio: zero key");
    }
    return key_original.dot(c_inv_k) / self;
}

double key_cosine(const CovarianceEstimate& c0, const Vector& key, const Vector& key_original) {
    const Vector c_inv_k = c0.solve(key);
    const double kk = key.dot(c_inv_k);
    const double oo = c0.inner(key_original, key_original);
    if (!(kk > 0.0) || !(oo > 0.0)) {
        throw DegenerateKey("key_cosine: zero key");
    }
    return key_original.dot(c_inv_k) / std::sqrt(kk * oo);
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw InputError("median of empty set");
    }
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid),
                     values.end());
    const double upper = values[mid];
    if (values.size() % 2 == 1) {
        return upper;
    }
    const double lower =
        *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

bool classify_collapse(std::optional<double> entropy, double delta_norm,
                       std::span<const double> prior_norms, const CollapseThresholds& thresholds) {
    if (entropy && *entropy < thresholds.entropy_floor) {
        return true;
    }
    if (!prior_norms.empty()) {
        const double med = median({prior_norms.begin(), prior_norms.end()});
        if (delta_norm > thresholds.norm_multiple * med) {
            return true;
        }
    }
    return false;
}

}  // namespace romekit
