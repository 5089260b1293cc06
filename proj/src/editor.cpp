#include "romekit/editor.hpp"

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "romekit/diagnostics.hpp"

namespace romekit {

std::string_view to_string(EditMethod method) {
    switch (method) {
        case EditMethod::original:
            return "original";
        case EditMethod::r_rome:
            return "r-rome";
        case EditMethod::p_rome:
            return "p-rome";
    }
    return "unknown";
}

EditMethod parse_edit_method(std::string_view text) {
    if (text == "original") return EditMethod::original;
    if (text == "r-rome") return EditMethod::r_rome;
    if (text == "p-rome") return EditMethod::p_rome;
    throw ConfigError("unknown edit method '" + std::string(text) +
                      "' (expected original|r-rome|p-rome)");
}

CovarianceEstimate::CovarianceEstimate(Matrix c0, std::size_t sample_count, double ridge)
    : c0_(std::move(c0)), samples_(sample_count), ridge_(ridge) {
    if (c0_.rows() != c0_.cols() || c0_.rows() == 0) {
        throw InputError("covariance must be a non-empty square matrix");
    }
    if (!c0_.allFinite()) {
        throw NumericalError("covariance has non-finite entries");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(c0_, Eigen::EigenvaluesOnly);
    min_eig_ = eig.eigenvalues().minCoeff();
    if (!(min_eig_ > 0.0)) {
        throw NumericalError("covariance not positive definite after ridge (min eigenvalue " +
                             std::to_string(min_eig_) + ")");
    }
    llt_.compute(c0_);
    if (llt_.info() != Eigen::Success) {
        throw NumericalError("Cholesky factorization of covariance failed");
    }
}

Vector CovarianceEstimate::solve(const Vector& x) const { return llt_.solve(x); }

double CovarianceEstimate::inner(const Vector& x, const Vector& y) const {
    return x.dot(solve(y));
}

CovarianceEstimate estimate_c0(const ModelParams& params, std::span<const TokenSeq> corpus,
                               const Ridge& ridge) {
    if (corpus.empty()) {
        throw InputError("estimate_c0: empty corpus");
    }
    if (ridge.absolute < 0.0 || ridge.relative < 0.0) {
        throw InputError("estimate_c0: ridge must be non-negative");
    }
    const int d = params.config.d_mlp;
    Matrix acc = Matrix::Zero(d, d);
    std::size_t count = 0;
    for (const auto& seq : corpus) {
        const EditSiteState site = prepare_edit_site(params, seq);
        acc.selfadjointView<Eigen::Lower>().rankUpdate(site.key.transpose());
        count += static_cast<std::size_t>(site.key.rows());
    }
    Matrix c0 = acc.selfadjointView<Eigen::Lower>();
    c0 /= static_cast<double>(count);
    const double lambda = ridge.absolute + ridge.relative * c0.trace() / d;
    if (!(lambda > 0.0)) {
        throw InputError("estimate_c0: ridge must be positive");
    }
    c0.diagonal().array() += lambda;
    return CovarianceEstimate(std::move(c0), count, lambda);
}

std::vector<TokenSeq> make_corpus(int sequences, int length, int vocab_size, std::uint64_t seed) {
    if (sequences < 1 || length < 1) {
        throw InputError("make_corpus: sizes must be positive");
    }
    std::mt19937_64 rng(seed);
    std::vector<TokenSeq> out(static_cast<std::size_t>(sequences));
    for (auto& seq : out) {
        seq.resize(static_cast<std::size_t>(length));
        for (auto& t : seq) {
            t = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(vocab_size)));
        }
    }
    return out;
}

namespace {

void check_shapes(const Matrix& w0, const CovarianceEstimate& c0, const Vector& a,
                  const Vector& b, const Vector& value) {
    if (w0.cols() != c0.dim() || a.size() != w0.cols() || b.size() != w0.cols() ||
        value.size() != w0.rows()) {
        throw InputError("rank-one update: inconsistent shapes");
    }
}

}  // namespace

UpdateDelta delta_r_rome(const Matrix& w0, const CovarianceEstimate& c0, const Vector& key,
                         const Vector& value) {
    check_shapes(w0, c0, key, key, value);
    const Vector c_inv_k = c0.solve(key);
    const double denom = key.dot(c_inv_k);
    if (!std::isfinite(denom) || std::abs(denom) <= kDegenerateDenominator) {
        throw DegenerateKey("r-ROME denominator k^T C0^-1 k is zero");
    }
    UpdateDelta d;
    d.method = EditMethod::r_rome;
    d.column = value - w0 * key;
    d.row = c_inv_k / denom;
    d.denominator = denom;
    return d;
}

UpdateDelta delta_original(const Matrix& w0, const CovarianceEstimate& c0, const Vector& key,
                           const Vector& key_original, const Vector& value) {
    check_shapes(w0, c0, key, key_original, value);
    const Vector c_inv_k = c0.solve(key);
    const double denom = c_inv_k.dot(key_original);
    if (!std::isfinite(denom) || denom == 0.0) {
        throw DegenerateKey("mixed denominator k^T C0^-1 k_o is exactly zero");
    }
    UpdateDelta d;
    d.method = EditMethod::original;
    d.column = value - w0 * key_original;
    d.row = c_inv_k / denom;
    d.denominator = denom;
    d.degenerate_denominator = std::abs(denom) < kDegenerateDenominator;
    return d;
}

UpdateDelta delta_p_rome(const Matrix& w0, const CovarianceEstimate& c0,
                         const Vector& key_original, const Vector& value) {
    UpdateDelta d = delta_r_rome(w0, c0, key_original, value);
    d.method = EditMethod::p_rome;
    return d;
}

void apply_edit_in_place(ModelParams& params, const UpdateDelta& delta) {
    Matrix& w = params.edited_matrix();
    if (delta.rows() != w.rows() || delta.cols() != w.cols()) {
        throw InputError("apply_edit: delta shape does not match the edited matrix");
    }
    w.noalias() += delta.column * delta.row.transpose();
}

ModelParams apply_edit(const ModelParams& params, const UpdateDelta& delta) {
    ModelParams out = params;
    apply_edit_in_place(out, delta);
    return out;
}

EditOutcome compute_edit(const ModelParams& params, const Fact& fact, EditMethod method,
                         const CovarianceEstimate& c0, const EditSettings& settings) {
    fact.validate(params.config);
    EditOutcome out;
    out.fact_id = fact.id;
    out.method = method;
    out.key_original = key_original(params, fact);
    out.key = settings.prefixes.empty() ? out.key_original
                                        : key_averaged(params, fact, settings.prefixes);
    if (settings.force_original_key_to_averaged) {
        out.key_original = out.key;
    }

    const Matrix& w0 = params.edited_matrix();
    switch (method) {
        case EditMethod::r_rome:
            out.value = solve_value(params, fact, out.key, settings.prefixes, settings.solver);
            out.delta = delta_r_rome(w0, c0, out.key.values, out.value.values);
            break;
        case EditMethod::original:
            out.value = solve_value(params, fact, out.key, settings.prefixes, settings.solver);
            out.delta = delta_original(w0, c0, out.key.values, out.key_original.values,
                                       out.value.values);
            break;
        case EditMethod::p_rome:
            out.value =
                solve_value(params, fact, out.key_original, settings.prefixes, settings.solver);
            out.delta = delta_p_rome(w0, c0, out.key_original.values, out.value.values);
            break;
    }
    out.delta_norm = delta_norm(out.delta);
    return out;
}

std::pair<ModelParams, EditOutcome> edit(const ModelParams& params, const Fact& fact,
                                         EditMethod method, const CovarianceEstimate& c0,
                                         const EditSettings& settings) {
    EditOutcome outcome = compute_edit(params, fact, method, c0, settings);
    const Vector pre = next_token_probs(params, fact.prompt);
    ModelParams edited = apply_edit(params, outcome.delta);
    const Vector post = next_token_probs(edited, fact.prompt);
    outcome.pre_target_new_prob = pre(fact.target_new);
    outcome.pre_target_old_prob = pre(fact.target_old);
    outcome.post_target_new_prob = post(fact.target_new);
    outcome.post_target_old_prob = post(fact.target_old);
    return {std::move(edited), std::move(outcome)};
}

}  // namespace romekit
