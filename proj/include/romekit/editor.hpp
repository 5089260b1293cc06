#pragma once

// Rank-one updates of the edit layer's output projection.
//
//   r-ROME:    delta = (v - W k) (C^-1 k)^T / (k^T C^-1 k)          k = prefix-averaged key
//   p-ROME:    same formula with the bare-prompt key k_o throughout
//   original:  delta = (v - W k_o) (C^-1 k)^T / (k^T C^-1 k_o)      mixes both keys
//
// The mixed denominator of `original` can approach zero while the others
// cannot, which is what inflates the update norm.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>

#include "romekit/common.hpp"
#include "romekit/keyvalue.hpp"
#include "romekit/tiny_lm.hpp"

namespace romekit {

enum class EditMethod { original, r_rome, p_rome };

std::string_view to_string(EditMethod method);
/// Accepts "original", "r-rome", "p-rome". Throws ConfigError otherwise.
EditMethod parse_edit_method(std::string_view text);

/// Ridge added to the key second moment. The effective lambda is
/// `absolute + relative * trace(raw) / d_mlp`.
struct Ridge {
    double absolute = 0.0;
    double relative = 1e-4;

    static Ridge fixed(double lambda) { return Ridge{lambda, 0.0}; }
    static Ridge scaled(double factor) { return Ridge{0.0, factor}; }
};

class CovarianceEstimate {
public:
    CovarianceEstimate() = default;
    /// Factorizes `c0`; throws NumericalError if it is not positive definite.
    CovarianceEstimate(Matrix c0, std::size_t sample_count, double ridge);

    const Matrix& matrix() const { return c0_; }
    std::size_t sample_count() const { return samples_; }
    double ridge() const { return ridge_; }
    double min_eigenvalue() const { return min_eig_; }
    Eigen::Index dim() const { return c0_.rows(); }

    /// C0^-1 x via the Cholesky factor.
    Vector solve(const Vector& x) const;
    /// x^T C0^-1 y.
    double inner(const Vector& x, const Vector& y) const;

private:
    Matrix c0_;
    Eigen::LLT<Matrix> llt_;
    std::size_t samples_ = 0;
    double ridge_ = 0.0;
    double min_eig_ = 0.0;
};

/// Uncentered second moment of edit-layer keys over every corpus position,
/// plus ridge * I.
CovarianceEstimate estimate_c0(const ModelParams& params, std::span<const TokenSeq> corpus,
                               const Ridge& ridge);

/// Random token sequences used as the second-moment corpus.
std::vector<TokenSeq> make_corpus(int sequences, int length, int vocab_size, std::uint64_t seed);

struct UpdateDelta {
    Vector column;  // d_model
    Vector row;     // d_mlp
    EditMethod method = EditMethod::r_rome;
    double denominator = 0.0;
    bool degenerate_denominator = false;

    Matrix assemble() const { return column * row.transpose(); }
    Eigen::Index rows() const { return column.size(); }
    Eigen::Index cols() const { return row.size(); }
};

/// Below this magnitude the mixed denominator of `original` is flagged.
inline constexpr double kDegenerateDenominator = 1e-10;

UpdateDelta delta_r_rome(const Matrix& w0, const CovarianceEstimate& c0, const Vector& key,
                         const Vector& value);
/// Reproduces the asymmetric implementation; a tiny denominator is flagged,
/// never masked.
UpdateDelta delta_original(const Matrix& w0, const CovarianceEstimate& c0, const Vector& key,
                           const Vector& key_original, const Vector& value);
UpdateDelta delta_p_rome(const Matrix& w0, const CovarianceEstimate& c0,
                         const Vector& key_original, const Vector& value);

/// Returns a copy of `params` with delta added to the edited matrix.
ModelParams apply_edit(const ModelParams& params, const UpdateDelta& delta);
/// In-place variant for callers that own the params exclusively.
void apply_edit_in_place(ModelParams& params, const UpdateDelta& delta);

struct EditSettings {
    std::vector<TokenSeq> prefixes;
    SolverSettings solver;
    /// Test hook: use the averaged key in place of the bare-prompt key, which
    /// turns the asymmetric update into the symmetric one.
    bool force_original_key_to_averaged = false;
};

struct EditOutcome {
    int fact_id = 0;
    EditMethod method = EditMethod::r_rome;
    UpdateDelta delta;
    double delta_norm = 0.0;
    KeyVector key;           // k_e (averaged)
    KeyVector key_original;  // k_e^o
    ValueVector value;
    double pre_target_new_prob = 0.0;
    double post_target_new_prob = 0.0;
    double pre_target_old_prob = 0.0;
    double post_target_old_prob = 0.0;
};

/// Keys, value, update and application for one fact.
std::pair<ModelParams, EditOutcome> edit(const ModelParams& params, const Fact& fact,
                                         EditMethod method, const CovarianceEstimate& c0,
                                         const EditSettings& settings);

/// Same pipeline without applying the update.
EditOutcome compute_edit(const ModelParams& params, const Fact& fact, EditMethod method,
                         const CovarianceEstimate& c0, const EditSettings& settings);

}  // namespace romekit
