#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "test_support.hpp"

using namespace romekit;
using romekit::test::random_matrix;
using romekit::test::random_spd;
using romekit::test::random_vector;
using romekit::test::shared_workbench;

namespace {

Vector vec2(double a, double b) {
    Vector v(2);
    v << a, b;
    return v;
}

CovarianceEstimate identity_c0(Eigen::Index n) {
    return CovarianceEstimate(Matrix::Identity(n, n), 1, 0.0);
}

const SyntheticFactSet& shared_facts() {
    static const SyntheticFactSet set = make_dataset(shared_workbench(), 20);
    return set;
}

// Minimum trace(D C D^T) subject to (W0 + D) k = v, solved row by row from
// the KKT system [[2C, k], [k^T, 0]] [d; mu] = [0; r].
Matrix kkt_min_norm(const Matrix& w0, const Matrix& c, const Vector& k, const Vector& v) {
    const Eigen::Index n = c.rows();
    Matrix kkt = Matrix::Zero(n + 1, n + 1);
    kkt.topLeftCorner(n, n) = 2.0 * c;
    kkt.block(0, n, n, 1) = k;
    kkt.block(n, 0, 1, n) = k.transpose();
    const Eigen::FullPivLU<Matrix> lu(kkt);
    const Vector r = v - w0 * k;
    Matrix d(w0.rows(), n);
    for (Eigen::Index i = 0; i < w0.rows(); ++i) {
        Vector rhs = Vector::Zero(n + 1);
        rhs(n) = r(i);
        d.row(i) = lu.solve(rhs).head(n).transpose();
    }
    return d;
}

}  // namespace

TEST_CASE("parse_edit_method") {
    CHECK(parse_edit_method("original") == EditMethod::original);
    CHECK(parse_edit_method("r-rome") == EditMethod::r_rome);
    CHECK(parse_edit_method("p-rome") == EditMethod::p_rome);
    CHECK(to_string(EditMethod::p_rome) == "p-rome");
    CHECK_THROWS_AS(parse_edit_method("rome"), ConfigError);
}

TEST_CASE("estimate_c0 from a single key") {
    const ModelParams& p = shared_workbench().base;
    const std::vector<TokenSeq> corpus{TokenSeq{77}};
    const double lambda = 0.5;
    const CovarianceEstimate c0 = estimate_c0(p, corpus, Ridge::fixed(lambda));
    const Vector k =
        forward(p, corpus[0]).layers[static_cast<std::size_t>(p.config.edit_layer)].key.row(0).transpose();
    const Matrix expected = k * k.transpose() + lambda * Matrix::Identity(k.size(), k.size());
    CHECK((c0.matrix() - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(c0.sample_count() == 1);
    CHECK(c0.ridge() == lambda);

    CHECK_THROWS_AS(estimate_c0(p, std::vector<TokenSeq>{}, Ridge{}), InputError);
    CHECK_THROWS_AS(estimate_c0(p, corpus, Ridge::fixed(-1.0)), InputError);
    CHECK_THROWS_AS(estimate_c0(p, corpus, Ridge::fixed(0.0)), InputError);
}

TEST_CASE("workbench C0 is symmetric and bounded below by its ridge") {
    const CovarianceEstimate& c0 = shared_workbench().c0;
    const Matrix& m = c0.matrix();
    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
    CHECK(eig.eigenvalues().minCoeff() >= c0.ridge() - 1e-9);
    CHECK(c0.min_eigenvalue() > 0.0);
    std::mt19937_64 rng(1);
    const Vector x = random_vector(rng, m.rows());
    CHECK((m * c0.solve(x) - x).norm() < 1e-8 * x.norm());
}

TEST_CASE("CovarianceEstimate rejects non-PD matrices") {
    Matrix bad = Matrix::Identity(2, 2);
    bad(1, 1) = -1.0;
    CHECK_THROWS_AS(CovarianceEstimate(bad, 1, 0.0), NumericalError);
    CHECK_THROWS_AS(CovarianceEstimate(Matrix::Zero(2, 3), 1, 0.0), InputError);
}

TEST_CASE("delta_r_rome 2x2 example") {
    const Matrix w0 = Matrix::Identity(2, 2);
    const UpdateDelta d = delta_r_rome(w0, identity_c0(2), vec2(1, 0), vec2(2, 0));
    Matrix expected(2, 2);
    expected << 1, 0, 0, 0;
    CHECK((d.assemble() - expected).cwiseAbs().maxCoeff() == 0.0);
    CHECK(d.denominator == 1.0);

    const UpdateDelta zero = delta_r_rome(w0, identity_c0(2), vec2(0.3, 0.7), vec2(0.3, 0.7));
    CHECK(zero.assemble().cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(delta_r_rome(w0, identity_c0(2), vec2(0, 0), vec2(1, 0)), DegenerateKey);
    CHECK_THROWS_AS(delta_r_rome(w0, identity_c0(3), vec2(1, 0), vec2(1, 0)), InputError);
}

TEST_CASE("delta_original 2x2 example") {
    const Matrix w0 = Matrix::Identity(2, 2);
    const Vector k = vec2(1, 0);
    const Vector ko = vec2(0.1, 1);
    const Vector v = vec2(2, 0);
    const UpdateDelta imp = delta_original(w0, identity_c0(2), k, ko, v);
    const UpdateDelta sym = delta_r_rome(w0, identity_c0(2), k, v);
    CHECK(imp.denominator == doctest::Approx(0.1).epsilon(1e-15));
    CHECK_FALSE(imp.degenerate_denominator);
    // Hand computation: (v - ko) k^T / 0.1 = [[19, 0], [-10, 0]].
    Matrix expected(2, 2);
    expected << 19, 0, -10, 0;
    CHECK((imp.assemble() - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(imp.assemble().norm() >= 10.0 * sym.assemble().norm());
    const Vector residual = (w0 + imp.assemble()) * k - v;
    CHECK(residual.norm() > 1e-3);

    const UpdateDelta tiny = delta_original(w0, identity_c0(2), k, vec2(1e-12, 1), v);
    CHECK(tiny.degenerate_denominator);
    CHECK(tiny.assemble().allFinite());
    CHECK_THROWS_AS(delta_original(w0, identity_c0(2), k, vec2(0, 1), v), DegenerateKey);
}

TEST_CASE("exactness, rank one and reduction on random instances") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        const Eigen::Index rows = 6, cols = 9;
        const Matrix w0 = random_matrix(rng, rows, cols);
        const CovarianceEstimate c0(random_spd(rng, cols), 1, 0.0);
        const Vector k = random_vector(rng, cols);
        const Vector ko = random_vector(rng, cols);
        const Vector v = random_vector(rng, rows);

        const UpdateDelta r = delta_r_rome(w0, c0, k, v);
        CHECK(((w0 + r.assemble()) * k - v).norm() / v.norm() < 1e-8);
        const UpdateDelta p = delta_p_rome(w0, c0, ko, v);
        CHECK(((w0 + p.assemble()) * ko - v).norm() / v.norm() < 1e-8);
        CHECK(p.method == EditMethod::p_rome);
        CHECK(p.assemble() == delta_r_rome(w0, c0, ko, v).assemble());
        CHECK((p.assemble() - r.assemble()).norm() > 1e-6);

        const UpdateDelta o = delta_original(w0, c0, k, ko, v);
        for (const UpdateDelta* d : {&r, &p, &o}) {
            const Eigen::JacobiSVD<Matrix> svd(d->assemble());
            const Vector s = svd.singularValues();
            CHECK(s(1) < 1e-8 * s(0));
        }

        const UpdateDelta reduced = delta_original(w0, c0, k, k, v);
        CHECK((reduced.assemble() - r.assemble()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("r-ROME update is the minimum C0-norm solution") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::Index rows = 3, cols = 5;
        const Matrix w0 = random_matrix(rng, rows, cols);
        const Matrix c = random_spd(rng, cols);
        const Vector k = random_vector(rng, cols);
        const Vector v = random_vector(rng, rows);
        const UpdateDelta d = delta_r_rome(w0, CovarianceEstimate(c, 1, 0.0), k, v);
        const Matrix oracle = kkt_min_norm(w0, c, k, v);
        CHECK((d.assemble() - oracle).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("inflation law: update norm scales inversely with the mixed denominator") {
    std::mt19937_64 rng(44);
    const Eigen::Index rows = 4, cols = 6;
    const Matrix w0 = random_matrix(rng, rows, cols);
    const Matrix c = random_spd(rng, cols);
    const CovarianceEstimate c0(c, 1, 0.0);
    const Vector k = random_vector(rng, cols);
    const Vector r = random_vector(rng, rows);
    // Build a C0^-1-orthonormal pair (e1 along k, e2 orthogonal to it).
    const Vector e1 = k / std::sqrt(c0.inner(k, k));
    Vector e2 = random_vector(rng, cols);
    e2 -= c0.inner(e1, e2) * e1;
    e2 /= std::sqrt(c0.inner(e2, e2));

    std::vector<double> xs, ys;
    for (int i = 0; i < 25; ++i) {
        const double theta = 0.1 + (std::numbers::pi / 2 - 0.1 - 1e-4) * i / 24.0;
        const Vector ko = std::cos(theta) * e1 + std::sin(theta) * e2;
        const Vector v = w0 * ko + r;  // numerator held fixed
        const UpdateDelta d = delta_original(w0, c0, k, ko, v);
        xs.push_back(std::log(std::abs(d.denominator)));
        ys.push_back(std::log(d.assemble().norm()));
    }
    const double n = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(slope == doctest::Approx(-1.0).epsilon(0.05));
}

TEST_CASE("apply_edit") {
    const ModelParams& p = shared_workbench().base;
    std::mt19937_64 rng(5);
    UpdateDelta d;
    d.column = random_vector(rng, p.config.d_model);
    d.row = random_vector(rng, p.config.d_mlp);
    const ModelParams q = apply_edit(p, d);
    UpdateDelta neg = d;
    neg.column = -d.column;
    const ModelParams back = apply_edit(q, neg);
    CHECK((back.edited_matrix() - p.edited_matrix()).cwiseAbs().maxCoeff() < 1e-12);
    for (int l = 0; l < p.config.n_layers; ++l) {
        if (l != p.config.edit_layer) {
            CHECK(q.layer_checksum(l) == p.layer_checksum(l));
        }
    }
    CHECK(q.layer_checksum(p.config.edit_layer) != p.layer_checksum(p.config.edit_layer));

    UpdateDelta zero;
    zero.column = Vector::Zero(p.config.d_model);
    zero.row = Vector::Zero(p.config.d_mlp);
    CHECK(apply_edit(p, zero).checksum() == p.checksum());

    UpdateDelta wrong;
    wrong.column = Vector::Zero(3);
    wrong.row = Vector::Zero(p.config.d_mlp);
    CHECK_THROWS_AS(apply_edit(p, wrong), InputError);
}

TEST_CASE("edit: r-ROME installs target_new") {
    const Workbench& wb = shared_workbench();
    int checked = 0;
    for (const auto& f : shared_facts().facts) {
        if (f.adversarial) continue;
        const auto [post, outcome] = edit(wb.base, f, EditMethod::r_rome, wb.c0, wb.edit_settings());
        CHECK(greedy_next(post, f.prompt) == f.target_new);
        CHECK(outcome.post_target_new_prob > outcome.pre_target_new_prob);
        const Vector achieved = post.edited_matrix() * outcome.key.values;
        CHECK((achieved - outcome.value.values).norm() / outcome.value.values.norm() < 1e-8);
        if (++checked == 5) break;
    }
    CHECK(checked == 5);
}

TEST_CASE("edit: forcing the bare key to the averaged key makes original equal r-ROME") {
    const Workbench& wb = shared_workbench();
    EditSettings s = wb.edit_settings();
    s.force_original_key_to_averaged = true;
    const Fact& f = shared_facts().facts.front();
    const EditOutcome o = compute_edit(wb.base, f, EditMethod::original, wb.c0, s);
    const EditOutcome r = compute_edit(wb.base, f, EditMethod::r_rome, wb.c0, s);
    CHECK((o.delta.assemble() - r.delta.assemble()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(o.delta_norm == doctest::Approx(r.delta_norm).epsilon(1e-12));
}

TEST_CASE("edit: adversarial facts inflate the original update") {
    const Workbench& wb = shared_workbench();
    int adversarial = 0;
    for (const auto& f : shared_facts().facts) {
        if (!f.adversarial) continue;
        ++adversarial;
        const EditOutcome o = compute_edit(wb.base, f, EditMethod::original, wb.c0, wb.edit_settings());
        const EditOutcome r = compute_edit(wb.base, f, EditMethod::r_rome, wb.c0, wb.edit_settings());
        CHECK(o.delta_norm > r.delta_norm);
        CHECK(std::abs(o.delta.denominator) < r.delta.denominator);
    }
    CHECK(adversarial == 2);
}
