#pragma once

#include <cmath>
#include <random>

#include "romekit/harness.hpp"

namespace romekit::test {

inline TokenSeq random_tokens(std::mt19937_64& rng, int length, int vocab) {
    TokenSeq seq(static_cast<std::size_t>(length));
    for (auto& t : seq) {
        t = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(vocab)));
    }
    return seq;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        v(i) = dist(rng);
    }
    return v;
}

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                            double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = dist(rng);
        }
    }
    return m;
}

/// Random symmetric positive definite matrix A A^T / n + eps I.
inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index n, double eps = 0.1) {
    const Matrix a = random_matrix(rng, n, n);
    return a * a.transpose() / static_cast<double>(n) + eps * Matrix::Identity(n, n);
}

/// Central finite-difference gradient of f at x.
template <class F>
Vector fd_gradient(F&& f, const Vector& x, double h) {
    Vector g(x.size());
    Vector xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = xp(i);
        xp(i) = orig + h;
        const double up = f(xp);
        xp(i) = orig - h;
        const double down = f(xp);
        xp(i) = orig;
        g(i) = (up - down) / (2.0 * h);
    }
    return g;
}

/// Default workbench for seed 1, built once per test binary.
inline const Workbench& shared_workbench() {
    static const Workbench wb = [] {
        RunConfig cfg;
        cfg.seed = 1;
        return make_workbench(cfg);
    }();
    return wb;
}

}  // namespace romekit::test
