#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace romekit;
using romekit::test::random_matrix;
using romekit::test::random_tokens;
using romekit::test::shared_workbench;

namespace {

const SyntheticFactSet& facts50() {
    static const SyntheticFactSet set = make_dataset(shared_workbench(), 50);
    return set;
}

}  // namespace

TEST_CASE("delta_norm") {
    Matrix d(2, 2);
    d << 1, 0, 0, 0;
    CHECK(delta_norm(d) == 0.25);
    CHECK(delta_norm(Matrix::Zero(3, 4)) == 0.0);

    UpdateDelta u;
    u.column = Vector::Ones(2);
    u.row = Vector::Ones(3);
    CHECK(delta_norm(u) == doctest::Approx(std::sqrt(6.0) / 6.0).epsilon(1e-15));

    std::mt19937_64 rng(4);
    const Matrix m = random_matrix(rng, 5, 7);
    std::uniform_real_distribution<double> scale(-50.0, 50.0);
    for (int i = 0; i < 20; ++i) {
        const double a = scale(rng);
        CHECK(delta_norm(Matrix(a * m)) ==
              doctest::Approx(std::abs(a) * delta_norm(m)).epsilon(1e-12));
    }
}

TEST_CASE("normalized_entropy reference values") {
    const std::vector<TokenSeq> repeated{TokenSeq(30, 9), TokenSeq(12, 9)};
    CHECK(normalized_entropy(repeated, 256) == 0.0);

    std::vector<TokenSeq> all_tokens{TokenSeq{}};
    for (Token t = 0; t < 256; ++t) all_tokens[0].push_back(t);
    CHECK(normalized_entropy(all_tokens, 256) == doctest::Approx(1.0).epsilon(1e-12));

    std::mt19937_64 rng(2);
    const std::vector<TokenSeq> uniform{random_tokens(rng, 60000, 256)};
    CHECK(std::abs(normalized_entropy(uniform, 256) - 1.0) < 0.02);

    const std::vector<TokenSeq> half{TokenSeq{3, 4, 3, 4, 3, 4}};
    CHECK(std::abs(normalized_entropy(half, 16) - 0.25) < 1e-12);

    CHECK_THROWS_AS(normalized_entropy(std::vector<TokenSeq>{}, 16), InputError);
    CHECK_THROWS_AS(normalized_entropy(std::vector<TokenSeq>{TokenSeq{}}, 16), InputError);
    CHECK_THROWS_AS(normalized_entropy(std::vector<TokenSeq>{TokenSeq{16}}, 16), InputError);
}

TEST_CASE("normalized_entropy bounds and invariances") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const int vocab = 16 + static_cast<int>(uniform_index(rng, 100));
        const int distinct = 1 + static_cast<int>(uniform_index(rng, 6));
        std::vector<TokenSeq> samples;
        for (int s = 0; s < 4; ++s) {
            samples.push_back(random_tokens(rng, 1 + static_cast<int>(uniform_index(rng, 20)), distinct));
        }
        const double h = normalized_entropy(samples, vocab);
        CHECK(h >= 0.0);
        CHECK(h <= 1.0);

        bool single = true;
        for (const auto& s : samples)
            for (Token t : s) single = single && t == samples[0][0];
        CHECK((h == 0.0) == single);

        auto reordered = samples;
        std::reverse(reordered.begin(), reordered.end());
        for (auto& s : reordered) std::reverse(s.begin(), s.end());
        CHECK(normalized_entropy(reordered, vocab) == doctest::Approx(h).epsilon(1e-12));

        auto relabeled = samples;
        const Token shift = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(vocab)));
        for (auto& s : relabeled)
            for (auto& t : s) t = static_cast<Token>((t + shift) % vocab);
        CHECK(normalized_entropy(relabeled, vocab) == doctest::Approx(h).epsilon(1e-12));
    }
}

TEST_CASE("classify_collapse") {
    const CollapseThresholds th;
    const std::vector<double> prior{1.0, 2.0, 3.0};
    CHECK(classify_collapse(0.05, 2.0, prior, th));
    CHECK_FALSE(classify_collapse(0.8, 2.0, prior, th));
    CHECK(classify_collapse(0.5, 2000.0, prior, th));
    CHECK_FALSE(classify_collapse(std::nullopt, 2.0, prior, th));
    CHECK(classify_collapse(std::nullopt, 2000.0, prior, th));
    CHECK_FALSE(classify_collapse(0.5, 1e9, std::vector<double>{}, th));
    CHECK(median(std::vector<double>{4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK_THROWS_AS(median({}), InputError);
}

TEST_CASE("key geometry helpers") {
    const CovarianceEstimate c0(Matrix::Identity(2, 2), 1, 0.0);
    Vector k(2), ko(2);
    k << 2, 0;
    ko << 1, 1;
    CHECK(inflation_ratio(c0, k, ko) == doctest::Approx(0.5));
    CHECK(key_cosine(c0, k, ko) == doctest::Approx(1.0 / std::sqrt(2.0)));
    CHECK_THROWS_AS(key_cosine(c0, Vector::Zero(2), ko), DegenerateKey);
}

TEST_CASE("separation: adversarial original edits outgrow every r-ROME edit") {
    const Workbench& wb = shared_workbench();
    double max_r = 0.0;
    double min_adv_original = 1e300;
    int adversarial = 0;
    for (const auto& f : facts50().facts) {
        const EditOutcome r = compute_edit(wb.base, f, EditMethod::r_rome, wb.c0, wb.edit_settings());
        max_r = std::max(max_r, r.delta_norm);
        if (f.adversarial) {
            ++adversarial;
            const EditOutcome o =
                compute_edit(wb.base, f, EditMethod::original, wb.c0, wb.edit_settings());
            min_adv_original = std::min(min_adv_original, o.delta_norm);
        }
    }
    CHECK(adversarial == 5);
    CHECK(min_adv_original > max_r);
}

TEST_CASE("generation entropy drops after a collapse-inducing edit") {
    const Workbench& wb = shared_workbench();
    const GenerationSample before =
        generation_entropy(wb.base, wb.entropy_probes, wb.config.entropy_steps);
    CHECK(before.continuations.size() == wb.entropy_probes.size());
    CHECK(before.continuations[0].size() == static_cast<std::size_t>(wb.config.entropy_steps));
    CHECK(before.normalized_entropy > 0.2);

    ModelParams model = wb.base;
    for (const auto& f : facts50().facts) {
        if (!f.adversarial) continue;
        model = edit(model, f, EditMethod::original, wb.c0, wb.edit_settings()).first;
    }
    const GenerationSample after = generation_entropy(model, wb.entropy_probes, wb.config.entropy_steps);
    CHECK(after.normalized_entropy < 0.2);
    CHECK_THROWS_AS(generation_entropy(wb.base, std::vector<TokenSeq>{}, 5), InputError);
}
