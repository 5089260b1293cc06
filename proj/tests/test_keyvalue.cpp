#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "test_support.hpp"

using namespace romekit;
using romekit::test::shared_workbench;

namespace {

Fact simple_fact() {
    Fact f;
    f.id = 1;
    f.prompt = {140, 160, 12};
    f.subject_last_index = 2;
    f.target_new = 200;
    f.target_old = 201;
    return f;
}

Token argmax_at(const Matrix& logits, int row) {
    Eigen::Index best = 0;
    logits.row(row).maxCoeff(&best);
    return static_cast<Token>(best);
}

}  // namespace

TEST_CASE("make_prefixes") {
    CHECK(make_prefixes(0, 256, 3).empty());
    const auto a = make_prefixes(20, 256, 3, 2, 5);
    CHECK(a.size() == 20);
    CHECK(make_prefixes(20, 256, 3, 2, 5) == a);
    CHECK(make_prefixes(20, 256, 4, 2, 5) != a);
    for (const auto& p : a) {
        CHECK(p.size() >= 2);
        CHECK(p.size() <= 5);
        for (Token t : p) {
            CHECK(t >= 0);
            CHECK(t < 256);
        }
    }
    CHECK_THROWS_AS(make_prefixes(-1, 256, 3), InputError);
    CHECK_THROWS_AS(make_prefixes(2, 256, 3, 4, 3), InputError);
}

TEST_CASE("key_original is the traced key at the subject position") {
    const ModelParams& p = shared_workbench().base;
    const Fact f = simple_fact();
    const KeyVector k = key_original(p, f);
    CHECK(k.kind == KeyKind::original);
    const ForwardTrace tr = forward(p, f.prompt);
    const Vector expected =
        tr.layers[static_cast<std::size_t>(p.config.edit_layer)].key.row(2).transpose();
    CHECK((k.values - expected).norm() == 0.0);
    CHECK((prefixed_key(p, f, TokenSeq{}) - expected).norm() == 0.0);
}

TEST_CASE("key_averaged properties") {
    const ModelParams& p = shared_workbench().base;
    const Fact f = simple_fact();

    const std::vector<TokenSeq> empty_prefix{TokenSeq{}};
    CHECK((key_averaged(p, f, empty_prefix).values - key_original(p, f).values).norm() < 1e-15);

    const std::vector<TokenSeq> same{{7, 8}, {7, 8}, {7, 8}};
    const std::vector<TokenSeq> one{{7, 8}};
    CHECK((key_averaged(p, f, same).values - key_averaged(p, f, one).values).norm() < 1e-12);

    const auto prefixes = make_prefixes(5, 256, 17);
    const KeyVector avg = key_averaged(p, f, prefixes);
    CHECK(avg.kind == KeyKind::averaged);
    CHECK(avg.prefix_count == 5);
    Vector mean = Vector::Zero(p.config.d_mlp);
    for (const auto& pre : prefixes) {
        mean += prefixed_key(p, f, pre) / 5.0;
    }
    CHECK((avg.values - mean).cwiseAbs().maxCoeff() < 1e-12);

    auto shuffled = prefixes;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[0], shuffled[2]);
    CHECK((key_averaged(p, f, shuffled).values - avg.values).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(key_averaged(p, f, std::vector<TokenSeq>{}), InputError);
    const std::vector<TokenSeq> too_long{TokenSeq(62, 1)};
    CHECK_THROWS_AS(key_averaged(p, f, too_long), InputError);
}

TEST_CASE("solve_value: a large proximity weight pins v to its start") {
    const Workbench& wb = shared_workbench();
    const Fact f = simple_fact();
    const KeyVector k = key_original(wb.base, f);
    SolverSettings s;
    s.proximity = 1e6;
    const ValueVector v = solve_value(wb.base, f, k, wb.prefixes, s);
    CHECK((v.values - v.initial).norm() < 1e-3 * v.initial.norm());
    CHECK((v.initial - wb.base.edited_matrix() * k.values).norm() < 1e-12);
}

TEST_CASE("solve_value: the objective never decreases across steps") {
    const Workbench& wb = shared_workbench();
    const Fact f = simple_fact();
    const KeyVector k = key_averaged(wb.base, f, wb.prefixes);
    double previous = -1e300;
    for (int steps = 0; steps <= 12; ++steps) {
        SolverSettings s;
        s.steps = steps;
        const ValueVector v = solve_value(wb.base, f, k, wb.prefixes, s);
        CHECK(v.final_objective >= previous);
        CHECK(v.solver_steps <= steps);
        previous = v.final_objective;
    }
    SolverSettings s;
    const ValueVector v = solve_value(wb.base, f, k, wb.prefixes, s);
    CHECK(v.final_target_logprob > v.initial_target_logprob);
    CHECK(v.final_objective >= v.initial_objective);
}

TEST_CASE("solve_value: injected values produce target_new on the edit prompt") {
    const Workbench& wb = shared_workbench();
    const SyntheticFactSet set = make_dataset(wb, 50);
    int hits = 0;
    for (const auto& f : set.facts) {
        const KeyVector k = key_original(wb.base, f);
        const ValueVector v = solve_value(wb.base, f, k, wb.prefixes, wb.config.solver);
        CHECK(v.final_target_logprob > v.initial_target_logprob);
        const ForwardTrace tr = forward(wb.base, f.prompt, Injection{f.subject_last_index, v.values});
        if (argmax_at(tr.logits, static_cast<int>(f.prompt.size()) - 1) == f.target_new) {
            ++hits;
        }
    }
    CHECK(hits >= 48);
}

TEST_CASE("solve_value input errors") {
    const Workbench& wb = shared_workbench();
    Fact f = simple_fact();
    const KeyVector k = key_original(wb.base, f);
    KeyVector bad = k;
    bad.values = Vector::Zero(3);
    CHECK_THROWS_AS(solve_value(wb.base, f, bad, wb.prefixes, wb.config.solver), InputError);
    SolverSettings s;
    s.step_size = 0.0;
    CHECK_THROWS_AS(solve_value(wb.base, f, k, wb.prefixes, s), ConfigError);
    f.target_new = 999;
    CHECK_THROWS_AS(solve_value(wb.base, f, k, wb.prefixes, wb.config.solver), InputError);
}

TEST_CASE("Fact::validate") {
    const ModelConfig cfg;
    Fact f = simple_fact();
    CHECK_NOTHROW(f.validate(cfg));

    Fact g = f;
    g.subject_last_index = 3;
    CHECK_THROWS_AS(g.validate(cfg), InputError);
    g = f;
    g.subject_length = 4;
    CHECK_THROWS_AS(g.validate(cfg), InputError);
    g = f;
    g.target_new = g.target_old;
    CHECK_THROWS_AS(g.validate(cfg), InputError);
    g = f;
    g.target_old = 256;
    CHECK_THROWS_AS(g.validate(cfg), InputError);
    g = f;
    g.neighborhood.push_back({TokenSeq{150, 12, 130}, 5});
    CHECK_THROWS_AS(g.validate(cfg), InputError);
    g = f;
    g.neighborhood.push_back({TokenSeq{150, 13, 130}, 5});
    CHECK_NOTHROW(g.validate(cfg));
    g.paraphrases.push_back(TokenSeq{300});
    CHECK_THROWS_AS(g.validate(cfg), InputError);
}
