#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rmp/ensemble.hpp"
#include "rmp/hash.hpp"
#include "rmp/linalg.hpp"
#include "rmp/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

using namespace rmp;

TEST_CASE("counter rng determinism and stream independence") {
    CounterRng a(42), b(42), c(43);
    std::vector<std::uint64_t> va, vb;
    bool differs = false;
    for (int i = 0; i < 1000; ++i) {
        va.push_back(a.next_u64());
        vb.push_back(b.next_u64());
        if (va.back() != c.next_u64()) differs = true;
    }
    CHECK(va == vb);
    CHECK(differs);
    CHECK(CounterRng::derive_stream(1, 0) != CounterRng::derive_stream(1, 1));
    CHECK(CounterRng::derive_stream(1, 0) != CounterRng::derive_stream(2, 0));

    CounterRng u(7);
    double mean = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) mean += u.next_double();
    mean /= n;
    CHECK(std::abs(mean - 0.5) < 5.0 * (1.0 / std::sqrt(12.0)) / std::sqrt(n));

    CounterRng gz(9);
    double gm = 0.0, gv = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = gz.next_gaussian();
        gm += x;
        gv += x * x;
    }
    gm /= n;
    gv = gv / n - gm * gm;
    CHECK(std::abs(gm) < 5.0 / std::sqrt(n));
    CHECK(std::abs(gv - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

TEST_CASE("builtin ensembles") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    CHECK(oracle.is_finite());
    CHECK(oracle.atoms().size() == 2);
    CHECK(oracle.atoms()[0].prob == doctest::Approx(0.5));

    const auto d31 = MatrixEnsemble::builtin("diag31");
    CHECK(d31.atoms().size() == 1);

    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    double elogc = 0.0;
    for (const auto& a : sr.atoms())
        elogc += a.prob * 0.5 * std::log(std::abs(a.g.determinant()));
    CHECK(elogc == doctest::Approx(0.0).epsilon(1e-14));

    CHECK_THROWS_WITH_AS(MatrixEnsemble::builtin("nope"),
                         doctest::Contains("available"), InputError);
}

TEST_CASE("sampling determinism and atom frequencies") {
    const auto e = MatrixEnsemble::builtin("oracleA");
    CounterRng r1(CounterRng::derive_stream(5, 0)), r2(CounterRng::derive_stream(5, 0));
    int count0 = 0;
    for (int i = 0; i < 20000; ++i) {
        const int a = e.sample_atom_index(r1);
        CHECK(a == e.sample_atom_index(r2));
        count0 += a == 0 ? 1 : 0;
    }
    CHECK(std::abs(count0 / 20000.0 - 0.5) < 0.02);

    const auto det = MatrixEnsemble::builtin("diag31");
    CounterRng r3(1);
    CHECK((det.sample(r3) - det.atoms()[0].g).norm() == 0.0);
}

TEST_CASE("generator ensembles produce invertible matrices") {
    const auto pp = MatrixEnsemble::builtin("positive-perturbed");
    CounterRng rng(CounterRng::derive_stream(11, 0));
    for (int i = 0; i < 10000; ++i) {
        const Matrix g = pp.sample(rng);
        CHECK(std::abs(g.determinant()) > 0.0);
    }
    const auto ha = MatrixEnsemble::builtin("heavy-alpha");
    for (int i = 0; i < 1000; ++i) CHECK(size_N(ha.sample(rng)) >= 1.0);
}

TEST_CASE("ensemble JSON round-trip and schema validation") {
    const auto e = MatrixEnsemble::builtin("oracleA");
    const auto j = e.to_json();
    const auto back = MatrixEnsemble::from_json(j);
    CHECK(back.hash() == e.hash());
    CHECK(back.dim() == 2);

    nlohmann::json bad = j;
    bad["atoms"][0]["prob"] = 0.75;  // sums to 1.25
    CHECK_THROWS_AS(MatrixEnsemble::from_json(bad), InputError);

    const auto gen = MatrixEnsemble::builtin("heavy-alpha");
    const auto gback = MatrixEnsemble::from_json(gen.to_json());
    CHECK(gback.hash() == gen.hash());
}

TEST_CASE("moment check: finite support is exact") {
    const auto e = MatrixEnsemble::builtin("oracleA");
    const auto diag = moment_check(e, 0.5, 100, 1);
    double expect = 0.0;
    for (const auto& a : e.atoms()) expect += a.prob * std::pow(size_N(a.g), 0.5);
    CHECK(diag.empirical_mean == doctest::Approx(expect).epsilon(1e-12));
    CHECK(diag.std_error == 0.0);
    CHECK(diag.verdict == TailVerdict::kExponential);
    CHECK_THROWS_AS(moment_check(e, -1.0, 100, 1), InputError);
    CHECK_THROWS_AS(moment_check(e, 0.5, 10, 1), InputError);
}

TEST_CASE("moment check classifies exponential tails with rate about 1") {
    const auto e = MatrixEnsemble::builtin("scalar-exp");  // log N ~ Exp(1)
    const auto diag = moment_check(e, 0.2, 60000, 123);
    CHECK(diag.verdict == TailVerdict::kExponential);
    CHECK(diag.tail_exponent_fit == doctest::Approx(1.0).epsilon(0.25));
    // E[N^eps] = E[e^{eps W}] = 1/(1-eps) for W ~ Exp(1)
    CHECK(diag.empirical_mean ==
          doctest::Approx(1.0 / 0.8).epsilon(10.0 * diag.std_error / (1.0 / 0.8) + 0.05));
}

TEST_CASE("moment check classifies Weibull tails as subexponential") {
    const auto e = MatrixEnsemble::builtin("heavy-alpha");  // log N ~ Weibull(0.5)
    const auto diag = moment_check(e, 0.1, 60000, 321);
    CHECK(diag.verdict == TailVerdict::kSubexponential);
    CHECK(diag.tail_exponent_fit == doctest::Approx(0.5).epsilon(0.4));
}

TEST_CASE("proximality probe separates contracting and rotation ensembles") {
    const auto rot = MatrixEnsemble::builtin("rotation-irrational");
    const auto probe_rot = proximality_probe(rot, {4, 16, 64}, 50, 3);
    for (const auto& row : probe_rot.rows)
        CHECK(row.gap_median == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(probe_rot.flagged_violation);
    CHECK(!probe_rot.note.empty());

    const auto d31 = MatrixEnsemble::builtin("diag31");
    const auto probe_d = proximality_probe(d31, {2, 4, 8}, 3, 3);
    for (const auto& row : probe_d.rows)
        CHECK(row.gap_median ==
              doctest::Approx(std::pow(1.0 / 3.0, row.n)).epsilon(1e-9));

    const auto oracle = MatrixEnsemble::builtin("oracleA");
    const auto probe_o = proximality_probe(oracle, {4, 8, 16, 32}, 200, 3);
    CHECK(probe_o.contraction_trend);
    CHECK_FALSE(probe_o.flagged_violation);
    // gap median should decay roughly geometrically
    CHECK(probe_o.rows.back().gap_median < 0.1 * probe_o.rows.front().gap_median);
}
