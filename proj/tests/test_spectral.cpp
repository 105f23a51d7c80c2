#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracle_helpers.hpp"

#include "rmp/lab.hpp"
#include "rmp/report.hpp"
#include "rmp/spectral.hpp"

#include <cmath>
#include <filesystem>

using namespace rmp;
using rmp::testing::enumerate_products;

namespace {
constexpr double kPi = 3.14159265358979323846264338327950288;
constexpr double kLog2 = 0.69314718055994530941723212145818;
}  // namespace

TEST_CASE("transfer operator rows sum to the tilted atom mass") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 512);
    for (const double s : {0.0, 0.15, -0.2}) {
        const auto op = engine.build_ps(s);
        const auto sums = op.row_sums();
        for (int j = 0; j < op.M; ++j) {
            double expect = 0.0;
            const auto x = engine.grid().point(j);
            for (const auto& atom : oracle.atoms())
                expect += atom.prob * std::exp(s * cocycle(atom.g, x));
            CHECK(std::abs(sums[static_cast<std::size_t>(j)] - expect) <=
                  1e-12 * std::max(1.0, expect));
        }
    }
}

TEST_CASE("stationary eigendata: kappa(0) = 1 and r0 = 1 for the builtins") {
    for (const char* name : {"oracleA", "scalar-rotation", "diag31",
                             "rotation-irrational"}) {
        const auto e = MatrixEnsemble::builtin(name);
        SpectralEngine engine(e, 512);
        const auto& stat = engine.stationary();
        CHECK(std::abs(stat.kappa - 1.0) <= 1e-8);
        for (const double v : stat.r.values) CHECK(std::abs(v - 1.0) <= 1e-8);
        double mass = 0.0;
        for (const double v : stat.nu) mass += v;
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("eigen-residual of the dominant pair") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 1024);
    for (const double s : {0.0, 0.2, -0.25}) {
        const auto op = engine.build_ps(s);
        const auto eig = engine.dominant_eig(op);
        std::vector<double> pr;
        op.apply(eig.r.values, pr);
        double resid = 0.0;
        for (int j = 0; j < op.M; ++j)
            resid = std::max(resid, std::abs(pr[static_cast<std::size_t>(j)] -
                                             eig.kappa *
                                                 eig.r.values[static_cast<std::size_t>(j)]));
        CHECK(resid <= 1e-8 * eig.kappa);
        CHECK(eig.gap > 0.05);
    }
}

TEST_CASE("scalar-rotation: kappa(s) = E[c^s] exactly") {
    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    SpectralEngine engine(sr, 512);
    for (const double s : {1.0, 0.5, -0.7}) {
        const auto eig = engine.dominant_eig(engine.build_ps(s));
        const double expect = 0.5 * (std::pow(2.0, s) + std::pow(2.0, -s));
        CHECK(std::abs(eig.kappa - expect) <= 1e-6 * expect);
    }
}

TEST_CASE("scalar-rotation model: cumulants of log c and vanishing zeta(0)") {
    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    SpectralEngine engine(sr, 512);
    const auto model = engine.fit_lambda(0.0, 13);
    CHECK(std::abs(model.gammas[0]) <= 1e-6);                  // gamma1 = E log c = 0
    CHECK(std::abs(model.gammas[1] - kLog2 * kLog2) <= 1e-4);  // gamma2 = (log 2)^2
    CHECK(std::abs(model.gammas[2]) <= 1e-4);                  // gamma3 = 0 by symmetry
    CHECK(std::abs(model.zeta(0.0)) <= 1e-6);
    CHECK(model.sigma == doctest::Approx(std::sqrt(model.gammas[1])));
    // gamma4 of log cosh(s log 2) is -2 (log 2)^4
    CHECK(model.gammas[3] ==
          doctest::Approx(-2.0 * std::pow(kLog2, 4)).epsilon(2e-2));
    // Lambda evaluations against log cosh
    for (const double s : {0.05, 0.21, -0.3}) {
        CHECK(model.lambda(s) ==
              doctest::Approx(std::log(std::cosh(s * kLog2))).epsilon(1e-8));
    }
}

TEST_CASE("grid refinement: kappa converges in M") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine coarse(oracle, 512), fine(oracle, 1024);
    for (const double s : {0.1, 0.25}) {
        const double k1 = coarse.dominant_eig(coarse.build_ps(s)).kappa;
        const double k2 = fine.dominant_eig(fine.build_ps(s)).kappa;
        CHECK(std::abs(k1 - k2) <= 2e-5);
    }
}

TEST_CASE("stationary measure matches occupation sampling") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 1024);
    const auto& stat = engine.stationary();
    // discrete nu as a CDF over angle nodes
    std::vector<double> cdf(stat.nu.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < stat.nu.size(); ++j) {
        acc += stat.nu[j];
        cdf[j] = acc;
    }
    const auto occ = occupation_sample(oracle, ProjectivePoint(Vector{{1.0, 1.0}}),
                                       200, 20, 2500, 99);
    std::vector<double> angles;
    angles.reserve(occ.size());
    for (const auto& p : occ) angles.push_back(p.angle());
    std::sort(angles.begin(), angles.end());
    double ks = 0.0;
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const int node = static_cast<int>(angles[i] / engine.grid().spacing());
        const double model_cdf = cdf[static_cast<std::size_t>(
            std::min<int>(node, engine.grid_size() - 1))];
        const double emp_hi = static_cast<double>(i + 1) / angles.size();
        ks = std::max(ks, std::abs(emp_hi - model_cdf));
    }
    CHECK(ks <= 0.02);
}

TEST_CASE("degenerate-variance ensembles are a hard error") {
    const auto d31 = MatrixEnsemble::builtin("diag31");
    SpectralEngine engine(d31, 256);
    CHECK_THROWS_AS(engine.fit_lambda(0.0, 13), SpectralError);
}

TEST_CASE("spectral engine rejects generator ensembles and d != 2") {
    CHECK_THROWS_WITH_AS(SpectralEngine(MatrixEnsemble::builtin("heavy-alpha"), 256),
                         doctest::Contains("finite-support"), SpectralError);
    Matrix g3 = Matrix::Identity(3, 3) * 2.0;
    const auto e3 = MatrixEnsemble::finite({{g3, 1.0}}, "3d");
    CHECK_THROWS_WITH_AS(SpectralEngine(e3, 256), doctest::Contains("d == 2"),
                         SpectralError);
}

TEST_CASE("saddle point solver") {
    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    SpectralEngine engine(sr, 512);
    const auto model = engine.fit_lambda(0.0, 13);

    const auto zero = solve_saddle(model, 0.0, 400);
    CHECK(zero.s_star == 0.0);

    // symmetric model: gamma3 = 0, so s* = t / (sigma sqrt(n)) + O(w^3)
    for (const double t : {0.5, 1.0, 2.0}) {
        const long n = 400;
        const auto sol = solve_saddle(model, t, n);
        CHECK(sol.residual <= 1e-10);
        const double w = t / std::sqrt(static_cast<double>(n));
        const double first_term = w / model.sigma;
        const double cubic_budget =
            2.0 * std::abs(model.gammas[3]) / (6.0 * std::pow(model.gammas[1], 2.5)) *
            std::pow(w, 3);
        CHECK(std::abs(sol.s_star - first_term) <= cubic_budget + 1e-12);
        CHECK(std::abs(sol.s_star - sol.series_value) <= 10.0 * std::pow(w, 4));
        // lower tail mirrors the upper for a symmetric model
        const auto low = solve_saddle(model, t, n, true);
        CHECK(low.s_star == doctest::Approx(-sol.s_star).epsilon(1e-10));
    }

    CHECK_THROWS_WITH_AS(solve_saddle(model, 1e6, 4), doctest::Contains("attainable"),
                         SpectralError);
}

TEST_CASE("saddle vs series on an asymmetric model") {
    // asymmetric scalar law: log c in {log 2 w.p. 0.3, -log 2 w.p. 0.7},
    // rotations as in the builtin; gamma3 != 0 exercises the quadratic term
    std::vector<Atom> atoms;
    for (int j = 0; j < 8; ++j) {
        const double frac = std::fmod((j + 1) * 0.61803398874989484820, 1.0);
        Matrix r(2, 2);
        r << std::cos(kPi * frac), -std::sin(kPi * frac), std::sin(kPi * frac),
            std::cos(kPi * frac);
        atoms.push_back({2.0 * r, 0.3 / 8.0});
        atoms.push_back({0.5 * r, 0.7 / 8.0});
    }
    const auto skew = MatrixEnsemble::finite(std::move(atoms), "skew-scalar");
    SpectralEngine engine(skew, 512);
    const auto model = engine.fit_lambda(0.0, 13);
    CHECK(std::abs(model.gammas[2]) > 1e-4);  // genuinely asymmetric
    for (const double t : {1.0, 2.0}) {
        const long n = 400;
        const auto sol = solve_saddle(model, t, n);
        CHECK(sol.residual <= 1e-10);
        const double w = t / std::sqrt(static_cast<double>(n));
        CHECK(std::abs(sol.s_star - sol.series_value) <=
              50.0 * std::pow(w, 4) / std::pow(model.sigma, 4));
        const double check = model.lambda_d1(sol.s_star) - model.lambda_d1(0.0);
        CHECK(check == doctest::Approx(model.sigma * w).epsilon(1e-9));
        const auto low = solve_saddle(model, t, n, true);
        CHECK(low.s_star < 0.0);
        CHECK(model.lambda_d1(low.s_star) - model.lambda_d1(0.0) ==
              doctest::Approx(-model.sigma * w).epsilon(1e-9));
    }
    // Oracle A's tiny sigma keeps large t out of reach at the default range
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine oengine(oracle, 512);
    const auto omodel = oengine.fit_lambda(0.0, 13);
    CHECK_THROWS_WITH_AS(solve_saddle(omodel, 2.0, 400),
                         doctest::Contains("attainable"), SpectralError);
}

TEST_CASE("perturbed operator eigenvalue identity") {
    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    SpectralEngine engine(sr, 512);
    const auto model = engine.fit_lambda(0.0, 13);

    const auto at_zero = engine.perturbed_eig_check(model, 0.1, 0.0);
    CHECK(std::abs(at_zero.eig_power - std::complex<double>(1.0, 0.0)) <= 1e-8);

    // scalar-rotation at s = 0: lambda_{0,iu} = E[c^{iu}] = cos(u log 2)
    const auto check = engine.perturbed_eig_check(model, 0.0, 0.15);
    CHECK(std::abs(check.eig_power - std::complex<double>(
                                         std::cos(0.15 * kLog2), 0.0)) <= 1e-6);
    CHECK(check.discrepancy <= 1e-6);

    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine oengine(oracle, 512);
    const auto omodel = oengine.fit_lambda(0.0, 13);
    const auto ocheck = oengine.perturbed_eig_check(omodel, 0.05, 0.1);
    CHECK(ocheck.discrepancy <= 1e-3);  // 1e-4 at M = 2048 in the acceptance run
}

TEST_CASE("d_phi: symmetry, zero function, Monte Carlo cross-check") {
    // Odd grid size keeps every node away from the delta = 0 singularity of
    // a grid-aligned y. Grid-aligned y's see a node permutation, so the
    // quadrature is exactly invariant; the common value is the uniform
    // integral of log |cos|, i.e. -log 2.
    const auto rot = MatrixEnsemble::builtin("rotation-irrational");
    SpectralEngine engine(rot, 2047);
    const auto one = GridFn::constant(2047, 1.0);
    const auto d0 = engine.d_phi(one, DualPoint::from_angle(engine.grid().node(0)), 0.0);
    const auto d17 = engine.d_phi(one, DualPoint::from_angle(engine.grid().node(17)), 0.0);
    const auto d999 = engine.d_phi(one, DualPoint::from_angle(engine.grid().node(999)), 0.0);
    CHECK(std::abs(d0.value - d17.value) <= 1e-8);
    CHECK(std::abs(d0.value - d999.value) <= 1e-8);
    CHECK(d0.value == doctest::Approx(-kLog2).epsilon(0.02));
    CHECK(d0.clamped_mass == 0.0);

    // Even grid size puts one node exactly on the singularity: the clamp
    // fires and its mass is reported.
    SpectralEngine even_engine(rot, 2048);
    const auto even = even_engine.d_phi(GridFn::constant(2048, 1.0),
                                        DualPoint::from_angle(0.0), 0.0);
    CHECK(even.clamped_mass == doctest::Approx(1.0 / 2048.0).epsilon(1e-6));
    CHECK_FALSE(even.warning);

    const auto zero = engine.d_phi(GridFn::constant(2047, 0.0),
                                   DualPoint::axis(2, 0), 0.0);
    CHECK(zero.value == 0.0);

    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine oengine(oracle, 1024);
    const auto y = DualPoint::axis(2, 0);
    const auto dval = oengine.d_phi(GridFn::constant(1024, 1.0), y, 0.0);
    const auto occ = occupation_sample(oracle, ProjectivePoint(Vector{{1.0, 1.0}}),
                                       200, 10, 4000, 3);
    std::vector<double> logd;
    logd.reserve(occ.size());
    for (const auto& p : occ)
        logd.push_back(std::log(std::max(delta(p, y), 1e-300)));
    const auto sum = summarize(logd);
    CHECK(std::abs(dval.value - sum.mean) <= 3.0 * sum.se + 0.01);
}

TEST_CASE("b_phi: independence and enumeration oracle") {
    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    SpectralEngine engine(sr, 512);
    const auto model = engine.fit_lambda(0.0, 13);
    const auto one = GridFn::constant(512, 1.0);
    // sigma(G_n, x) - n Lambda'(0) is a centered i.i.d. sum independent of
    // the direction chain, so b_phi = 0.
    const auto b = b_phi(engine, one, ProjectivePoint(Vector{{1.0, 1.0}}), 0.0,
                         model.gammas[0], {4, 8, 16, 32}, 20000, 11);
    CHECK(std::abs(b.value) <= 3.0 * b.se + 1e-9);

    const auto zero_fn = GridFn::constant(512, 0.0);
    const auto bz = b_phi(engine, zero_fn, ProjectivePoint(Vector{{1.0, 1.0}}), 0.0,
                          model.gammas[0], {4, 8}, 500, 12);
    CHECK(bz.value == 0.0);

    // Oracle A at n = 16 against exact enumeration
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine oengine(oracle, 512);
    const auto omodel = oengine.fit_lambda(0.0, 13);
    const auto phi = GridFn::tabulate(512, [](double th) {
        return std::cos(th) * std::cos(th);
    });
    const auto x0 = ProjectivePoint(Vector{{1.0, 1.0}});
    const int n_exact = 16;
    double exact = 0.0;
    enumerate_products(oracle, n_exact, [&](double prob, double log_scale,
                                            const Matrix& m) {
        const Vector img = m * x0.vec();
        const double sigma = log_scale + std::log(img.norm());
        double theta = std::atan2(img[1], img[0]);
        if (theta < 0.0) theta += kPi;
        if (theta >= kPi) theta -= kPi;
        exact += prob * (sigma - n_exact * omodel.gammas[0]) *
                 std::cos(theta) * std::cos(theta);
    });
    const auto bo = b_phi(oengine, phi, x0, 0.0, omodel.gammas[0],
                          {4, 8, 16}, 60000, 13);
    // compare the MC estimate at the same horizon n = 16
    const double est16 = bo.trace.back()[1];
    const double se16 = bo.trace.back()[2];
    CHECK(std::abs(est16 - exact) <= 3.0 * se16);
}

TEST_CASE("tilted expectations approach Lambda'(s)") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 1024);
    const auto model = engine.fit_lambda(0.0, 13);
    const double s = 0.1;
    const auto kernel = engine.tilted_kernel(s);
    WalkPlan plan;
    plan.n = 256;
    plan.m = 4000;
    plan.seed = 21;
    const auto samples = tilted_run_walks(kernel, ProjectivePoint(Vector{{1.0, 1.0}}),
                                          DualPoint::axis(2, 0), plan);
    std::vector<double> rates;
    rates.reserve(samples.size());
    for (const auto& smp : samples) rates.push_back(smp.sigma_n / plan.n);
    const auto sum = summarize(rates);
    CHECK(std::abs(sum.mean - model.lambda_d1(s)) <= 3.0 * sum.se + 2e-3);
}

TEST_CASE("spectral model serialization round-trips byte-identically") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 256);
    const auto model = engine.fit_lambda(0.0, 9);
    const std::string p1 = "/tmp/rmp_model_a.json", p2 = "/tmp/rmp_model_b.json";
    model.save(p1);
    const auto reloaded = SpectralModel::load(p1);
    reloaded.save(p2);
    CHECK(read_file_bytes(p1) == read_file_bytes(p2));
    CHECK(reloaded.sigma == model.sigma);
    CHECK(reloaded.gammas == model.gammas);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("zeta radius is enforced") {
    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    SpectralEngine engine(sr, 256);
    const auto model = engine.fit_lambda(0.0, 9);
    CHECK_THROWS_AS(model.zeta(0.5), InputError);
    CHECK_NOTHROW(model.zeta(0.19));
}
