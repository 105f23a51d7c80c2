#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracle_helpers.hpp"

#include "rmp/spectral.hpp"
#include "rmp/walk.hpp"

#include <cmath>

using namespace rmp;
using rmp::testing::direct_log_norm;
using rmp::testing::enumerate_products;
using rmp::testing::random_matrix;

namespace {

bool same_stats(const WalkSample& a, const WalkSample& b) {
    return a.sigma_n == b.sigma_n && a.coeff_log_n == b.coeff_log_n &&
           a.log_delta_n == b.log_delta_n && a.terminal_angle == b.terminal_angle &&
           a.importance_log_weight == b.importance_log_weight;
}

bool samples_equal(const WalkSample& a, const WalkSample& b) {
    return a.trajectory_seed == b.trajectory_seed && same_stats(a, b);
}

}  // namespace

TEST_CASE("identity and diagonal walks") {
    const auto x0 = ProjectivePoint::axis(2, 0);
    const auto f = DualPoint::axis(2, 0);

    WalkState id_state(x0, true);
    for (int k = 0; k < 10; ++k) id_state.step(Matrix::Identity(2, 2));
    CHECK(id_state.log_norm() == doctest::Approx(0.0));
    CHECK(angular_distance(ProjectivePoint(id_state.direction()), x0) == 0.0);

    const auto d31 = MatrixEnsemble::builtin("diag31");
    WalkPlan plan;
    plan.n = 25;
    plan.m = 3;
    plan.seed = 9;
    const auto samples = run_walks(d31, x0, f, plan);
    for (const auto& s : samples) {
        CHECK(s.sigma_n == doctest::Approx(25.0 * std::log(3.0)).epsilon(1e-14));
        CHECK(same_stats(s, samples.front()));
        CHECK(s.log_delta_n == doctest::Approx(0.0));
        CHECK(s.coeff_log_n == s.sigma_n + s.log_delta_n);
    }
}

TEST_CASE("streaming cocycle matches the rescaled direct product") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    const auto x0 = ProjectivePoint(Vector{{1.0, 1.0}});
    for (const std::uint64_t seed : {1ull, 2ull, 3ull, 99ull}) {
        CounterRng rng(CounterRng::derive_stream(seed, 0));
        std::vector<Matrix> gs;
        WalkState st(x0, true);
        for (int k = 0; k < 30; ++k) {
            const Matrix g = oracle.atoms()[static_cast<std::size_t>(
                                                oracle.sample_atom_index(rng))].g;
            gs.push_back(g);
            st.step(g);
        }
        const double oracle_ln = direct_log_norm(gs, x0.vec());
        CHECK(std::abs(st.log_norm() - oracle_ln) <= 1e-8);
    }
    // same check on a generic d = 3 sequence with wild scales
    CounterRng rng(17);
    Vector v0(3);
    v0 << 1.0, -0.5, 0.25;
    const ProjectivePoint p0(v0);
    WalkState st(p0, true);
    std::vector<Matrix> gs;
    for (int k = 0; k < 30; ++k) {
        gs.push_back(random_matrix(rng, 3));
        st.step(gs.back());
    }
    CHECK(std::abs(st.log_norm() - direct_log_norm(gs, p0.vec())) <= 1e-8);
}

TEST_CASE("2-frame volume tracks the exterior square") {
    CounterRng rng(23);
    const auto x0 = ProjectivePoint::axis(2, 0);
    WalkState st(x0, true);
    Matrix prod = Matrix::Identity(2, 2);
    double log_scale = 0.0;
    for (int k = 0; k < 20; ++k) {
        const Matrix g = random_matrix(rng, 2);
        st.step(g);
        prod = g * prod;
        const double mx = prod.cwiseAbs().maxCoeff();
        prod /= mx;
        log_scale += std::log(mx);
    }
    const double expected = std::log(exterior_square_norm(prod)) + 2.0 * log_scale;
    CHECK(st.ext2_log_norm() == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("run_walks is deterministic across thread counts") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    const auto x0 = ProjectivePoint(Vector{{2.0, 1.0}});
    const auto f = DualPoint(Vector{{0.0, 1.0}});
    WalkPlan p1;
    p1.n = 40;
    p1.m = 500;
    p1.seed = 31;
    p1.threads = 1;
    WalkPlan p8 = p1;
    p8.threads = 8;
    const auto s1 = run_walks(oracle, x0, f, p1);
    const auto s8 = run_walks(oracle, x0, f, p8);
    REQUIRE(s1.size() == s8.size());
    for (std::size_t i = 0; i < s1.size(); ++i) CHECK(samples_equal(s1[i], s8[i]));
}

TEST_CASE("horizon snapshots agree with standalone runs") {
    const auto oracle = MatrixEnsemble::builtin("scalar-rotation");
    const auto x0 = ProjectivePoint(Vector{{1.0, 2.0}});
    const auto f = DualPoint(Vector{{1.0, -1.0}});
    const auto multi = run_walks_horizons(oracle, x0, f, {5, 12}, 50, 77, 2);
    WalkPlan plan;
    plan.m = 50;
    plan.seed = 77;
    plan.track_ext2 = false;
    plan.n = 5;
    const auto first = run_walks(oracle, x0, f, plan);
    plan.n = 12;
    const auto second = run_walks(oracle, x0, f, plan);
    for (std::size_t i = 0; i < 50; ++i) {
        CHECK(multi[0][i].sigma_n == first[i].sigma_n);
        CHECK(multi[1][i].sigma_n == second[i].sigma_n);
        CHECK(multi[0][i].terminal_angle == first[i].terminal_angle);
    }
}

TEST_CASE("walk errors carry the trajectory and step index") {
    Matrix huge(2, 2);
    huge << 1e160, 0, 0, 1e160;  // squared norm overflows in one application
    const auto e = MatrixEnsemble::finite({{huge, 1.0}}, "overflow");
    WalkPlan plan;
    plan.n = 10;
    plan.m = 2;
    plan.seed = 0;
    try {
        run_walks(e, ProjectivePoint::axis(2, 0), DualPoint::axis(2, 0), plan);
        FAIL("expected WalkError");
    } catch (const WalkError& err) {
        CHECK(err.step_index >= 0);
        CHECK(std::string(err.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("lyapunov estimates: deterministic and symmetric ensembles") {
    const auto d31 = MatrixEnsemble::builtin("diag31");
    WalkPlan plan;
    plan.n = 60;
    plan.m = 20;
    plan.seed = 5;
    const auto est = estimate_lyapunov(d31, ProjectivePoint::axis(2, 0), plan);
    CHECK(est.lambda1 == doctest::Approx(std::log(3.0)).epsilon(1e-13));
    CHECK(est.lambda1_se == doctest::Approx(0.0));
    CHECK(est.lambda2 == doctest::Approx(0.0).epsilon(1e-12));

    const auto sr = MatrixEnsemble::builtin("scalar-rotation");
    WalkPlan plan2;
    plan2.n = 200;
    plan2.m = 2000;
    plan2.seed = 6;
    const auto est2 = estimate_lyapunov(sr, ProjectivePoint(Vector{{1.0, 1.0}}), plan2);
    CHECK(std::abs(est2.lambda1) <= 3.0 * est2.lambda1_se);
    CHECK(std::abs(est2.lambda2) <= 3.0 * est2.lambda2_se + 1e-9);
    CHECK_THROWS_AS(estimate_lyapunov(sr, ProjectivePoint::axis(2, 0),
                                      WalkPlan{.n = 10, .m = 5}),
                    InputError);
}

TEST_CASE("Monte Carlo means match exact enumeration at n = 14") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    const int n = 14;
    const auto x0 = ProjectivePoint(Vector{{1.0, 1.0}});
    const auto f = DualPoint(Vector{{1.0, 0.0}});
    double exact_mean_sigma = 0.0, exact_mean_coeff = 0.0;
    enumerate_products(oracle, n, [&](double prob, double log_scale, const Matrix& m) {
        const double sigma = log_scale + std::log((m * x0.vec()).norm());
        const double coeff =
            log_scale + std::log(std::abs(f.vec().dot(m * x0.vec())));
        exact_mean_sigma += prob * sigma;
        exact_mean_coeff += prob * coeff;
    });
    WalkPlan plan;
    plan.n = n;
    plan.m = 40000;
    plan.seed = 2024;
    plan.track_ext2 = false;
    const auto samples = run_walks(oracle, x0, f, plan);
    double mean_sigma = 0.0, mean_coeff = 0.0, var_sigma = 0.0, var_coeff = 0.0;
    for (const auto& s : samples) {
        mean_sigma += s.sigma_n;
        mean_coeff += s.coeff_log_n;
    }
    mean_sigma /= static_cast<double>(plan.m);
    mean_coeff /= static_cast<double>(plan.m);
    for (const auto& s : samples) {
        var_sigma += (s.sigma_n - mean_sigma) * (s.sigma_n - mean_sigma);
        var_coeff += (s.coeff_log_n - mean_coeff) * (s.coeff_log_n - mean_coeff);
    }
    const double se_sigma = std::sqrt(var_sigma / (plan.m - 1.0) / plan.m);
    const double se_coeff = std::sqrt(var_coeff / (plan.m - 1.0) / plan.m);
    CHECK(std::abs(mean_sigma - exact_mean_sigma) <= 4.0 * se_sigma);
    CHECK(std::abs(mean_coeff - exact_mean_coeff) <= 4.0 * se_coeff);
}

TEST_CASE("tilted kernel at s = 0 reproduces the plain sampler exactly") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 256);
    const auto kernel = engine.tilted_kernel(0.0);
    const auto x0 = ProjectivePoint(Vector{{1.0, 1.0}});
    const auto f = DualPoint(Vector{{1.0, 0.0}});
    WalkPlan plan;
    plan.n = 50;
    plan.m = 200;
    plan.seed = 404;
    plan.track_ext2 = false;
    const auto plain = run_walks(oracle, x0, f, plan);
    const auto tilted = tilted_run_walks(kernel, x0, f, plan);
    REQUIRE(plain.size() == tilted.size());
    for (std::size_t i = 0; i < plain.size(); ++i) {
        CHECK(plain[i].sigma_n == tilted[i].sigma_n);
        CHECK(plain[i].coeff_log_n == tilted[i].coeff_log_n);
        CHECK(tilted[i].importance_log_weight == 0.0);
    }
}

TEST_CASE("tilted state distributions are normalized and reweighting is unbiased") {
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    SpectralEngine engine(oracle, 1024);
    const double s = 0.1;
    const auto kernel = engine.tilted_kernel(s);

    std::vector<double> probs(oracle.atoms().size());
    CounterRng rng(55);
    for (int i = 0; i < 200; ++i) {
        const double angle = rng.next_double() * 3.14159265358979;
        kernel.state_distribution(angle, probs);
        double total = 0.0;
        for (const double p : probs) total += p;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
    }

    // exact enumeration oracle at n = 14: tail probability and mean sigma
    const int n = 14;
    const auto x0 = ProjectivePoint(Vector{{1.0, 1.0}});
    const auto f = DualPoint(Vector{{1.0, 0.0}});
    double exact_mean = 0.0;
    enumerate_products(oracle, n, [&](double prob, double log_scale, const Matrix& m) {
        exact_mean += prob * (log_scale + std::log((m * x0.vec()).norm()));
    });
    double exact_tail = 0.0;
    enumerate_products(oracle, n, [&](double prob, double log_scale, const Matrix& m) {
        const double sigma = log_scale + std::log((m * x0.vec()).norm());
        if (sigma >= exact_mean) exact_tail += prob;
    });

    WalkPlan plan;
    plan.n = n;
    plan.m = 40000;
    plan.seed = 777;
    const auto tilted = tilted_run_walks(kernel, x0, f, plan);
    double acc = 0.0, acc2 = 0.0, accm = 0.0, accm2 = 0.0;
    for (const auto& smp : tilted) {
        const double w = std::exp(smp.importance_log_weight);
        const double ind = smp.sigma_n >= exact_mean ? w : 0.0;
        acc += ind;
        acc2 += ind * ind;
        accm += w * smp.sigma_n;
        accm2 += w * smp.sigma_n * w * smp.sigma_n;
    }
    const double m = static_cast<double>(plan.m);
    const double est_tail = acc / m;
    const double se_tail = std::sqrt((acc2 / m - est_tail * est_tail) / m);
    const double est_mean = accm / m;
    const double se_mean = std::sqrt((accm2 / m - est_mean * est_mean) / m);
    CHECK(std::abs(est_tail - exact_tail) <= 3.5 * se_tail);
    CHECK(std::abs(est_mean - exact_mean) <= 3.5 * se_mean);
}

TEST_CASE("tilted sampling rejects generator ensembles") {
    const auto gen = MatrixEnsemble::builtin("rotation-uniform");
    CHECK_THROWS_WITH_AS(TiltedKernel(gen, 0.1, 1.0, std::vector<double>(64, 0.0)),
                         doctest::Contains("finite-support"), InputError);
}

TEST_CASE("occupation samples: fixed points, uniformity, Furstenberg") {
    const auto d31 = MatrixEnsemble::builtin("diag31");
    // a generic start converges to the attracting axis
    const auto occ =
        occupation_sample(d31, ProjectivePoint(Vector{{1.0, 1.0}}), 60, 5, 4, 1);
    for (const auto& p : occ)
        CHECK(angular_distance(p, ProjectivePoint::axis(2, 0)) < 1e-10);

    // irrational rotation equidistributes on the circle
    const auto rot = MatrixEnsemble::builtin("rotation-irrational");
    const auto occ_rot =
        occupation_sample(rot, ProjectivePoint::axis(2, 0), 10, 100000, 1, 3);
    std::vector<double> u;
    u.reserve(occ_rot.size());
    for (const auto& p : occ_rot) u.push_back(p.angle() / 3.14159265358979323846);
    std::sort(u.begin(), u.end());
    double ks = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double hi = static_cast<double>(i + 1) / u.size();
        const double lo = static_cast<double>(i) / u.size();
        ks = std::max(ks, std::max(std::abs(hi - u[i]), std::abs(lo - u[i])));
    }
    CHECK(ks <= 0.02);

    // Furstenberg: lambda1 = integral of sigma(g, x) d mu d nu
    const auto oracle = MatrixEnsemble::builtin("oracleA");
    const auto occ_o =
        occupation_sample(oracle, ProjectivePoint(Vector{{1.0, 1.0}}), 100, 10, 2000, 5);
    double fur = 0.0;
    for (const auto& p : occ_o)
        for (const auto& atom : oracle.atoms())
            fur += atom.prob * cocycle(atom.g, p);
    fur /= static_cast<double>(occ_o.size());
    WalkPlan plan;
    plan.n = 400;
    plan.m = 3000;
    plan.seed = 8;
    const auto est = estimate_lyapunov(oracle, ProjectivePoint(Vector{{1.0, 1.0}}), plan);
    CHECK(std::abs(fur - est.lambda1) <= 3.0 * (est.lambda1_se + 0.002));
}
