#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracle_helpers.hpp"

#include "rmp/linalg.hpp"
#include "rmp/rng.hpp"

#include <cmath>

using namespace rmp;
using rmp::testing::random_dual;
using rmp::testing::random_matrix;
using rmp::testing::random_point;

namespace {

Matrix mat2(double a, double b, double c, double d) {
    Matrix g(2, 2);
    g << a, b, c, d;
    return g;
}

Matrix rotation(double theta) {
    return mat2(std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta));
}

}  // namespace

TEST_CASE("op_norm on reference matrices") {
    CHECK(op_norm(Matrix::Identity(2, 2)) == doctest::Approx(1.0));
    CHECK(op_norm(mat2(3, 0, 0, 1)) == doctest::Approx(3.0));
    // eigenvalues of g^T g for [[2,1],[0,1]] are 3 +- sqrt(5)
    CHECK(op_norm(mat2(2, 1, 0, 1)) ==
          doctest::Approx(std::sqrt(3.0 + std::sqrt(5.0))).epsilon(1e-12));
    CHECK_THROWS_AS(op_norm(mat2(1, std::nan(""), 0, 1)), InputError);
}

TEST_CASE("size_N basics") {
    CHECK(size_N(Matrix::Identity(2, 2)) == doctest::Approx(1.0));
    CHECK(size_N(mat2(3, 0, 0, 1)) == doctest::Approx(3.0));
    CHECK(size_N(mat2(0.5, 0, 0, 1.0 / 3.0)) == doctest::Approx(3.0));
    CounterRng rng(7);
    for (int i = 0; i < 200; ++i) {
        const Matrix g = random_matrix(rng, 2 + i % 3);
        CHECK(size_N(g) >= 1.0 - 1e-12);
        CHECK(op_norm(g) * op_norm(g.inverse()) >= 1.0 - 1e-10);
    }
}

TEST_CASE("cocycle trivial values and additivity") {
    const auto x = ProjectivePoint::axis(2, 0);
    CHECK(cocycle(Matrix::Identity(2, 2), x) == doctest::Approx(0.0));
    CHECK(cocycle(mat2(3, 0, 0, 1), x) == doctest::Approx(std::log(3.0)));
    CounterRng scalar_rng(3);
    CHECK(cocycle(2.0 * Matrix::Identity(2, 2), random_point(scalar_rng, 2)) ==
          doctest::Approx(std::log(2.0)));

    CounterRng rng(11);
    for (int i = 0; i < 2000; ++i) {
        const int d = 2 + i % 3;
        const Matrix g1 = random_matrix(rng, d);
        const Matrix g2 = random_matrix(rng, d);
        const auto xx = random_point(rng, d);
        const double lhs = cocycle(g2 * g1, xx);
        const double rhs = cocycle(g2, act(g1, xx)) + cocycle(g1, xx);
        CHECK(std::abs(lhs - rhs) <= 1e-9);
    }
}

TEST_CASE("act is projective and associative") {
    const auto x = ProjectivePoint::axis(2, 0);
    CHECK(angular_distance(act(Matrix::Identity(2, 2), x), x) == doctest::Approx(0.0));
    const auto image = act(mat2(3, 0, 0, 1), ProjectivePoint(Vector{{1.0, 1.0}}));
    Vector expect(2);
    expect << 3.0 / std::sqrt(10.0), 1.0 / std::sqrt(10.0);
    CHECK(angular_distance(image, ProjectivePoint(expect)) < 1e-14);
    const double theta = 0.7;
    CHECK(angular_distance(act(rotation(theta), x),
                           ProjectivePoint::from_angle(theta)) < 1e-14);

    CounterRng rng(13);
    for (int i = 0; i < 1000; ++i) {
        const int d = 2 + i % 3;
        const Matrix g1 = random_matrix(rng, d);
        const Matrix g2 = random_matrix(rng, d);
        const auto xx = random_point(rng, d);
        CHECK(angular_distance(act(g2 * g1, xx), act(g2, act(g1, xx))) <= 1e-10);
    }
}

TEST_CASE("angular distance reference values") {
    const auto e1 = ProjectivePoint::axis(2, 0);
    const auto e2 = ProjectivePoint::axis(2, 1);
    CHECK(angular_distance(e1, e1) == doctest::Approx(0.0));
    CHECK(angular_distance(e1, e2) == doctest::Approx(1.0));
    CHECK(angular_distance(e1, ProjectivePoint(Vector{{1.0, 1.0}})) ==
          doctest::Approx(1.0 / std::sqrt(2.0)));
    // stable for nearly parallel vectors
    const auto close = ProjectivePoint::from_angle(1e-9);
    CHECK(angular_distance(e1, close) == doctest::Approx(1e-9).epsilon(1e-6));
}

TEST_CASE("delta reference values") {
    const auto e1 = ProjectivePoint::axis(2, 0);
    const auto e2 = ProjectivePoint::axis(2, 1);
    const auto f1 = DualPoint::axis(2, 0);
    CHECK(delta(e1, f1) == doctest::Approx(1.0));
    CHECK(delta(e2, f1) == doctest::Approx(0.0));
    CHECK(delta(ProjectivePoint(Vector{{1.0, 1.0}}), f1) ==
          doctest::Approx(1.0 / std::sqrt(2.0)));
}

TEST_CASE("delta equals distance to the orthogonal point in d = 2") {
    CounterRng rng(17);
    for (int i = 0; i < 500; ++i) {
        const auto x = random_point(rng, 2);
        const auto y = random_dual(rng, 2);
        Vector orth(2);
        orth << -y.vec()[1], y.vec()[0];
        const ProjectivePoint z{std::move(orth)};
        CHECK(std::abs(delta(x, y) - angular_distance(x, z)) <= 1e-12);
    }
}

TEST_CASE("triangle-type bound for delta") {
    CounterRng rng(19);
    for (int i = 0; i < 2000; ++i) {
        const int d = 2 + i % 3;
        const auto a = random_point(rng, d);
        const auto b = random_point(rng, d);
        const auto y = random_dual(rng, d);
        CHECK(delta(a, y) <= angular_distance(a, b) + delta(b, y) + 1e-12);
    }
}

TEST_CASE("exterior square norm") {
    CHECK(exterior_square_norm(mat2(3, 0, 0, 1)) == doctest::Approx(3.0));
    CHECK(exterior_square_norm(Matrix::Identity(2, 2)) == doctest::Approx(1.0));
    CHECK(exterior_square_norm(mat2(2, 1, 0, 1)) == doctest::Approx(2.0));
    CounterRng rng(23);
    for (int i = 0; i < 200; ++i) {
        const Matrix g = random_matrix(rng, 2);
        CHECK(exterior_square_norm(g) ==
              doctest::Approx(std::abs(g.determinant())).epsilon(1e-9));
    }
}

TEST_CASE("singular data reconstructs the matrix") {
    CounterRng rng(29);
    for (int i = 0; i < 300; ++i) {
        const int d = 2 + i % 3;
        const Matrix g = random_matrix(rng, d);
        const SingularData sd = singular_data(g);
        const Matrix rebuilt = sd.left_vectors * sd.singular_values.asDiagonal() *
                               sd.right_vectors.transpose();
        CHECK((rebuilt - g).norm() <= 1e-10 * g.norm());
        CHECK(sd.singular_values(0) == doctest::Approx(op_norm(g)).epsilon(1e-10));
        for (int k = 1; k < d; ++k)
            CHECK(sd.singular_values(k - 1) >= sd.singular_values(k));
    }
}

TEST_CASE("density points on diagonal matrices") {
    const auto dp31 = density_points(mat2(3, 0, 0, 1));
    CHECK(angular_distance(dp31.x_density, ProjectivePoint::axis(2, 0)) < 1e-12);
    CHECK(delta(ProjectivePoint::axis(2, 0), dp31.y_density) == doctest::Approx(1.0));
    CHECK_FALSE(dp31.degenerate);

    const auto dp13 = density_points(mat2(1, 0, 0, 3));
    CHECK(angular_distance(dp13.x_density, ProjectivePoint::axis(2, 1)) < 1e-12);
    CHECK(delta(ProjectivePoint::axis(2, 1), dp13.y_density) == doctest::Approx(1.0));

    CHECK(density_points(Matrix::Identity(2, 2)).degenerate);
}

TEST_CASE("density point sandwich inequalities") {
    CounterRng rng(31);
    for (int i = 0; i < 2000; ++i) {
        const int d = 2 + i % 3;
        const Matrix g = random_matrix(rng, d);
        const auto x = random_point(rng, d);
        const auto y = random_dual(rng, d);
        const auto dp = density_points(g);
        const double gap = exterior_square_norm(g) / (op_norm(g) * op_norm(g));
        const double grow = std::exp(cocycle(g, x)) / op_norm(g);
        CHECK(delta(x, dp.y_density) <= grow + 1e-10);
        CHECK(grow <= delta(x, dp.y_density) + gap + 1e-10);
        const double grow_dual =
            (g.transpose() * y.vec()).norm() / op_norm(g);
        CHECK(delta(dp.x_density, y) <= grow_dual + 1e-10);
        CHECK(grow_dual <= delta(dp.x_density, y) + gap + 1e-10);
        CHECK(angular_distance(act(g, x), dp.x_density) * delta(x, dp.y_density) <=
              gap + 1e-10);
    }
}

TEST_CASE("coefficient_log decomposition and sentinel") {
    const auto e1 = ProjectivePoint::axis(2, 0);
    const auto f1 = DualPoint::axis(2, 0);
    const auto f2 = DualPoint::axis(2, 1);
    CHECK(coefficient_log(Matrix::Identity(2, 2), e1, f1) == doctest::Approx(0.0));
    CHECK(coefficient_log(mat2(3, 0, 0, 1), e1, f1) == doctest::Approx(std::log(3.0)));
    CHECK(coefficient_log(Matrix::Identity(2, 2), e1, f2) == kLogZero);

    CounterRng rng(37);
    for (int i = 0; i < 2000; ++i) {
        const int d = 2 + i % 3;
        const Matrix g = random_matrix(rng, d);
        const auto x = random_point(rng, d);
        const auto y = random_dual(rng, d);
        const double dlt = delta(act(g, x), y);
        if (dlt <= 1e-12) continue;
        const double lhs = coefficient_log(g, x, y);
        const double rhs = cocycle(g, x) + std::log(dlt);
        CHECK(std::abs(lhs - rhs) <= 1e-9);
    }
}

TEST_CASE("projective point canonicalization is idempotent") {
    CounterRng rng(41);
    for (int i = 0; i < 200; ++i) {
        const auto x = random_point(rng, 2 + i % 3);
        const ProjectivePoint twice(x.vec());
        CHECK((x.vec() - twice.vec()).norm() == 0.0);
        CHECK(x.vec().norm() == doctest::Approx(1.0).epsilon(1e-12));
        for (Eigen::Index k = 0; k < x.vec().size(); ++k) {
            if (x.vec()[k] != 0.0) {
                CHECK(x.vec()[k] > 0.0);
                break;
            }
        }
    }
    CHECK_THROWS_AS(ProjectivePoint(Vector::Zero(2)), InputError);
}
