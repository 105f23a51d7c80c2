#pragma once

#include <Eigen/Dense>

#include <limits>
#include <stdexcept>

namespace rmp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Sentinel returned by coefficient_log / log-delta paths when the pairing
// vanishes exactly. Consumers either drop such samples or clamp them at a
// configurable floor (default -745, the smallest normal double exponent).
inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();
inline constexpr double kDefaultLogDeltaFloor = -745.0;

struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Direction in P(V): unit vector with the first nonzero coordinate positive.
class ProjectivePoint {
public:
    explicit ProjectivePoint(Vector v);

    const Vector& vec() const { return v_; }
    int dim() const { return static_cast<int>(v_.size()); }

    // d == 2 only: representative angle in [0, pi).
    double angle() const;

    static ProjectivePoint axis(int dim, int index);
    static ProjectivePoint from_angle(double theta);

private:
    Vector v_;
};

// Functional direction in P(V*), stored in dual-basis coordinates with the
// same unit-norm / sign canonicalization.
class DualPoint {
public:
    explicit DualPoint(Vector f);

    const Vector& vec() const { return f_; }
    int dim() const { return static_cast<int>(f_.size()); }
    double angle() const;

    static DualPoint axis(int dim, int index);
    static DualPoint from_angle(double theta);

private:
    Vector f_;
};

struct SingularData {
    Vector singular_values;  // descending, all > 0
    Matrix left_vectors;     // columns u_i
    Matrix right_vectors;    // columns w_i, g = U diag(s) W^T
    bool degenerate_top;     // s1 - s2 < 1e-12 * s1
};

struct DensityPoints {
    ProjectivePoint x_density;  // top left singular direction
    DualPoint y_density;        // top right singular direction, as a functional
    bool degenerate;
};

// Largest singular value of g.
double op_norm(const Matrix& g);

// max(||g||, ||g^{-1}||); always >= 1 for invertible g.
double size_N(const Matrix& g);

// log ||g v|| for the unit representative v of x.
double cocycle(const Matrix& g, const ProjectivePoint& x);

ProjectivePoint act(const Matrix& g, const ProjectivePoint& x);

// g acting on functionals: y |-> R(g^T f).
DualPoint act_dual(const Matrix& g, const DualPoint& y);

// d(x, x') = ||v ^ v'|| / (||v|| ||v'||), in [0, 1].
double angular_distance(const ProjectivePoint& x, const ProjectivePoint& x2);
double angular_distance(const DualPoint& y, const DualPoint& y2);

// delta(x, y) = |<f, v>| / (||f|| ||v||), in [0, 1].
double delta(const ProjectivePoint& x, const DualPoint& y);
double delta(const DualPoint& y, const ProjectivePoint& x);

// ||^2 g|| = s1 * s2; equals |det g| when d == 2.
double exterior_square_norm(const Matrix& g);

SingularData singular_data(const Matrix& g);

DensityPoints density_points(const Matrix& g);

// log |<f, g v>|; returns kLogZero when the pairing vanishes exactly.
double coefficient_log(const Matrix& g, const ProjectivePoint& x,
                       const DualPoint& y);

void require_finite(const Matrix& g, const char* what);

}  // namespace rmp
