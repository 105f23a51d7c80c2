#include "rmp/linalg.hpp"

#include <Eigen/SVD>

#include <cmath>

namespace rmp {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

// Normalize to unit length and flip sign so the first nonzero coordinate is
// positive. Sign flips are exact in floating point, so this is idempotent.
Vector canonicalize(Vector v, const char* what) {
    if (v.size() < 2) throw InputError(std::string(what) + ": dim must be >= 2");
    if (!v.allFinite()) throw InputError(std::string(what) + ": non-finite entries");
    const double n = v.norm();
    if (n == 0.0) throw InputError(std::string(what) + ": zero vector");
    if (std::abs(n - 1.0) > 1e-14) v /= n;  // keeps re-canonicalization exact
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (v[i] != 0.0) {
            if (v[i] < 0.0) v = -v;
            break;
        }
    }
    return v;
}

double wedge_norm(const Vector& a, const Vector& b) {
    const Eigen::Index d = a.size();
    double s = 0.0;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = i + 1; j < d; ++j) {
            const double w = a[i] * b[j] - a[j] * b[i];
            s += w * w;
        }
    return std::sqrt(s);
}

}  // namespace

ProjectivePoint::ProjectivePoint(Vector v)
    : v_(canonicalize(std::move(v), "ProjectivePoint")) {}

double ProjectivePoint::angle() const {
    if (dim() != 2) throw InputError("ProjectivePoint::angle: requires d == 2");
    double a = std::atan2(v_[1], v_[0]);
    if (a < 0.0) a += kPi;
    if (a >= kPi) a -= kPi;
    return a;
}

ProjectivePoint ProjectivePoint::axis(int dim, int index) {
    Vector v = Vector::Zero(dim);
    v[index] = 1.0;
    return ProjectivePoint(std::move(v));
}

ProjectivePoint ProjectivePoint::from_angle(double theta) {
    Vector v(2);
    v << std::cos(theta), std::sin(theta);
    return ProjectivePoint(std::move(v));
}

DualPoint::DualPoint(Vector f) : f_(canonicalize(std::move(f), "DualPoint")) {}

double DualPoint::angle() const {
    if (dim() != 2) throw InputError("DualPoint::angle: requires d == 2");
    double a = std::atan2(f_[1], f_[0]);
    if (a < 0.0) a += kPi;
    if (a >= kPi) a -= kPi;
    return a;
}

DualPoint DualPoint::axis(int dim, int index) {
    Vector f = Vector::Zero(dim);
    f[index] = 1.0;
    return DualPoint(std::move(f));
}

DualPoint DualPoint::from_angle(double theta) {
    Vector f(2);
    f << std::cos(theta), std::sin(theta);
    return DualPoint(std::move(f));
}

void require_finite(const Matrix& g, const char* what) {
    if (!g.allFinite()) throw InputError(std::string(what) + ": non-finite entries");
    if (g.rows() != g.cols() || g.rows() < 2)
        throw InputError(std::string(what) + ": expected square matrix, d >= 2");
}

double op_norm(const Matrix& g) {
    require_finite(g, "op_norm");
    Eigen::JacobiSVD<Matrix> svd(g);
    return svd.singularValues()(0);
}

double size_N(const Matrix& g) {
    require_finite(g, "size_N");
    Eigen::JacobiSVD<Matrix> svd(g);
    const auto& s = svd.singularValues();
    const double smin = s(s.size() - 1);
    if (smin <= 0.0) throw InputError("size_N: singular matrix");
    return std::max(s(0), 1.0 / smin);
}

double cocycle(const Matrix& g, const ProjectivePoint& x) {
    require_finite(g, "cocycle");
    return std::log((g * x.vec()).norm());
}

ProjectivePoint act(const Matrix& g, const ProjectivePoint& x) {
    require_finite(g, "act");
    return ProjectivePoint(g * x.vec());
}

DualPoint act_dual(const Matrix& g, const DualPoint& y) {
    require_finite(g, "act_dual");
    return DualPoint(g.transpose() * y.vec());
}

double angular_distance(const ProjectivePoint& x, const ProjectivePoint& x2) {
    return std::min(1.0, wedge_norm(x.vec(), x2.vec()));
}

double angular_distance(const DualPoint& y, const DualPoint& y2) {
    return std::min(1.0, wedge_norm(y.vec(), y2.vec()));
}

double delta(const ProjectivePoint& x, const DualPoint& y) {
    return std::min(1.0, std::abs(y.vec().dot(x.vec())));
}

double delta(const DualPoint& y, const ProjectivePoint& x) { return delta(x, y); }

double exterior_square_norm(const Matrix& g) {
    require_finite(g, "exterior_square_norm");
    Eigen::JacobiSVD<Matrix> svd(g);
    const auto& s = svd.singularValues();
    return s(0) * s(1);
}

SingularData singular_data(const Matrix& g) {
    require_finite(g, "singular_data");
    Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeFullU | Eigen::ComputeFullV);
    SingularData out;
    out.singular_values = svd.singularValues();
    out.left_vectors = svd.matrixU();
    out.right_vectors = svd.matrixV();
    const double s1 = out.singular_values(0);
    if (out.singular_values(out.singular_values.size() - 1) <= 0.0)
        throw InputError("singular_data: singular matrix");
    // Sign convention: each left vector gets a positive first-nonzero entry;
    // the paired right vector flips with it so U diag(s) W^T reconstructs g.
    for (Eigen::Index i = 0; i < out.left_vectors.cols(); ++i) {
        for (Eigen::Index j = 0; j < out.left_vectors.rows(); ++j) {
            const double u = out.left_vectors(j, i);
            if (u != 0.0) {
                if (u < 0.0) {
                    out.left_vectors.col(i) *= -1.0;
                    out.right_vectors.col(i) *= -1.0;
                }
                break;
            }
        }
    }
    out.degenerate_top = (s1 - out.singular_values(1)) < 1e-12 * s1;
    return out;
}

DensityPoints density_points(const Matrix& g) {
    const SingularData sd = singular_data(g);
    return DensityPoints{ProjectivePoint(sd.left_vectors.col(0)),
                         DualPoint(sd.right_vectors.col(0)), sd.degenerate_top};
}

double coefficient_log(const Matrix& g, const ProjectivePoint& x,
                       const DualPoint& y) {
    require_finite(g, "coefficient_log");
    const double pairing = std::abs(y.vec().dot(g * x.vec()));
    if (pairing == 0.0) return kLogZero;
    return std::log(pairing);
}

}  // namespace rmp
