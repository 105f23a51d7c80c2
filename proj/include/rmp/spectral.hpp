#pragma once

#include "rmp/ensemble.hpp"
#include "rmp/walk.hpp"

#include <nlohmann/json_fwd.hpp>

#include <complex>
#include <optional>
#include <vector>

namespace rmp {

struct SpectralError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Angular discretization of P(V) for d == 2: nodes theta_j = j*pi/M with the
// identification theta ~ theta + pi.
struct ProjectiveGrid {
    int M = 0;
    double spacing() const;
    double node(int j) const;
    ProjectivePoint point(int j) const;
};

// Function on the grid, linearly interpolated in angle with wraparound.
struct GridFn {
    int M = 0;
    std::vector<double> values;

    double at_angle(double theta) const;
    double at_point(const ProjectivePoint& x) const { return at_angle(x.angle()); }

    static GridFn constant(int M, double value);
    template <typename F>
    static GridFn tabulate(int M, F&& f) {
        GridFn fn;
        fn.M = M;
        fn.values.resize(static_cast<std::size_t>(M));
        for (int j = 0; j < M; ++j)
            fn.values[static_cast<std::size_t>(j)] =
                f(3.14159265358979323846264338327950288 * j / M);
        return fn;
    }
};

// Sparse action of a transfer operator on grid functions: row j holds, for
// every atom g, the two interpolation weights of g . x_j scaled by
// mu(g) e^{(s+iu) sigma(g, x_j)}. Exact in the g-sum, approximate only in
// the interpolation.
template <typename Scalar>
struct DiscretizedOperator {
    int M = 0;
    double s = 0.0;
    double u = 0.0;
    std::uint64_t ensemble_hash = 0;
    int row_nnz = 0;             // 2 * atom count
    std::vector<int> cols;       // M * row_nnz
    std::vector<Scalar> vals;

    void apply(const std::vector<Scalar>& in, std::vector<Scalar>& out) const;
    void apply_transpose(const std::vector<Scalar>& in,
                         std::vector<Scalar>& out) const;
    std::vector<Scalar> row_sums() const;
};

struct EigenData {
    double kappa = 0.0;
    GridFn r;                  // right eigenfunction, nu0(r) = 1
    std::vector<double> nu;    // left eigenvector as a measure, total mass 1
    double second_ratio = 0.0; // |second eigenvalue| / kappa (deflated estimate)
    double gap = 0.0;          // 1 - second_ratio
    int iterations = 0;
};

// kappa(s), Lambda = log kappa and its derivatives at 0, fitted once as a
// Chebyshev series on [-s_max, s_max]; gamma_m = Lambda^(m)(0).
struct SpectralModel {
    double s_max = 0.0;
    int n_s = 0;
    int M = 0;
    std::uint64_t ensemble_hash = 0;
    std::vector<double> s_nodes;
    std::vector<double> kappa_nodes;
    std::vector<double> gap_nodes;
    std::vector<double> cheb;      // Lambda(u * s_max) = sum' cheb_j T_j(u)
    std::array<double, 5> gammas{};  // Lambda'(0) .. Lambda^(5)(0)
    double sigma = 0.0;              // sqrt(gamma2)
    std::array<double, 3> cramer{};  // leading Cramer series coefficients
    double zeta_radius = 0.2;
    double min_gap = 0.0;
    // Set when the spectral gap stays below threshold at s = 0 itself (the
    // direction chain mixes slowly, e.g. conformal ensembles); kappa and the
    // Lambda derivatives are still meaningful when sigma(g, x) does not
    // depend on the direction.
    bool gap_warning = false;

    double lambda(double s) const;
    double lambda_d1(double s) const;
    double lambda_d2(double s) const;
    std::complex<double> lambda_c(std::complex<double> z) const;

    // Three-term Cramer series zeta(w) = c0 + c1 w + c2 w^2; w outside the
    // validity radius is an error.
    double zeta(double w) const;

    nlohmann::json to_json() const;
    static SpectralModel from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static SpectralModel load(const std::string& path);
};

struct SaddleSolution {
    double t = 0.0;
    long n = 0;
    double s_star = 0.0;
    double residual = 0.0;
    double series_value = 0.0;  // three-term inversion series for cross-check
    int iterations = 0;
};

// Solves Lambda'(s) - Lambda'(0) = +- sigma t / sqrt(n) by Newton iteration
// from the first series term. Errors name the largest attainable t when the
// target leaves the validated range.
SaddleSolution solve_saddle(const SpectralModel& model, double t, long n,
                            bool lower_tail = false);

struct DPhiResult {
    double value = 0.0;
    double clamped_mass = 0.0;  // pi_s mass of nodes with delta < 1e-12
    bool warning = false;       // clamped mass > 1e-3
};

struct PerturbedCheck {
    std::complex<double> eig_power;   // dominant eigenvalue of R_{s,iu}
    std::complex<double> eig_closed;  // exp(Lambda(s+iu) - Lambda(s) - iu Lambda'(s))
    double discrepancy = 0.0;
    double modulus_error = 0.0;
    double phase_error = 0.0;
    int iterations = 0;
};

class SpectralEngine {
public:
    // Finite-support ensembles with d == 2 only; anything else must fall
    // back to Monte Carlo estimates from the walk engine.
    SpectralEngine(MatrixEnsemble e, int M);

    const MatrixEnsemble& ensemble() const { return e_; }
    const ProjectiveGrid& grid() const { return grid_; }
    int grid_size() const { return grid_.M; }

    DiscretizedOperator<double> build_ps(double s) const;
    DiscretizedOperator<std::complex<double>> build_ps_complex(double s,
                                                               double u) const;

    EigenData dominant_eig(const DiscretizedOperator<double>& op) const;
    EigenData eig_at(double s) const;

    // s = 0 data: kappa = 1, r = 1, nu = invariant measure of G_n . x.
    const EigenData& stationary() const;

    SpectralModel fit_lambda(double s_max = 0.0, int n_s = 13) const;

    TiltedKernel tilted_kernel(double s) const;
    TiltedKernel tilted_kernel(double s, const EigenData& eig) const;

    // Discrete pi_s: nu_s-weighted r_s, normalized to total mass 1.
    std::vector<double> pi_weights(const EigenData& eig) const;

    // d_{s,phi}(y) = integral of phi(x) log delta(y,x) against pi_s.
    DPhiResult d_phi(const GridFn& phi, const DualPoint& y, double s) const;

    PerturbedCheck perturbed_eig_check(const SpectralModel& model, double s,
                                       double u) const;

    double default_s_max() const;

private:
    MatrixEnsemble e_;
    ProjectiveGrid grid_;
    mutable std::optional<EigenData> stationary_;
};

struct BPhiResult {
    double value = 0.0;
    double se = 0.0;
    bool plateau_warning = false;
    // one row per horizon: n, estimate, se
    std::vector<std::array<double, 3>> trace;
};

// b_{s,phi}(x) = lim_n E_{Q_s^x}[(sigma(G_n,x) - n Lambda'(s)) phi(G_n . x)],
// estimated by Monte Carlo along a horizon grid; the reported value is the
// Cesaro mean over the last half of the horizons.
BPhiResult b_phi(const SpectralEngine& engine, const GridFn& phi,
                 const ProjectivePoint& x0, double s, double lambda_prime,
                 const std::vector<int>& horizons, std::int64_t m,
                 std::uint64_t seed, int threads = 0);

}  // namespace rmp
