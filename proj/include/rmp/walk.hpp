#pragma once

#include "rmp/ensemble.hpp"
#include "rmp/linalg.hpp"
#include "rmp/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace rmp {

struct WalkError : std::runtime_error {
    WalkError(const std::string& msg, std::int64_t trajectory, int step)
        : std::runtime_error(msg + " (trajectory " + std::to_string(trajectory) +
                             ", step " + std::to_string(step) + ")"),
          trajectory_index(trajectory),
          step_index(step) {}
    std::int64_t trajectory_index;
    int step_index;
};

// Terminal statistics of one trajectory at horizon n.
struct WalkSample {
    std::uint64_t trajectory_seed = 0;
    double sigma_n = 0.0;      // sigma(G_n, x0) = log ||G_n v||
    double coeff_log_n = 0.0;  // log |<f, G_n v>| = sigma_n + log_delta_n
    double log_delta_n = 0.0;  // log delta(y, G_n . x0), <= 0, may be -inf
    double ext2_log_norm = 0.0;  // log volume growth of a 2-frame (NaN if off)
    double terminal_angle = 0.0;  // d == 2 angle of G_n . x0; NaN otherwise
    double importance_log_weight = 0.0;  // 0 for untilted runs
};

struct WalkPlan {
    int n = 100;
    std::int64_t m = 1;
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = hardware concurrency
    bool track_ext2 = true;
};

// Streaming state for one trajectory: the current direction, the running
// cocycle, and a renormalized 2-frame tracking log ||^2 (g_n ... g_1)||.
// Everything is renormalized every step, so horizons of thousands of steps
// stay inside double range.
class WalkState {
public:
    WalkState(const ProjectivePoint& x0, bool track_ext2);

    void step(const Matrix& g);

    const Vector& direction() const { return dir_; }
    double log_norm() const { return log_norm_; }
    double ext2_log_norm() const { return ext2_log_norm_; }
    int step_count() const { return steps_; }
    double angle() const;  // d == 2

private:
    Vector dir_;
    Matrix frame_;  // d x 2, kept orthonormal
    Vector tmp_;
    Matrix ftmp_;
    double log_norm_ = 0.0;
    double ext2_log_norm_ = 0.0;
    int steps_ = 0;
    bool track_ext2_;
};

// m i.i.d. trajectories at horizon n. Trajectory t draws from the counter
// stream derived from (seed, t); the output is a pure function of
// (ensemble, x0, f, plan.n, plan.m, plan.seed) whatever the thread count.
std::vector<WalkSample> run_walks(const MatrixEnsemble& e,
                                  const ProjectivePoint& x0, const DualPoint& f,
                                  const WalkPlan& plan);

struct LyapunovEstimate {
    double lambda1 = 0.0, lambda1_se = 0.0;
    double lambda2 = 0.0, lambda2_se = 0.0;
    double sum12 = 0.0, sum12_se = 0.0;  // lambda1 + lambda2
    int n = 0;
    std::int64_t m = 0;
};

// lambda1 from the cocycle, lambda1 + lambda2 from the 2-frame volume,
// lambda2 by subtraction. Requires n >= 50.
LyapunovEstimate estimate_lyapunov(const MatrixEnsemble& e,
                                   const ProjectivePoint& x0,
                                   const WalkPlan& plan);

// Exponentially tilted step kernel at parameter s for a finite-support
// ensemble (d == 2): g is drawn with probability proportional to
// mu(g) e^{s sigma(g,x)} r_s(g.x), normalized exactly at every state.
// The accumulated importance log-weight makes reweighted expectations
// reproduce the original measure.
class TiltedKernel {
public:
    // log_r holds log r_s at the grid angles j*pi/M (linear interpolation
    // in angle between nodes). s == 0 is special-cased to the plain kernel
    // so the tilted sampler coincides with run_walks sample-by-sample.
    TiltedKernel(const MatrixEnsemble& e, double s, double kappa_s,
                 std::vector<double> log_r);

    double s() const { return s_; }
    double kappa() const { return kappa_s_; }
    const MatrixEnsemble& ensemble() const { return *ensemble_; }
    double log_r_at(double angle) const;

    // Fills probs (size = atom count) with the tilted distribution at the
    // state with the given angle; returns log of the normalizing mass
    // W(x) = sum_g mu(g) e^{s sigma(g,x)} r_s(g.x).
    double state_distribution(double angle, std::span<double> probs) const;

    struct AtomGeometry {
        double a, b, c, d;  // 2x2 entries
        double prob;
    };
    const std::vector<AtomGeometry>& atom_geometry() const { return geo_; }

private:
    const MatrixEnsemble* ensemble_;
    std::vector<AtomGeometry> geo_;
    std::vector<double> log_r_;  // grid values of log r_s
    double s_ = 0.0;
    double kappa_s_ = 1.0;
};

std::vector<WalkSample> tilted_run_walks(const TiltedKernel& kernel,
                                         const ProjectivePoint& x0,
                                         const DualPoint& f,
                                         const WalkPlan& plan);

// Per-horizon snapshots of the same trajectories: result[h][t] holds the
// sample of trajectory t stopped at horizons[h]. Horizons must be
// increasing. Used by checks that compare several n on common paths.
std::vector<std::vector<WalkSample>> run_walks_horizons(
    const MatrixEnsemble& e, const ProjectivePoint& x0, const DualPoint& f,
    const std::vector<int>& horizons, std::int64_t m, std::uint64_t seed,
    int threads = 0, bool track_ext2 = false);

std::vector<std::vector<WalkSample>> tilted_run_walks_horizons(
    const TiltedKernel& kernel, const ProjectivePoint& x0, const DualPoint& f,
    const std::vector<int>& horizons, std::int64_t m, std::uint64_t seed,
    int threads = 0);

// Samples of G_n . x0 after burn-in, approximating the invariant measure nu
// (plain) or pi_s (tilted): m chains, n_keep consecutive states each.
std::vector<ProjectivePoint> occupation_sample(const MatrixEnsemble& e,
                                               const ProjectivePoint& x0,
                                               int n_burn, int n_keep,
                                               std::int64_t m,
                                               std::uint64_t seed);
std::vector<ProjectivePoint> occupation_sample(const TiltedKernel& kernel,
                                               const ProjectivePoint& x0,
                                               int n_burn, int n_keep,
                                               std::int64_t m,
                                               std::uint64_t seed);

// Deterministic slot-indexed parallel loop shared by the engines.
void parallel_for_indexed(std::int64_t count, int threads,
                          const std::function<void(std::int64_t)>& body);

}  // namespace rmp
