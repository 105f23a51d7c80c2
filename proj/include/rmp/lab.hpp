#pragma once

#include "rmp/spectral.hpp"
#include "rmp/walk.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rmp {

double normal_cdf(double t);
double normal_pdf(double t);

struct Summary {
    double mean = 0.0;
    double sd = 0.0;
    double se = 0.0;
    std::int64_t count = 0;
};
Summary summarize(const std::vector<double>& values);

// Sorted sample values with optional importance weights; the weighted CDF
// reaches exactly 1 at +infinity.
class EmpiricalDistribution {
public:
    static EmpiricalDistribution from_values(std::vector<double> values);
    static EmpiricalDistribution from_weighted(std::vector<double> values,
                                               const std::vector<double>& log_weights);

    double cdf(double t) const;
    double kolmogorov_distance(const std::function<double(double)>& F) const;
    std::int64_t count() const { return static_cast<std::int64_t>(values_.size()); }
    const std::vector<double>& sorted_values() const { return values_; }

private:
    std::vector<double> values_;       // ascending
    std::vector<double> cum_weights_;  // normalized, last == 1
};

// One theorem check = one tabular report: every probability estimate carries
// a standard error, pass/fail is computed only from the stated windows, and
// the meta block records seeds, hashes and windows for reproducibility.
struct ExpansionReport {
    std::string tag;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    bool pass = true;
    nlohmann::json meta;

    void add_row(std::initializer_list<double> row);
    void write_csv(const std::string& path) const;
    nlohmann::json summary() const;
};

struct CltWindows {
    double ratio_lo = 0.3;
    double ratio_hi = 0.85;
    double trend_se_slack = 2.0;
};

// Kolmogorov distance between the standardized coefficient law and Phi
// across an n-grid; samples[i] holds the walk samples at n_grid[i].
ExpansionReport clt_check(const std::vector<int>& n_grid,
                          const std::vector<std::vector<WalkSample>>& samples,
                          double lambda1, double sigma,
                          const CltWindows& windows = {});

// sup_t |E[phi(X_n) 1{. <= t}] - nu(phi) Phi(t)| over a uniform t-grid,
// with the fitted constant sqrt(n) * sup per n.
ExpansionReport berry_esseen_check(const std::vector<int>& n_grid,
                                   const std::vector<std::vector<WalkSample>>& samples,
                                   double lambda1, double sigma,
                                   const GridFn& phi, double nu_phi,
                                   double trend_se_slack = 2.0);

struct EdgeworthInputs {
    double lambda1 = 0.0;
    double sigma = 0.0;
    double gamma3 = 0.0;   // Lambda'''(0)
    double nu_phi = 1.0;   // nu(phi)
    double b_phi = 0.0;    // b_phi(x0)
    double d_phi = 0.0;    // d_phi(y)
};

// First-order Edgeworth expansion versus the plain Gaussian comparand; the
// improved fraction counts t-grid points where the expansion wins.
ExpansionReport edgeworth_check(const std::vector<int>& n_grid,
                                const std::vector<std::vector<WalkSample>>& samples,
                                const GridFn& phi, const EdgeworthInputs& in,
                                double improve_fraction_min = 0.8,
                                double trend_se_slack = 2.0);

struct MdpWindows {
    double ratio_lo = 0.8;
    double ratio_hi = 1.25;
    double rel_se_max = 0.05;
};

// Cramer moderate-deviation expansion via importance sampling at the saddle
// point: both tails, optional target function phi.
ExpansionReport mdp_expansion_check(const SpectralEngine& engine,
                                    const SpectralModel& model,
                                    const ProjectivePoint& x0, const DualPoint& f,
                                    int n, const std::vector<double>& t_grid,
                                    std::int64_t m, std::uint64_t seed,
                                    int threads = 0,
                                    const MdpWindows& windows = {},
                                    const GridFn* phi = nullptr,
                                    double nu_phi = 1.0);

// (n / b_n^2) log P(coeff - n lambda1 >= t b_n) against -t^2 / (2 sigma^2)
// for a schedule b_n = n^exponent.
ExpansionReport mdp_principle_check(const SpectralEngine& engine,
                                    const SpectralModel& model,
                                    const ProjectivePoint& x0, const DualPoint& f,
                                    const std::vector<int>& n_grid,
                                    double bn_exponent,
                                    const std::vector<double>& t_grid,
                                    std::int64_t m, std::uint64_t seed,
                                    int threads = 0,
                                    double final_window = 0.15);

struct PiecewiseLinear {
    std::vector<double> xs;  // increasing, compact support
    std::vector<double> ys;  // zero outside [xs.front(), xs.back()]
    double eval(double x) const;
    double integral() const;
    static PiecewiseLinear indicator(double a, double b);
};

struct LltWindows {
    double ratio_lo_bulk = 0.9;
    double ratio_hi_bulk = 1.1;
    double ratio_lo_tail = 0.8;
    double ratio_hi_tail = 1.25;
};

// Local limit theorem with moderate deviations: interval probabilities
// normalized by (a2-a1)/(sigma sqrt(2 pi n)) e^{-t^2/2 + t^3 zeta / sqrt(n)}.
// |t| < 1 rows use plain Monte Carlo with m_plain samples, the rest tilted
// sampling with m_tilted. Optional target mode replaces the indicator with
// phi(X_n) psi(coeff - n lambda1 - sqrt(n) sigma t).
ExpansionReport llt_check(const SpectralEngine& engine, const SpectralModel& model,
                          const ProjectivePoint& x0, const DualPoint& f, int n,
                          const std::vector<double>& t_grid, double a1, double a2,
                          std::int64_t m_plain, std::int64_t m_tilted,
                          std::uint64_t seed, int threads = 0,
                          const LltWindows& windows = {},
                          const GridFn* phi = nullptr, double nu_phi = 1.0,
                          const PiecewiseLinear* psi = nullptr);

struct RegularityOptions {
    double eta = 0.5;  // moment functional integral delta^-eta
    double p = 2.0;    // moment functional integral |log delta|^{p-1}
    int min_hits = 20;
    std::optional<double> tilt_s;  // run under Q_s instead of the plain law
};

// Tail regularity of the invariant measure: empirical log-survival of
// delta(y, G_n . x) against k, with exponential and k^alpha fits compared
// by AIC, plus the moment functionals.
ExpansionReport regularity_check(const SpectralEngine* engine_or_null,
                                 const MatrixEnsemble& e,
                                 const ProjectivePoint& x0, const DualPoint& y,
                                 int n, const std::vector<double>& k_grid,
                                 std::int64_t m, std::uint64_t seed,
                                 int threads = 0,
                                 const RegularityOptions& opts = {});

// Decay of the three density-point events of the contraction rates
// proposition across an n-grid. Requires lambda1 - lambda2 separated by at
// least 3 combined standard errors.
ExpansionReport rates_check(const MatrixEnsemble& e, const ProjectivePoint& x0,
                            const DualPoint& y, const std::vector<int>& n_grid,
                            std::int64_t m, std::uint64_t seed,
                            const LyapunovEstimate& lyap,
                            double epsilon_fraction = 0.25, int threads = 0);

// Partition of unity chi_{n,k}^y slicing P(V) by -log delta(y, .) in bands
// of width a_n = 1 / log n, with M_n = floor(A log^2 n) pieces plus a tail.
class PartitionOfUnity {
public:
    PartitionOfUnity(int n, DualPoint y, double A = 4.0);

    int horizon() const { return n_; }
    double band_width() const { return a_; }
    int count() const { return M_; }
    const DualPoint& dual_point() const { return y_; }

    // On the t = -log delta coordinate.
    double chi_t(int k, double t) const;
    double tail_t(int k, double t) const;

    double chi(int k, const ProjectivePoint& x) const;
    double tail(int k, const ProjectivePoint& x) const;

private:
    int n_;
    double a_;
    int M_;
    DualPoint y_;
};

ExpansionReport partition_unity_check(const PartitionOfUnity& part,
                                      std::int64_t n_points, std::uint64_t seed);

ExpansionReport partition_holder_check(const PartitionOfUnity& part, double gamma,
                                       std::int64_t pairs_per_band,
                                       std::uint64_t seed,
                                       double safety_factor = 3.0);

}  // namespace rmp
