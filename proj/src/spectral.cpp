#include "rmp/spectral.hpp"

#include "rmp/hash.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace rmp {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;
constexpr int kMaxPowerIterations = 100000;
constexpr double kPowerTol = 1e-13;

double wrap_angle(double theta) {
    theta = std::fmod(theta, kPi);
    if (theta < 0.0) theta += kPi;
    return theta;
}

// Chebyshev series with the halved-a0 convention:
// f(u) = a[0]/2 + sum_{j>=1} a[j] T_j(u).
template <typename ScalarT>
ScalarT clenshaw(const std::vector<double>& a, ScalarT u) {
    ScalarT b1{}, b2{};
    for (std::size_t j = a.size(); j-- > 1;) {
        const ScalarT b0 = 2.0 * u * b1 - b2 + a[j];
        b2 = b1;
        b1 = b0;
    }
    return u * b1 - b2 + a[0] / 2.0;
}

std::vector<double> cheb_derivative(const std::vector<double>& a) {
    const std::size_t n = a.size();
    std::vector<double> d(n, 0.0);
    if (n < 2) return d;
    for (std::size_t j = n - 1; j >= 1; --j) {
        d[j - 1] = (j + 1 < n ? d[j + 1] : 0.0) + 2.0 * static_cast<double>(j) * a[j];
        if (j == 1) break;
    }
    return d;
}

}  // namespace

double ProjectiveGrid::spacing() const { return kPi / M; }
double ProjectiveGrid::node(int j) const { return kPi * j / M; }
ProjectivePoint ProjectiveGrid::point(int j) const {
    return ProjectivePoint::from_angle(node(j));
}

double GridFn::at_angle(double theta) const {
    const double u = wrap_angle(theta) / kPi * static_cast<double>(M);
    std::size_t j = static_cast<std::size_t>(u);
    if (j >= static_cast<std::size_t>(M)) j -= static_cast<std::size_t>(M);
    const double w = u - std::floor(u);
    const std::size_t j1 = (j + 1) % static_cast<std::size_t>(M);
    return (1.0 - w) * values[j] + w * values[j1];
}

GridFn GridFn::constant(int M, double value) {
    GridFn f;
    f.M = M;
    f.values.assign(static_cast<std::size_t>(M), value);
    return f;
}

template <typename Scalar>
void DiscretizedOperator<Scalar>::apply(const std::vector<Scalar>& in,
                                        std::vector<Scalar>& out) const {
    out.assign(static_cast<std::size_t>(M), Scalar{});
    const int nnz = row_nnz;
    for (int j = 0; j < M; ++j) {
        Scalar acc{};
        const std::size_t base = static_cast<std::size_t>(j) * nnz;
        for (int k = 0; k < nnz; ++k)
            acc += vals[base + k] * in[static_cast<std::size_t>(cols[base + k])];
        out[static_cast<std::size_t>(j)] = acc;
    }
}

template <typename Scalar>
void DiscretizedOperator<Scalar>::apply_transpose(const std::vector<Scalar>& in,
                                                  std::vector<Scalar>& out) const {
    out.assign(static_cast<std::size_t>(M), Scalar{});
    const int nnz = row_nnz;
    for (int j = 0; j < M; ++j) {
        const std::size_t base = static_cast<std::size_t>(j) * nnz;
        const Scalar w = in[static_cast<std::size_t>(j)];
        for (int k = 0; k < nnz; ++k)
            out[static_cast<std::size_t>(cols[base + k])] += vals[base + k] * w;
    }
}

template <typename Scalar>
std::vector<Scalar> DiscretizedOperator<Scalar>::row_sums() const {
    std::vector<Scalar> sums(static_cast<std::size_t>(M), Scalar{});
    for (int j = 0; j < M; ++j) {
        Scalar acc{};
        const std::size_t base = static_cast<std::size_t>(j) * row_nnz;
        for (int k = 0; k < row_nnz; ++k) acc += vals[base + k];
        sums[static_cast<std::size_t>(j)] = acc;
    }
    return sums;
}

template struct DiscretizedOperator<double>;
template struct DiscretizedOperator<std::complex<double>>;

SpectralEngine::SpectralEngine(MatrixEnsemble e, int M) : e_(std::move(e)) {
    if (!e_.is_finite())
        throw SpectralError(
            "spectral engine requires a finite-support ensemble; use the walk "
            "engine's Monte Carlo estimates for generator ensembles");
    if (e_.dim() != 2)
        throw SpectralError(
            "spectral engine is d == 2 only; for d > 2 fall back to Monte "
            "Carlo estimates from the walk engine");
    if (M < 8) throw SpectralError("spectral engine: grid size must be >= 8");
    grid_.M = M;
}

namespace {

struct AtomAction {
    double sigma;      // sigma(g, x_j)
    double image_pos;  // image angle in grid units
};

// Geometry of atom actions on all grid nodes, shared by real and complex
// operator builds.
std::vector<AtomAction> atom_actions(const MatrixEnsemble& e, int M) {
    std::vector<AtomAction> acts(static_cast<std::size_t>(M) * e.atoms().size());
    const double h = kPi / M;
    for (int j = 0; j < M; ++j) {
        const double theta = h * j;
        const double x = std::cos(theta), y = std::sin(theta);
        for (std::size_t a = 0; a < e.atoms().size(); ++a) {
            const Matrix& g = e.atoms()[a].g;
            const double u = g(0, 0) * x + g(0, 1) * y;
            const double w = g(1, 0) * x + g(1, 1) * y;
            AtomAction act;
            act.sigma = 0.5 * std::log(u * u + w * w);
            act.image_pos = wrap_angle(std::atan2(w, u)) / h;
            if (act.image_pos >= static_cast<double>(M))
                act.image_pos -= static_cast<double>(M);
            acts[static_cast<std::size_t>(j) * e.atoms().size() + a] = act;
        }
    }
    return acts;
}

template <typename Scalar>
DiscretizedOperator<Scalar> build_operator(const MatrixEnsemble& e, int M,
                                           double s, double u) {
    DiscretizedOperator<Scalar> op;
    op.M = M;
    op.s = s;
    op.u = u;
    op.ensemble_hash = e.hash();
    const int na = static_cast<int>(e.atoms().size());
    op.row_nnz = 2 * na;
    op.cols.resize(static_cast<std::size_t>(M) * op.row_nnz);
    op.vals.resize(static_cast<std::size_t>(M) * op.row_nnz);
    const auto acts = atom_actions(e, M);
    for (int j = 0; j < M; ++j) {
        for (int a = 0; a < na; ++a) {
            const AtomAction& act = acts[static_cast<std::size_t>(j) * na + a];
            Scalar weight;
            if constexpr (std::is_same_v<Scalar, double>) {
                weight = e.atoms()[static_cast<std::size_t>(a)].prob *
                         std::exp(s * act.sigma);
            } else {
                weight = e.atoms()[static_cast<std::size_t>(a)].prob *
                         std::exp(std::complex<double>(s * act.sigma, u * act.sigma));
            }
            if constexpr (std::is_same_v<Scalar, double>) {
                if (!std::isfinite(weight))
                    throw SpectralError("non-finite tilt weight: s out of safe range");
            }
            int j0 = static_cast<int>(act.image_pos);
            if (j0 >= M) j0 -= M;
            const double frac = act.image_pos - std::floor(act.image_pos);
            const std::size_t base =
                static_cast<std::size_t>(j) * op.row_nnz + 2 * static_cast<std::size_t>(a);
            op.cols[base] = j0;
            op.vals[base] = weight * (1.0 - frac);
            op.cols[base + 1] = (j0 + 1) % M;
            op.vals[base + 1] = weight * frac;
        }
    }
    return op;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double sup_norm(const std::vector<double>& a) {
    double s = 0.0;
    for (const double v : a) s = std::max(s, std::abs(v));
    return s;
}

}  // namespace

DiscretizedOperator<double> SpectralEngine::build_ps(double s) const {
    return build_operator<double>(e_, grid_.M, s, 0.0);
}

DiscretizedOperator<std::complex<double>> SpectralEngine::build_ps_complex(
    double s, double u) const {
    return build_operator<std::complex<double>>(e_, grid_.M, s, u);
}

EigenData SpectralEngine::dominant_eig(const DiscretizedOperator<double>& op) const {
    const std::size_t M = static_cast<std::size_t>(op.M);
    EigenData out;

    // Right eigenfunction by power iteration.
    std::vector<double> r(M, 1.0), pr(M);
    double kappa = 1.0;
    int it = 0;
    for (; it < kMaxPowerIterations; ++it) {
        op.apply(r, pr);
        double mean = 0.0;
        for (const double v : pr) mean += v;
        mean /= static_cast<double>(M);
        kappa = mean;  // r is kept at mean 1
        double resid = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            resid = std::max(resid, std::abs(pr[i] - kappa * r[i]));
            scale = std::max(scale, std::abs(r[i]));
        }
        for (std::size_t i = 0; i < M; ++i) r[i] = pr[i] / mean;
        if (resid <= kPowerTol * std::abs(kappa) * scale) break;
    }

    // Left eigenvector (measure), total mass one.
    std::vector<double> nu(M, 1.0 / static_cast<double>(M)), pnu(M);
    for (int lit = 0; lit < kMaxPowerIterations; ++lit) {
        op.apply_transpose(nu, pnu);
        double mass = 0.0;
        for (const double v : pnu) mass += v;
        double resid = 0.0;
        for (std::size_t i = 0; i < M; ++i)
            resid = std::max(resid, std::abs(pnu[i] - mass * nu[i]));
        for (std::size_t i = 0; i < M; ++i) nu[i] = pnu[i] / mass;
        if (resid <= kPowerTol * std::abs(mass)) break;
        if (lit + 1 == kMaxPowerIterations)
            throw SpectralError("dominant_eig: left iteration did not converge");
    }

    // Rayleigh refinement of kappa.
    op.apply(r, pr);
    kappa = dot(nu, pr) / dot(nu, r);
    if (!(kappa > 0.0)) throw SpectralError("dominant_eig: non-positive eigenvalue");

    // Normalization nu0(r) = 1 against the s = 0 eigenmeasure.
    const std::vector<double>* nu0 = &nu;
    if (!(op.s == 0.0) || stationary_.has_value()) nu0 = &stationary().nu;
    const double scale_r = dot(*nu0, r);
    for (auto& v : r) v /= scale_r;

    // Second-eigenvalue modulus by deflated power iteration.
    std::vector<double> b(M), pb(M);
    for (std::size_t i = 0; i < M; ++i)
        b[i] = std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(M) + 0.7);
    const double nur = dot(nu, r);
    auto deflate = [&](std::vector<double>& v) {
        const double c = dot(nu, v) / nur;
        for (std::size_t i = 0; i < M; ++i) v[i] -= c * r[i];
    };
    deflate(b);
    double norm_b = sup_norm(b);
    for (auto& v : b) v /= norm_b;
    double log_growth = 0.0;
    const int defl_iters = 200, tail = 50;
    for (int k = 0; k < defl_iters; ++k) {
        op.apply(b, pb);
        deflate(pb);
        const double nb = sup_norm(pb);
        if (nb == 0.0) {
            log_growth = -745.0 * tail;
            break;
        }
        if (k >= defl_iters - tail) log_growth += std::log(nb);
        for (std::size_t i = 0; i < M; ++i) b[i] = pb[i] / nb;
    }
    const double second_modulus = std::exp(log_growth / tail);
    if (it >= kMaxPowerIterations)
        throw SpectralError(
            "dominant_eig: power iteration did not converge in 1e5 iterations "
            "(estimated second/first ratio " +
            std::to_string(second_modulus / kappa) + ")");

    out.kappa = kappa;
    out.r.M = op.M;
    out.r.values = std::move(r);
    out.nu = std::move(nu);
    out.second_ratio = second_modulus / kappa;
    out.gap = 1.0 - out.second_ratio;
    out.iterations = it;
    return out;
}

EigenData SpectralEngine::eig_at(double s) const { return dominant_eig(build_ps(s)); }

const EigenData& SpectralEngine::stationary() const {
    if (!stationary_.has_value()) stationary_ = dominant_eig(build_ps(0.0));
    return *stationary_;
}

double SpectralEngine::default_s_max() const {
    double mean_log_n = 0.0;
    for (const auto& a : e_.atoms()) mean_log_n += a.prob * std::log(size_N(a.g));
    return 0.3 / std::max(mean_log_n, 0.1);
}

SpectralModel SpectralEngine::fit_lambda(double s_max, int n_s) const {
    if (n_s < 9) throw SpectralError("fit_lambda: need at least 9 Chebyshev nodes");
    double smax = s_max > 0.0 ? s_max : default_s_max();

    SpectralModel model;
    model.n_s = n_s;
    model.M = grid_.M;
    model.ensemble_hash = e_.hash();

    // Sanity at s = 0 first: kappa(0) = 1, r_0 = 1.
    const EigenData& stat = stationary();
    if (std::abs(stat.kappa - 1.0) > 1e-8)
        throw SpectralError("fit_lambda: kappa(0) = " + std::to_string(stat.kappa) +
                            " deviates from 1 beyond 1e-8");

    // A gap already below threshold at s = 0 cannot be restored by
    // shrinking: it belongs to the direction chain, not the tilt. Record a
    // warning and keep the requested range in that case.
    const double base_gap = stat.gap;
    model.gap_warning = base_gap < 0.05;
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
        model.s_nodes.clear();
        model.kappa_nodes.clear();
        model.gap_nodes.clear();
        ok = true;
        for (int k = 0; k < n_s; ++k) {
            const double u = std::cos(kPi * (k + 0.5) / n_s);
            const double s = smax * u;
            const EigenData eig = eig_at(s);
            model.s_nodes.push_back(s);
            model.kappa_nodes.push_back(eig.kappa);
            model.gap_nodes.push_back(eig.gap);
            if (!model.gap_warning && eig.gap < 0.05) {
                ok = false;
                smax *= 0.7;  // gap collapse under the tilt: shrink the range
                break;
            }
        }
    }
    if (!ok)
        throw SpectralError(
            "fit_lambda: spectral gap stays below 0.05 after range shrinking; "
            "no validated s-range");
    model.s_max = smax;
    model.min_gap = *std::min_element(model.gap_nodes.begin(), model.gap_nodes.end());

    // Chebyshev coefficients of Lambda on the node values.
    model.cheb.assign(static_cast<std::size_t>(n_s), 0.0);
    for (int j = 0; j < n_s; ++j) {
        double c = 0.0;
        for (int k = 0; k < n_s; ++k) {
            const double lk = std::log(model.kappa_nodes[static_cast<std::size_t>(k)]);
            c += lk * std::cos(kPi * j * (k + 0.5) / n_s);
        }
        model.cheb[static_cast<std::size_t>(j)] = 2.0 * c / n_s;
    }

    // gamma_m from repeated Chebyshev differentiation at u = 0.
    std::vector<double> coeffs = model.cheb;
    for (int m = 1; m <= 5; ++m) {
        coeffs = cheb_derivative(coeffs);
        model.gammas[static_cast<std::size_t>(m - 1)] =
            clenshaw<double>(coeffs, 0.0) / std::pow(smax, m);
    }
    const double g2 = model.gammas[1], g3 = model.gammas[2], g4 = model.gammas[3],
                 g5 = model.gammas[4];
    if (!(g2 > 1e-7))
        throw SpectralError(
            "fit_lambda: gamma2 <= 0 (degenerate model: the cocycle has no "
            "asymptotic variance for this ensemble)");
    // Strict convexity across the fitted range.
    for (int k = 0; k <= 32; ++k) {
        const double s = smax * (2.0 * k / 32.0 - 1.0) * 0.999;
        if (model.lambda_d2(s) <= 0.0)
            throw SpectralError("fit_lambda: fitted Lambda'' not positive at s = " +
                                std::to_string(s));
    }
    model.sigma = std::sqrt(g2);
    model.cramer[0] = g3 / (6.0 * std::pow(g2, 1.5));
    model.cramer[1] = (g4 * g2 - 3.0 * g3 * g3) / (24.0 * std::pow(g2, 3.0));
    model.cramer[2] = (g5 * g2 * g2 - 10.0 * g4 * g3 * g2 + 15.0 * g3 * g3 * g3) /
                      (120.0 * std::pow(g2, 4.5));
    return model;
}

double SpectralModel::lambda(double s) const {
    return clenshaw<double>(cheb, s / s_max);
}

double SpectralModel::lambda_d1(double s) const {
    return clenshaw<double>(cheb_derivative(cheb), s / s_max) / s_max;
}

double SpectralModel::lambda_d2(double s) const {
    return clenshaw<double>(cheb_derivative(cheb_derivative(cheb)), s / s_max) /
           (s_max * s_max);
}

std::complex<double> SpectralModel::lambda_c(std::complex<double> z) const {
    return clenshaw<std::complex<double>>(cheb, z / s_max);
}

double SpectralModel::zeta(double w) const {
    if (std::abs(w) > zeta_radius)
        throw InputError("zeta: |t/sqrt(n)| = " + std::to_string(std::abs(w)) +
                         " outside the series validity radius " +
                         std::to_string(zeta_radius));
    return cramer[0] + cramer[1] * w + cramer[2] * w * w;
}

nlohmann::json SpectralModel::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["s_max"] = s_max;
    j["n_s"] = n_s;
    j["grid_M"] = M;
    j["ensemble_hash"] = to_hex(ensemble_hash);
    j["s_nodes"] = s_nodes;
    j["kappa_nodes"] = kappa_nodes;
    j["gap_nodes"] = gap_nodes;
    j["cheb"] = cheb;
    j["gammas"] = gammas;
    j["sigma"] = sigma;
    j["cramer"] = cramer;
    j["zeta_radius"] = zeta_radius;
    j["min_gap"] = min_gap;
    j["gap_warning"] = gap_warning;
    return j;
}

SpectralModel SpectralModel::from_json(const nlohmann::json& j) {
    SpectralModel m;
    m.s_max = j.at("s_max").get<double>();
    m.n_s = j.at("n_s").get<int>();
    m.M = j.at("grid_M").get<int>();
    m.ensemble_hash = std::stoull(j.at("ensemble_hash").get<std::string>(), nullptr, 16);
    m.s_nodes = j.at("s_nodes").get<std::vector<double>>();
    m.kappa_nodes = j.at("kappa_nodes").get<std::vector<double>>();
    m.gap_nodes = j.at("gap_nodes").get<std::vector<double>>();
    m.cheb = j.at("cheb").get<std::vector<double>>();
    m.gammas = j.at("gammas").get<std::array<double, 5>>();
    m.sigma = j.at("sigma").get<double>();
    m.cramer = j.at("cramer").get<std::array<double, 3>>();
    m.zeta_radius = j.at("zeta_radius").get<double>();
    m.min_gap = j.at("min_gap").get<double>();
    m.gap_warning = j.at("gap_warning").get<bool>();
    return m;
}

void SpectralModel::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write model file: " + path);
    out << to_json().dump(2) << "\n";
}

SpectralModel SpectralModel::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open model file: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
}

SaddleSolution solve_saddle(const SpectralModel& model, double t, long n,
                            bool lower_tail) {
    if (n < 1) throw InputError("solve_saddle: n >= 1 required");
    if (t < 0.0) throw InputError("solve_saddle: t >= 0 required (use lower_tail)");
    const double sqrt_n = std::sqrt(static_cast<double>(n));
    const double w = (lower_tail ? -1.0 : 1.0) * t / sqrt_n;
    const double target = model.sigma * w;
    const double d1_0 = model.lambda_d1(0.0);
    const double s_hi = 0.999 * model.s_max;

    SaddleSolution sol;
    sol.t = t;
    sol.n = n;
    const double g2 = model.gammas[1], g3 = model.gammas[2], g4 = model.gammas[3];
    sol.series_value = w / std::sqrt(g2) - g3 / (2.0 * g2 * g2) * w * w -
                       (g4 * g2 - 3.0 * g3 * g3) / (6.0 * std::pow(g2, 3.5)) * w * w * w;
    if (t == 0.0) {
        sol.s_star = 0.0;
        sol.residual = 0.0;
        return sol;
    }

    const double reach_hi = model.lambda_d1(s_hi) - d1_0;
    const double reach_lo = model.lambda_d1(-s_hi) - d1_0;
    if (target > reach_hi || target < reach_lo) {
        const double t_max =
            sqrt_n * (target > 0.0 ? reach_hi : -reach_lo) / model.sigma;
        throw SpectralError("solve_saddle: t = " + std::to_string(t) +
                            " outside the validated range; largest attainable t "
                            "at n = " +
                            std::to_string(n) + " is " + std::to_string(t_max));
    }

    double s = std::clamp(t / (sqrt_n * model.sigma) * (lower_tail ? -1.0 : 1.0),
                          -s_hi, s_hi);
    double resid = 0.0;
    int it = 0;
    for (; it < 100; ++it) {
        resid = model.lambda_d1(s) - d1_0 - target;
        if (std::abs(resid) <= 1e-11) break;
        const double d2 = model.lambda_d2(s);
        s = std::clamp(s - resid / d2, -s_hi, s_hi);
    }
    sol.s_star = s;
    sol.residual = std::abs(resid);
    sol.iterations = it;
    if (sol.residual > 1e-10)
        throw SpectralError("solve_saddle: Newton residual " +
                            std::to_string(sol.residual) + " above 1e-10");
    return sol;
}

TiltedKernel SpectralEngine::tilted_kernel(double s) const {
    if (s == 0.0)
        return TiltedKernel(e_, 0.0, 1.0, {});
    return tilted_kernel(s, eig_at(s));
}

TiltedKernel SpectralEngine::tilted_kernel(double s, const EigenData& eig) const {
    if (s == 0.0) return TiltedKernel(e_, 0.0, 1.0, {});
    std::vector<double> log_r(eig.r.values.size());
    for (std::size_t i = 0; i < log_r.size(); ++i) {
        // r_s is strictly positive; the floor guards interpolation underflow.
        log_r[i] = std::log(std::max(eig.r.values[i], 1e-300));
    }
    return TiltedKernel(e_, s, eig.kappa, std::move(log_r));
}

std::vector<double> SpectralEngine::pi_weights(const EigenData& eig) const {
    std::vector<double> pi(eig.nu.size());
    double total = 0.0;
    for (std::size_t i = 0; i < pi.size(); ++i) {
        pi[i] = eig.nu[i] * eig.r.values[i];
        total += pi[i];
    }
    for (auto& v : pi) v /= total;
    return pi;
}

DPhiResult SpectralEngine::d_phi(const GridFn& phi, const DualPoint& y,
                                 double s) const {
    const EigenData eig = s == 0.0 ? stationary() : eig_at(s);
    const auto pi = pi_weights(eig);
    DPhiResult out;
    const double fx = y.vec()[0], fy = y.vec()[1];
    for (int j = 0; j < grid_.M; ++j) {
        const double theta = grid_.node(j);
        const double del = std::abs(fx * std::cos(theta) + fy * std::sin(theta));
        double logd;
        if (del < 1e-12) {
            logd = kDefaultLogDeltaFloor;
            out.clamped_mass += pi[static_cast<std::size_t>(j)];
        } else {
            logd = std::log(std::min(1.0, del));
        }
        out.value += pi[static_cast<std::size_t>(j)] *
                     phi.values[static_cast<std::size_t>(j)] * logd;
    }
    out.warning = out.clamped_mass > 1e-3;
    return out;
}

PerturbedCheck SpectralEngine::perturbed_eig_check(const SpectralModel& model,
                                                   double s, double u) const {
    using Cplx = std::complex<double>;
    const EigenData eig = s == 0.0 ? stationary() : eig_at(s);
    if (eig.gap < 0.005)
        throw SpectralError("perturbed_eig_check: spectral gap collapsed at s = " +
                            std::to_string(s));
    const double d1 = model.lambda_d1(s);
    auto op = build_ps_complex(s, u);
    // R_{s,iu} = e^{-iu Lambda'(s)} (kappa_s r_s)^{-1} P_{s+iu} (r_s .)
    const Cplx phase = std::exp(Cplx(0.0, -u * d1));
    const std::size_t M = static_cast<std::size_t>(op.M);
    for (std::size_t j = 0; j < M; ++j) {
        const std::size_t base = j * static_cast<std::size_t>(op.row_nnz);
        for (int k = 0; k < op.row_nnz; ++k) {
            const std::size_t col = static_cast<std::size_t>(op.cols[base + k]);
            op.vals[base + k] *= phase * eig.r.values[col] /
                                 (eig.kappa * eig.r.values[j]);
        }
    }

    std::vector<Cplx> v(M, Cplx(1.0, 0.0)), pv(M);
    Cplx lambda(1.0, 0.0);
    int it = 0;
    for (; it < kMaxPowerIterations; ++it) {
        op.apply(v, pv);
        Cplx num{}, den{};
        for (std::size_t i = 0; i < M; ++i) {
            num += std::conj(v[i]) * pv[i];
            den += std::conj(v[i]) * v[i];
        }
        lambda = num / den;
        double resid = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            resid = std::max(resid, std::abs(pv[i] - lambda * v[i]));
            scale = std::max(scale, std::abs(v[i]));
        }
        double nrm = 0.0;
        for (const auto& z : pv) nrm += std::norm(z);
        nrm = std::sqrt(nrm / static_cast<double>(M));
        for (std::size_t i = 0; i < M; ++i) v[i] = pv[i] / nrm;
        if (resid <= 1e-12 * std::abs(lambda) * scale) break;
    }
    if (it >= kMaxPowerIterations)
        throw SpectralError("perturbed_eig_check: complex power iteration stalled");

    PerturbedCheck out;
    out.eig_power = lambda;
    out.eig_closed = std::exp(model.lambda_c(Cplx(s, u)) - model.lambda(s) -
                              Cplx(0.0, u * d1));
    out.discrepancy = std::abs(out.eig_power - out.eig_closed);
    out.modulus_error = std::abs(std::abs(out.eig_power) - std::abs(out.eig_closed));
    out.phase_error = std::abs(std::arg(out.eig_power / out.eig_closed));
    out.iterations = it;
    return out;
}

BPhiResult b_phi(const SpectralEngine& engine, const GridFn& phi,
                 const ProjectivePoint& x0, double s, double lambda_prime,
                 const std::vector<int>& horizons, std::int64_t m,
                 std::uint64_t seed, int threads) {
    if (horizons.size() < 2) throw InputError("b_phi: need at least two horizons");
    const TiltedKernel kernel = engine.tilted_kernel(s);
    const DualPoint y = DualPoint::axis(2, 0);  // unused by the estimate
    const auto per_horizon =
        tilted_run_walks_horizons(kernel, x0, y, horizons, m, seed, threads);

    BPhiResult out;
    for (std::size_t h = 0; h < horizons.size(); ++h) {
        const double n = static_cast<double>(horizons[h]);
        double mean = 0.0, m2 = 0.0;
        std::int64_t count = 0;
        for (const auto& smp : per_horizon[h]) {
            const double v = (smp.sigma_n - n * lambda_prime) * phi.at_angle(smp.terminal_angle);
            ++count;
            const double d = v - mean;
            mean += d / static_cast<double>(count);
            m2 += d * (v - mean);
        }
        const double se =
            count > 1 ? std::sqrt(m2 / static_cast<double>(count - 1) /
                                  static_cast<double>(count))
                      : 0.0;
        out.trace.push_back({n, mean, se});
    }
    const std::size_t half = out.trace.size() / 2;
    double acc = 0.0;
    for (std::size_t h = half; h < out.trace.size(); ++h) acc += out.trace[h][1];
    out.value = acc / static_cast<double>(out.trace.size() - half);
    out.se = out.trace.back()[2];
    const double drift = std::abs(out.trace.back()[1] - out.trace[half][1]);
    out.plateau_warning = drift > 0.10 * std::max(std::abs(out.value), 5.0 * out.se);
    return out;
}

}  // namespace rmp
