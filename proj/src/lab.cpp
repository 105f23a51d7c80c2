#include "rmp/lab.hpp"

#include "rmp/hash.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rmp {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

double clamp_log_delta(double v) {
    return std::isfinite(v) ? v : kDefaultLogDeltaFloor;
}

std::vector<double> standardized_coeffs(const std::vector<WalkSample>& samples,
                                        int n, double lambda1, double sigma) {
    std::vector<double> z;
    z.reserve(samples.size());
    const double denom = sigma * std::sqrt(static_cast<double>(n));
    for (const auto& s : samples) {
        const double coeff = s.sigma_n + clamp_log_delta(s.log_delta_n);
        z.push_back((coeff - n * lambda1) / denom);
    }
    return z;
}

struct LineFit {
    double slope = 0.0, intercept = 0.0, r2 = 0.0, sse = 0.0;
    long n = 0;
};

LineFit ols(const std::vector<double>& x, const std::vector<double>& y) {
    LineFit f;
    f.n = static_cast<long>(x.size());
    if (f.n < 2) return f;
    double sx = 0, sy = 0;
    for (long i = 0; i < f.n; ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / f.n, my = sy / f.n;
    double sxx = 0, sxy = 0, syy = 0;
    for (long i = 0; i < f.n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) return f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.sse = std::max(0.0, syy - f.slope * sxy);
    f.r2 = syy > 0.0 ? 1.0 - f.sse / syy : 0.0;
    return f;
}

double aic(double sse, long n, int params) {
    return static_cast<double>(n) * std::log(std::max(sse, 1e-300) / n) +
           2.0 * params;
}

// E[phi(X_n) 1{z <= t}] evaluated on a t-grid from (z, phi) pairs, with
// optional importance weights.
struct WeightedCdf {
    std::vector<double> z;       // sorted
    std::vector<double> prefix;  // prefix sums of phi * weight / m
    double at(double t) const {
        const auto it = std::upper_bound(z.begin(), z.end(), t);
        const std::size_t k = static_cast<std::size_t>(it - z.begin());
        return k == 0 ? 0.0 : prefix[k - 1];
    }
};

WeightedCdf make_weighted_cdf(const std::vector<double>& z,
                              const std::vector<double>& payload) {
    std::vector<std::size_t> idx(z.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return z[a] < z[b]; });
    WeightedCdf out;
    out.z.resize(z.size());
    out.prefix.resize(z.size());
    double acc = 0.0;
    const double inv_m = 1.0 / static_cast<double>(z.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.z[i] = z[idx[i]];
        acc += payload[idx[i]] * inv_m;
        out.prefix[i] = acc;
    }
    return out;
}

std::vector<double> uniform_grid(double lo, double hi, int count) {
    std::vector<double> g(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
    return g;
}

Summary weighted_event_summary(const std::vector<WalkSample>& samples,
                               const std::function<double(const WalkSample&)>& h) {
    Summary s;
    double mean = 0.0, m2 = 0.0;
    std::int64_t count = 0;
    for (const auto& smp : samples) {
        const double v = std::exp(smp.importance_log_weight) * h(smp);
        ++count;
        const double d = v - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (v - mean);
    }
    s.count = count;
    s.mean = mean;
    s.sd = count > 1 ? std::sqrt(m2 / static_cast<double>(count - 1)) : 0.0;
    s.se = count > 0 ? s.sd / std::sqrt(static_cast<double>(count)) : 0.0;
    return s;
}

}  // namespace

double normal_cdf(double t) { return 0.5 * std::erfc(-t / std::sqrt(2.0)); }

double normal_pdf(double t) {
    return std::exp(-0.5 * t * t) / std::sqrt(2.0 * kPi);
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    double mean = 0.0, m2 = 0.0;
    std::int64_t count = 0;
    for (const double v : values) {
        ++count;
        const double d = v - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (v - mean);
    }
    s.count = count;
    s.mean = mean;
    s.sd = count > 1 ? std::sqrt(m2 / static_cast<double>(count - 1)) : 0.0;
    s.se = count > 0 ? s.sd / std::sqrt(static_cast<double>(count)) : 0.0;
    return s;
}

EmpiricalDistribution EmpiricalDistribution::from_values(std::vector<double> values) {
    EmpiricalDistribution ed;
    ed.values_ = std::move(values);
    std::sort(ed.values_.begin(), ed.values_.end());
    ed.cum_weights_.resize(ed.values_.size());
    const double inv = 1.0 / static_cast<double>(ed.values_.size());
    for (std::size_t i = 0; i < ed.values_.size(); ++i)
        ed.cum_weights_[i] = static_cast<double>(i + 1) * inv;
    if (!ed.cum_weights_.empty()) ed.cum_weights_.back() = 1.0;
    return ed;
}

EmpiricalDistribution EmpiricalDistribution::from_weighted(
    std::vector<double> values, const std::vector<double>& log_weights) {
    if (values.size() != log_weights.size())
        throw InputError("EmpiricalDistribution: value/weight size mismatch");
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    double max_lw = -std::numeric_limits<double>::infinity();
    for (const double lw : log_weights) max_lw = std::max(max_lw, lw);
    EmpiricalDistribution ed;
    ed.values_.resize(values.size());
    ed.cum_weights_.resize(values.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        ed.values_[i] = values[idx[i]];
        acc += std::exp(log_weights[idx[i]] - max_lw);
        ed.cum_weights_[i] = acc;
    }
    for (auto& w : ed.cum_weights_) w /= acc;
    ed.cum_weights_.back() = 1.0;
    return ed;
}

double EmpiricalDistribution::cdf(double t) const {
    const auto it = std::upper_bound(values_.begin(), values_.end(), t);
    const std::size_t k = static_cast<std::size_t>(it - values_.begin());
    return k == 0 ? 0.0 : cum_weights_[k - 1];
}

double EmpiricalDistribution::kolmogorov_distance(
    const std::function<double(double)>& F) const {
    double d = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
        const double ft = F(values_[i]);
        const double lo = i == 0 ? 0.0 : cum_weights_[i - 1];
        d = std::max(d, std::max(std::abs(cum_weights_[i] - ft), std::abs(lo - ft)));
    }
    return d;
}

void ExpansionReport::add_row(std::initializer_list<double> row) {
    rows.emplace_back(row);
}

ExpansionReport clt_check(const std::vector<int>& n_grid,
                          const std::vector<std::vector<WalkSample>>& samples,
                          double lambda1, double sigma,
                          const CltWindows& windows) {
    if (!(sigma > 0.0)) throw InputError("clt_check: sigma must be > 0");
    if (n_grid.size() != samples.size())
        throw InputError("clt_check: n-grid / sample-set mismatch");
    ExpansionReport rep;
    rep.tag = "clt";
    rep.columns = {"n", "kolmogorov", "se", "sqrt_n_D", "ratio_vs_prev", "row_ok"};
    double prev_d = 0.0, prev_scaled = 0.0, prev_se_scaled = 0.0;
    for (std::size_t i = 0; i < n_grid.size(); ++i) {
        const int n = n_grid[i];
        auto ed = EmpiricalDistribution::from_values(
            standardized_coeffs(samples[i], n, lambda1, sigma));
        const double d = ed.kolmogorov_distance(normal_cdf);
        const double se = 0.5 / std::sqrt(static_cast<double>(samples[i].size()));
        const double scaled = std::sqrt(static_cast<double>(n)) * d;
        const double se_scaled = std::sqrt(static_cast<double>(n)) * se;
        double ratio = std::numeric_limits<double>::quiet_NaN();
        bool ok = true;
        if (i > 0) {
            ratio = d / prev_d;
            if (ratio < windows.ratio_lo || ratio > windows.ratio_hi) ok = false;
            if (scaled > prev_scaled +
                             windows.trend_se_slack * (se_scaled + prev_se_scaled))
                ok = false;
        }
        rep.add_row({static_cast<double>(n), d, se, scaled, ratio, ok ? 1.0 : 0.0});
        rep.pass = rep.pass && ok;
        prev_d = d;
        prev_scaled = scaled;
        prev_se_scaled = se_scaled;
    }
    rep.meta = {{"lambda1", lambda1},
                {"sigma", sigma},
                {"ratio_window", {windows.ratio_lo, windows.ratio_hi}},
                {"trend_se_slack", windows.trend_se_slack}};
    return rep;
}

ExpansionReport berry_esseen_check(const std::vector<int>& n_grid,
                                   const std::vector<std::vector<WalkSample>>& samples,
                                   double lambda1, double sigma,
                                   const GridFn& phi, double nu_phi,
                                   double trend_se_slack) {
    if (!(sigma > 0.0)) throw InputError("berry_esseen_check: sigma must be > 0");
    ExpansionReport rep;
    rep.tag = "berry-esseen";
    rep.columns = {"n", "sup_resid", "se", "sqrt_n_sup", "row_ok"};
    const auto t_grid = uniform_grid(-4.0, 4.0, 512);
    double phi_inf = 0.0;
    for (const double v : phi.values) phi_inf = std::max(phi_inf, std::abs(v));
    double prev_scaled = 0.0, prev_se_scaled = 0.0;
    std::vector<double> log_sqrtn_sup, loglog_n;
    for (std::size_t i = 0; i < n_grid.size(); ++i) {
        const int n = n_grid[i];
        const auto z = standardized_coeffs(samples[i], n, lambda1, sigma);
        std::vector<double> payload(samples[i].size());
        for (std::size_t k = 0; k < samples[i].size(); ++k)
            payload[k] = phi.at_angle(samples[i][k].terminal_angle);
        const auto cdf = make_weighted_cdf(z, payload);
        double sup = 0.0;
        for (const double t : t_grid)
            sup = std::max(sup, std::abs(cdf.at(t) - nu_phi * normal_cdf(t)));
        const double se =
            0.5 * std::max(phi_inf, 1e-12) / std::sqrt(static_cast<double>(samples[i].size()));
        const double scaled = std::sqrt(static_cast<double>(n)) * sup;
        const double se_scaled = std::sqrt(static_cast<double>(n)) * se;
        bool ok = true;
        if (i > 0 && scaled > prev_scaled + trend_se_slack * (se_scaled + prev_se_scaled))
            ok = false;
        rep.add_row({static_cast<double>(n), sup, se, scaled, ok ? 1.0 : 0.0});
        rep.pass = rep.pass && ok;
        prev_scaled = scaled;
        prev_se_scaled = se_scaled;
        if (n >= 3) {
            log_sqrtn_sup.push_back(std::log(std::max(scaled, 1e-300)));
            loglog_n.push_back(std::log(std::log(static_cast<double>(n))));
        }
    }
    rep.meta = {{"lambda1", lambda1},
                {"sigma", sigma},
                {"nu_phi", nu_phi},
                {"trend_se_slack", trend_se_slack}};
    if (log_sqrtn_sup.size() >= 3) {
        // Envelope fit sqrt(n) sup ~ log^{1/alpha} n for subexponential laws.
        const LineFit env = ols(loglog_n, log_sqrtn_sup);
        rep.meta["envelope_exponent"] = env.slope;  // fitted 1/alpha
        rep.meta["envelope_alpha"] = env.slope != 0.0 ? 1.0 / env.slope : 0.0;
    }
    return rep;
}

ExpansionReport edgeworth_check(const std::vector<int>& n_grid,
                                const std::vector<std::vector<WalkSample>>& samples,
                                const GridFn& phi, const EdgeworthInputs& in,
                                double improve_fraction_min,
                                double trend_se_slack) {
    if (!(in.sigma > 0.0)) throw InputError("edgeworth_check: sigma must be > 0");
    ExpansionReport rep;
    rep.tag = "edgeworth";
    rep.columns = {"n",
                   "max_scaled_resid_edgeworth",
                   "max_scaled_resid_plain",
                   "improved_fraction",
                   "se_scaled",
                   "row_ok"};
    const auto t_grid = uniform_grid(-3.0, 3.0, 512);
    double phi_inf = 0.0;
    for (const double v : phi.values) phi_inf = std::max(phi_inf, std::abs(v));
    double prev_max = 0.0, prev_se = 0.0;
    for (std::size_t i = 0; i < n_grid.size(); ++i) {
        const int n = n_grid[i];
        const double sqn = std::sqrt(static_cast<double>(n));
        const auto z = standardized_coeffs(samples[i], n, in.lambda1, in.sigma);
        std::vector<double> payload(samples[i].size());
        for (std::size_t k = 0; k < samples[i].size(); ++k)
            payload[k] = phi.at_angle(samples[i][k].terminal_angle);
        const auto cdf = make_weighted_cdf(z, payload);
        double max_e = 0.0, max_p = 0.0;
        long improved = 0;
        for (const double t : t_grid) {
            const double emp = cdf.at(t);
            const double plain = in.nu_phi * normal_cdf(t);
            const double edge =
                in.nu_phi * (normal_cdf(t) + in.gamma3 / (6.0 * std::pow(in.sigma, 3) * sqn) *
                                                 (1.0 - t * t) * normal_pdf(t)) -
                (in.b_phi + in.d_phi) / (in.sigma * sqn) * normal_pdf(t);
            const double re = std::abs(emp - edge), rp = std::abs(emp - plain);
            max_e = std::max(max_e, sqn * re);
            max_p = std::max(max_p, sqn * rp);
            if (re < rp) ++improved;
        }
        const double frac = static_cast<double>(improved) / static_cast<double>(t_grid.size());
        const double se_scaled =
            sqn * 0.5 * std::max(phi_inf, 1e-12) / std::sqrt(static_cast<double>(samples[i].size()));
        bool ok = frac >= improve_fraction_min;
        if (i > 0 && max_e > prev_max + trend_se_slack * (se_scaled + prev_se)) ok = false;
        rep.add_row({static_cast<double>(n), max_e, max_p, frac, se_scaled, ok ? 1.0 : 0.0});
        rep.pass = rep.pass && ok;
        prev_max = max_e;
        prev_se = se_scaled;
    }
    rep.meta = {{"lambda1", in.lambda1}, {"sigma", in.sigma},
                {"gamma3", in.gamma3},   {"nu_phi", in.nu_phi},
                {"b_phi", in.b_phi},     {"d_phi", in.d_phi},
                {"improve_fraction_min", improve_fraction_min}};
    return rep;
}

ExpansionReport mdp_expansion_check(const SpectralEngine& engine,
                                    const SpectralModel& model,
                                    const ProjectivePoint& x0, const DualPoint& f,
                                    int n, const std::vector<double>& t_grid,
                                    std::int64_t m, std::uint64_t seed,
                                    int threads, const MdpWindows& windows,
                                    const GridFn* phi, double nu_phi) {
    ExpansionReport rep;
    rep.tag = "mdp-expansion";
    rep.columns = {"t",   "tail",  "s_star", "estimate", "se",
                   "theory", "ratio", "rel_se", "row_ok"};
    const double lambda1 = model.gammas[0];
    const double sigma = model.sigma;
    const double sqn = std::sqrt(static_cast<double>(n));
    std::uint64_t row_index = 0;
    for (const double t : t_grid) {
        for (const int tail : {+1, -1}) {
            ++row_index;
            double s_star = 0.0, est = 0.0, se = 0.0, theory = 0.0;
            bool row_valid = true;
            try {
                const SaddleSolution sol = solve_saddle(model, t, n, tail < 0);
                s_star = sol.s_star;
                const TiltedKernel kernel = engine.tilted_kernel(s_star);
                WalkPlan plan;
                plan.n = n;
                plan.m = m;
                plan.seed = splitmix64(seed ^ (row_index * 0x9E3779B97F4A7C15ull));
                plan.threads = threads;
                const auto samples = tilted_run_walks(kernel, x0, f, plan);
                const double threshold = sqn * sigma * t;
                const auto summary = weighted_event_summary(
                    samples, [&](const WalkSample& smp) {
                        const double dev =
                            smp.sigma_n + clamp_log_delta(smp.log_delta_n) -
                            n * lambda1;
                        const bool hit = tail > 0 ? dev >= threshold : dev <= -threshold;
                        if (!hit) return 0.0;
                        return phi ? phi->at_angle(smp.terminal_angle) : 1.0;
                    });
                est = summary.mean;
                se = summary.se;
                const double w = t / sqn;
                if (tail > 0) {
                    theory = nu_phi * (1.0 - normal_cdf(t)) *
                             std::exp(t * t * t / sqn * model.zeta(w));
                } else {
                    theory = nu_phi * normal_cdf(-t) *
                             std::exp(-t * t * t / sqn * model.zeta(-w));
                }
            } catch (const std::exception& ex) {
                rep.meta["row_errors"].push_back(
                    {{"t", t}, {"tail", tail}, {"error", ex.what()}});
                row_valid = false;
            }
            if (!row_valid) {
                const double nan = std::numeric_limits<double>::quiet_NaN();
                rep.add_row({t, static_cast<double>(tail), nan, nan, nan, nan, nan,
                             nan, 0.0});
                continue;
            }
            const double ratio = est / theory;
            const double rel_se = est > 0.0 ? se / est : std::numeric_limits<double>::infinity();
            const bool ok = ratio >= windows.ratio_lo && ratio <= windows.ratio_hi &&
                            rel_se <= windows.rel_se_max;
            rep.add_row({t, static_cast<double>(tail), s_star, est, se, theory,
                         ratio, rel_se, ok ? 1.0 : 0.0});
            rep.pass = rep.pass && ok;
        }
    }
    rep.meta["n"] = n;
    rep.meta["m"] = m;
    rep.meta["windows"] = {windows.ratio_lo, windows.ratio_hi, windows.rel_se_max};
    rep.meta["target_function"] = phi != nullptr;
    return rep;
}

ExpansionReport mdp_principle_check(const SpectralEngine& engine,
                                    const SpectralModel& model,
                                    const ProjectivePoint& x0, const DualPoint& f,
                                    const std::vector<int>& n_grid,
                                    double bn_exponent,
                                    const std::vector<double>& t_grid,
                                    std::int64_t m, std::uint64_t seed,
                                    int threads, double final_window) {
    if (!(bn_exponent > 0.5 && bn_exponent < 1.0))
        throw InputError("mdp_principle_check: need 0.5 < exponent < 1 so that "
                         "b_n/sqrt(n) -> inf and b_n/n -> 0");
    ExpansionReport rep;
    rep.tag = "mdp-principle";
    rep.columns = {"n",   "t",   "b_n",      "estimate", "se",
                   "lhs", "rhs", "abs_diff", "se_lhs",   "row_ok"};
    const double lambda1 = model.gammas[0];
    const double sigma = model.sigma;
    std::uint64_t row_index = 0;
    for (const double t : t_grid) {
        double prev_diff = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n_grid.size(); ++i) {
            ++row_index;
            const int n = n_grid[i];
            const double bn = std::pow(static_cast<double>(n), bn_exponent);
            const double scale = static_cast<double>(n) / (bn * bn);
            const double t_std = t * bn / (sigma * std::sqrt(static_cast<double>(n)));
            const SaddleSolution sol = solve_saddle(model, t_std, n);
            const TiltedKernel kernel = engine.tilted_kernel(sol.s_star);
            WalkPlan plan;
            plan.n = n;
            plan.m = m;
            plan.seed = splitmix64(seed ^ (row_index * 0x9E3779B97F4A7C15ull));
            plan.threads = threads;
            const auto samples = tilted_run_walks(kernel, x0, f, plan);
            const double threshold = t * bn;
            const auto summary =
                weighted_event_summary(samples, [&](const WalkSample& smp) {
                    const double dev = smp.sigma_n + clamp_log_delta(smp.log_delta_n) -
                                       n * lambda1;
                    return dev >= threshold ? 1.0 : 0.0;
                });
            const double lhs = scale * std::log(std::max(summary.mean, 1e-300));
            const double rhs = -t * t / (2.0 * sigma * sigma);
            const double diff = std::abs(lhs - rhs);
            const double se_lhs =
                summary.mean > 0.0 ? scale * summary.se / summary.mean
                                   : std::numeric_limits<double>::infinity();
            bool ok = true;
            if (t > 0.0) {
                if (i + 1 == n_grid.size())
                    ok = diff <= final_window * std::abs(rhs) + 2.0 * se_lhs;
                else if (i > 0)
                    ok = diff <= prev_diff + 2.0 * se_lhs;
            }
            rep.add_row({static_cast<double>(n), t, bn, summary.mean, summary.se,
                         lhs, rhs, diff, se_lhs, ok ? 1.0 : 0.0});
            rep.pass = rep.pass && ok;
            prev_diff = diff;
        }
    }
    rep.meta = {{"bn_exponent", bn_exponent},
                {"m", m},
                {"final_window", final_window},
                {"sigma", sigma}};
    return rep;
}

double PiecewiseLinear::eval(double x) const {
    if (xs.empty() || x <= xs.front() || x >= xs.back()) {
        // support ends carry value 0 (compact support)
        if (!xs.empty() && x == xs.front()) return ys.front();
        if (!xs.empty() && x == xs.back()) return ys.back();
        return 0.0;
    }
    const auto it = std::upper_bound(xs.begin(), xs.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - xs.begin());
    const double w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    return (1.0 - w) * ys[k - 1] + w * ys[k];
}

double PiecewiseLinear::integral() const {
    double acc = 0.0;
    for (std::size_t i = 1; i < xs.size(); ++i)
        acc += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    return acc;
}

PiecewiseLinear PiecewiseLinear::indicator(double a, double b) {
    // sharp-shouldered trapezoid approximating 1_{[a,b]}
    const double eps = 1e-9 * std::max(1.0, b - a);
    PiecewiseLinear p;
    p.xs = {a - eps, a, b, b + eps};
    p.ys = {0.0, 1.0, 1.0, 0.0};
    return p;
}

ExpansionReport llt_check(const SpectralEngine& engine, const SpectralModel& model,
                          const ProjectivePoint& x0, const DualPoint& f, int n,
                          const std::vector<double>& t_grid, double a1, double a2,
                          std::int64_t m_plain, std::int64_t m_tilted,
                          std::uint64_t seed, int threads,
                          const LltWindows& windows, const GridFn* phi,
                          double nu_phi, const PiecewiseLinear* psi) {
    if (!(a1 < a2)) throw InputError("llt_check: need a1 < a2");
    ExpansionReport rep;
    rep.tag = "llt";
    rep.columns = {"t",     "s_star", "estimate", "se",    "normalizer",
                   "ratio", "rel_se", "hits",     "row_ok"};
    const double lambda1 = model.gammas[0];
    const double sigma = model.sigma;
    const double sqn = std::sqrt(static_cast<double>(n));

    std::vector<WalkSample> plain;
    const bool need_plain =
        std::any_of(t_grid.begin(), t_grid.end(), [](double t) { return std::abs(t) < 1.0; });
    if (need_plain) {
        WalkPlan plan;
        plan.n = n;
        plan.m = m_plain;
        plan.seed = splitmix64(seed ^ 0xB01DFACEull);
        plan.threads = threads;
        plan.track_ext2 = false;
        plain = run_walks(engine.ensemble(), x0, f, plan);
    }

    std::uint64_t row_index = 0;
    for (const double t : t_grid) {
        ++row_index;
        const double w = t / sqn;
        const double zeta_val = model.zeta(w);
        const double gauss_part = std::exp(-0.5 * t * t + t * t * t / sqn * zeta_val);
        double normalizer, est, se;
        double s_star = 0.0;
        const double shift = sqn * sigma * t;
        auto event_value = [&](const WalkSample& smp) {
            const double dev =
                smp.sigma_n + clamp_log_delta(smp.log_delta_n) - n * lambda1 - shift;
            if (psi) {
                const double target = phi ? phi->at_angle(smp.terminal_angle) : 1.0;
                return target * psi->eval(dev);
            }
            return (dev >= a1 && dev <= a2)
                       ? (phi ? phi->at_angle(smp.terminal_angle) : 1.0)
                       : 0.0;
        };
        if (psi) {
            normalizer = gauss_part / (sigma * std::sqrt(2.0 * kPi * n)) * nu_phi *
                         psi->integral();
        } else {
            normalizer = (a2 - a1) / (sigma * std::sqrt(2.0 * kPi * n)) * nu_phi *
                         gauss_part;
        }
        const std::vector<WalkSample>* samples = &plain;
        std::vector<WalkSample> tilted;
        if (std::abs(t) >= 1.0) {
            const SaddleSolution sol = solve_saddle(model, std::abs(t), n, t < 0.0);
            s_star = sol.s_star;
            const TiltedKernel kernel = engine.tilted_kernel(s_star);
            WalkPlan plan;
            plan.n = n;
            plan.m = m_tilted;
            plan.seed = splitmix64(seed ^ (row_index * 0xD1B54A32D192ED03ull));
            plan.threads = threads;
            tilted = tilted_run_walks(kernel, x0, f, plan);
            samples = &tilted;
        }
        const auto summary = weighted_event_summary(*samples, event_value);
        est = summary.mean;
        se = summary.se;
        double hits = 0.0;
        for (const auto& smp : *samples)
            if (event_value(smp) != 0.0) hits += 1.0;
        const double ratio = est / normalizer;
        const double rel_se = est > 0.0 ? se / est : std::numeric_limits<double>::infinity();
        const bool bulk = std::abs(t) < 1.0;
        const double lo = bulk ? windows.ratio_lo_bulk : windows.ratio_lo_tail;
        const double hi = bulk ? windows.ratio_hi_bulk : windows.ratio_hi_tail;
        bool ok = ratio >= lo && ratio <= hi;
        if (hits < 50.0) rep.meta["thin_bins"].push_back(t);
        rep.add_row({t, s_star, est, se, normalizer, ratio, rel_se, hits,
                     ok ? 1.0 : 0.0});
        rep.pass = rep.pass && ok;
    }
    rep.meta["n"] = n;
    rep.meta["interval"] = {a1, a2};
    rep.meta["m_plain"] = m_plain;
    rep.meta["m_tilted"] = m_tilted;
    rep.meta["target_mode"] = psi != nullptr;
    return rep;
}

ExpansionReport regularity_check(const SpectralEngine* engine_or_null,
                                 const MatrixEnsemble& e,
                                 const ProjectivePoint& x0, const DualPoint& y,
                                 int n, const std::vector<double>& k_grid,
                                 std::int64_t m, std::uint64_t seed, int threads,
                                 const RegularityOptions& opts) {
    ExpansionReport rep;
    rep.tag = "regularity";
    rep.columns = {"k", "p_hat", "se", "hits", "reliable"};

    std::vector<WalkSample> samples;
    WalkPlan plan;
    plan.n = n;
    plan.m = m;
    plan.seed = seed;
    plan.threads = threads;
    plan.track_ext2 = false;
    if (opts.tilt_s.has_value() && *opts.tilt_s != 0.0) {
        if (engine_or_null == nullptr)
            throw InputError("regularity_check: tilted variant needs a spectral engine");
        const TiltedKernel kernel = engine_or_null->tilted_kernel(*opts.tilt_s);
        samples = tilted_run_walks(kernel, x0, y, plan);
    } else {
        samples = run_walks(e, x0, y, plan);
    }

    std::vector<double> ks, log_p;
    for (const double k : k_grid) {
        std::int64_t hits = 0;
        for (const auto& smp : samples)
            if (clamp_log_delta(smp.log_delta_n) <= -k) ++hits;
        const double p = static_cast<double>(hits) / static_cast<double>(m);
        const double se = std::sqrt(std::max(p * (1.0 - p), 0.0) / static_cast<double>(m));
        const bool reliable = hits >= opts.min_hits;
        rep.add_row({k, p, se, static_cast<double>(hits), reliable ? 1.0 : 0.0});
        if (reliable && p > 0.0) {
            ks.push_back(k);
            log_p.push_back(std::log(p));
        }
    }

    double slope = 0.0, r2_lin = 0.0, aic_lin = 0.0;
    double alpha_star = 0.0, r2_sub = 0.0, aic_sub = 0.0;
    if (ks.size() >= 3) {
        const LineFit lin = ols(ks, log_p);
        slope = lin.slope;
        r2_lin = lin.r2;
        aic_lin = aic(lin.sse, lin.n, 2);
        double best_sse = std::numeric_limits<double>::infinity();
        LineFit best;
        for (double alpha = 0.15; alpha <= 1.0001; alpha += 0.025) {
            std::vector<double> ka(ks.size());
            for (std::size_t i = 0; i < ks.size(); ++i) ka[i] = std::pow(ks[i], alpha);
            const LineFit f2 = ols(ka, log_p);
            if (f2.sse < best_sse) {
                best_sse = f2.sse;
                best = f2;
                alpha_star = alpha;
            }
        }
        r2_sub = best.r2;
        aic_sub = aic(best.sse, best.n, 3);
    }

    // Moment functionals against the sampled measure.
    double mom_eta = 0.0, mom_p = 0.0;
    for (const auto& smp : samples) {
        const double ld = clamp_log_delta(smp.log_delta_n);
        mom_eta += std::exp(-opts.eta * ld);
        mom_p += std::pow(std::abs(ld), opts.p - 1.0);
    }
    mom_eta /= static_cast<double>(m);
    mom_p /= static_cast<double>(m);

    rep.meta = {{"n", n},
                {"m", m},
                {"slope", slope},
                {"r2_linear", r2_lin},
                {"aic_linear", aic_lin},
                {"alpha_star", alpha_star},
                {"r2_subexp", r2_sub},
                {"aic_subexp", aic_sub},
                {"prefers_subexp", aic_sub < aic_lin},
                {"moment_eta", opts.eta},
                {"moment_eta_value", mom_eta},
                {"moment_p", opts.p},
                {"moment_p_value", mom_p},
                {"tilted", opts.tilt_s.has_value()}};
    rep.pass = std::max(r2_lin, r2_sub) >= 0.9;
    return rep;
}

ExpansionReport rates_check(const MatrixEnsemble& e, const ProjectivePoint& x0,
                            const DualPoint& y, const std::vector<int>& n_grid,
                            std::int64_t m, std::uint64_t seed,
                            const LyapunovEstimate& lyap,
                            double epsilon_fraction, int threads) {
    const double sep = lyap.lambda1 - lyap.lambda2;
    const double sep_se =
        std::sqrt(lyap.lambda1_se * lyap.lambda1_se + lyap.lambda2_se * lyap.lambda2_se);
    if (sep < 3.0 * sep_se)
        throw InputError(
            "rates_check: lambda1 - lambda2 = " + std::to_string(sep) +
            " not separated from 0 by 3 standard errors (se = " +
            std::to_string(sep_se) + ")");
    const double eps = epsilon_fraction * sep;
    ExpansionReport rep;
    rep.tag = "rates";
    rep.columns = {"n",       "freq_d_xM", "se1", "freq_delta_xM_y",
                   "se2",     "freq_delta_xn_y", "se3", "row_ok"};
    std::vector<std::array<double, 3>> freqs;
    for (const int n : n_grid) {
        std::vector<std::array<double, 3>> events(static_cast<std::size_t>(m));
        parallel_for_indexed(m, threads, [&](std::int64_t t) {
            CounterRng rng(CounterRng::derive_stream(
                seed ^ static_cast<std::uint64_t>(n) * 0x517CC1B727220A95ull,
                static_cast<std::uint64_t>(t)));
            Matrix prod = Matrix::Identity(e.dim(), e.dim());
            for (int k = 0; k < n; ++k) {
                prod = e.sample(rng) * prod;
                const double scale = prod.cwiseAbs().maxCoeff();
                if (scale > 1e100 || scale < 1e-100) prod /= scale;
            }
            const ProjectivePoint xn = act(prod, x0);
            const DensityPoints dp = density_points(prod);
            const double d1 = angular_distance(xn, dp.x_density);
            const double d2 = delta(dp.x_density, y);
            const double d3 = delta(xn, y);
            events[static_cast<std::size_t>(t)] = {
                d1 >= std::exp(-(sep - eps) * n) ? 1.0 : 0.0,
                d2 <= std::exp(-eps * n) ? 1.0 : 0.0,
                d3 <= std::exp(-eps * n) ? 1.0 : 0.0};
        });
        std::array<double, 3> freq{0.0, 0.0, 0.0};
        for (const auto& ev : events)
            for (int j = 0; j < 3; ++j) freq[static_cast<std::size_t>(j)] += ev[static_cast<std::size_t>(j)];
        for (auto& v : freq) v /= static_cast<double>(m);
        std::array<double, 3> se{};
        for (int j = 0; j < 3; ++j)
            se[static_cast<std::size_t>(j)] = std::sqrt(
                std::max(freq[static_cast<std::size_t>(j)] *
                             (1.0 - freq[static_cast<std::size_t>(j)]), 0.0) /
                static_cast<double>(m));
        bool ok = true;
        if (!freqs.empty()) {
            for (int j = 0; j < 3; ++j)
                if (freq[static_cast<std::size_t>(j)] >
                    freqs.back()[static_cast<std::size_t>(j)] +
                        2.0 * (se[static_cast<std::size_t>(j)] + 0.5 / std::sqrt(static_cast<double>(m))))
                    ok = false;
        }
        rep.add_row({static_cast<double>(n), freq[0], se[0], freq[1], se[1], freq[2],
                     se[2], ok ? 1.0 : 0.0});
        rep.pass = rep.pass && ok;
        freqs.push_back(freq);
    }
    for (int j = 0; j < 3; ++j)
        if (freqs.back()[static_cast<std::size_t>(j)] >
            freqs.front()[static_cast<std::size_t>(j)])
            rep.pass = false;
    rep.meta = {{"epsilon", eps},
                {"lambda1", lyap.lambda1},
                {"lambda2", lyap.lambda2},
                {"separation", sep},
                {"separation_se", sep_se}};
    return rep;
}

PartitionOfUnity::PartitionOfUnity(int n, DualPoint y, double A)
    : n_(n), y_(std::move(y)) {
    // a_n e^{a_n} <= 1/2 requires n >= 18.
    if (n < 18) throw InputError("PartitionOfUnity: need n >= 18");
    if (!(A > 0.0)) throw InputError("PartitionOfUnity: need A > 0");
    a_ = 1.0 / std::log(static_cast<double>(n));
    const double logn = std::log(static_cast<double>(n));
    M_ = static_cast<int>(std::floor(A * logn * logn));
}

namespace {
double unit_ramp(double t) { return std::clamp(t, 0.0, 1.0); }
}  // namespace

double PartitionOfUnity::tail_t(int k, double t) const {
    return unit_ramp((t - (k - 1) * a_) / a_);
}

double PartitionOfUnity::chi_t(int k, double t) const {
    return tail_t(k, t) - tail_t(k + 1, t);
}

double PartitionOfUnity::chi(int k, const ProjectivePoint& x) const {
    const double d = delta(x, y_);
    const double t = d == 0.0 ? std::numeric_limits<double>::infinity() : -std::log(d);
    return chi_t(k, t);
}

double PartitionOfUnity::tail(int k, const ProjectivePoint& x) const {
    const double d = delta(x, y_);
    const double t = d == 0.0 ? std::numeric_limits<double>::infinity() : -std::log(d);
    return tail_t(k, t);
}

ExpansionReport partition_unity_check(const PartitionOfUnity& part,
                                      std::int64_t n_points, std::uint64_t seed) {
    ExpansionReport rep;
    rep.tag = "partition-unity";
    rep.columns = {"points", "max_unity_error", "support_violations", "row_ok"};
    CounterRng rng(CounterRng::derive_stream(seed, 0));
    const int d = part.dual_point().dim();
    double max_err = 0.0;
    std::int64_t violations = 0;
    for (std::int64_t i = 0; i < n_points; ++i) {
        Vector v(d);
        for (int j = 0; j < d; ++j) v[j] = rng.next_gaussian();
        const ProjectivePoint x{std::move(v)};
        double sum = 0.0;
        const double del = delta(x, part.dual_point());
        const double t =
            del == 0.0 ? std::numeric_limits<double>::infinity() : -std::log(del);
        for (int k = 0; k <= part.count(); ++k) {
            const double c = part.chi_t(k, t);
            sum += c;
            if (c > 0.0 &&
                !(t >= part.band_width() * (k - 1) - 1e-12 &&
                  t <= part.band_width() * (k + 1) + 1e-12))
                ++violations;
        }
        sum += part.tail_t(part.count() + 1, t);
        max_err = std::max(max_err, std::abs(sum - 1.0));
    }
    const bool ok = max_err <= 1e-12 && violations == 0;
    rep.add_row({static_cast<double>(n_points), max_err,
                 static_cast<double>(violations), ok ? 1.0 : 0.0});
    rep.pass = ok;
    rep.meta = {{"n", part.horizon()},
                {"a_n", part.band_width()},
                {"M_n", part.count()}};
    return rep;
}

ExpansionReport partition_holder_check(const PartitionOfUnity& part, double gamma,
                                       std::int64_t pairs_per_band,
                                       std::uint64_t seed, double safety_factor) {
    if (part.dual_point().dim() != 2)
        throw InputError("partition_holder_check: sampler is d == 2 only");
    ExpansionReport rep;
    rep.tag = "partition-holder";
    rep.columns = {"k", "empirical_seminorm", "bound_shape", "ratio", "row_ok"};
    const double a = part.band_width();
    const double theta_y = part.dual_point().angle();
    CounterRng rng(CounterRng::derive_stream(seed, 1));

    std::vector<double> ratios;
    std::vector<double> emp(static_cast<std::size_t>(part.count()) + 1, 0.0);
    for (int k = 0; k <= part.count(); ++k) {
        double sup = 0.0;
        // Pairs concentrated where chi_{n,k} lives: delta ~ e^{-k a_n}; the
        // steepest variation happens at angular scale a_n e^{-k a_n}.
        const double d_star = a * std::exp(-k * a);
        for (std::int64_t p = 0; p < pairs_per_band; ++p) {
            const double t0 = std::max(0.0, a * (k - 2)) + rng.next_double() * 4.0 * a;
            const double del0 = std::exp(-t0);
            const double base = std::acos(std::min(1.0, del0));
            const double side = rng.next_double() < 0.5 ? -1.0 : 1.0;
            const double theta1 = theta_y + side * base;
            const double scale = d_star * std::exp((rng.next_double() * 8.0) - 4.0);
            const double eta = std::min(0.5, std::max(1e-13, scale));
            const double theta2 = theta1 + (rng.next_double() < 0.5 ? -eta : eta);
            const ProjectivePoint x1 = ProjectivePoint::from_angle(theta1);
            const ProjectivePoint x2 = ProjectivePoint::from_angle(theta2);
            const double dist = angular_distance(x1, x2);
            if (dist <= 0.0) continue;
            const double diff = std::abs(part.chi(k, x1) - part.chi(k, x2));
            sup = std::max(sup, diff / std::pow(dist, gamma));
        }
        emp[static_cast<std::size_t>(k)] = sup;
        const double bound_shape = std::exp(gamma * k * a) / std::pow(a, gamma);
        if (sup > 0.0) ratios.push_back(sup / bound_shape);
    }
    std::vector<double> sorted = ratios;
    std::sort(sorted.begin(), sorted.end());
    const double c_fit = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
    for (int k = 0; k <= part.count(); ++k) {
        const double bound_shape = std::exp(gamma * k * a) / std::pow(a, gamma);
        const double ratio = emp[static_cast<std::size_t>(k)] / bound_shape;
        const bool ok = ratio <= safety_factor * c_fit;
        rep.add_row({static_cast<double>(k), emp[static_cast<std::size_t>(k)],
                     bound_shape, ratio, ok ? 1.0 : 0.0});
        rep.pass = rep.pass && ok;
    }
    rep.meta = {{"gamma", gamma},
                {"fitted_c", c_fit},
                {"safety_factor", safety_factor},
                {"pairs_per_band", pairs_per_band}};
    return rep;
}

}  // namespace rmp
