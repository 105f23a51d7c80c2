#include "rmp/walk.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

namespace rmp {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double angle_of(double x, double y) {
    double a = std::atan2(y, x);
    if (a < 0.0) a += kPi;
    if (a >= kPi) a -= kPi;
    return a;
}

// Completion of x0 to an orthonormal 2-frame: second column is the axis
// least aligned with x0, Gram-Schmidt'ed against it.
Matrix initial_frame(const Vector& v) {
    const Eigen::Index d = v.size();
    Eigen::Index k = 0;
    double best = std::abs(v[0]);
    for (Eigen::Index i = 1; i < d; ++i)
        if (std::abs(v[i]) < best) {
            best = std::abs(v[i]);
            k = i;
        }
    Vector w = Vector::Zero(d);
    w[k] = 1.0;
    w -= w.dot(v) * v;
    w /= w.norm();
    Matrix f(d, 2);
    f.col(0) = v;
    f.col(1) = w;
    return f;
}

double terminal_log_delta(const Vector& dir, const DualPoint& f) {
    const double pairing = std::min(1.0, std::abs(f.vec().dot(dir)));
    if (pairing == 0.0) return kLogZero;
    return std::min(0.0, std::log(pairing));
}

WalkSample finish_sample(std::uint64_t stream, const WalkState& st,
                         const DualPoint& f, double log_weight) {
    WalkSample s;
    s.trajectory_seed = stream;
    s.sigma_n = st.log_norm();
    s.log_delta_n = terminal_log_delta(st.direction(), f);
    s.coeff_log_n = s.sigma_n + s.log_delta_n;
    s.ext2_log_norm = st.ext2_log_norm();
    s.terminal_angle = st.direction().size() == 2 ? angle_of(st.direction()[0], st.direction()[1]) : kNaN;
    s.importance_log_weight = log_weight;
    return s;
}

}  // namespace

WalkState::WalkState(const ProjectivePoint& x0, bool track_ext2)
    : dir_(x0.vec()),
      tmp_(x0.dim()),
      log_norm_(0.0),
      ext2_log_norm_(track_ext2 ? 0.0 : kNaN),
      track_ext2_(track_ext2) {
    if (track_ext2_) {
        frame_ = initial_frame(dir_);
        ftmp_.resize(dir_.size(), 2);
    }
}

void WalkState::step(const Matrix& g) {
    tmp_.noalias() = g * dir_;
    const double nrm = tmp_.norm();
    if (!(nrm > 0.0) || !std::isfinite(nrm))
        throw WalkError("walk step produced a non-finite or zero direction", -1,
                        steps_);
    log_norm_ += std::log(nrm);
    dir_ = tmp_ / nrm;
    if (track_ext2_) {
        ftmp_.noalias() = g * frame_;
        const double r11 = ftmp_.col(0).norm();
        frame_.col(0) = ftmp_.col(0) / r11;
        const double r12 = frame_.col(0).dot(ftmp_.col(1));
        ftmp_.col(1) -= r12 * frame_.col(0);
        const double r22 = ftmp_.col(1).norm();
        if (!(r11 > 0.0) || !(r22 > 0.0) || !std::isfinite(r11) || !std::isfinite(r22))
            throw WalkError("walk step produced a degenerate 2-frame", -1, steps_);
        frame_.col(1) = ftmp_.col(1) / r22;
        ext2_log_norm_ += std::log(r11) + std::log(r22);
    }
    ++steps_;
}

double WalkState::angle() const { return angle_of(dir_[0], dir_[1]); }

void parallel_for_indexed(std::int64_t count, int threads,
                          const std::function<void(std::int64_t)>& body) {
    if (threads <= 0)
        threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads < 1) threads = 1;
    if (threads == 1 || count < 2) {
        for (std::int64_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    const std::int64_t grain =
        std::max<std::int64_t>(1, count / (static_cast<std::int64_t>(threads) * 16));
    std::mutex err_mutex;
    std::exception_ptr first_error;
    auto worker = [&]() {
        try {
            for (;;) {
                const std::int64_t begin = next.fetch_add(grain);
                if (begin >= count) return;
                const std::int64_t end = std::min(begin + grain, count);
                for (std::int64_t i = begin; i < end; ++i) body(i);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::vector<WalkSample> run_walks(const MatrixEnsemble& e,
                                  const ProjectivePoint& x0, const DualPoint& f,
                                  const WalkPlan& plan) {
    if (plan.n < 1 || plan.m < 1) throw InputError("run_walks: need n >= 1, m >= 1");
    if (x0.dim() != e.dim() || f.dim() != e.dim())
        throw InputError("run_walks: dimension mismatch between ensemble and x0/f");
    std::vector<WalkSample> out(static_cast<std::size_t>(plan.m));
    const bool finite = e.is_finite();
    parallel_for_indexed(plan.m, plan.threads, [&](std::int64_t t) {
        const std::uint64_t stream =
            CounterRng::derive_stream(plan.seed, static_cast<std::uint64_t>(t));
        CounterRng rng(stream);
        WalkState st(x0, plan.track_ext2);
        try {
            if (finite) {
                const auto& atoms = e.atoms();
                for (int k = 0; k < plan.n; ++k)
                    st.step(atoms[static_cast<std::size_t>(e.sample_atom_index(rng))].g);
            } else {
                for (int k = 0; k < plan.n; ++k) st.step(e.sample(rng));
            }
        } catch (const WalkError& err) {
            throw WalkError(err.what(), t, err.step_index);
        }
        out[static_cast<std::size_t>(t)] = finish_sample(stream, st, f, 0.0);
    });
    return out;
}

std::vector<std::vector<WalkSample>> run_walks_horizons(
    const MatrixEnsemble& e, const ProjectivePoint& x0, const DualPoint& f,
    const std::vector<int>& horizons, std::int64_t m, std::uint64_t seed,
    int threads, bool track_ext2) {
    if (horizons.empty()) throw InputError("run_walks_horizons: empty horizon grid");
    for (std::size_t h = 1; h < horizons.size(); ++h)
        if (horizons[h] <= horizons[h - 1])
            throw InputError("run_walks_horizons: horizons must increase");
    std::vector<std::vector<WalkSample>> out(horizons.size());
    for (auto& v : out) v.resize(static_cast<std::size_t>(m));
    const bool finite = e.is_finite();
    parallel_for_indexed(m, threads, [&](std::int64_t t) {
        const std::uint64_t stream =
            CounterRng::derive_stream(seed, static_cast<std::uint64_t>(t));
        CounterRng rng(stream);
        WalkState st(x0, track_ext2);
        std::size_t h = 0;
        for (int k = 1; k <= horizons.back(); ++k) {
            if (finite) {
                st.step(e.atoms()[static_cast<std::size_t>(e.sample_atom_index(rng))].g);
            } else {
                st.step(e.sample(rng));
            }
            if (k == horizons[h]) {
                out[h][static_cast<std::size_t>(t)] = finish_sample(stream, st, f, 0.0);
                ++h;
            }
        }
    });
    return out;
}

LyapunovEstimate estimate_lyapunov(const MatrixEnsemble& e,
                                   const ProjectivePoint& x0,
                                   const WalkPlan& plan) {
    if (plan.n < 50) throw InputError("estimate_lyapunov: need n >= 50");
    WalkPlan p = plan;
    p.track_ext2 = true;
    const auto samples = run_walks(e, x0, DualPoint::axis(e.dim(), 0), p);
    const double n = static_cast<double>(p.n);
    const double m = static_cast<double>(p.m);
    double mean1 = 0.0, m2_1 = 0.0, mean12 = 0.0, m2_12 = 0.0;
    std::int64_t count = 0;
    for (const auto& s : samples) {
        ++count;
        const double v1 = s.sigma_n / n;
        const double v12 = s.ext2_log_norm / n;
        const double d1 = v1 - mean1;
        mean1 += d1 / static_cast<double>(count);
        m2_1 += d1 * (v1 - mean1);
        const double d12 = v12 - mean12;
        mean12 += d12 / static_cast<double>(count);
        m2_12 += d12 * (v12 - mean12);
    }
    LyapunovEstimate est;
    est.n = p.n;
    est.m = p.m;
    est.lambda1 = mean1;
    est.lambda1_se = p.m > 1 ? std::sqrt(m2_1 / (m - 1.0) / m) : 0.0;
    est.sum12 = mean12;
    est.sum12_se = p.m > 1 ? std::sqrt(m2_12 / (m - 1.0) / m) : 0.0;
    est.lambda2 = est.sum12 - est.lambda1;
    est.lambda2_se = std::sqrt(est.sum12_se * est.sum12_se +
                               est.lambda1_se * est.lambda1_se);
    return est;
}

TiltedKernel::TiltedKernel(const MatrixEnsemble& e, double s, double kappa_s,
                           std::vector<double> log_r)
    : ensemble_(&e), log_r_(std::move(log_r)), s_(s), kappa_s_(kappa_s) {
    if (!e.is_finite())
        throw InputError(
            "tilted sampling requires a finite-support ensemble; generator "
            "ensembles would need approximate rejection with uncontrolled bias");
    if (e.dim() != 2) throw InputError("TiltedKernel: requires d == 2");
    if (s_ != 0.0 && log_r_.size() < 8)
        throw InputError("TiltedKernel: eigenfunction grid too small");
    geo_.reserve(e.atoms().size());
    for (const auto& a : e.atoms())
        geo_.push_back({a.g(0, 0), a.g(0, 1), a.g(1, 0), a.g(1, 1), a.prob});
}

double TiltedKernel::log_r_at(double angle) const {
    if (s_ == 0.0) return 0.0;
    const std::size_t M = log_r_.size();
    double u = angle / kPi * static_cast<double>(M);
    if (u < 0.0) u += static_cast<double>(M);
    std::size_t j = static_cast<std::size_t>(u);
    if (j >= M) j -= M;
    const double w = u - std::floor(u);
    const std::size_t j1 = (j + 1) % M;
    return (1.0 - w) * log_r_[j] + w * log_r_[j1];
}

double TiltedKernel::state_distribution(double angle,
                                        std::span<double> probs) const {
    const double dx = std::cos(angle), dy = std::sin(angle);
    if (s_ == 0.0) {
        for (std::size_t i = 0; i < geo_.size(); ++i) probs[i] = geo_[i].prob;
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < geo_.size(); ++i) {
        const auto& g = geo_[i];
        const double u = g.a * dx + g.b * dy;
        const double w = g.c * dx + g.d * dy;
        const double sigma = 0.5 * std::log(u * u + w * w);
        const double img = angle_of(u, w);
        probs[i] = g.prob * std::exp(s_ * sigma + log_r_at(img));
        total += probs[i];
    }
    for (std::size_t i = 0; i < geo_.size(); ++i) probs[i] /= total;
    return std::log(total);
}

std::vector<WalkSample> tilted_run_walks(const TiltedKernel& kernel,
                                         const ProjectivePoint& x0,
                                         const DualPoint& f,
                                         const WalkPlan& plan) {
    const std::vector<int> horizon{plan.n};
    auto res = tilted_run_walks_horizons(kernel, x0, f, horizon, plan.m,
                                         plan.seed, plan.threads);
    return std::move(res.front());
}

std::vector<std::vector<WalkSample>> tilted_run_walks_horizons(
    const TiltedKernel& kernel, const ProjectivePoint& x0, const DualPoint& f,
    const std::vector<int>& horizons, std::int64_t m, std::uint64_t seed,
    int threads) {
    if (horizons.empty() || m < 1)
        throw InputError("tilted_run_walks: need horizons, m >= 1");
    for (std::size_t h = 1; h < horizons.size(); ++h)
        if (horizons[h] <= horizons[h - 1])
            throw InputError("tilted_run_walks: horizons must increase");
    if (x0.dim() != 2 || f.dim() != 2)
        throw InputError("tilted_run_walks: requires d == 2");
    const auto& geo = kernel.atom_geometry();
    const double s = kernel.s();
    const auto& e = kernel.ensemble();
    std::vector<std::vector<WalkSample>> out(horizons.size());
    for (auto& v : out) v.resize(static_cast<std::size_t>(m));

    parallel_for_indexed(m, threads, [&](std::int64_t t) {
        const std::uint64_t stream =
            CounterRng::derive_stream(seed, static_cast<std::uint64_t>(t));
        CounterRng rng(stream);
        double dx = x0.vec()[0], dy = x0.vec()[1];
        double sigma = 0.0, log_weight = 0.0;
        std::vector<double> probs(geo.size());
        std::size_t h = 0;
        for (int k = 1; k <= horizons.back(); ++k) {
            const double angle = angle_of(dx, dy);
            std::size_t chosen;
            if (s == 0.0) {
                chosen = static_cast<std::size_t>(e.sample_atom_index(rng));
            } else {
                const double log_mass = kernel.state_distribution(angle, probs);
                const double u = rng.next_double();
                double acc = 0.0;
                chosen = geo.size() - 1;
                for (std::size_t i = 0; i < geo.size(); ++i) {
                    acc += probs[i];
                    if (u < acc) {
                        chosen = i;
                        break;
                    }
                }
                const auto& g = geo[chosen];
                const double ux = g.a * dx + g.b * dy;
                const double wy = g.c * dx + g.d * dy;
                const double step_sigma = 0.5 * std::log(ux * ux + wy * wy);
                const double img = angle_of(ux, wy);
                // Exact per-step likelihood ratio mu(g)/q_s(x, g); the sum
                // over a trajectory telescopes to
                // -s sigma(G_n,x) + n log kappa(s) + log r_s(x0) - log r_s(G_n.x)
                // up to the per-state normalization of the discrete r_s.
                log_weight += log_mass - s * step_sigma - kernel.log_r_at(img);
                sigma += step_sigma;
                const double nrm = std::exp(step_sigma);
                dx = ux / nrm;
                dy = wy / nrm;
                const double renorm = std::sqrt(dx * dx + dy * dy);
                dx /= renorm;
                dy /= renorm;
                if (!std::isfinite(sigma))
                    throw WalkError("tilted walk produced non-finite cocycle", t, k);
                if (k == horizons[h]) {
                    WalkSample smp;
                    smp.trajectory_seed = stream;
                    smp.sigma_n = sigma;
                    const double pairing =
                        std::min(1.0, std::abs(f.vec()[0] * dx + f.vec()[1] * dy));
                    smp.log_delta_n = pairing == 0.0 ? kLogZero
                                                     : std::min(0.0, std::log(pairing));
                    smp.coeff_log_n = smp.sigma_n + smp.log_delta_n;
                    smp.ext2_log_norm = kNaN;
                    smp.terminal_angle = angle_of(dx, dy);
                    smp.importance_log_weight = log_weight;
                    out[h][static_cast<std::size_t>(t)] = smp;
                    ++h;
                }
                continue;
            }
            // s == 0: identical draw sequence and arithmetic as run_walks.
            const auto& g = geo[chosen];
            const double ux = g.a * dx + g.b * dy;
            const double wy = g.c * dx + g.d * dy;
            const double nrm = std::sqrt(ux * ux + wy * wy);
            sigma += std::log(nrm);
            dx = ux / nrm;
            dy = wy / nrm;
            if (k == horizons[h]) {
                WalkSample smp;
                smp.trajectory_seed = stream;
                smp.sigma_n = sigma;
                const double pairing =
                    std::min(1.0, std::abs(f.vec()[0] * dx + f.vec()[1] * dy));
                smp.log_delta_n =
                    pairing == 0.0 ? kLogZero : std::min(0.0, std::log(pairing));
                smp.coeff_log_n = smp.sigma_n + smp.log_delta_n;
                smp.ext2_log_norm = kNaN;
                smp.terminal_angle = angle_of(dx, dy);
                smp.importance_log_weight = 0.0;
                out[h][static_cast<std::size_t>(t)] = smp;
                ++h;
            }
        }
    });
    return out;
}

namespace {

std::vector<ProjectivePoint> occupation_impl(
    const std::function<void(std::int64_t, std::vector<ProjectivePoint>&)>& chain,
    int n_keep, std::int64_t m) {
    std::vector<std::vector<ProjectivePoint>> buckets(static_cast<std::size_t>(m));
    parallel_for_indexed(m, 0, [&](std::int64_t t) {
        auto& slot = buckets[static_cast<std::size_t>(t)];
        slot.reserve(static_cast<std::size_t>(n_keep));
        chain(t, slot);
    });
    std::vector<ProjectivePoint> out;
    out.reserve(static_cast<std::size_t>(m) * static_cast<std::size_t>(n_keep));
    for (auto& b : buckets)
        for (auto& p : b) out.push_back(std::move(p));
    return out;
}

}  // namespace

std::vector<ProjectivePoint> occupation_sample(const MatrixEnsemble& e,
                                               const ProjectivePoint& x0,
                                               int n_burn, int n_keep,
                                               std::int64_t m,
                                               std::uint64_t seed) {
    if (n_burn < 1 || n_keep < 1 || m < 1)
        throw InputError("occupation_sample: need n_burn, n_keep, m >= 1");
    const bool finite = e.is_finite();
    return occupation_impl(
        [&](std::int64_t t, std::vector<ProjectivePoint>& slot) {
            CounterRng rng(CounterRng::derive_stream(seed, static_cast<std::uint64_t>(t)));
            WalkState st(x0, false);
            for (int k = 0; k < n_burn + n_keep; ++k) {
                if (finite) {
                    st.step(e.atoms()[static_cast<std::size_t>(e.sample_atom_index(rng))].g);
                } else {
                    st.step(e.sample(rng));
                }
                if (k >= n_burn) slot.push_back(ProjectivePoint(st.direction()));
            }
        },
        n_keep, m);
}

std::vector<ProjectivePoint> occupation_sample(const TiltedKernel& kernel,
                                               const ProjectivePoint& x0,
                                               int n_burn, int n_keep,
                                               std::int64_t m,
                                               std::uint64_t seed) {
    if (n_burn < 1 || n_keep < 1 || m < 1)
        throw InputError("occupation_sample: need n_burn, n_keep, m >= 1");
    const auto& geo = kernel.atom_geometry();
    const double s = kernel.s();
    const auto& e = kernel.ensemble();
    return occupation_impl(
        [&](std::int64_t t, std::vector<ProjectivePoint>& slot) {
            CounterRng rng(CounterRng::derive_stream(seed, static_cast<std::uint64_t>(t)));
            double dx = x0.vec()[0], dy = x0.vec()[1];
            std::vector<double> probs(geo.size());
            for (int k = 0; k < n_burn + n_keep; ++k) {
                std::size_t chosen;
                if (s == 0.0) {
                    chosen = static_cast<std::size_t>(e.sample_atom_index(rng));
                } else {
                    kernel.state_distribution(angle_of(dx, dy), probs);
                    const double u = rng.next_double();
                    double acc = 0.0;
                    chosen = geo.size() - 1;
                    for (std::size_t i = 0; i < geo.size(); ++i) {
                        acc += probs[i];
                        if (u < acc) {
                            chosen = i;
                            break;
                        }
                    }
                }
                const auto& g = geo[chosen];
                const double ux = g.a * dx + g.b * dy;
                const double wy = g.c * dx + g.d * dy;
                const double nrm = std::sqrt(ux * ux + wy * wy);
                dx = ux / nrm;
                dy = wy / nrm;
                if (k >= n_burn) {
                    Vector v(2);
                    v << dx, dy;
                    slot.push_back(ProjectivePoint(std::move(v)));
                }
            }
        },
        n_keep, m);
}

}  // namespace rmp
