#include "rmp/ensemble.hpp"

#include "rmp/hash.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rmp {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;
constexpr double kGoldenFrac = 0.61803398874989484820;

Matrix rotation2(double theta) {
    Matrix g(2, 2);
    const double c = std::cos(theta), s = std::sin(theta);
    g << c, -s, s, c;
    return g;
}

double param_or(const GeneratorSpec& spec, const std::string& key, double dflt) {
    auto it = spec.params.find(key);
    return it == spec.params.end() ? dflt : it->second;
}

double det_small(const Matrix& g) {
    return g.determinant();
}

void check_invertible(const Matrix& g, const std::string& context) {
    require_finite(g, context.c_str());
    const double scale = g.cwiseAbs().maxCoeff();
    if (scale == 0.0 || std::abs(det_small(g)) <
                            1e-10 * std::pow(scale, static_cast<double>(g.rows())))
        throw InputError(context + ": matrix is singular or near-singular");
}

double quantile(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double idx = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(idx);
    const auto hi = std::min(lo + 1, v.size() - 1);
    const double w = idx - static_cast<double>(lo);
    return (1.0 - w) * v[lo] + w * v[hi];
}

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    long n = 0;
};

LineFit ols(const std::vector<double>& x, const std::vector<double>& y) {
    LineFit f;
    f.n = static_cast<long>(x.size());
    if (f.n < 2) return f;
    const double n = static_cast<double>(f.n);
    double sx = 0, sy = 0;
    for (long i = 0; i < f.n; ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (long i = 0; i < f.n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = (sxy * sxy) / (sxx * syy);
    return f;
}

}  // namespace

const char* to_string(TailVerdict v) {
    switch (v) {
        case TailVerdict::kExponential: return "exponential";
        case TailVerdict::kSubexponential: return "subexponential";
        case TailVerdict::kPolynomial: return "polynomial";
        case TailVerdict::kUnknown: return "unknown";
    }
    return "unknown";
}

MatrixEnsemble MatrixEnsemble::finite(std::vector<Atom> atoms, std::string label) {
    if (atoms.empty()) throw InputError("ensemble: no atoms");
    MatrixEnsemble e;
    e.dim_ = static_cast<int>(atoms.front().g.rows());
    double total = 0.0;
    for (const auto& a : atoms) {
        if (a.g.rows() != e.dim_ || a.g.cols() != e.dim_)
            throw InputError("ensemble: atoms have mismatched dimensions");
        check_invertible(a.g, "ensemble atom");
        if (!(a.prob > 0.0)) throw InputError("ensemble: atom probability must be > 0");
        total += a.prob;
    }
    if (std::abs(total - 1.0) > 1e-12)
        throw InputError("ensemble: probabilities sum to " + std::to_string(total) +
                         ", expected 1");
    e.atoms_ = std::move(atoms);
    e.cum_probs_.reserve(e.atoms_.size());
    double c = 0.0;
    for (const auto& a : e.atoms_) {
        c += a.prob;
        e.cum_probs_.push_back(c);
    }
    e.cum_probs_.back() = 1.0;
    e.label_ = std::move(label);
    return e;
}

MatrixEnsemble MatrixEnsemble::generator(GeneratorSpec spec, int dim,
                                         std::string label) {
    static const char* known[] = {"heavy-alpha", "rotation-uniform", "scalar-exp",
                                  "scalar-weibull", "positive-perturbed"};
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) {
            return spec.name == k;
        }) == std::end(known))
        throw InputError("ensemble: unknown generator family '" + spec.name + "'");
    if (dim != 2 && spec.name != "positive-perturbed")
        throw InputError("ensemble: generator '" + spec.name + "' requires d = 2");
    MatrixEnsemble e;
    e.gen_ = std::move(spec);
    e.dim_ = dim;
    e.label_ = std::move(label);
    return e;
}

MatrixEnsemble MatrixEnsemble::builtin(const std::string& name) {
    if (name == "oracleA") {
        Matrix a(2, 2), b(2, 2);
        a << 2, 1, 1, 1;
        b << 1, 1, 1, 2;
        return finite({{a, 0.5}, {b, 0.5}}, name);
    }
    if (name == "scalar-rotation") {
        // c * R(theta): log c = +-log 2 symmetric, theta on 8 golden-spaced
        // angles. sigma(g, x) = log c independent of x, so kappa(s) = E[c^s].
        std::vector<Atom> atoms;
        for (int j = 0; j < 8; ++j) {
            const double frac = std::fmod((j + 1) * kGoldenFrac, 1.0);
            const Matrix r = rotation2(kPi * frac);
            atoms.push_back({2.0 * r, 1.0 / 16.0});
            atoms.push_back({0.5 * r, 1.0 / 16.0});
        }
        return finite(std::move(atoms), name);
    }
    if (name == "scalar-rotation-nonlattice") {
        // Same shape with log c in {+-log 2, +-sqrt(2) log 2}: the cocycle
        // increments are incommensurable, so the coefficient law is
        // lattice-free while every scalar symmetry still holds.
        std::vector<Atom> atoms;
        const double c2 = std::pow(2.0, std::sqrt(2.0));
        for (int j = 0; j < 8; ++j) {
            const double frac = std::fmod((j + 1) * kGoldenFrac, 1.0);
            const Matrix r = rotation2(kPi * frac);
            atoms.push_back({2.0 * r, 1.0 / 32.0});
            atoms.push_back({0.5 * r, 1.0 / 32.0});
            atoms.push_back({c2 * r, 1.0 / 32.0});
            atoms.push_back({(1.0 / c2) * r, 1.0 / 32.0});
        }
        return finite(std::move(atoms), name);
    }
    if (name == "diag31") {
        Matrix g(2, 2);
        g << 3, 0, 0, 1;
        return finite({{g, 1.0}}, name);
    }
    if (name == "rotation-irrational") {
        return finite({{rotation2(kPi * kGoldenFrac), 1.0}}, name);
    }
    if (name == "heavy-alpha")
        return generator({"heavy-alpha", {{"alpha", 0.5}, {"scale", 1.0}}}, 2, name);
    if (name == "rotation-uniform")
        return generator({"rotation-uniform", {}}, 2, name);
    if (name == "scalar-exp")
        return generator({"scalar-exp", {{"rate", 1.0}}}, 2, name);
    if (name == "positive-perturbed")
        return generator({"positive-perturbed", {{"spread", 1.0}}}, 2, name);
    std::ostringstream msg;
    msg << "unknown builtin ensemble '" << name << "'; available:";
    for (const auto& b : builtin_names()) msg << " " << b;
    throw InputError(msg.str());
}

std::vector<std::string> MatrixEnsemble::builtin_names() {
    return {"oracleA",     "scalar-rotation",  "scalar-rotation-nonlattice",
            "diag31",      "heavy-alpha",      "rotation-uniform",
            "rotation-irrational", "scalar-exp", "positive-perturbed"};
}

Matrix MatrixEnsemble::sample(CounterRng& rng) const {
    if (is_finite()) return atoms_[static_cast<std::size_t>(sample_atom_index(rng))].g;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Matrix g;
        if (gen_.name == "rotation-uniform") {
            g = rotation2(kPi * rng.next_double());
        } else if (gen_.name == "scalar-exp" || gen_.name == "scalar-weibull") {
            double w;
            if (gen_.name == "scalar-exp") {
                w = -std::log(rng.next_double_pos()) / param_or(gen_, "rate", 1.0);
            } else {
                const double alpha = param_or(gen_, "alpha", 0.5);
                w = param_or(gen_, "scale", 1.0) *
                    std::pow(-std::log(rng.next_double_pos()), 1.0 / alpha);
            }
            const double sign = rng.next_double() < 0.5 ? -1.0 : 1.0;
            g = std::exp(sign * w) * rotation2(kPi * rng.next_double());
        } else if (gen_.name == "heavy-alpha") {
            const double alpha = param_or(gen_, "alpha", 0.5);
            const double w = param_or(gen_, "scale", 1.0) *
                             std::pow(-std::log(rng.next_double_pos()), 1.0 / alpha);
            Matrix d(2, 2);
            d << std::exp(w), 0, 0, std::exp(-w);
            g = d * rotation2(kPi * rng.next_double());
        } else if (gen_.name == "positive-perturbed") {
            const double spread = param_or(gen_, "spread", 1.0);
            g = Matrix::Identity(dim_, dim_);
            for (int i = 0; i < dim_; ++i)
                for (int j = 0; j < dim_; ++j) g(i, j) += spread * rng.next_double();
        } else {
            throw InputError("ensemble: unknown generator '" + gen_.name + "'");
        }
        const double scale = g.cwiseAbs().maxCoeff();
        if (std::abs(det_small(g)) >=
            1e-10 * std::pow(scale, static_cast<double>(dim_)))
            return g;
    }
    throw std::runtime_error("ensemble: generator rejected 1000 draws in a row");
}

int MatrixEnsemble::sample_atom_index(CounterRng& rng) const {
    if (!is_finite()) throw InputError("sample_atom_index: generator ensemble");
    const double u = rng.next_double();
    const auto it = std::upper_bound(cum_probs_.begin(), cum_probs_.end(), u);
    return static_cast<int>(std::min<std::ptrdiff_t>(
        it - cum_probs_.begin(), static_cast<std::ptrdiff_t>(atoms_.size()) - 1));
}

nlohmann::json MatrixEnsemble::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["label"] = label_;
    j["dim"] = dim_;
    if (is_finite()) {
        j["kind"] = "finite";
        nlohmann::json atoms = nlohmann::json::array();
        for (const auto& a : atoms_) {
            nlohmann::json rows = nlohmann::json::array();
            for (int r = 0; r < dim_; ++r) {
                nlohmann::json row = nlohmann::json::array();
                for (int c = 0; c < dim_; ++c) row.push_back(a.g(r, c));
                rows.push_back(row);
            }
            atoms.push_back({{"matrix", rows}, {"prob", a.prob}});
        }
        j["atoms"] = atoms;
    } else {
        j["kind"] = "generator";
        j["generator"] = {{"name", gen_.name}, {"params", gen_.params}};
    }
    return j;
}

MatrixEnsemble MatrixEnsemble::from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    const int dim = j.at("dim").get<int>();
    const std::string label = j.value("label", std::string("unnamed"));
    if (kind == "finite") {
        std::vector<Atom> atoms;
        for (const auto& ja : j.at("atoms")) {
            Matrix g(dim, dim);
            const auto& rows = ja.at("matrix");
            if (static_cast<int>(rows.size()) != dim)
                throw InputError("ensemble file: matrix row count != dim");
            for (int r = 0; r < dim; ++r) {
                if (static_cast<int>(rows[r].size()) != dim)
                    throw InputError("ensemble file: matrix column count != dim");
                for (int c = 0; c < dim; ++c) g(r, c) = rows[r][c].get<double>();
            }
            atoms.push_back({std::move(g), ja.at("prob").get<double>()});
        }
        return finite(std::move(atoms), label);
    }
    if (kind == "generator") {
        GeneratorSpec spec;
        spec.name = j.at("generator").at("name").get<std::string>();
        for (const auto& [k, v] : j.at("generator").at("params").items())
            spec.params[k] = v.get<double>();
        return generator(std::move(spec), dim, label);
    }
    throw InputError("ensemble file: kind must be 'finite' or 'generator'");
}

MatrixEnsemble MatrixEnsemble::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open ensemble file: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
}

void MatrixEnsemble::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write ensemble file: " + path);
    out << to_json().dump(2) << "\n";
}

std::uint64_t MatrixEnsemble::hash() const {
    nlohmann::json j = to_json();
    j.erase("label");
    return fnv1a64(j.dump());
}

MomentDiagnostic moment_check(const MatrixEnsemble& e, double epsilon, long m,
                              std::uint64_t seed) {
    if (!(epsilon > 0.0)) throw InputError("moment_check: epsilon must be > 0");
    if (m < 100) throw InputError("moment_check: need m >= 100");
    MomentDiagnostic out;
    out.epsilon = epsilon;

    if (e.is_finite()) {
        double mean = 0.0;
        for (const auto& a : e.atoms()) mean += a.prob * std::pow(size_N(a.g), epsilon);
        out.empirical_mean = mean;
        out.std_error = 0.0;
        out.sample_size = static_cast<long>(e.atoms().size());
        out.verdict = TailVerdict::kExponential;
        out.tail_exponent_fit = std::numeric_limits<double>::infinity();
        out.fit_r2 = 1.0;
        return out;
    }

    CounterRng rng(CounterRng::derive_stream(seed, 0));
    std::vector<double> log_n(static_cast<std::size_t>(m));
    double mean = 0.0, m2 = 0.0;
    for (long i = 0; i < m; ++i) {
        const double ln = std::log(size_N(e.sample(rng)));
        log_n[static_cast<std::size_t>(i)] = ln;
        const double v = std::exp(epsilon * ln);
        const double d = v - mean;
        mean += d / static_cast<double>(i + 1);
        m2 += d * (v - mean);
    }
    out.empirical_mean = mean;
    out.std_error = std::sqrt(m2 / static_cast<double>(m - 1) / static_cast<double>(m));
    out.sample_size = m;

    std::sort(log_n.begin(), log_n.end());
    const long first = static_cast<long>(0.9 * static_cast<double>(m));
    std::vector<double> u, log_s, log_u, loglog_s;
    for (long i = first; i < m; ++i) {
        const double ui = log_n[static_cast<std::size_t>(i)];
        const double si = (static_cast<double>(m - i) - 0.5) / static_cast<double>(m);
        if (ui <= 1e-12 || si <= 0.0 || si >= 1.0) continue;
        u.push_back(ui);
        log_s.push_back(std::log(si));
        log_u.push_back(std::log(ui));
        loglog_s.push_back(std::log(-std::log(si)));
    }
    if (m < 1000 || static_cast<long>(u.size()) < 30) {
        out.verdict = TailVerdict::kUnknown;
        return out;
    }
    const LineFit fit_exp = ols(u, log_s);         // log S = a - rate * u
    const LineFit fit_wei = ols(log_u, loglog_s);  // log(-log S) = c + alpha * log u
    const LineFit fit_pol = ols(log_u, log_s);     // log S = a - p * log u
    const double alpha_hat = fit_wei.slope;
    if (alpha_hat >= 0.9) {
        out.verdict = TailVerdict::kExponential;
        out.tail_exponent_fit = -fit_exp.slope;
        out.fit_r2 = fit_exp.r2;
    } else if (fit_pol.r2 > fit_wei.r2 + 0.05 && -fit_pol.slope > 0.0) {
        out.verdict = TailVerdict::kPolynomial;
        out.tail_exponent_fit = -fit_pol.slope;
        out.fit_r2 = fit_pol.r2;
    } else if (fit_wei.r2 >= 0.8) {
        out.verdict = TailVerdict::kSubexponential;
        out.tail_exponent_fit = alpha_hat;
        out.fit_r2 = fit_wei.r2;
    } else {
        out.verdict = TailVerdict::kUnknown;
        out.tail_exponent_fit = alpha_hat;
        out.fit_r2 = fit_wei.r2;
    }
    return out;
}

ProximalityReport proximality_probe(const MatrixEnsemble& e,
                                    const std::vector<int>& n_grid, long m,
                                    std::uint64_t seed) {
    if (n_grid.empty() || m < 1) throw InputError("proximality_probe: need n, m >= 1");
    ProximalityReport report;
    const int d = e.dim();

    std::vector<ProjectivePoint> cloud;
    if (d == 2) {
        for (int j = 0; j < 8; ++j)
            cloud.push_back(ProjectivePoint::from_angle(kPi * j / 8.0));
    } else {
        CounterRng crng(CounterRng::derive_stream(seed, 0xC10DDu));
        for (int j = 0; j < 8; ++j) {
            Vector v(d);
            for (int i = 0; i < d; ++i) v[i] = crng.next_gaussian();
            cloud.push_back(ProjectivePoint(std::move(v)));
        }
    }

    for (std::size_t ni = 0; ni < n_grid.size(); ++ni) {
        const int n = n_grid[ni];
        std::vector<double> gaps, diams;
        gaps.reserve(static_cast<std::size_t>(m));
        for (long t = 0; t < m; ++t) {
            CounterRng rng(CounterRng::derive_stream(seed, static_cast<std::uint64_t>(t)));
            Matrix prod = Matrix::Identity(d, d);
            for (int k = 0; k < n; ++k) {
                prod = e.sample(rng) * prod;
                const double scale = prod.cwiseAbs().maxCoeff();
                if (scale > 1e100 || scale < 1e-100) prod /= scale;
            }
            Eigen::JacobiSVD<Matrix> svd(prod);
            const auto& s = svd.singularValues();
            gaps.push_back(s(1) / s(0));
            double diam = 0.0;
            std::vector<ProjectivePoint> img;
            img.reserve(cloud.size());
            for (const auto& p : cloud) img.push_back(act(prod, p));
            for (std::size_t a = 0; a < img.size(); ++a)
                for (std::size_t b = a + 1; b < img.size(); ++b)
                    diam = std::max(diam, angular_distance(img[a], img[b]));
            diams.push_back(diam);
        }
        ProximalityRow row;
        row.n = n;
        row.gap_median = quantile(gaps, 0.5);
        row.gap_q25 = quantile(gaps, 0.25);
        row.gap_q75 = quantile(gaps, 0.75);
        row.cloud_diameter_median = quantile(diams, 0.5);
        report.rows.push_back(row);
    }
    const double first_med = report.rows.front().gap_median;
    const double last_med = report.rows.back().gap_median;
    report.contraction_trend = last_med < 0.5 * std::max(first_med, 1e-300);
    report.flagged_violation = last_med > 0.9;
    report.note =
        "heuristic probe: a decaying singular gap is evidence for proximality, "
        "never a proof; a stagnating gap flags a likely violation";
    return report;
}

}  // namespace rmp
