#pragma once

#include "rmp/linalg.hpp"
#include "rmp/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rmp {

struct Atom {
    Matrix g;
    double prob;
};

struct GeneratorSpec {
    std::string name;
    std::map<std::string, double> params;
};

// Probability law mu on invertible d x d matrices: either a finite list of
// atoms or a named parametric generator family.
class MatrixEnsemble {
public:
    static MatrixEnsemble finite(std::vector<Atom> atoms, std::string label);
    static MatrixEnsemble generator(GeneratorSpec spec, int dim,
                                    std::string label);

    // Presets: "oracleA", "scalar-rotation", "diag31", "heavy-alpha",
    // "rotation-uniform", "rotation-irrational", plus the synthetic
    // moment-probe families listed by builtin_names().
    static MatrixEnsemble builtin(const std::string& name);
    static std::vector<std::string> builtin_names();

    static MatrixEnsemble from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static MatrixEnsemble load(const std::string& path);
    void save(const std::string& path) const;

    bool is_finite() const { return !atoms_.empty(); }
    const std::vector<Atom>& atoms() const { return atoms_; }
    const GeneratorSpec& generator_spec() const { return gen_; }
    int dim() const { return dim_; }
    const std::string& label() const { return label_; }

    // One i.i.d. draw. Generator families reject near-singular draws; more
    // than 1000 consecutive rejections is an error.
    Matrix sample(CounterRng& rng) const;

    // Finite-support only: index of the atom drawn by one uniform.
    int sample_atom_index(CounterRng& rng) const;

    // Content hash of the definition (label excluded).
    std::uint64_t hash() const;

private:
    MatrixEnsemble() = default;

    std::vector<Atom> atoms_;
    std::vector<double> cum_probs_;
    GeneratorSpec gen_;
    int dim_ = 0;
    std::string label_;
};

enum class TailVerdict { kExponential, kSubexponential, kPolynomial, kUnknown };

const char* to_string(TailVerdict v);

struct MomentDiagnostic {
    double epsilon = 0.0;
    double empirical_mean = 0.0;  // estimate of E[N(g)^epsilon]
    double std_error = 0.0;       // 0 for the exact finite-support path
    double tail_exponent_fit = 0.0;  // alpha for subexp, rate for exp, p for poly
    long sample_size = 0;
    TailVerdict verdict = TailVerdict::kUnknown;
    double fit_r2 = 0.0;
};

// Monte Carlo probe of the moment condition E[N(g)^epsilon] < inf, with a
// tail fit of log N(g) classifying the moment regime. Finite-support laws
// are evaluated exactly. Heuristic by construction: a verdict is evidence,
// not a certificate.
MomentDiagnostic moment_check(const MatrixEnsemble& e, double epsilon, long m,
                              std::uint64_t seed);

struct ProximalityRow {
    int n = 0;
    double gap_median = 0.0;  // s2(G_n) / s1(G_n)
    double gap_q25 = 0.0;
    double gap_q75 = 0.0;
    double cloud_diameter_median = 0.0;  // projective diameter of a test cloud
};

struct ProximalityReport {
    std::vector<ProximalityRow> rows;
    bool contraction_trend = false;  // gap median decays with n
    bool flagged_violation = false;  // gap stagnates near 1
    std::string note;                // always labels the probe heuristic
};

// Empirical probe of the proximality part of the strong-irreducibility /
// proximality condition: tracks the singular gap of sampled products.
ProximalityReport proximality_probe(const MatrixEnsemble& e,
                                    const std::vector<int>& n_grid, long m,
                                    std::uint64_t seed);

}  // namespace rmp
