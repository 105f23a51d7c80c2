#include "rmp/ensemble.hpp"
#include "rmp/hash.hpp"
#include "rmp/lab.hpp"
#include "rmp/report.hpp"
#include "rmp/spectral.hpp"
#include "rmp/walk.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using rmp::MatrixEnsemble;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    json ensemble_spec = "oracleA";  // builtin name or inline definition
    std::vector<double> x0{1.0, 0.0};
    std::vector<double> f{1.0, 0.0};
    int n = 400;
    std::vector<int> n_grid{100, 400, 1600};
    std::int64_t m = 100000;
    std::int64_t m_tilted = 100000;
    std::uint64_t seed = 1;
    double s = 0.0;  // tilt for simulate
    int grid_M = 1024;
    double s_max = 0.0;  // 0 = auto
    int n_s = 13;
    std::vector<double> t_grid{0.0, 0.5, 1.0, 2.0};
    std::vector<double> k_grid{1, 2, 3, 4, 5, 6, 7, 8};
    double a1 = -1.0;
    double a2 = 1.0;
    double partition_A = 4.0;
    double holder_gamma = 0.1;
    double bn_exponent = 0.65;
    std::string phi = "one";
    json windows = json::object();
    std::string out_dir = "out";
    int threads = 0;

    MatrixEnsemble ensemble() const {
        if (ensemble_spec.is_string()) {
            const std::string name = ensemble_spec.get<std::string>();
            if (name.find('/') != std::string::npos || name.ends_with(".json"))
                return MatrixEnsemble::load(name);
            return MatrixEnsemble::builtin(name);
        }
        return MatrixEnsemble::from_json(ensemble_spec);
    }

    json effective() const {
        json j;
        j["schema_version"] = 1;
        j["ensemble"] = ensemble_spec;
        j["x0"] = x0;
        j["f"] = f;
        j["n"] = n;
        j["n_grid"] = n_grid;
        j["m"] = m;
        j["m_tilted"] = m_tilted;
        j["seed"] = seed;
        j["s"] = s;
        j["grid_M"] = grid_M;
        j["s_max"] = s_max;
        j["n_s"] = n_s;
        j["t_grid"] = t_grid;
        j["k_grid"] = k_grid;
        j["a1"] = a1;
        j["a2"] = a2;
        j["partition_A"] = partition_A;
        j["holder_gamma"] = holder_gamma;
        j["bn_exponent"] = bn_exponent;
        j["phi"] = phi;
        j["windows"] = windows;
        j["out_dir"] = out_dir;
        j["threads"] = threads;
        return j;
    }
};

template <typename T>
void maybe_get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ExperimentConfig load_config(const std::string& path) {
    ExperimentConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& ex) {
        throw ConfigError(std::string("config parse error: ") + ex.what());
    }
    if (j.contains("ensemble")) cfg.ensemble_spec = j.at("ensemble");
    maybe_get(j, "x0", cfg.x0);
    maybe_get(j, "f", cfg.f);
    maybe_get(j, "n", cfg.n);
    maybe_get(j, "n_grid", cfg.n_grid);
    maybe_get(j, "m", cfg.m);
    maybe_get(j, "m_tilted", cfg.m_tilted);
    maybe_get(j, "seed", cfg.seed);
    maybe_get(j, "s", cfg.s);
    maybe_get(j, "grid_M", cfg.grid_M);
    maybe_get(j, "s_max", cfg.s_max);
    maybe_get(j, "n_s", cfg.n_s);
    maybe_get(j, "t_grid", cfg.t_grid);
    maybe_get(j, "k_grid", cfg.k_grid);
    maybe_get(j, "a1", cfg.a1);
    maybe_get(j, "a2", cfg.a2);
    maybe_get(j, "partition_A", cfg.partition_A);
    maybe_get(j, "holder_gamma", cfg.holder_gamma);
    maybe_get(j, "bn_exponent", cfg.bn_exponent);
    maybe_get(j, "phi", cfg.phi);
    if (j.contains("windows")) cfg.windows = j.at("windows");
    maybe_get(j, "out_dir", cfg.out_dir);
    maybe_get(j, "threads", cfg.threads);
    return cfg;
}

void apply_overrides(ExperimentConfig& cfg, const std::string& out_flag,
                     std::int64_t seed_flag, int threads_flag) {
    if (const char* env = std::getenv("RMP_SEED"))
        cfg.seed = std::strtoull(env, nullptr, 10);
    if (const char* env = std::getenv("RMP_THREADS"))
        cfg.threads = static_cast<int>(std::strtol(env, nullptr, 10));
    if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
    if (threads_flag > 0) cfg.threads = threads_flag;
    if (!out_flag.empty()) cfg.out_dir = out_flag;
}

void validate(const ExperimentConfig& cfg, const MatrixEnsemble& e) {
    if (static_cast<int>(cfg.x0.size()) != e.dim() ||
        static_cast<int>(cfg.f.size()) != e.dim())
        throw ConfigError("config: x0/f dimension does not match ensemble dim " +
                          std::to_string(e.dim()));
    if (cfg.m < 1 || cfg.n < 1) throw ConfigError("config: need n >= 1, m >= 1");
    if (cfg.grid_M < 8) throw ConfigError("config: grid_M must be >= 8");
}

rmp::GridFn make_phi(const std::string& name, int M) {
    if (name == "one") return rmp::GridFn::constant(M, 1.0);
    if (name == "cos2")
        return rmp::GridFn::tabulate(M, [](double th) { return std::cos(th) * std::cos(th); });
    if (name == "sin2")
        return rmp::GridFn::tabulate(M, [](double th) { return std::sin(th) * std::sin(th); });
    throw ConfigError("config: unknown phi preset '" + name +
                      "' (available: one, cos2, sin2)");
}

struct CommandContext {
    ExperimentConfig cfg;
    MatrixEnsemble e;
    rmp::RunManifest manifest;
    std::chrono::steady_clock::time_point start;

    explicit CommandContext(ExperimentConfig c)
        : cfg(std::move(c)), e(cfg.ensemble()), start(std::chrono::steady_clock::now()) {
        validate(cfg, e);
        fs::create_directories(cfg.out_dir);
        manifest.effective_config = cfg.effective();
        manifest.config_hash = rmp::to_hex(rmp::fnv1a64(manifest.effective_config.dump()));
        manifest.seed = cfg.seed;
        manifest.threads = cfg.threads;
    }

    std::string out_path(const std::string& name) const {
        return (fs::path(cfg.out_dir) / name).string();
    }

    void finish(const std::string& command) {
        manifest.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                .count();
        manifest.save(out_path("manifest-" + command + ".json"));
    }
};

rmp::ProjectivePoint cfg_x0(const ExperimentConfig& cfg) {
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(
        cfg.x0.data(), static_cast<Eigen::Index>(cfg.x0.size()));
    return rmp::ProjectivePoint(v);
}

rmp::DualPoint cfg_f(const ExperimentConfig& cfg) {
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(
        cfg.f.data(), static_cast<Eigen::Index>(cfg.f.size()));
    return rmp::DualPoint(v);
}

int cmd_spectrum(ExperimentConfig cfg) {
    CommandContext ctx(std::move(cfg));
    rmp::SpectralEngine engine(ctx.e, ctx.cfg.grid_M);
    const rmp::SpectralModel model = engine.fit_lambda(ctx.cfg.s_max, ctx.cfg.n_s);
    const std::string model_path = ctx.out_path("model.json");
    model.save(model_path);
    ctx.manifest.add_artifact(model_path);

    std::cout << "spectral model for ensemble '" << ctx.e.label() << "' (hash "
              << rmp::to_hex(ctx.e.hash()) << ")\n";
    std::cout << "  grid M = " << model.M << ", validated s range = [-"
              << model.s_max << ", " << model.s_max << "]\n";
    std::cout << "  s, kappa(s), gap per Chebyshev node:\n";
    for (std::size_t i = 0; i < model.s_nodes.size(); ++i)
        std::cout << "    " << rmp::format_double(model.s_nodes[i]) << "  "
                  << rmp::format_double(model.kappa_nodes[i]) << "  "
                  << rmp::format_double(model.gap_nodes[i]) << "\n";
    std::cout << "  gamma1..gamma5 =";
    for (const double g : model.gammas) std::cout << " " << rmp::format_double(g);
    std::cout << "\n  sigma = " << rmp::format_double(model.sigma)
              << "\n  cramer zeta coefficients =";
    for (const double c : model.cramer) std::cout << " " << rmp::format_double(c);
    std::cout << "\n  model written to " << model_path << "\n";
    ctx.finish("spectrum");
    return 0;
}

int cmd_simulate(ExperimentConfig cfg) {
    CommandContext ctx(std::move(cfg));
    rmp::WalkPlan plan;
    plan.n = ctx.cfg.n;
    plan.m = ctx.cfg.m;
    plan.seed = ctx.cfg.seed;
    plan.threads = ctx.cfg.threads;
    std::vector<rmp::WalkSample> samples;
    if (ctx.cfg.s != 0.0) {
        rmp::SpectralEngine engine(ctx.e, ctx.cfg.grid_M);
        samples = rmp::tilted_run_walks(engine.tilted_kernel(ctx.cfg.s), cfg_x0(ctx.cfg),
                                        cfg_f(ctx.cfg), plan);
    } else {
        samples = rmp::run_walks(ctx.e, cfg_x0(ctx.cfg), cfg_f(ctx.cfg), plan);
    }
    const std::string csv_path = ctx.out_path("samples.csv");
    rmp::write_samples_csv(csv_path, samples);
    ctx.manifest.add_artifact(csv_path);

    std::vector<double> sigma, coeff;
    sigma.reserve(samples.size());
    coeff.reserve(samples.size());
    for (const auto& smp : samples) {
        sigma.push_back(smp.sigma_n);
        coeff.push_back(smp.coeff_log_n);
    }
    const auto ssum = rmp::summarize(sigma);
    const auto csum = rmp::summarize(coeff);
    std::cout << "simulated " << samples.size() << " trajectories at n = " << ctx.cfg.n
              << (ctx.cfg.s != 0.0 ? " (tilted s = " + std::to_string(ctx.cfg.s) + ")" : "")
              << "\n  mean sigma_n = " << rmp::format_double(ssum.mean) << " +- "
              << rmp::format_double(ssum.se) << "\n  mean coeff_log_n = "
              << rmp::format_double(csum.mean) << " +- " << rmp::format_double(csum.se)
              << "\n  samples written to " << csv_path << "\n";
    ctx.finish("simulate");
    return 0;
}

rmp::SpectralModel require_model(const CommandContext& ctx) {
    const std::string path = ctx.out_path("model.json");
    if (!fs::exists(path))
        throw ConfigError("missing prerequisite " + path +
                          "; run `rmp spectrum --config ...` first");
    return rmp::SpectralModel::load(path);
}

int cmd_verify(ExperimentConfig cfg, const std::string& selector) {
    CommandContext ctx(std::move(cfg));
    const auto x0 = cfg_x0(ctx.cfg);
    const auto f = cfg_f(ctx.cfg);
    rmp::ExpansionReport report;

    if (selector == "clt" || selector == "be" || selector == "edgeworth") {
        const rmp::SpectralModel model = require_model(ctx);
        rmp::SpectralEngine engine(ctx.e, ctx.cfg.grid_M);
        const auto samples = rmp::run_walks_horizons(ctx.e, x0, f, ctx.cfg.n_grid,
                                                     ctx.cfg.m, ctx.cfg.seed,
                                                     ctx.cfg.threads);
        const auto phi = make_phi(ctx.cfg.phi, ctx.cfg.grid_M);
        double nu_phi = 0.0;
        const auto& stat = engine.stationary();
        for (int j = 0; j < ctx.cfg.grid_M; ++j)
            nu_phi += stat.nu[static_cast<std::size_t>(j)] *
                      phi.values[static_cast<std::size_t>(j)];
        if (selector == "clt") {
            report = rmp::clt_check(ctx.cfg.n_grid, samples, model.gammas[0],
                                    model.sigma);
        } else if (selector == "be") {
            report = rmp::berry_esseen_check(ctx.cfg.n_grid, samples, model.gammas[0],
                                             model.sigma, phi, nu_phi);
        } else {
            const std::vector<int> horizons{8, 16, 32, 64, 128, 256};
            const auto b = rmp::b_phi(engine, phi, x0, 0.0, model.gammas[0], horizons,
                                      std::min<std::int64_t>(ctx.cfg.m, 20000),
                                      rmp::splitmix64(ctx.cfg.seed ^ 0xBEEF),
                                      ctx.cfg.threads);
            const auto d = engine.d_phi(phi, f, 0.0);
            rmp::EdgeworthInputs in;
            in.lambda1 = model.gammas[0];
            in.sigma = model.sigma;
            in.gamma3 = model.gammas[2];
            in.nu_phi = nu_phi;
            in.b_phi = b.value;
            in.d_phi = d.value;
            report = rmp::edgeworth_check(ctx.cfg.n_grid, samples, phi, in);
        }
    } else if (selector == "mdp") {
        const rmp::SpectralModel model = require_model(ctx);
        rmp::SpectralEngine engine(ctx.e, ctx.cfg.grid_M);
        report = rmp::mdp_expansion_check(engine, model, x0, f, ctx.cfg.n,
                                          ctx.cfg.t_grid, ctx.cfg.m_tilted,
                                          ctx.cfg.seed, ctx.cfg.threads);
    } else if (selector == "mdp-principle") {
        const rmp::SpectralModel model = require_model(ctx);
        rmp::SpectralEngine engine(ctx.e, ctx.cfg.grid_M);
        report = rmp::mdp_principle_check(engine, model, x0, f, ctx.cfg.n_grid,
                                          ctx.cfg.bn_exponent, ctx.cfg.t_grid,
                                          ctx.cfg.m_tilted, ctx.cfg.seed,
                                          ctx.cfg.threads);
    } else if (selector == "llt") {
        const rmp::SpectralModel model = require_model(ctx);
        rmp::SpectralEngine engine(ctx.e, ctx.cfg.grid_M);
        report = rmp::llt_check(engine, model, x0, f, ctx.cfg.n, ctx.cfg.t_grid,
                                ctx.cfg.a1, ctx.cfg.a2, ctx.cfg.m, ctx.cfg.m_tilted,
                                ctx.cfg.seed, ctx.cfg.threads);
    } else if (selector == "regularity") {
        rmp::RegularityOptions opts;
        report = rmp::regularity_check(nullptr, ctx.e, x0, f, ctx.cfg.n,
                                       ctx.cfg.k_grid, ctx.cfg.m, ctx.cfg.seed,
                                       ctx.cfg.threads, opts);
    } else if (selector == "rates") {
        rmp::WalkPlan plan;
        plan.n = std::max(200, ctx.cfg.n);
        plan.m = std::min<std::int64_t>(ctx.cfg.m, 5000);
        plan.seed = rmp::splitmix64(ctx.cfg.seed ^ 0x17EA);
        plan.threads = ctx.cfg.threads;
        const auto lyap = rmp::estimate_lyapunov(ctx.e, x0, plan);
        report = rmp::rates_check(ctx.e, x0, f, ctx.cfg.n_grid, ctx.cfg.m,
                                  ctx.cfg.seed, lyap, 0.25, ctx.cfg.threads);
    } else if (selector == "partition") {
        rmp::PartitionOfUnity part(ctx.cfg.n, f, ctx.cfg.partition_A);
        report = rmp::partition_unity_check(part, 10000, ctx.cfg.seed);
        const auto holder = rmp::partition_holder_check(part, ctx.cfg.holder_gamma,
                                                        700, ctx.cfg.seed);
        report.pass = report.pass && holder.pass;
        report.meta["holder"] = holder.summary();
        const std::string holder_csv = ctx.out_path("report-partition-holder.csv");
        holder.write_csv(holder_csv);
        ctx.manifest.add_artifact(holder_csv);
    } else {
        throw ConfigError(
            "unknown verify selector '" + selector +
            "'; available: clt be edgeworth mdp mdp-principle llt regularity "
            "rates partition");
    }

    report.meta["seed"] = ctx.cfg.seed;
    report.meta["ensemble_hash"] = rmp::to_hex(ctx.e.hash());
    const std::string csv_path = ctx.out_path("report-" + selector + ".csv");
    const std::string json_path = ctx.out_path("report-" + selector + ".json");
    report.write_csv(csv_path);
    rmp::write_text_file(json_path, report.summary().dump(2) + "\n");
    ctx.manifest.add_artifact(csv_path);
    ctx.manifest.add_artifact(json_path);
    ctx.finish("verify-" + selector);
    std::cout << (report.pass ? "PASS" : "FAIL") << " " << selector << " ("
              << report.rows.size() << " rows) -> " << csv_path << "\n";
    return report.pass ? 0 : 1;
}

int cmd_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open report file: " + path);
    json j;
    in >> j;
    std::cout << "report " << j.value("tag", std::string("?")) << ": "
              << (j.value("pass", false) ? "PASS" : "FAIL") << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"random matrix product limit-theorem laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir, report_path, selector;
    std::int64_t seed_flag = -1;
    int threads_flag = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config (JSON)");
        cmd->add_option("--seed", seed_flag, "override master seed");
        cmd->add_option("--threads", threads_flag, "override thread count");
        cmd->add_option("--out", out_dir, "output directory");
    };

    CLI::App* spectrum = app.add_subcommand("spectrum", "fit kappa(s), Lambda derivatives, Cramer coefficients");
    add_common(spectrum);
    CLI::App* simulate = app.add_subcommand("simulate", "run walks and emit raw samples as CSV");
    add_common(simulate);
    CLI::App* verify = app.add_subcommand("verify", "run one theorem check and emit a report");
    verify->add_option("selector", selector,
                       "clt|be|edgeworth|mdp|mdp-principle|llt|regularity|rates|partition")
        ->required();
    add_common(verify);
    CLI::App* report = app.add_subcommand("report", "pretty-print a report summary");
    report->add_option("file", report_path, "report JSON file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(report)) return cmd_report(report_path);
        ExperimentConfig cfg = load_config(config_path);
        apply_overrides(cfg, out_dir, seed_flag, threads_flag);
        if (app.got_subcommand(spectrum)) return cmd_spectrum(std::move(cfg));
        if (app.got_subcommand(simulate)) return cmd_simulate(std::move(cfg));
        if (app.got_subcommand(verify)) return cmd_verify(std::move(cfg), selector);
    } catch (const ConfigError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    } catch (const rmp::InputError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 2;
}
