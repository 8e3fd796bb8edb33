#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ujem/config.hpp"
#include "ujem/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitVerification = 2;
constexpr int kExitRuntime = 3;

struct CommonOpts {
    std::string config_path;
    std::string out_path;
    std::optional<uint64_t> seed;
    std::optional<int> jobs;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "Configuration file (dotted key=value lines)");
    cmd->add_option("--out", opts.out_path, "Write records to this file instead of stdout");
    cmd->add_option("--seed", opts.seed, "Override attack.seed");
    cmd->add_option("--jobs", opts.jobs, "Override experiment.jobs");
}

ujem::ExperimentConfig load_experiment(const CommonOpts& opts) {
    ujem::ConfigMap cfg = opts.config_path.empty() ? ujem::ConfigMap()
                                                   : ujem::ConfigMap::parse_file(opts.config_path);
    ujem::ExperimentConfig exp = ujem::ExperimentConfig::from_config(cfg);
    cfg.finish();
    if (opts.seed) exp.attack.seed = *opts.seed;
    if (opts.jobs) exp.jobs = *opts.jobs;
    exp.validate();
    return exp;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Entropy-maximization attack harness for the toy vision-language model family"};
    app.require_subcommand(1);

    CommonOpts attack_opts, transfer_opts, sweep_t_opts, sweep_kl_opts, observe_opts, grad_opts;
    int grad_triples = 20;
    double grad_h = 1e-5;
    double grad_tolerance = 1e-4;

    CLI::App* cmd_attack = app.add_subcommand("attack", "Run the white-box attack batch");
    add_common(cmd_attack, attack_opts);
    CLI::App* cmd_transfer = app.add_subcommand("transfer", "Cross-seed transfer matrix");
    add_common(cmd_transfer, transfer_opts);
    CLI::App* cmd_sweep_t = app.add_subcommand("sweep-temp", "Evaluation temperature sweep");
    add_common(cmd_sweep_t, sweep_t_opts);
    CLI::App* cmd_sweep_kl = app.add_subcommand("sweep-kl", "Structural weight sweep");
    add_common(cmd_sweep_kl, sweep_kl_opts);
    CLI::App* cmd_observe = app.add_subcommand("observe", "Top-k shift report for one instance");
    add_common(cmd_observe, observe_opts);
    CLI::App* cmd_grad = app.add_subcommand("grad-check", "Analytic vs finite-difference gradients");
    add_common(cmd_grad, grad_opts);
    cmd_grad->add_option("--triples", grad_triples, "Seeded cases per objective variant");
    cmd_grad->add_option("--fd-step", grad_h, "Central-difference step");
    cmd_grad->add_option("--tolerance", grad_tolerance, "Maximum allowed relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    const CommonOpts* opts = nullptr;
    if (cmd_attack->parsed()) opts = &attack_opts;
    else if (cmd_transfer->parsed()) opts = &transfer_opts;
    else if (cmd_sweep_t->parsed()) opts = &sweep_t_opts;
    else if (cmd_sweep_kl->parsed()) opts = &sweep_kl_opts;
    else if (cmd_observe->parsed()) opts = &observe_opts;
    else opts = &grad_opts;

    ujem::ExperimentConfig exp;
    try {
        exp = load_experiment(*opts);
        if (cmd_grad->parsed()) {
            if (grad_triples < 1 || grad_h <= 0.0 || grad_tolerance <= 0.0) {
                throw ujem::ConfigError("grad-check options must be positive");
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    }

    std::ofstream file;
    std::ostream* out = &std::cout;
    if (!opts->out_path.empty()) {
        file.open(opts->out_path, std::ios::binary);
        if (!file) {
            std::cerr << "config error: cannot open output file: " << opts->out_path << '\n';
            return kExitConfig;
        }
        out = &file;
    }

    try {
        if (cmd_attack->parsed()) {
            ujem::run_experiment(exp, out);
        } else if (cmd_transfer->parsed()) {
            ujem::transfer_matrix(exp, out);
        } else if (cmd_sweep_t->parsed()) {
            ujem::temperature_sweep(exp, out);
        } else if (cmd_sweep_kl->parsed()) {
            ujem::kl_sweep(exp, out);
        } else if (cmd_observe->parsed()) {
            ujem::observation_report(exp, out);
        } else {
            ujem::GradCheckResult r = ujem::grad_check(exp, grad_triples, grad_h, grad_tolerance, out);
            out->flush();
            if (!r.pass) {
                std::cerr << "verification failed: max_rel_err=" << ujem::fmt_double(r.max_rel_err)
                          << " tolerance=" << ujem::fmt_double(grad_tolerance) << '\n';
                return kExitVerification;
            }
        }
        out->flush();
        if (out == &file && !file) throw std::runtime_error("write failure on output file");
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}
