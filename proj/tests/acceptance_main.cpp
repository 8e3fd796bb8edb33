// Acceptance gate: runs the ten release criteria end to end against the
// library defaults and prints exactly one PASS/FAIL line per criterion.
// argv[1] must name the CLI binary (used by the determinism criterion).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ujem/attack.hpp"
#include "ujem/decode.hpp"
#include "ujem/harness.hpp"
#include "ujem/model.hpp"
#include "ujem/objectives.hpp"
#include "ujem/profile.hpp"
#include "ujem/rng.hpp"
#include "ujem/types.hpp"

using namespace ujem;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

// Pinned gates and tolerances. Statistical thresholds are design targets of
// the calibrated toy family evaluated on fixed seeds, so they are exact
// reproducible numbers, not flaky estimates.
constexpr double kGradFdStep = 1e-5;
constexpr double kGradMaxRelErr = 1e-4;
constexpr int kGradTriples = 20;
constexpr double kGradTimeLimitSec = 60.0;
constexpr double kBallTol = 1e-12;
constexpr int kBallRuns = 50;
constexpr int kProfileCases = 1000;
constexpr int kBatchInstances = 100;
constexpr int kHeatingMinPass = 95;
constexpr double kHeatingTimeLimitSec = 300.0;
constexpr int kKlPairedMinPass = 90;
constexpr double kOrderingGap = 0.05;
constexpr double kOrderingLambda = 1.0; // structural weight for the regularized arm
constexpr double kTransferMinWinRate = 0.70;
constexpr int kTransferInstances = 40;
constexpr double kTieEps = 1e-12;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct CriterionResult {
    bool pass = false;
    std::string detail;
};

ExperimentConfig batch_config(ObjectiveVariant variant, double lambda_kl, int steps) {
    ExperimentConfig cfg;
    cfg.instances = kBatchInstances;
    cfg.jobs = 8;
    cfg.emit_steps = false;
    cfg.attack.variant = variant;
    cfg.attack.lambda_kl = lambda_kl;
    cfg.attack.steps = steps;
    cfg.attack.early_stop_every = 0; // compare full-budget attacks
    return cfg;
}

// ---------------------------------------------------------------- criterion 1

CriterionResult check_gradients() {
    const auto t0 = clock_type::now();
    ToyFamilyConfig family;
    CalibrationSpec calib;
    double max_rel = 0.0;
    for (int k = 0; k < kGradTriples; ++k) {
        const uint64_t base = derive(0xACCE57ULL, "grad-triple", static_cast<uint64_t>(k));
        ToyVlmParams params = make_refusal_toy(derive(base, "model"), family, calib);
        ToyVlm vlm(params);

        SplitMix64 rng(derive(base, "pixels"));
        std::vector<double> image(static_cast<size_t>(params.d_img));
        for (auto& x : image) x = rng.uniform01();
        ImageInput clean = family_image(derive(base, "clean"), family);

        Trajectory traj;
        traj.prompt = family.default_prompt();
        const int len = 6 + k % 7;
        SplitMix64 trng(derive(base, "resp"));
        for (int t = 0; t < len; ++t) {
            traj.response.push_back(static_cast<TokenId>(trng.next_u64() % static_cast<uint64_t>(params.vocab.size)));
        }
        traj.validate(params.vocab);

        EntropyProfile prof = profile(vlm, image, traj);
        DecisionSets sets = select_decision_sets(prof, 0.1 + 0.05 * static_cast<double>(k % 5));

        CleanReference ref;
        for (const auto& d : toy_forward(params, clean.pixels, traj)) ref.q.push_back(d.probs);
        ref.validate();

        std::vector<ObjectiveSpec> specs(4);
        specs[0].variant = ObjectiveVariant::UJEM;
        specs[1].variant = ObjectiveVariant::UJEM_KL;
        specs[1].lambda_kl = 0.37;
        specs[1].clean_ref = ref;
        specs[2].variant = ObjectiveVariant::UJEM_AR;
        specs[2].lambda_ar = 0.23;
        specs[3].variant = ObjectiveVariant::TARGETED_PREFIX;
        specs[3].target_prefix.assign(static_cast<size_t>(std::min(4, len)), family.affirmative_id());
        for (auto& spec : specs) {
            spec.sets = sets;
            spec.validate(static_cast<int>(traj.response.size()));
            LossGrad analytic = toy_loss_grad(params, image, traj, spec);
            std::vector<double> fd = fd_grad(params, image, traj, spec, kGradFdStep);
            double scale = 1.0;
            for (double g : fd) scale = std::max(scale, std::abs(g));
            for (size_t i = 0; i < fd.size(); ++i) {
                max_rel = std::max(max_rel, std::abs(analytic.grad[i] - fd[i]) / scale);
            }
        }
    }
    const double dt = seconds_since(t0);
    CriterionResult r;
    r.pass = max_rel <= kGradMaxRelErr && dt < kGradTimeLimitSec;
    std::ostringstream os;
    os << "max_rel_err=" << max_rel << " (limit " << kGradMaxRelErr << ") time=" << dt << "s";
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------- criterion 2

CriterionResult check_ball_invariants() {
    ToyFamilyConfig family;
    CalibrationSpec calib;
    int violations = 0;
    long observed = 0;
    for (int run = 0; run < kBallRuns; ++run) {
        const uint64_t ms = 7 + static_cast<uint64_t>(run % 5);
        ToyVlm vlm(make_refusal_toy(ms, family, calib));
        ImageInput img = family_image(derive(0xBA11ULL, "ball-img", static_cast<uint64_t>(run)), family);
        AttackConfig cfg;
        cfg.variant = ObjectiveVariant::UJEM_KL;
        cfg.lambda_kl = 0.01;
        cfg.steps = 100;
        cfg.early_stop_every = 0;
        cfg.optimizer = (run % 2 == 0) ? OptimizerKind::SIGN_PGD : OptimizerKind::PROJECTED_ADAM;
        cfg.seed = derive(0xBA11ULL, "ball-seed", static_cast<uint64_t>(run));
        const double eps = cfg.epsilon;
        auto observer = [&](int, std::span<const double> delta, std::span<const double> adv) {
            ++observed;
            for (double d : delta) {
                if (std::abs(d) > eps + kBallTol) ++violations;
            }
            for (double p : adv) {
                if (p < 0.0 || p > 1.0) ++violations;
            }
        };
        std::vector<TokenId> prompt = family.default_prompt();
        run_attack(vlm, img.pixels, prompt, cfg, nullptr, nullptr, observer);
    }
    CriterionResult r;
    r.pass = violations == 0 && observed > 0;
    std::ostringstream os;
    os << "runs=" << kBallRuns << " steps_observed=" << observed << " violations=" << violations;
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------- criterion 3

CriterionResult check_decision_sets() {
    SplitMix64 rng(0xDEC15E75ULL);
    const double rhos[] = {0.05, 0.2, 1.0 / 3.0, 0.5, 0.77, 1.0};
    const double levels[] = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25};
    int mismatches = 0;
    for (int c = 0; c < kProfileCases; ++c) {
        const int T = 1 + static_cast<int>(rng.next_u64() % 8);
        EntropyProfile prof;
        prof.entropies.resize(static_cast<size_t>(T));
        prof.mask.resize(static_cast<size_t>(T));
        int content = 0;
        for (int t = 0; t < T; ++t) {
            prof.entropies[static_cast<size_t>(t)] =
                (rng.uniform01() < 0.5) ? levels[rng.next_u64() % 6] : 3.0 * rng.uniform01();
            prof.mask[static_cast<size_t>(t)] = rng.uniform01() < 0.7 ? 1 : 0;
            content += prof.mask[static_cast<size_t>(t)];
        }
        if (content == 0) prof.mask[rng.next_u64() % static_cast<uint64_t>(T)] = 1;
        const double rho = rhos[rng.next_u64() % 6];

        // Oracle: stable sort of the candidates by entropy (descending), ties
        // toward the earlier position, then split at max(1, floor(rho*|C|)).
        std::vector<int> cand;
        for (int t = 0; t < T; ++t) {
            if (prof.mask[static_cast<size_t>(t)]) cand.push_back(t);
        }
        std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
            return prof.entropies[static_cast<size_t>(a)] > prof.entropies[static_cast<size_t>(b)];
        });
        const int k = std::max<int>(1, static_cast<int>(std::floor(rho * static_cast<double>(cand.size()))));
        std::vector<int> want_dec(cand.begin(), cand.begin() + std::min<size_t>(cand.size(), static_cast<size_t>(k)));
        std::vector<int> want_str(cand.begin() + std::min<size_t>(cand.size(), static_cast<size_t>(k)), cand.end());
        std::sort(want_dec.begin(), want_dec.end());
        std::sort(want_str.begin(), want_str.end());

        DecisionSets got = select_decision_sets(prof, rho);
        if (got.decision != want_dec || got.structural != want_str) ++mismatches;
    }
    CriterionResult r;
    r.pass = mismatches == 0;
    std::ostringstream os;
    os << "profiles=" << kProfileCases << " mismatches=" << mismatches;
    r.detail = os.str();
    return r;
}

// ------------------------------------------------------- shared batch results

struct BatchRuns {
    ExperimentResult ujem;      // lambda 0
    ExperimentResult kl_small;  // lambda 0.01
    ExperimentResult kl_strong; // lambda kOrderingLambda
    ExperimentResult noise;     // zero update steps, random start only
    double ujem_seconds = 0.0;
};

BatchRuns run_batches() {
    BatchRuns b;
    const auto t0 = clock_type::now();
    b.ujem = run_experiment(batch_config(ObjectiveVariant::UJEM, 0.0, 100), nullptr);
    b.ujem_seconds = seconds_since(t0);
    b.kl_small = run_experiment(batch_config(ObjectiveVariant::UJEM_KL, 0.01, 100), nullptr);
    b.kl_strong = run_experiment(batch_config(ObjectiveVariant::UJEM_KL, kOrderingLambda, 100), nullptr);
    b.noise = run_experiment(batch_config(ObjectiveVariant::UJEM, 0.0, 0), nullptr);
    return b;
}

// ---------------------------------------------------------------- criterion 4

CriterionResult check_entropy_heating(const BatchRuns& b) {
    int heated = 0, valid = 0;
    for (const auto& o : b.ujem.outcomes) {
        if (!o.error.empty()) continue;
        ++valid;
        if (o.attack.final_snapshot.mean_entropy > o.attack.trace.front().mean_entropy) ++heated;
    }
    CriterionResult r;
    r.pass = valid == kBatchInstances && heated >= kHeatingMinPass && b.ujem_seconds < kHeatingTimeLimitSec;
    std::ostringstream os;
    os << "heated=" << heated << "/" << valid << " (min " << kHeatingMinPass << ") time="
       << b.ujem_seconds << "s";
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------- criterion 5

CriterionResult check_kl_stabilization(const BatchRuns& b) {
    int le = 0, valid = 0;
    for (size_t i = 0; i < b.kl_small.outcomes.size(); ++i) {
        const auto& oa = b.kl_small.outcomes[i];
        const auto& ob = b.ujem.outcomes[i];
        if (!oa.error.empty() || !ob.error.empty()) continue;
        ++valid;
        if (oa.attack.final_snapshot.mean_kl <= ob.attack.final_snapshot.mean_kl + kTieEps) ++le;
    }
    CriterionResult r;
    r.pass = valid == kBatchInstances && le >= kKlPairedMinPass;
    std::ostringstream os;
    os << "kl_le=" << le << "/" << valid << " (min " << kKlPairedMinPass << ")";
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------- criterion 6

CriterionResult check_flip_ordering(const BatchRuns& b) {
    const double a_kl = b.kl_strong.summary.asr;
    const double a_u = b.ujem.summary.asr;
    const double a_n = b.noise.summary.asr;
    CriterionResult r;
    r.pass = (a_kl - a_u >= kOrderingGap - kTieEps) && (a_u - a_n >= kOrderingGap - kTieEps);
    std::ostringstream os;
    os << "asr regularized=" << a_kl << " plain=" << a_u << " noise=" << a_n << " (gaps >= "
       << kOrderingGap << ")";
    r.detail = os.str();
    return r;
}

// ------------------------------------------------------------- criteria 7 + 9c

ExperimentConfig transfer_config(ObjectiveVariant variant) {
    ExperimentConfig cfg;
    cfg.jobs = 8;
    cfg.emit_steps = false;
    cfg.transfer_seeds = {7, 8, 9, 10};
    cfg.transfer_instances = kTransferInstances;
    cfg.attack.variant = variant;
    cfg.attack.steps = 100;
    cfg.attack.early_stop_every = 0;
    if (variant == ObjectiveVariant::UJEM_KL) {
        cfg.attack.lambda_kl = kOrderingLambda;
    } else if (variant == ObjectiveVariant::TARGETED_PREFIX) {
        cfg.attack.target_prefix.assign(8, cfg.family.affirmative_id());
    }
    return cfg;
}

struct TransferRuns {
    TransferResult regularized;
    TransferResult prefix;
    ExperimentConfig cfg_regularized;
};

TransferRuns run_transfers() {
    TransferRuns t;
    t.cfg_regularized = transfer_config(ObjectiveVariant::UJEM_KL);
    t.regularized = transfer_matrix(t.cfg_regularized, nullptr);
    t.prefix = transfer_matrix(transfer_config(ObjectiveVariant::TARGETED_PREFIX), nullptr);
    return t;
}

CriterionResult check_transfer_ordering(const TransferRuns& t) {
    int pairs = 0, wins = 0;
    for (size_t i = 0; i < t.regularized.cells.size(); ++i) {
        const auto& a = t.regularized.cells[i];
        const auto& p = t.prefix.cells[i];
        if (a.src_seed == a.dst_seed) continue;
        ++pairs;
        if (a.flips > p.flips) ++wins;
    }
    CriterionResult r;
    const double rate = pairs > 0 ? static_cast<double>(wins) / static_cast<double>(pairs) : 0.0;
    r.pass = pairs >= 10 && rate >= kTransferMinWinRate;
    std::ostringstream os;
    os << "wins=" << wins << "/" << pairs << " (min rate " << kTransferMinWinRate << ")";
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------- criterion 8

CriterionResult check_intersection_dominance(const BatchRuns& b) {
    int sets_checked = 0;
    int violations = 0;
    for (const ExperimentResult* res : {&b.ujem, &b.kl_small, &b.kl_strong, &b.noise}) {
        ++sets_checked;
        const size_t judges = res->summary.judge_names.size();
        for (size_t j = 0; j < judges; ++j) {
            int single = 0, valid = 0;
            for (const auto& o : res->outcomes) {
                if (!o.error.empty()) continue;
                ++valid;
                if (!o.clean_success && o.adv_verdicts[j] == Verdict::NON_REFUSAL) ++single;
            }
            const double single_asr = valid > 0 ? static_cast<double>(single) / valid : 0.0;
            if (res->summary.asr > single_asr + kTieEps) ++violations;
        }
    }
    CriterionResult r;
    r.pass = sets_checked == 4 && violations == 0;
    std::ostringstream os;
    os << "result_sets=" << sets_checked << " judge_violations=" << violations;
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------- criterion 9

CriterionResult check_reduction_identities(const BatchRuns& b, const TransferRuns& t) {
    std::ostringstream os;
    bool pass = true;

    // (a) the regularized objective at zero weight reproduces the plain one
    // bit for bit, perturbation and trace included.
    ExperimentResult kl0 = run_experiment(batch_config(ObjectiveVariant::UJEM_KL, 0.0, 100), nullptr);
    int mismatch = 0;
    for (size_t i = 0; i < kl0.outcomes.size(); ++i) {
        const auto& x = kl0.outcomes[i].attack;
        const auto& y = b.ujem.outcomes[i].attack;
        bool same = x.delta == y.delta && x.adv_image == y.adv_image && x.steps_run == y.steps_run &&
                    x.final_snapshot.objective == y.final_snapshot.objective &&
                    x.final_snapshot.mean_entropy == y.final_snapshot.mean_entropy &&
                    x.final_snapshot.mean_kl == y.final_snapshot.mean_kl &&
                    kl0.outcomes[i].flip == b.ujem.outcomes[i].flip;
        if (!same) ++mismatch;
    }
    pass = pass && mismatch == 0;
    os << "zero_weight_mismatches=" << mismatch;

    // (b) sampling at vanishing temperature takes the greedy path exactly.
    ToyFamilyConfig family;
    CalibrationSpec calib;
    int decode_mismatch = 0;
    for (int k = 0; k < 10; ++k) {
        ToyVlm vlm(make_refusal_toy(7 + static_cast<uint64_t>(k % 3), family, calib));
        ImageInput img = family_image(derive(0x9CULL, "decode", static_cast<uint64_t>(k)), family);
        std::vector<TokenId> prompt = family.default_prompt();
        DecodeConfig g{DecodeStrategy::GREEDY, 0.8, 12, 0};
        DecodeConfig s{DecodeStrategy::SAMPLING, (k % 2 == 0) ? 1e-10 : 1e-9, 12,
                       derive(0x9CULL, "decode-seed", static_cast<uint64_t>(k))};
        if (decode(vlm, img.pixels, prompt, g).response != decode(vlm, img.pixels, prompt, s).response) {
            ++decode_mismatch;
        }
    }
    pass = pass && decode_mismatch == 0;
    os << " cold_sampling_mismatches=" << decode_mismatch;

    // (c) the transfer diagonal reproduces the white-box pipeline.
    int diag_mismatch = 0;
    for (const auto& cell : t.regularized.cells) {
        if (cell.src_seed != cell.dst_seed) continue;
        ExperimentConfig cfg = t.cfg_regularized;
        cfg.model_seed = cell.src_seed;
        cfg.instances = cfg.transfer_instances;
        ExperimentResult white = run_experiment(cfg, nullptr);
        int flips = 0;
        for (const auto& o : white.outcomes) flips += o.flip ? 1 : 0;
        if (flips != cell.flips) ++diag_mismatch;
    }
    pass = pass && diag_mismatch == 0;
    os << " diag_mismatches=" << diag_mismatch;

    CriterionResult r;
    r.pass = pass;
    r.detail = os.str();
    return r;
}

// --------------------------------------------------------------- criterion 10

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const fs::path& p, const std::string& body) {
    std::ofstream out(p, std::ios::binary);
    out << body;
}

CriterionResult check_cli_determinism(const std::string& cli) {
    CriterionResult r;
    if (cli.empty()) {
        r.detail = "no CLI path given on the command line";
        return r;
    }
    fs::path dir = fs::current_path() / "acceptance_cli_tmp";
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);

    const std::string small =
        "experiment.instances = 6\nexperiment.jobs = 2\nattack.steps = 25\n";
    write_file(dir / "attack.cfg", small);
    write_file(dir / "transfer.cfg",
               "transfer.seeds = 3,4\ntransfer.instances = 4\nattack.steps = 25\nexperiment.jobs = 2\n");
    write_file(dir / "sweep.cfg",
               "experiment.instances = 4\nexperiment.jobs = 2\nattack.steps = 20\noutput.steps = false\n");
    write_file(dir / "observe.cfg", "attack.steps = 30\n");
    write_file(dir / "grad.cfg", "");

    struct Cmd {
        std::string name;
        std::string args;
    };
    const std::vector<Cmd> cmds = {
        {"attack", "attack --config " + (dir / "attack.cfg").string()},
        {"attack-jobs4", "attack --config " + (dir / "attack.cfg").string() + " --jobs 4"},
        {"transfer", "transfer --config " + (dir / "transfer.cfg").string()},
        {"sweep-temp", "sweep-temp --config " + (dir / "sweep.cfg").string()},
        {"sweep-kl", "sweep-kl --config " + (dir / "sweep.cfg").string()},
        {"observe", "observe --config " + (dir / "observe.cfg").string()},
        {"grad-check", "grad-check --config " + (dir / "grad.cfg").string()},
    };

    int checked = 0, mismatches = 0, failures = 0;
    for (const auto& c : cmds) {
        fs::path o1 = dir / (c.name + ".1.txt");
        fs::path o2 = dir / (c.name + ".2.txt");
        for (const fs::path* out : {&o1, &o2}) {
            const std::string cmd = cli + " " + c.args + " --out " + out->string() + " >/dev/null 2>&1";
            if (std::system(cmd.c_str()) != 0) ++failures;
        }
        ++checked;
        if (slurp(o1) != slurp(o2)) ++mismatches;
    }
    // Worker count must not leak into the records either.
    const std::string a1 = slurp(dir / "attack.1.txt");
    const std::string a4 = slurp(dir / "attack-jobs4.1.txt");
    const bool jobs_invariant = !a1.empty() && a1 == a4;

    r.pass = failures == 0 && mismatches == 0 && jobs_invariant;
    std::ostringstream os;
    os << "commands=" << checked << " rerun_mismatches=" << mismatches << " exec_failures=" << failures
       << " jobs_invariant=" << (jobs_invariant ? "yes" : "no");
    r.detail = os.str();
    if (r.pass) fs::remove_all(dir, ec);
    return r;
}

} // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    const auto t0 = clock_type::now();

    BatchRuns batches = run_batches();
    TransferRuns transfers = run_transfers();

    struct Line {
        const char* name;
        CriterionResult result;
    };
    std::vector<Line> lines;
    lines.push_back({"gradient correctness", check_gradients()});
    lines.push_back({"ball and clip invariants", check_ball_invariants()});
    lines.push_back({"decision set selection", check_decision_sets()});
    lines.push_back({"entropy heating", check_entropy_heating(batches)});
    lines.push_back({"structural stabilization", check_kl_stabilization(batches)});
    lines.push_back({"flip-rate ordering", check_flip_ordering(batches)});
    lines.push_back({"transfer ordering", check_transfer_ordering(transfers)});
    lines.push_back({"intersection dominance", check_intersection_dominance(batches)});
    lines.push_back({"reduction identities", check_reduction_identities(batches, transfers)});
    lines.push_back({"cli determinism", check_cli_determinism(cli)});

    int passed = 0;
    for (size_t i = 0; i < lines.size(); ++i) {
        const auto& l = lines[i];
        std::printf("criterion %2zu %-26s %s  %s\n", i + 1, l.name,
                    l.result.pass ? "PASS" : "FAIL", l.result.detail.c_str());
        if (l.result.pass) ++passed;
    }
    std::printf("acceptance: %d/10 criteria passed in %.1fs\n", passed, seconds_since(t0));
    return passed == 10 ? 0 : 1;
}
