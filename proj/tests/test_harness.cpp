#include <doctest.h>

#include <sstream>

#include "ujem/harness.hpp"
#include "ujem/rng.hpp"

using namespace ujem;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.instances = 6;
    cfg.jobs = 2;
    cfg.attack.steps = 20;
    cfg.attack.early_stop_every = 0;
    cfg.emit_steps = false;
    return cfg;
}

} // namespace

TEST_CASE("experiment config maps every dotted key") {
    ConfigMap cm = ConfigMap::parse_string(
        "model.seed = 11\n"
        "family.vocab_size = 20\n"
        "family.affirmative_gate_ratio = 0.2\n"
        "family.refusal_logit_penalty = 5.5\n"
        "calib.band_lo = 0.35\n"
        "attack.variant = UJEM_AR\n"
        "attack.lambda_ar = 0.25\n"
        "attack.alpha = 0.002\n"
        "attack.optimizer = PROJECTED_ADAM\n"
        "attack.random_start = false\n"
        "eval.strategy = GREEDY\n"
        "eval.temperature = 0.5\n"
        "eval.max_len = 10\n"
        "experiment.instances = 3\n"
        "experiment.jobs = 4\n"
        "experiment.prompt = 5,6,7\n"
        "output.steps = false\n"
        "transfer.seeds = 2,3\n"
        "transfer.instances = 5\n"
        "sweep.temperatures = 0.1,0.9\n"
        "sweep.lambdas = 0,1\n"
        "observe.topk = 3\n"
        "observe.instance = 1\n");
    ExperimentConfig cfg = ExperimentConfig::from_config(cm);
    cm.finish(); // every key consumed

    CHECK(cfg.model_seed == 11);
    CHECK(cfg.family.vocab_size == 20);
    CHECK(cfg.family.affirmative_gate_ratio == doctest::Approx(0.2));
    CHECK(cfg.family.refusal_logit_penalty == doctest::Approx(5.5));
    CHECK(cfg.calib.band_lo == doctest::Approx(0.35));
    CHECK(cfg.attack.variant == ObjectiveVariant::UJEM_AR);
    CHECK(cfg.attack.lambda_ar == doctest::Approx(0.25));
    CHECK(cfg.attack.alpha.has_value());
    CHECK(cfg.attack.optimizer == OptimizerKind::PROJECTED_ADAM);
    CHECK_FALSE(cfg.attack.random_start);
    CHECK(cfg.eval_strategy == DecodeStrategy::GREEDY);
    CHECK(cfg.eval_max_len == 10);
    CHECK(cfg.instances == 3);
    CHECK(cfg.jobs == 4);
    CHECK(cfg.resolved_prompt() == std::vector<TokenId>{5, 6, 7});
    CHECK_FALSE(cfg.emit_steps);
    CHECK(cfg.resolved_transfer_seeds() == std::vector<uint64_t>{2, 3});
    CHECK(cfg.transfer_instances == 5);
    CHECK(cfg.sweep_temperatures == std::vector<double>{0.1, 0.9});
    CHECK(cfg.sweep_lambdas == std::vector<double>{0.0, 1.0});
    CHECK(cfg.observe_topk == 3);
    CHECK(cfg.observe_instance == 1);
    cfg.validate();
}

TEST_CASE("experiment config defaults are self-consistent") {
    ExperimentConfig cfg;
    cfg.validate();
    CHECK(cfg.resolved_prompt() == cfg.family.default_prompt());
    CHECK(cfg.resolved_transfer_seeds() ==
          std::vector<uint64_t>{cfg.model_seed, cfg.model_seed + 1, cfg.model_seed + 2, cfg.model_seed + 3});
    CHECK(cfg.sweep_temperatures.size() == 7);
    CHECK(cfg.sweep_lambdas.size() == 7);
}

TEST_CASE("instance seeds derive from the attack seed only") {
    ExperimentConfig a = tiny_config();
    ExperimentConfig b = tiny_config();
    b.model_seed = 12345; // must not matter
    CHECK(instance_seed(a, 3) == instance_seed(b, 3));
    CHECK(instance_seed(a, 3) == derive(a.attack.seed, "instance", 3));
    CHECK(instance_seed(a, 3) != instance_seed(a, 4));
}

TEST_CASE("run_instance composes verdicts into the flip flag") {
    ExperimentConfig cfg = tiny_config();
    ToyVlm model = build_model(cfg, cfg.model_seed);
    JudgePanel panel = default_panel(model.vocab());
    InstanceOutcome o = run_instance(cfg, model, panel, 0);
    REQUIRE(o.error.empty());
    CHECK(o.clean_verdicts.size() == panel.judges.size());
    CHECK(o.adv_verdicts.size() == panel.judges.size());
    CHECK(o.clean_success == intersection_success(o.clean_verdicts));
    CHECK(o.adv_success == intersection_success(o.adv_verdicts));
    CHECK(o.flip == (!o.clean_success && o.adv_success));
    CHECK(o.adv_decode.length() == cfg.eval_max_len);
}

TEST_CASE("run_experiment summary agrees with its outcomes") {
    ExperimentConfig cfg = tiny_config();
    ExperimentResult r = run_experiment(cfg, nullptr);
    REQUIRE(static_cast<int>(r.outcomes.size()) == cfg.instances);
    int flips = 0, clean = 0, adv = 0;
    for (const auto& o : r.outcomes) {
        REQUIRE(o.error.empty());
        flips += o.flip;
        clean += o.clean_success;
        adv += o.adv_success;
    }
    CHECK(r.summary.instances == cfg.instances);
    CHECK(r.summary.errors == 0);
    CHECK(r.summary.asr == doctest::Approx(static_cast<double>(flips) / cfg.instances));
    CHECK(r.summary.clean_success_rate == doctest::Approx(static_cast<double>(clean) / cfg.instances));
    CHECK(r.summary.adv_success_rate == doctest::Approx(static_cast<double>(adv) / cfg.instances));
    CHECK(r.summary.judge_names.size() == 4);
}

TEST_CASE("worker count does not change the results or the records") {
    ExperimentConfig one = tiny_config();
    one.jobs = 1;
    ExperimentConfig four = tiny_config();
    four.jobs = 4;

    std::ostringstream out1, out4;
    ExperimentResult r1 = run_experiment(one, &out1);
    ExperimentResult r4 = run_experiment(four, &out4);
    CHECK(out1.str() == out4.str());
    REQUIRE(r1.outcomes.size() == r4.outcomes.size());
    for (size_t i = 0; i < r1.outcomes.size(); ++i) {
        CHECK(r1.outcomes[i].attack.delta == r4.outcomes[i].attack.delta);
        CHECK(r1.outcomes[i].flip == r4.outcomes[i].flip);
    }
}

TEST_CASE("experiment records follow the documented line shapes") {
    ExperimentConfig cfg = tiny_config();
    cfg.instances = 2;
    cfg.emit_steps = true;
    std::ostringstream out;
    run_experiment(cfg, &out);
    std::istringstream in(out.str());
    std::string line;
    bool saw_begin = false, saw_step = false, saw_run = false, saw_summary = false, saw_judge = false;
    while (std::getline(in, line)) {
        if (line.rfind("begin ", 0) == 0) saw_begin = true;
        else if (line.rfind("step ", 0) == 0) saw_step = true;
        else if (line.rfind("run ", 0) == 0) saw_run = true;
        else if (line.rfind("summary ", 0) == 0) saw_summary = true;
        else if (line.rfind("judge ", 0) == 0) saw_judge = true;
    }
    CHECK(saw_begin);
    CHECK(saw_step);
    CHECK(saw_run);
    CHECK(saw_summary);
    CHECK(saw_judge);
}

TEST_CASE("transfer diagonal reproduces the white-box pipeline") {
    ExperimentConfig cfg = tiny_config();
    cfg.transfer_seeds = {7, 8};
    cfg.transfer_instances = 4;
    TransferResult t = transfer_matrix(cfg, nullptr);
    REQUIRE(t.cells.size() == 4);
    for (const auto& cell : t.cells) {
        if (cell.src_seed != cell.dst_seed) continue;
        ExperimentConfig wb = cfg;
        wb.model_seed = cell.src_seed;
        wb.instances = cfg.transfer_instances;
        ExperimentResult white = run_experiment(wb, nullptr);
        int flips = 0;
        for (const auto& o : white.outcomes) flips += o.flip;
        CHECK(cell.flips == flips);
    }
    CHECK(t.diag_mean >= 0.0);
    CHECK(t.offdiag_mean >= 0.0);
}

TEST_CASE("sweeps cover their grids") {
    ExperimentConfig cfg = tiny_config();
    cfg.instances = 2;
    cfg.attack.steps = 10;
    cfg.sweep_temperatures = {0.0, 0.8};
    cfg.sweep_lambdas = {0.0, 0.5};

    SweepResult st = temperature_sweep(cfg, nullptr);
    REQUIRE(st.points.size() == 2);
    CHECK(st.points[0].value == doctest::Approx(0.0));
    CHECK(st.points[1].value == doctest::Approx(0.8));

    cfg.attack.variant = ObjectiveVariant::UJEM; // forced to the regularized variant inside
    SweepResult sl = kl_sweep(cfg, nullptr);
    REQUIRE(sl.points.size() == 2);
    for (const auto& p : sl.points) CHECK(p.summary.instances == 2);
}

TEST_CASE("observation report shifts sit on the decision positions") {
    ExperimentConfig cfg = tiny_config();
    cfg.observe_instance = 0;
    ObservationResult obs = observation_report(cfg, nullptr);
    REQUIRE(obs.outcome.error.empty());
    REQUIRE(!obs.shifts.empty());
    const auto& decision = obs.outcome.attack.sets.decision;
    for (const auto& s : obs.shifts) {
        CHECK(std::find(decision.begin(), decision.end(), s.position) != decision.end());
    }
}

TEST_CASE("grad_check passes on the toy model and reports per-variant cases") {
    ExperimentConfig cfg = tiny_config();
    GradCheckResult g = grad_check(cfg, 3, 1e-5, 1e-4, nullptr);
    CHECK(g.pass);
    CHECK(g.max_rel_err < 1e-6);
    CHECK(g.cases.size() == 12); // 3 triples x 4 variants
}

TEST_CASE("fmt_double round-trips doubles exactly") {
    for (double v : {0.0, 1.0, 8.0 / 255.0, 0.1, -3.25e-7, 2.3974}) {
        CHECK(std::stod(fmt_double(v)) == v);
    }
}

TEST_CASE("grad_rel_err is scale-aware") {
    std::vector<double> a = {1.0, 2.0};
    CHECK(grad_rel_err(a, a) == doctest::Approx(0.0));
    std::vector<double> b = {1.0, 2.00002};
    CHECK(grad_rel_err(a, b) == doctest::Approx(1e-5).epsilon(0.01));
}
