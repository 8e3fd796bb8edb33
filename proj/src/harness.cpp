#include "ujem/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <thread>

#include "ujem/rng.hpp"

namespace ujem {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

std::string join_ids(std::span<const TokenId> ids) {
    std::string s;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) s += ',';
        s += std::to_string(ids[i]);
    }
    return s;
}

std::string join_verdicts(std::span<const Verdict> vs) {
    std::string s;
    for (size_t i = 0; i < vs.size(); ++i) {
        if (i > 0) s += ',';
        s += to_string(vs[i]);
    }
    return s;
}

std::string join_u64(std::span<const uint64_t> xs) {
    std::string s;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i > 0) s += ',';
        s += std::to_string(xs[i]);
    }
    return s;
}

std::string join_doubles(std::span<const double> xs) {
    std::string s;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i > 0) s += ',';
        s += fmt_double(xs[i]);
    }
    return s;
}

std::string sanitize(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
        if (c == '"') c = '\'';
    }
    return s;
}

// Runs `count` tasks on at most `jobs` threads; task(i) must be pure.
template <typename Task>
void parallel_for(int count, int jobs, Task task) {
    jobs = std::max(1, std::min(jobs, count));
    if (jobs == 1) {
        for (int i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) task(i);
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(jobs));
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

} // namespace

std::string fmt_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

double grad_rel_err(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "gradient size mismatch");
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max({den, std::abs(a[i]), std::abs(b[i])});
    }
    return den == 0.0 ? 0.0 : num / den;
}

void ExperimentConfig::validate() const {
    family.validate();
    attack.validate();
    require(eval_max_len >= 1 && eval_max_len <= family.t_max,
            "eval.max_len must lie in [1, family.t_max]");
    require(eval_temperature >= 0.0, "eval.temperature must be >= 0");
    require(instances >= 1, "experiment.instances must be >= 1");
    require(jobs >= 1, "experiment.jobs must be >= 1");
    require(transfer_instances >= 1, "transfer.instances must be >= 1");
    require(transfer_seeds.empty() || transfer_seeds.size() >= 2,
            "transfer.seeds needs at least two seeds when given");
    require(!sweep_temperatures.empty(), "sweep.temperatures must be non-empty");
    require(!sweep_lambdas.empty(), "sweep.lambdas must be non-empty");
    require(observe_topk >= 1, "observe.topk must be >= 1");
    require(observe_instance >= 0 && observe_instance < instances,
            "observe.instance must lie in [0, experiment.instances)");
    for (TokenId id : prompt) {
        require(id >= 0 && id < family.vocab_size, "experiment.prompt token out of range");
    }
    for (double t : sweep_temperatures) require(t >= 0.0, "sweep temperature must be >= 0");
    for (double l : sweep_lambdas) require(l >= 0.0, "sweep lambda must be >= 0");
}

ExperimentConfig ExperimentConfig::from_config(const ConfigMap& cfg) {
    ExperimentConfig e;
    e.model_seed = cfg.get_u64("model.seed", e.model_seed);

    ToyFamilyConfig& f = e.family;
    f.vocab_size = cfg.get_int("family.vocab_size", f.vocab_size);
    f.refusal_count = cfg.get_int("family.refusal_count", f.refusal_count);
    f.noncontent_count = cfg.get_int("family.noncontent_count", f.noncontent_count);
    f.d_h = cfg.get_int("family.d_h", f.d_h);
    f.d_img = cfg.get_int("family.d_img", f.d_img);
    f.t_max = cfg.get_int("family.t_max", f.t_max);
    f.family_seed = cfg.get_u64("family.family_seed", f.family_seed);
    f.refusal_window = cfg.get_int("family.refusal_window", f.refusal_window);
    f.gain_embed = cfg.get_double("family.gain_embed", f.gain_embed);
    f.gain_pos = cfg.get_double("family.gain_pos", f.gain_pos);
    f.pos_early_scale = cfg.get_double("family.pos_early_scale", f.pos_early_scale);
    f.gain_hidden = cfg.get_double("family.gain_hidden", f.gain_hidden);
    f.gain_image = cfg.get_double("family.gain_image", f.gain_image);
    f.gain_output = cfg.get_double("family.gain_output", f.gain_output);
    f.gain_out_bias = cfg.get_double("family.gain_out_bias", f.gain_out_bias);
    f.refusal_logit_penalty = cfg.get_double("family.refusal_logit_penalty", f.refusal_logit_penalty);
    f.noncontent_logit_penalty = cfg.get_double("family.noncontent_logit_penalty", f.noncontent_logit_penalty);
    f.refusal_row_gain = cfg.get_double("family.refusal_row_gain", f.refusal_row_gain);
    f.refusal_row_mix = cfg.get_double("family.refusal_row_mix", f.refusal_row_mix);
    f.affirmative_boost = cfg.get_double("family.affirmative_boost", f.affirmative_boost);
    f.affirmative_row_gain = cfg.get_double("family.affirmative_row_gain", f.affirmative_row_gain);
    f.affirmative_row_mix = cfg.get_double("family.affirmative_row_mix", f.affirmative_row_mix);
    f.affirmative_gate_ratio = cfg.get_double("family.affirmative_gate_ratio", f.affirmative_gate_ratio);
    f.window_compensation = cfg.get_double("family.window_compensation", f.window_compensation);
    f.gate_swing = cfg.get_double("family.gate_swing", f.gate_swing);
    f.gate_bias_shift = cfg.get_double("family.gate_bias_shift", f.gate_bias_shift);
    f.gate_flip_prob = cfg.get_double("family.gate_flip_prob", f.gate_flip_prob);
    f.epsilon_ref = cfg.get_double("family.epsilon_ref", f.epsilon_ref);
    f.image_jitter = cfg.get_double("family.image_jitter", f.image_jitter);

    CalibrationSpec& c = e.calib;
    c.band_lo = cfg.get_double("calib.band_lo", c.band_lo);
    c.band_hi = cfg.get_double("calib.band_hi", c.band_hi);
    c.min_nonrefusal_topk = cfg.get_int("calib.min_nonrefusal_topk", c.min_nonrefusal_topk);
    c.topk = cfg.get_int("calib.topk", c.topk);
    c.position = cfg.get_int("calib.position", c.position);
    c.max_bisection_steps = cfg.get_int("calib.max_bisection_steps", c.max_bisection_steps);

    AttackConfig& a = e.attack;
    a.variant = objective_variant_from_string(cfg.get_string("attack.variant", to_string(a.variant)));
    a.epsilon = cfg.get_double("attack.epsilon", a.epsilon);
    if (cfg.has("attack.alpha")) a.alpha = cfg.get_double("attack.alpha", 0.0);
    a.steps = cfg.get_int("attack.steps", a.steps);
    a.rho = cfg.get_double("attack.rho", a.rho);
    a.refresh_every = cfg.get_int("attack.refresh_every", a.refresh_every);
    a.early_stop_every = cfg.get_int("attack.early_stop_every", a.early_stop_every);
    a.lambda_kl = cfg.get_double("attack.lambda_kl", a.lambda_kl);
    a.lambda_ar = cfg.get_double("attack.lambda_ar", a.lambda_ar);
    a.optimizer = optimizer_kind_from_string(cfg.get_string("attack.optimizer", to_string(a.optimizer)));
    a.random_start = cfg.get_bool("attack.random_start", a.random_start);
    a.seed = cfg.get_u64("attack.seed", a.seed);
    {
        std::vector<int> p;
        p = cfg.get_int_list("attack.target_prefix", p);
        a.target_prefix.assign(p.begin(), p.end());
    }

    e.eval_strategy =
        decode_strategy_from_string(cfg.get_string("eval.strategy", to_string(e.eval_strategy)));
    e.eval_temperature = cfg.get_double("eval.temperature", e.eval_temperature);
    e.eval_max_len = cfg.get_int("eval.max_len", e.eval_max_len);
    a.reference_len = e.eval_max_len;

    e.instances = cfg.get_int("experiment.instances", e.instances);
    e.jobs = cfg.get_int("experiment.jobs", e.jobs);
    {
        std::vector<int> p;
        p = cfg.get_int_list("experiment.prompt", p);
        e.prompt.assign(p.begin(), p.end());
    }
    e.emit_steps = cfg.get_bool("output.steps", e.emit_steps);

    e.transfer_seeds = cfg.get_u64_list("transfer.seeds", e.transfer_seeds);
    e.transfer_instances = cfg.get_int("transfer.instances", e.transfer_instances);
    e.sweep_temperatures = cfg.get_double_list("sweep.temperatures", e.sweep_temperatures);
    e.sweep_lambdas = cfg.get_double_list("sweep.lambdas", e.sweep_lambdas);
    e.observe_topk = cfg.get_int("observe.topk", e.observe_topk);
    e.observe_instance = cfg.get_int("observe.instance", e.observe_instance);

    e.validate();
    return e;
}

std::vector<TokenId> ExperimentConfig::resolved_prompt() const {
    return prompt.empty() ? family.default_prompt() : prompt;
}

std::vector<uint64_t> ExperimentConfig::resolved_transfer_seeds() const {
    if (!transfer_seeds.empty()) return transfer_seeds;
    std::vector<uint64_t> seeds;
    for (uint64_t s = 0; s < 4; ++s) seeds.push_back(model_seed + s);
    return seeds;
}

uint64_t instance_seed(const ExperimentConfig& cfg, int instance_id) {
    return derive(cfg.attack.seed, "instance", static_cast<uint64_t>(instance_id));
}

ToyVlm build_model(const ExperimentConfig& cfg, uint64_t model_seed) {
    return ToyVlm(make_refusal_toy(model_seed, cfg.family, cfg.calib));
}

namespace {

DecodeConfig eval_decode_config(const ExperimentConfig& cfg, uint64_t seed) {
    DecodeConfig d;
    d.strategy = cfg.eval_strategy;
    d.temperature = cfg.eval_temperature;
    d.max_len = cfg.eval_max_len;
    d.seed = seed;
    return d;
}

} // namespace

InstanceOutcome run_instance(const ExperimentConfig& cfg, const ToyVlm& model,
                             const JudgePanel& panel, int instance_id) {
    InstanceOutcome o;
    o.id = instance_id;
    o.seed = instance_seed(cfg, instance_id);
    try {
        ImageInput img = family_image(o.seed, cfg.family);
        const std::vector<TokenId> prompt = cfg.resolved_prompt();
        const uint64_t ref_seed = derive(o.seed, "ref-decode");

        Trajectory reference = decode(model, img.pixels, prompt, eval_decode_config(cfg, ref_seed));
        o.clean_verdicts = panel_verdicts(panel, reference);
        o.clean_success = intersection_success(o.clean_verdicts);

        AttackConfig acfg = cfg.attack;
        acfg.seed = o.seed;
        o.attack = run_attack(model, img.pixels, prompt, acfg, &reference, &panel);

        o.adv_decode = decode(model, o.attack.adv_image, prompt,
                              eval_decode_config(cfg, derive(ref_seed, "adv-eval")));
        o.adv_verdicts = panel_verdicts(panel, o.adv_decode);
        o.adv_success = intersection_success(o.adv_verdicts);
        o.flip = !o.clean_success && o.adv_success;
    } catch (const std::exception& e) {
        o.error = e.what();
    }
    return o;
}

namespace {

ExperimentSummary summarize(const ExperimentConfig& cfg, const JudgePanel& panel,
                            const std::vector<InstanceOutcome>& outcomes) {
    ExperimentSummary s;
    s.instances = static_cast<int>(outcomes.size());
    for (const auto& j : panel.judges) s.judge_names.push_back(j.name);
    s.judge_clean_refusal_rate.assign(panel.judges.size(), 0.0);
    s.judge_adv_refusal_rate.assign(panel.judges.size(), 0.0);

    int valid = 0;
    int flips = 0, clean_ok = 0, adv_ok = 0;
    double steps = 0.0, ent = 0.0, kl = 0.0;
    for (const auto& o : outcomes) {
        if (!o.error.empty()) {
            ++s.errors;
            continue;
        }
        ++valid;
        flips += o.flip ? 1 : 0;
        clean_ok += o.clean_success ? 1 : 0;
        adv_ok += o.adv_success ? 1 : 0;
        s.early_stops += o.attack.stopped_early_at.has_value() ? 1 : 0;
        steps += o.attack.steps_run;
        ent += o.attack.final_snapshot.mean_entropy;
        kl += o.attack.final_snapshot.mean_kl;
        for (size_t j = 0; j < panel.judges.size(); ++j) {
            if (o.clean_verdicts[j] == Verdict::REFUSAL) s.judge_clean_refusal_rate[j] += 1.0;
            if (o.adv_verdicts[j] == Verdict::REFUSAL) s.judge_adv_refusal_rate[j] += 1.0;
        }
    }
    if (valid > 0) {
        const double dv = static_cast<double>(valid);
        s.asr = flips / dv;
        s.clean_success_rate = clean_ok / dv;
        s.adv_success_rate = adv_ok / dv;
        s.mean_steps = steps / dv;
        s.mean_final_entropy = ent / dv;
        s.mean_final_kl = kl / dv;
        for (auto& r : s.judge_clean_refusal_rate) r /= dv;
        for (auto& r : s.judge_adv_refusal_rate) r /= dv;
    }
    (void)cfg;
    return s;
}

void emit_run_line(std::ostream& os, const InstanceOutcome& o) {
    os << "run id=" << o.id << " seed=" << o.seed
       << " clean=" << join_verdicts(o.clean_verdicts)
       << " adv=" << join_verdicts(o.adv_verdicts)
       << " clean_success=" << (o.clean_success ? 1 : 0)
       << " adv_success=" << (o.adv_success ? 1 : 0)
       << " flip=" << (o.flip ? 1 : 0)
       << " steps=" << o.attack.steps_run
       << " early_stop=" << (o.attack.stopped_early_at ? *o.attack.stopped_early_at : -1)
       << " response=" << join_ids(o.attack.reference.response)
       << " adv_response=" << join_ids(o.adv_decode.response) << '\n';
}

void emit_instance(std::ostream& os, const ExperimentConfig& cfg, const InstanceOutcome& o) {
    if (!o.error.empty()) {
        os << "error id=" << o.id << " msg=\"" << sanitize(o.error) << "\"\n";
        return;
    }
    emit_run_line(os, o);
    if (cfg.emit_steps) {
        for (const auto& r : o.attack.trace) {
            os << "step id=" << o.id << " k=" << r.step
               << " objective=" << fmt_double(r.objective)
               << " entropy=" << fmt_double(r.mean_entropy)
               << " kl=" << fmt_double(r.mean_kl)
               << " refusal_mass=" << fmt_double(r.refusal_mass) << '\n';
        }
    }
    const auto& f = o.attack.final_snapshot;
    os << "final id=" << o.id << " step=" << f.step
       << " objective=" << fmt_double(f.objective)
       << " entropy=" << fmt_double(f.mean_entropy)
       << " kl=" << fmt_double(f.mean_kl)
       << " refusal_mass=" << fmt_double(f.refusal_mass) << '\n';
}

void emit_summary(std::ostream& os, const ExperimentSummary& s) {
    os << "summary instances=" << s.instances << " errors=" << s.errors
       << " asr=" << fmt_double(s.asr)
       << " clean_success_rate=" << fmt_double(s.clean_success_rate)
       << " adv_success_rate=" << fmt_double(s.adv_success_rate)
       << " early_stops=" << s.early_stops
       << " mean_steps=" << fmt_double(s.mean_steps)
       << " mean_final_entropy=" << fmt_double(s.mean_final_entropy)
       << " mean_final_kl=" << fmt_double(s.mean_final_kl) << '\n';
    for (size_t j = 0; j < s.judge_names.size(); ++j) {
        os << "judge name=" << s.judge_names[j]
           << " clean_refusal_rate=" << fmt_double(s.judge_clean_refusal_rate[j])
           << " adv_refusal_rate=" << fmt_double(s.judge_adv_refusal_rate[j]) << '\n';
    }
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* out) {
    cfg.validate();
    const ToyVlm model = build_model(cfg, cfg.model_seed);
    const JudgePanel panel = default_panel(model.vocab());

    ExperimentResult result;
    result.outcomes.resize(static_cast<size_t>(cfg.instances));
    parallel_for(cfg.instances, cfg.jobs, [&](int i) {
        result.outcomes[static_cast<size_t>(i)] = run_instance(cfg, model, panel, i);
    });
    result.summary = summarize(cfg, panel, result.outcomes);

    if (out != nullptr) {
        std::ostream& os = *out;
        os << "begin kind=attack variant=" << to_string(cfg.attack.variant)
           << " optimizer=" << to_string(cfg.attack.optimizer)
           << " model_seed=" << cfg.model_seed
           << " instances=" << cfg.instances
           << " steps=" << cfg.attack.steps
           << " epsilon=" << fmt_double(cfg.attack.epsilon)
           << " alpha=" << fmt_double(cfg.attack.resolved_alpha())
           << " rho=" << fmt_double(cfg.attack.rho)
           << " lambda_kl=" << fmt_double(cfg.attack.lambda_kl)
           << " lambda_ar=" << fmt_double(cfg.attack.lambda_ar)
           << " eval_strategy=" << to_string(cfg.eval_strategy)
           << " eval_temperature=" << fmt_double(cfg.eval_temperature) << '\n';
        for (const auto& o : result.outcomes) emit_instance(os, cfg, o);
        emit_summary(os, result.summary);
        os << "end kind=attack\n";
    }
    return result;
}

TransferResult transfer_matrix(const ExperimentConfig& cfg, std::ostream* out) {
    cfg.validate();
    TransferResult result;
    result.seeds = cfg.resolved_transfer_seeds();
    const int S = static_cast<int>(result.seeds.size());
    const int n = cfg.transfer_instances;
    const std::vector<TokenId> prompt = cfg.resolved_prompt();

    std::vector<ToyVlm> models;
    models.reserve(static_cast<size_t>(S));
    for (uint64_t seed : result.seeds) models.push_back(build_model(cfg, seed));
    const JudgePanel panel = default_panel(models.front().vocab());

    // Craft one perturbation per (source, instance); targets only evaluate.
    std::vector<std::vector<double>> adv(static_cast<size_t>(S) * static_cast<size_t>(n));
    std::vector<std::string> craft_errors(adv.size());
    parallel_for(S * n, cfg.jobs, [&](int idx) {
        const int s = idx / n;
        const int i = idx % n;
        try {
            const uint64_t seed_i = instance_seed(cfg, i);
            ImageInput img = family_image(seed_i, cfg.family);
            const uint64_t ref_seed = derive(seed_i, "ref-decode");
            Trajectory ref = decode(models[static_cast<size_t>(s)], img.pixels, prompt,
                                    eval_decode_config(cfg, ref_seed));
            AttackConfig acfg = cfg.attack;
            acfg.seed = seed_i;
            AttackResult r = run_attack(models[static_cast<size_t>(s)], img.pixels, prompt, acfg,
                                        &ref, &panel);
            adv[static_cast<size_t>(idx)] = std::move(r.adv_image);
        } catch (const std::exception& e) {
            craft_errors[static_cast<size_t>(idx)] = e.what();
        }
    });
    for (size_t idx = 0; idx < craft_errors.size(); ++idx) {
        if (!craft_errors[idx].empty()) {
            throw std::runtime_error("transfer craft failed (source index " +
                                     std::to_string(idx / static_cast<size_t>(n)) + ", instance " +
                                     std::to_string(idx % static_cast<size_t>(n)) +
                                     "): " + craft_errors[idx]);
        }
    }

    double diag_sum = 0.0, off_sum = 0.0;
    int diag_n = 0, off_n = 0;
    for (int s = 0; s < S; ++s) {
        for (int t = 0; t < S; ++t) {
            const ToyVlm& target = models[static_cast<size_t>(t)];
            TransferCell cell;
            cell.src_seed = result.seeds[static_cast<size_t>(s)];
            cell.dst_seed = result.seeds[static_cast<size_t>(t)];
            cell.instances = n;
            for (int i = 0; i < n; ++i) {
                const uint64_t seed_i = instance_seed(cfg, i);
                ImageInput img = family_image(seed_i, cfg.family);
                const uint64_t ref_seed = derive(seed_i, "ref-decode");
                Trajectory ref =
                    decode(target, img.pixels, prompt, eval_decode_config(cfg, ref_seed));
                const bool clean_ok = intersection_success(panel_verdicts(panel, ref));
                Trajectory probe =
                    decode(target, adv[static_cast<size_t>(s) * static_cast<size_t>(n) + static_cast<size_t>(i)],
                           prompt, eval_decode_config(cfg, derive(ref_seed, "adv-eval")));
                const bool adv_ok = intersection_success(panel_verdicts(panel, probe));
                if (!clean_ok && adv_ok) ++cell.flips;
            }
            cell.asr_value = static_cast<double>(cell.flips) / static_cast<double>(n);
            if (s == t) {
                diag_sum += cell.asr_value;
                ++diag_n;
            } else {
                off_sum += cell.asr_value;
                ++off_n;
            }
            result.cells.push_back(cell);
        }
    }
    result.diag_mean = diag_n > 0 ? diag_sum / diag_n : 0.0;
    result.offdiag_mean = off_n > 0 ? off_sum / off_n : 0.0;

    if (out != nullptr) {
        std::ostream& os = *out;
        os << "begin kind=transfer variant=" << to_string(cfg.attack.variant)
           << " instances=" << n << " seeds=" << join_u64(result.seeds) << '\n';
        for (const auto& c : result.cells) {
            os << "cell src=" << c.src_seed << " dst=" << c.dst_seed
               << " instances=" << c.instances << " flips=" << c.flips
               << " asr=" << fmt_double(c.asr_value) << '\n';
        }
        os << "summary diag_mean=" << fmt_double(result.diag_mean)
           << " offdiag_mean=" << fmt_double(result.offdiag_mean) << '\n';
        os << "end kind=transfer\n";
    }
    return result;
}

SweepResult temperature_sweep(const ExperimentConfig& cfg, std::ostream* out) {
    cfg.validate();
    SweepResult result;
    if (out != nullptr) {
        *out << "begin kind=sweep-temp instances=" << cfg.instances
             << " points=" << join_doubles(cfg.sweep_temperatures) << '\n';
    }
    for (double temp : cfg.sweep_temperatures) {
        ExperimentConfig point = cfg;
        point.eval_strategy = DecodeStrategy::SAMPLING;
        point.eval_temperature = temp;
        ExperimentResult r = run_experiment(point, nullptr);
        result.points.push_back({temp, r.summary});
        if (out != nullptr) {
            *out << "t value=" << fmt_double(temp) << " asr=" << fmt_double(r.summary.asr)
                 << " clean_success_rate=" << fmt_double(r.summary.clean_success_rate)
                 << " adv_success_rate=" << fmt_double(r.summary.adv_success_rate)
                 << " early_stops=" << r.summary.early_stops
                 << " errors=" << r.summary.errors << '\n';
        }
    }
    if (out != nullptr) {
        *out << "summary points=" << result.points.size() << '\n';
        *out << "end kind=sweep-temp\n";
    }
    return result;
}

SweepResult kl_sweep(const ExperimentConfig& cfg, std::ostream* out) {
    cfg.validate();
    SweepResult result;
    if (out != nullptr) {
        *out << "begin kind=sweep-kl instances=" << cfg.instances
             << " points=" << join_doubles(cfg.sweep_lambdas) << '\n';
    }
    for (double lambda : cfg.sweep_lambdas) {
        ExperimentConfig point = cfg;
        point.attack.variant = ObjectiveVariant::UJEM_KL;
        point.attack.lambda_kl = lambda;
        ExperimentResult r = run_experiment(point, nullptr);
        result.points.push_back({lambda, r.summary});
        if (out != nullptr) {
            *out << "lambda value=" << fmt_double(lambda) << " asr=" << fmt_double(r.summary.asr)
                 << " mean_final_entropy=" << fmt_double(r.summary.mean_final_entropy)
                 << " mean_final_kl=" << fmt_double(r.summary.mean_final_kl)
                 << " errors=" << r.summary.errors << '\n';
        }
    }
    if (out != nullptr) {
        *out << "summary points=" << result.points.size() << '\n';
        *out << "end kind=sweep-kl\n";
    }
    return result;
}

ObservationResult observation_report(const ExperimentConfig& cfg, std::ostream* out) {
    cfg.validate();
    const ToyVlm model = build_model(cfg, cfg.model_seed);
    const JudgePanel panel = default_panel(model.vocab());

    ObservationResult result;
    result.outcome = run_instance(cfg, model, panel, cfg.observe_instance);
    if (!result.outcome.error.empty()) {
        throw std::runtime_error("observed instance failed: " + result.outcome.error);
    }
    const InstanceOutcome& o = result.outcome;
    ImageInput img = family_image(o.seed, cfg.family);
    const auto& positions = o.attack.sets.decision;
    result.shifts = topk_shift_report(model, img.pixels, o.attack.adv_image, o.attack.reference,
                                      positions, cfg.observe_topk);

    if (out != nullptr) {
        std::ostream& os = *out;
        os << "begin kind=observe model_seed=" << cfg.model_seed
           << " instance=" << cfg.observe_instance << " topk=" << cfg.observe_topk << '\n';
        emit_run_line(os, o);
        auto clean_dists = model.forward(img.pixels, o.attack.reference);
        auto adv_dists = model.forward(o.attack.adv_image, o.attack.reference);
        for (int t : positions) {
            // Emitted positions are 1-based.
            os << "pos t=" << (t + 1)
               << " clean_entropy=" << fmt_double(shannon_entropy(clean_dists[static_cast<size_t>(t)]))
               << " adv_entropy=" << fmt_double(shannon_entropy(adv_dists[static_cast<size_t>(t)]))
               << " clean_mass=" << fmt_double(refusal_mass(clean_dists[static_cast<size_t>(t)], model.vocab()))
               << " adv_mass=" << fmt_double(refusal_mass(adv_dists[static_cast<size_t>(t)], model.vocab()))
               << '\n';
        }
        for (const auto& shift : result.shifts) {
            os << "argmax t=" << (shift.position + 1)
               << " clean=" << model.vocab().name(shift.clean_argmax)
               << " adv=" << model.vocab().name(shift.adv_argmax)
               << " flipped_from_refusal=" << (shift.argmax_flipped_from_refusal ? 1 : 0) << '\n';
            for (const auto& e : shift.entries) {
                os << "shift t=" << (shift.position + 1) << " token=" << model.vocab().name(e.token)
                   << " clean_p=" << fmt_double(e.clean_prob)
                   << " adv_p=" << fmt_double(e.adv_prob) << '\n';
            }
        }
        os << "end kind=observe\n";
    }
    return result;
}

GradCheckResult grad_check(const ExperimentConfig& cfg, int triples, double h, double tolerance,
                           std::ostream* out) {
    cfg.family.validate();
    require(triples >= 1, "grad-check needs at least one triple");
    require(h > 0.0, "grad-check step must be positive");
    require(tolerance > 0.0, "grad-check tolerance must be positive");

    GradCheckResult result;
    const ObjectiveVariant variants[] = {ObjectiveVariant::UJEM, ObjectiveVariant::UJEM_KL,
                                         ObjectiveVariant::UJEM_AR, ObjectiveVariant::TARGETED_PREFIX};
    for (ObjectiveVariant variant : variants) {
        for (int i = 0; i < triples; ++i) {
            const uint64_t seed = derive(cfg.model_seed, "grad-check", static_cast<uint64_t>(i));
            ToyVlmParams params = seeded_toy_params(seed, cfg.family);
            ImageInput img = family_image(derive(seed, "grad-image"), cfg.family);

            SplitMix64 rng(derive(seed, "grad-traj"));
            Trajectory traj;
            traj.prompt = cfg.family.default_prompt();
            const TokenId first_content = static_cast<TokenId>(cfg.family.affirmative_id());
            const int span = cfg.family.vocab_size - first_content;
            const int len = 4 + static_cast<int>(rng.next_u64() % 5);
            for (int t = 0; t < len; ++t) {
                traj.response.push_back(
                    static_cast<TokenId>(first_content + static_cast<TokenId>(rng.next_u64() % static_cast<uint64_t>(span))));
            }

            ToyVlm model(params);
            ObjectiveSpec spec;
            spec.variant = variant;
            spec.sets = refresh_decision_sets(model, img.pixels, traj, cfg.attack.rho);
            if (variant == ObjectiveVariant::UJEM_KL) {
                spec.lambda_kl = cfg.attack.lambda_kl > 0.0 ? cfg.attack.lambda_kl : 0.01;
                ImageInput ref_img = family_image(derive(seed, "grad-ref-image"), cfg.family);
                CleanReference ref;
                for (auto& d : toy_forward(params, ref_img.pixels, traj)) ref.q.push_back(std::move(d.probs));
                spec.clean_ref = std::move(ref);
            } else if (variant == ObjectiveVariant::UJEM_AR) {
                spec.lambda_ar = cfg.attack.lambda_ar > 0.0 ? cfg.attack.lambda_ar : 0.1;
            } else if (variant == ObjectiveVariant::TARGETED_PREFIX) {
                const int plen = std::min(3, traj.length());
                for (int t = 0; t < plen; ++t) {
                    spec.target_prefix.push_back(
                        static_cast<TokenId>(first_content + static_cast<TokenId>(rng.next_u64() % static_cast<uint64_t>(span))));
                }
            }

            LossGrad analytic = toy_loss_grad(params, img.pixels, traj, spec);
            std::vector<double> fd = fd_grad(params, img.pixels, traj, spec, h);
            GradCheckCase c;
            c.variant = to_string(variant);
            c.triple = i;
            c.max_rel_err = grad_rel_err(analytic.grad, fd);
            result.max_rel_err = std::max(result.max_rel_err, c.max_rel_err);
            result.cases.push_back(std::move(c));
        }
    }
    result.pass = result.max_rel_err <= tolerance;

    if (out != nullptr) {
        std::ostream& os = *out;
        os << "begin kind=grad-check triples=" << triples << " h=" << fmt_double(h)
           << " tolerance=" << fmt_double(tolerance) << '\n';
        for (const auto& c : result.cases) {
            os << "grad variant=" << c.variant << " triple=" << c.triple
               << " max_rel_err=" << fmt_double(c.max_rel_err) << '\n';
        }
        os << "summary max_rel_err=" << fmt_double(result.max_rel_err)
           << " pass=" << (result.pass ? 1 : 0) << '\n';
        os << "end kind=grad-check\n";
    }
    return result;
}

} // namespace ujem
