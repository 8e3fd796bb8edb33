#include "ujem/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ujem/rng.hpp"

namespace ujem {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Precomputed image-dependent pieces shared by every step of a forward pass.
struct ImageCtx {
    std::vector<double> wx_img; // W_x * image
    double gate = 0.0;
};

ImageCtx image_ctx(const ToyVlmParams& p, std::span<const double> image) {
    ImageCtx ctx;
    ctx.wx_img.assign(static_cast<size_t>(p.d_h), 0.0);
    for (int i = 0; i < p.d_h; ++i) ctx.wx_img[static_cast<size_t>(i)] = dot(p.W_x.row(i), image);
    ctx.gate = sigmoid(dot(p.gate_w, image) + p.gate_b);
    return ctx;
}

// Logits for step index `s` (0-based) given the prefix-mean embedding.
std::vector<double> step_logits(const ToyVlmParams& p, const ImageCtx& ctx, int s,
                                std::span<const double> prefix_mean,
                                std::vector<double>* h_out) {
    std::vector<double> h(static_cast<size_t>(p.d_h));
    for (int i = 0; i < p.d_h; ++i) {
        double pre = p.P.at(s, i) + ctx.wx_img[static_cast<size_t>(i)] + dot(p.W_h.row(i), prefix_mean);
        h[static_cast<size_t>(i)] = std::tanh(pre);
    }
    std::vector<double> z(static_cast<size_t>(p.vocab.size));
    for (int v = 0; v < p.vocab.size; ++v) {
        z[static_cast<size_t>(v)] = p.b_o[static_cast<size_t>(v)] +
                                    ctx.gate * p.refusal_bias[static_cast<size_t>(v)] +
                                    dot(p.W_o.row(v), h);
    }
    if (h_out != nullptr) *h_out = std::move(h);
    return z;
}

// Running mean over embedding rows of the tokens seen so far.
struct PrefixMean {
    std::vector<double> sum;
    int count = 0;

    explicit PrefixMean(int d_h) : sum(static_cast<size_t>(d_h), 0.0) {}

    void absorb(const Matrix& E, TokenId id) {
        auto row = E.row(id);
        for (size_t i = 0; i < sum.size(); ++i) sum[i] += row[i];
        ++count;
    }

    std::vector<double> mean() const {
        std::vector<double> m(sum.size(), 0.0);
        if (count > 0) {
            for (size_t i = 0; i < sum.size(); ++i) m[i] = sum[i] / count;
        }
        return m;
    }
};

void check_image(const ToyVlmParams& p, std::span<const double> image) {
    require(static_cast<int>(image.size()) == p.d_img,
            "image dimension mismatch: got " + std::to_string(image.size()) +
                ", model expects " + std::to_string(p.d_img));
}

} // namespace

void ToyVlmParams::validate() const {
    require(d_h >= 1 && d_img >= 1 && t_max >= 1, "toy model dimensions must be positive");
    vocab.validate();
    require(E.rows == vocab.size && E.cols == d_h, "E must be |V| x d_h");
    require(P.rows == t_max && P.cols == d_h, "P must be t_max x d_h");
    require(W_h.rows == d_h && W_h.cols == d_h, "W_h must be d_h x d_h");
    require(W_x.rows == d_h && W_x.cols == d_img, "W_x must be d_h x d_img");
    require(W_o.rows == vocab.size && W_o.cols == d_h, "W_o must be |V| x d_h");
    require(static_cast<int>(b_o.size()) == vocab.size, "b_o must have |V| entries");
    require(static_cast<int>(gate_w.size()) == d_img, "gate_w must have d_img entries");
    require(static_cast<int>(refusal_bias.size()) == vocab.size, "refusal_bias must have |V| entries");
    for (TokenId v = 0; v < vocab.size; ++v) {
        require(std::isfinite(refusal_bias[static_cast<size_t>(v)]),
                "refusal_bias entries must be finite");
    }
}

void ToyFamilyConfig::validate() const {
    require(refusal_count >= 1, "family needs at least one refusal token");
    require(noncontent_count >= 0, "noncontent_count must be >= 0");
    require(vocab_size >= noncontent_count + refusal_count + 3,
            "vocab_size too small for the family layout");
    require(d_h >= 1 && d_img >= 1 && t_max >= 2, "family dimensions too small");
    require(refusal_window >= 0 && refusal_window <= t_max, "refusal_window out of range");
    require(gate_flip_prob >= 0.0 && gate_flip_prob <= 1.0, "gate_flip_prob must be a probability");
    require(epsilon_ref > 0.0, "epsilon_ref must be positive");
    require(image_jitter >= 0.0 && image_jitter <= 1.0, "image_jitter must keep pixels in [0,1]");
    require(pos_early_scale >= 0.0, "pos_early_scale must be >= 0");
    require(gain_embed > 0.0 && gain_pos >= 0.0 && gain_hidden >= 0.0 && gain_image > 0.0 &&
                gain_output > 0.0 && gain_out_bias >= 0.0,
            "family gains out of range");
    require(refusal_logit_penalty >= 0.0 && noncontent_logit_penalty >= 0.0 && gate_swing > 0.0 &&
                refusal_row_gain >= 0.0 && refusal_row_mix >= 0.0 && affirmative_row_gain >= 0.0 &&
                affirmative_row_mix >= 0.0,
            "refusal shaping out of range");
    require(window_compensation >= 0.0 && window_compensation <= 1.0,
            "window_compensation must lie in [0,1]");
    // The ratio must stay below the refusal entries' scale so the clean
    // refusal mass remains monotone in the calibrated bias scale.
    require(affirmative_gate_ratio >= 0.0 && affirmative_gate_ratio <= 0.7,
            "affirmative_gate_ratio must lie in [0, 0.7]");
}

std::vector<TokenId> ToyFamilyConfig::default_prompt() const {
    TokenId a = affirmative_id();
    return {static_cast<TokenId>(a + 1), static_cast<TokenId>(a + 2)};
}

namespace {

Vocab family_vocab(const ToyFamilyConfig& f) {
    static const char* kNoncontent[] = {"<b>", ".", ",", ";"};
    static const char* kRefusal[] = {"sorry", "cannot", "unable", "refuse", "decline", "wont"};
    static const char* kContent[] = {"sure",  "here", "is",   "how",  "you",  "make", "the",
                                     "two",   "steps", "first", "then", "mix",  "heat", "add",
                                     "done",  "next", "with", "this", "renew", "form"};
    Vocab v;
    v.size = f.vocab_size;
    v.display.resize(static_cast<size_t>(f.vocab_size));
    for (int i = 0; i < f.noncontent_count; ++i) {
        v.noncontent_ids.push_back(i);
        v.display[static_cast<size_t>(i)] =
            i < 4 ? kNoncontent[i] : "<nc" + std::to_string(i) + ">";
    }
    for (int i = 0; i < f.refusal_count; ++i) {
        TokenId id = static_cast<TokenId>(f.noncontent_count + i);
        v.refusal_ids.push_back(id);
        v.display[static_cast<size_t>(id)] =
            i < 6 ? kRefusal[i] : "ref" + std::to_string(i);
    }
    int first_content = f.noncontent_count + f.refusal_count;
    for (int id = first_content; id < f.vocab_size; ++id) {
        int i = id - first_content;
        v.display[static_cast<size_t>(id)] =
            i < 20 ? kContent[i] : "w" + std::to_string(id);
    }
    v.validate();
    return v;
}

void fill_uniform(Matrix& m, uint64_t stream_seed, double bound) {
    SplitMix64 rng(stream_seed);
    for (auto& x : m.a) x = rng.uniform(-bound, bound);
}

} // namespace

ToyVlmParams seeded_toy_params(uint64_t seed, const ToyFamilyConfig& family) {
    family.validate();
    ToyVlmParams p;
    p.seed = seed;
    p.d_h = family.d_h;
    p.d_img = family.d_img;
    p.t_max = family.t_max;
    p.vocab = family_vocab(family);

    const double inv_dh = 1.0 / std::sqrt(static_cast<double>(family.d_h));
    const double inv_dimg = 1.0 / std::sqrt(static_cast<double>(family.d_img));

    p.E = Matrix(p.vocab.size, p.d_h);
    fill_uniform(p.E, derive(seed, "toy-E"), family.gain_embed * inv_dh);
    p.W_h = Matrix(p.d_h, p.d_h);
    fill_uniform(p.W_h, derive(seed, "toy-Wh"), family.gain_hidden * inv_dh);
    p.W_x = Matrix(p.d_h, p.d_img);
    fill_uniform(p.W_x, derive(seed, "toy-Wx"), family.gain_image * inv_dimg);
    p.W_o = Matrix(p.vocab.size, p.d_h);
    fill_uniform(p.W_o, derive(seed, "toy-Wo"), family.gain_output * inv_dh);
    // Refusal output rows lean against the hidden sign pattern a mid-gray image
    // induces, so refusal logits stay flat on clean hidden states but rise when
    // a perturbation flips borderline coordinates.
    {
        std::vector<double> shat(static_cast<size_t>(p.d_h), 0.0);
        for (int i = 0; i < p.d_h; ++i) {
            double s = 0.0;
            for (int j = 0; j < p.d_img; ++j) s += p.W_x.at(i, j);
            shat[static_cast<size_t>(i)] = s >= 0.0 ? 1.0 : -1.0;
        }
        for (TokenId r : p.vocab.refusal_ids) {
            for (int i = 0; i < p.d_h; ++i) {
                double& w = p.W_o.at(r, i);
                w = family.refusal_row_mix * w -
                    (family.refusal_row_gain / static_cast<double>(p.d_h)) * shat[static_cast<size_t>(i)];
            }
        }
        // The affirmative marker leans the opposite way: its confidence rides on
        // the clean hidden pattern, so corner perturbations that unwind that
        // pattern demote it across all positions at once.
        const TokenId a = family.affirmative_id();
        for (int i = 0; i < p.d_h; ++i) {
            double& w = p.W_o.at(a, i);
            w = family.affirmative_row_mix * w +
                (family.affirmative_row_gain / static_cast<double>(p.d_h)) * shat[static_cast<size_t>(i)];
        }
    }

    p.P = Matrix(p.t_max, p.d_h);
    fill_uniform(p.P, derive(seed, "toy-P"), family.gain_pos * inv_dh);
    // Window rows roughly cancel the expected pre-activation (mid-gray image,
    // default prompt), so those positions start near-flat over content tokens
    // and the image-gated refusal bonus is the only confident signal there.
    {
        std::vector<double> pm(static_cast<size_t>(p.d_h), 0.0);
        const auto prompt = family.default_prompt();
        for (TokenId id : prompt) {
            auto row = p.E.row(id);
            for (int i = 0; i < p.d_h; ++i) pm[static_cast<size_t>(i)] += row[static_cast<size_t>(i)];
        }
        for (auto& v : pm) v /= static_cast<double>(prompt.size());
        for (int t = 0; t < family.refusal_window && t < p.t_max; ++t) {
            for (int i = 0; i < p.d_h; ++i) {
                double wx_base = 0.0;
                for (int j = 0; j < p.d_img; ++j) wx_base += p.W_x.at(i, j) * 0.5;
                double wh_pm = dot(p.W_h.row(i), pm);
                p.P.at(t, i) = family.pos_early_scale * p.P.at(t, i) -
                               family.window_compensation * (wx_base + wh_pm);
            }
        }
    }

    p.b_o.assign(static_cast<size_t>(p.vocab.size), 0.0);
    {
        SplitMix64 rng(derive(seed, "toy-bo"));
        for (auto& x : p.b_o) x = rng.uniform(-family.gain_out_bias * inv_dh, family.gain_out_bias * inv_dh);
    }
    for (TokenId id : p.vocab.refusal_ids) p.b_o[static_cast<size_t>(id)] -= family.refusal_logit_penalty;
    for (TokenId id : p.vocab.noncontent_ids) p.b_o[static_cast<size_t>(id)] -= family.noncontent_logit_penalty;
    p.b_o[static_cast<size_t>(family.affirmative_id())] += family.affirmative_boost;

    // Gate direction: a family-wide sign pattern with per-member flips, scaled
    // so a full-ball perturbation can move the gate pre-activation by about
    // gate_swing. gate_b puts the mid-gray pre-activation at gate_bias_shift,
    // so clean images sit firmly on the refusing side of the sigmoid.
    p.gate_w.assign(static_cast<size_t>(p.d_img), 0.0);
    {
        SplitMix64 shared(derive(family.family_seed, "gate-shared"));
        SplitMix64 flips(derive(seed, "gate-flip"));
        const double mag = family.gate_swing / (static_cast<double>(p.d_img) * family.epsilon_ref);
        for (auto& w : p.gate_w) {
            double s = shared.uniform01() < 0.5 ? -1.0 : 1.0;
            if (flips.uniform01() < family.gate_flip_prob) s = -s;
            w = s * mag;
        }
    }
    p.gate_b = family.gate_bias_shift - 0.5 * std::accumulate(p.gate_w.begin(), p.gate_w.end(), 0.0);

    p.refusal_bias.assign(static_cast<size_t>(p.vocab.size), 0.0);
    {
        SplitMix64 rng(derive(seed, "toy-refusal-bias"));
        for (TokenId id : p.vocab.refusal_ids) {
            p.refusal_bias[static_cast<size_t>(id)] = rng.uniform(0.75, 1.25);
        }
        // The affirmative marker rides the same gate at a reduced ratio: a
        // full gate suppression that silences refusals also collapses the
        // compliance scaffold, while a partial suppression keeps it alive.
        p.refusal_bias[static_cast<size_t>(family.affirmative_id())] = family.affirmative_gate_ratio;
    }
    p.validate();
    return p;
}

ImageInput family_image(uint64_t image_seed, const ToyFamilyConfig& family) {
    family.validate();
    SplitMix64 rng(derive(image_seed, "family-image"));
    ImageInput img;
    img.pixels.resize(static_cast<size_t>(family.d_img));
    for (auto& x : img.pixels) x = 0.5 + family.image_jitter * (rng.uniform01() - 0.5);
    img.validate();
    return img;
}

ImageInput calibration_image(uint64_t model_seed, const ToyFamilyConfig& family) {
    return family_image(derive(model_seed, "calib-image"), family);
}

std::vector<StepDistribution> toy_forward(const ToyVlmParams& params,
                                          std::span<const double> image,
                                          const Trajectory& traj) {
    check_image(params, image);
    traj.validate(params.vocab);
    const int T = traj.length();
    require(T <= params.t_max, "trajectory longer than the model's positional capacity");

    ImageCtx ctx = image_ctx(params, image);
    PrefixMean pm(params.d_h);
    for (TokenId id : traj.prompt) pm.absorb(params.E, id);

    std::vector<StepDistribution> dists;
    dists.reserve(static_cast<size_t>(T));
    for (int s = 0; s < T; ++s) {
        dists.push_back(make_step_distribution(step_logits(params, ctx, s, pm.mean(), nullptr)));
        pm.absorb(params.E, traj.response[static_cast<size_t>(s)]);
    }
    return dists;
}

std::vector<double> toy_step_logits(const ToyVlmParams& params,
                                    std::span<const double> image,
                                    std::span<const TokenId> prompt,
                                    std::span<const TokenId> generated) {
    check_image(params, image);
    const int s = static_cast<int>(generated.size());
    require(s < params.t_max, "decode position beyond the model's positional capacity");
    for (TokenId id : prompt) require(id >= 0 && id < params.vocab.size, "prompt token out of range");
    for (TokenId id : generated) require(id >= 0 && id < params.vocab.size, "generated token out of range");

    ImageCtx ctx = image_ctx(params, image);
    PrefixMean pm(params.d_h);
    for (TokenId id : prompt) pm.absorb(params.E, id);
    for (TokenId id : generated) pm.absorb(params.E, id);
    return step_logits(params, ctx, s, pm.mean(), nullptr);
}

double evaluate_objective(const ToyVlmParams& params,
                          std::span<const double> image,
                          const Trajectory& traj,
                          const ObjectiveSpec& objective) {
    auto dists = toy_forward(params, image, traj);
    objective.validate(traj.length());
    return combined_objective(dists, objective, params.vocab);
}

LossGrad toy_loss_grad(const ToyVlmParams& params,
                       std::span<const double> image,
                       const Trajectory& traj,
                       const ObjectiveSpec& objective) {
    check_image(params, image);
    traj.validate(params.vocab);
    const int T = traj.length();
    require(T <= params.t_max, "trajectory longer than the model's positional capacity");
    objective.validate(T);

    const int V = params.vocab.size;
    const int d_h = params.d_h;
    const int d_img = params.d_img;

    // Forward pass, keeping the hidden states for the backward sweep.
    ImageCtx ctx = image_ctx(params, image);
    PrefixMean pm(params.d_h);
    for (TokenId id : traj.prompt) pm.absorb(params.E, id);
    std::vector<StepDistribution> dists;
    std::vector<std::vector<double>> hidden(static_cast<size_t>(T));
    dists.reserve(static_cast<size_t>(T));
    for (int s = 0; s < T; ++s) {
        auto z = step_logits(params, ctx, s, pm.mean(), &hidden[static_cast<size_t>(s)]);
        dists.push_back(make_step_distribution(std::move(z)));
        pm.absorb(params.E, traj.response[static_cast<size_t>(s)]);
    }

    LossGrad out;
    out.value = combined_objective(dists, objective, params.vocab);
    out.grad.assign(static_cast<size_t>(d_img), 0.0);

    // dJ/dz accumulated per touched position.
    std::vector<std::vector<double>> dz(static_cast<size_t>(T));
    auto touch = [&](int t) -> std::vector<double>& {
        auto& row = dz[static_cast<size_t>(t)];
        if (row.empty()) row.assign(static_cast<size_t>(V), 0.0);
        return row;
    };

    const bool entropy_variant = objective.variant == ObjectiveVariant::UJEM ||
                                 objective.variant == ObjectiveVariant::UJEM_KL ||
                                 objective.variant == ObjectiveVariant::UJEM_AR;
    if (entropy_variant) {
        const auto& S = objective.sets.decision;
        const double w = 1.0 / static_cast<double>(S.size());
        for (int t : S) {
            const auto& p = dists[static_cast<size_t>(t)].probs;
            const double H = shannon_entropy(p);
            auto& row = touch(t);
            for (int v = 0; v < V; ++v) {
                double pv = p[static_cast<size_t>(v)];
                if (pv > 0.0) row[static_cast<size_t>(v)] += w * (-pv * (std::log(pv) + H));
            }
        }
    }
    if (objective.variant == ObjectiveVariant::UJEM_KL && objective.lambda_kl != 0.0 &&
        !objective.sets.structural.empty()) {
        const auto& R = objective.sets.structural;
        const auto& qs = objective.clean_ref->q;
        const double coeff = -objective.lambda_kl / static_cast<double>(R.size());
        for (int t : R) {
            const auto& p = dists[static_cast<size_t>(t)].probs;
            const auto& q = qs[static_cast<size_t>(t)];
            double kl = 0.0;
            for (int v = 0; v < V; ++v) {
                double pv = p[static_cast<size_t>(v)];
                if (pv > 0.0) kl += pv * (std::log(pv) - std::log(q[static_cast<size_t>(v)]));
            }
            auto& row = touch(t);
            for (int v = 0; v < V; ++v) {
                double pv = p[static_cast<size_t>(v)];
                if (pv > 0.0) {
                    double lr = std::log(pv) - std::log(q[static_cast<size_t>(v)]);
                    row[static_cast<size_t>(v)] += coeff * pv * (lr - kl);
                }
            }
        }
    }
    if (objective.variant == ObjectiveVariant::UJEM_AR && objective.lambda_ar != 0.0) {
        const auto& S = objective.sets.decision;
        const double coeff = -objective.lambda_ar / static_cast<double>(S.size());
        for (int t : S) {
            const auto& p = dists[static_cast<size_t>(t)].probs;
            const double m = refusal_mass(p, params.vocab);
            auto& row = touch(t);
            for (int v = 0; v < V; ++v) {
                double ind = params.vocab.is_refusal(v) ? 1.0 : 0.0;
                row[static_cast<size_t>(v)] += coeff * p[static_cast<size_t>(v)] * (ind - m);
            }
        }
    }
    if (objective.variant == ObjectiveVariant::TARGETED_PREFIX) {
        const auto& prefix = objective.target_prefix;
        const double w = 1.0 / static_cast<double>(prefix.size());
        for (size_t t = 0; t < prefix.size(); ++t) {
            const auto& p = dists[t].probs;
            const TokenId y = prefix[t];
            auto& row = touch(static_cast<int>(t));
            for (int v = 0; v < V; ++v) {
                double ind = (v == y) ? 1.0 : 0.0;
                row[static_cast<size_t>(v)] += w * (ind - p[static_cast<size_t>(v)]);
            }
        }
    }

    // Backprop through z_t = W_o h_t + b_o + gate * refusal_bias and
    // h_t = tanh(... + W_x image + ...); the prefix mean does not depend on
    // the image, so only the W_x path and the gate path reach the pixels.
    double gate_coeff = 0.0;
    std::vector<double> u(static_cast<size_t>(d_h));
    for (int t = 0; t < T; ++t) {
        const auto& row = dz[static_cast<size_t>(t)];
        if (row.empty()) continue;
        gate_coeff += dot(row, params.refusal_bias);
        std::fill(u.begin(), u.end(), 0.0);
        for (int v = 0; v < V; ++v) {
            double g = row[static_cast<size_t>(v)];
            if (g == 0.0) continue;
            auto wo = params.W_o.row(v);
            for (int i = 0; i < d_h; ++i) u[static_cast<size_t>(i)] += g * wo[static_cast<size_t>(i)];
        }
        const auto& h = hidden[static_cast<size_t>(t)];
        for (int i = 0; i < d_h; ++i) {
            double e = (1.0 - h[static_cast<size_t>(i)] * h[static_cast<size_t>(i)]) * u[static_cast<size_t>(i)];
            if (e == 0.0) continue;
            auto wx = params.W_x.row(i);
            for (int j = 0; j < d_img; ++j) out.grad[static_cast<size_t>(j)] += e * wx[static_cast<size_t>(j)];
        }
    }
    if (gate_coeff != 0.0) {
        const double dgate = gate_coeff * ctx.gate * (1.0 - ctx.gate);
        for (int j = 0; j < d_img; ++j) out.grad[static_cast<size_t>(j)] += dgate * params.gate_w[static_cast<size_t>(j)];
    }
    return out;
}

std::vector<double> fd_grad_fn(const std::function<double(std::span<const double>)>& f,
                               std::span<const double> image,
                               double h) {
    require(h > 0.0, "finite-difference step must be positive");
    std::vector<double> x(image.begin(), image.end());
    std::vector<double> g(x.size(), 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

std::vector<double> fd_grad(const ToyVlmParams& params,
                            std::span<const double> image,
                            const Trajectory& traj,
                            const ObjectiveSpec& objective,
                            double h) {
    return fd_grad_fn(
        [&](std::span<const double> x) { return evaluate_objective(params, x, traj, objective); },
        image, h);
}

namespace {

double clean_gate(const ToyVlmParams& p, std::span<const double> image) {
    return sigmoid(dot(p.gate_w, image) + p.gate_b);
}

double mass_at_position(const ToyVlmParams& p, std::span<const double> image,
                        const Trajectory& traj, int position) {
    auto dists = toy_forward(p, image, traj);
    return refusal_mass(dists[static_cast<size_t>(position)], p.vocab);
}

bool topk_condition(const ToyVlmParams& p, std::span<const double> image,
                    const Trajectory& traj, const CalibrationSpec& calib) {
    auto dists = toy_forward(p, image, traj);
    const auto& probs = dists[static_cast<size_t>(calib.position)].probs;
    std::vector<int> ids(probs.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)])
            return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
        return a < b;
    });
    const int k = std::min<int>(calib.topk, static_cast<int>(ids.size()));
    int nonrefusal = 0;
    for (int i = 0; i < k; ++i) {
        if (!p.vocab.is_refusal(ids[static_cast<size_t>(i)])) ++nonrefusal;
    }
    return nonrefusal >= calib.min_nonrefusal_topk;
}

ToyVlmParams with_bias_scale(const ToyVlmParams& base, double c) {
    ToyVlmParams p = base;
    for (auto& x : p.refusal_bias) x *= c;
    return p;
}

} // namespace

ToyVlmParams make_refusal_toy(uint64_t seed, const ToyFamilyConfig& family, const CalibrationSpec& calib) {
    require(calib.band_lo >= 0.0 && calib.band_lo <= calib.band_hi && calib.band_hi <= 1.0,
            "calibration band must satisfy 0 <= lo <= hi <= 1");
    require(calib.topk >= 1 && calib.min_nonrefusal_topk >= 0 && calib.min_nonrefusal_topk <= calib.topk,
            "calibration top-k condition out of range");
    require(calib.max_bisection_steps >= 1, "max_bisection_steps must be >= 1");

    ToyVlmParams params = seeded_toy_params(seed, family);
    require(calib.position >= 0 && calib.position < params.t_max, "calibration position out of range");

    ImageInput img = calibration_image(seed, family);
    Trajectory traj;
    traj.prompt = calib.prompt.empty() ? family.default_prompt() : calib.prompt;
    // Fixed convention for the teacher-forced prefix at the calibration
    // position: repeat the affirmative token, so calibration never depends on
    // a decode of the not-yet-calibrated model.
    traj.response.assign(static_cast<size_t>(calib.position) + 1, family.affirmative_id());
    traj.validate(params.vocab);

    auto in_band = [&](double m) { return m >= calib.band_lo && m <= calib.band_hi; };
    double mass = mass_at_position(params, img.pixels, traj, calib.position);
    if (in_band(mass) && topk_condition(params, img.pixels, traj, calib)) {
        return params; // constraints already hold: raw seeded member, untouched
    }

    // Stage 1: if the gate is saturated on the clean image, shrink the gate
    // scale by bisection until the pre-activation magnitude is moderate.
    double g = clean_gate(params, img.pixels);
    if (g < 0.1 || g > 0.9) {
        const double target = std::log(3.0); // gate in [0.25, 0.75]
        const double gi = dot(params.gate_w, img.pixels) + params.gate_b;
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < calib.max_bisection_steps; ++it) {
            double mid = 0.5 * (lo + hi);
            if (std::abs(mid * gi) > target) hi = mid; else lo = mid;
        }
        const double s = 0.5 * (lo + hi);
        for (auto& w : params.gate_w) w *= s;
        params.gate_b *= s;
    }

    // Stage 2: bisect the refusal-bias scale; the clean refusal mass is
    // monotone increasing in it.
    const double mid_target = 0.5 * (calib.band_lo + calib.band_hi);
    double c_lo = 0.0;
    double m_lo = mass_at_position(with_bias_scale(params, c_lo), img.pixels, traj, calib.position);
    if (m_lo > calib.band_hi) {
        throw CalibrationError("refusal mass above the band even with zero refusal bias (seed " +
                               std::to_string(seed) + ")");
    }
    double c_hi = 1.0;
    double m_hi = mass_at_position(with_bias_scale(params, c_hi), img.pixels, traj, calib.position);
    int expand = 0;
    while (m_hi < mid_target && expand < 60) {
        c_hi *= 2.0;
        m_hi = mass_at_position(with_bias_scale(params, c_hi), img.pixels, traj, calib.position);
        ++expand;
    }
    if (m_hi < calib.band_lo) {
        throw CalibrationError("refusal mass cannot reach the band (seed " + std::to_string(seed) + ")");
    }

    bool accepted = in_band(m_lo) || in_band(m_hi);
    double c = in_band(m_lo) ? c_lo : c_hi;
    if (!accepted) {
        for (int it = 0; it < calib.max_bisection_steps; ++it) {
            double c_mid = 0.5 * (c_lo + c_hi);
            double m = mass_at_position(with_bias_scale(params, c_mid), img.pixels, traj, calib.position);
            if (in_band(m)) {
                accepted = true;
                c = c_mid;
                break;
            }
            if (m < mid_target) c_lo = c_mid; else c_hi = c_mid;
        }
    }
    if (!accepted) {
        throw CalibrationError("refusal-mass bisection did not converge (seed " + std::to_string(seed) + ")");
    }
    params = with_bias_scale(params, c);
    if (!topk_condition(params, img.pixels, traj, calib)) {
        throw CalibrationError("top-k non-refusal condition failed after calibration (seed " +
                               std::to_string(seed) + ")");
    }
    return params;
}

ToyVlm::ToyVlm(ToyVlmParams params) : params_(std::move(params)) { params_.validate(); }

std::vector<double> ToyVlm::next_logits(std::span<const double> image,
                                        std::span<const TokenId> prompt,
                                        std::span<const TokenId> generated) const {
    return toy_step_logits(params_, image, prompt, generated);
}

std::vector<StepDistribution> ToyVlm::forward(std::span<const double> image,
                                              const Trajectory& traj) const {
    return toy_forward(params_, image, traj);
}

LossGrad ToyVlm::loss_grad(std::span<const double> image,
                           const Trajectory& traj,
                           const ObjectiveSpec& objective) const {
    return toy_loss_grad(params_, image, traj, objective);
}

namespace {

constexpr char kMagic[5] = {'E', 'T', 'F', 'V', '1'};

void put_bytes(std::ostream& os, const void* data, size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    put_bytes(os, b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(os, b, 8);
}

void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<uint64_t>(d)); }

void put_f64_block(std::ostream& os, std::span<const double> v) {
    for (double d : v) put_f64(os, d);
}

void put_id_list(std::ostream& os, const std::vector<TokenId>& ids) {
    put_u32(os, static_cast<uint32_t>(ids.size()));
    for (TokenId id : ids) put_u32(os, static_cast<uint32_t>(id));
}

void get_bytes(std::istream& is, void* data, size_t n) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) {
        throw std::runtime_error("truncated toy model container");
    }
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    get_bytes(is, b, 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    get_bytes(is, b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

void get_f64_block(std::istream& is, std::span<double> v) {
    for (double& d : v) d = get_f64(is);
}

std::vector<TokenId> get_id_list(std::istream& is) {
    uint32_t n = get_u32(is);
    std::vector<TokenId> ids(n);
    for (auto& id : ids) id = static_cast<TokenId>(get_u32(is));
    return ids;
}

void check_magic(std::istream& is) {
    char m[5];
    get_bytes(is, m, 5);
    if (std::memcmp(m, kMagic, 5) != 0) throw std::runtime_error("bad container magic");
}

} // namespace

void save_toy_params(const ToyVlmParams& params, std::ostream& os) {
    params.validate();
    put_bytes(os, kMagic, 5);
    put_u32(os, static_cast<uint32_t>(params.vocab.size));
    put_u32(os, static_cast<uint32_t>(params.d_h));
    put_u32(os, static_cast<uint32_t>(params.d_img));
    put_u32(os, static_cast<uint32_t>(params.t_max));
    put_u64(os, params.seed);
    put_f64_block(os, params.E.a);
    put_f64_block(os, params.P.a);
    put_f64_block(os, params.W_h.a);
    put_f64_block(os, params.W_x.a);
    put_f64_block(os, params.W_o.a);
    put_f64_block(os, params.b_o);
    put_f64_block(os, params.gate_w);
    put_f64(os, params.gate_b);
    put_f64_block(os, params.refusal_bias);
    put_id_list(os, params.vocab.refusal_ids);
    put_id_list(os, params.vocab.noncontent_ids);
    if (!os) throw std::runtime_error("write failure while saving toy model");
}

ToyVlmParams load_toy_params(std::istream& is) {
    check_magic(is);
    ToyVlmParams p;
    const int V = static_cast<int>(get_u32(is));
    p.d_h = static_cast<int>(get_u32(is));
    p.d_img = static_cast<int>(get_u32(is));
    p.t_max = static_cast<int>(get_u32(is));
    if (V < 1 || V > 1'000'000 || p.d_h < 1 || p.d_h > 1'000'000 || p.d_img < 1 ||
        p.d_img > 10'000'000 || p.t_max < 1 || p.t_max > 1'000'000) {
        throw std::runtime_error("implausible toy model header");
    }
    p.seed = get_u64(is);
    p.E = Matrix(V, p.d_h);
    get_f64_block(is, p.E.a);
    p.P = Matrix(p.t_max, p.d_h);
    get_f64_block(is, p.P.a);
    p.W_h = Matrix(p.d_h, p.d_h);
    get_f64_block(is, p.W_h.a);
    p.W_x = Matrix(p.d_h, p.d_img);
    get_f64_block(is, p.W_x.a);
    p.W_o = Matrix(V, p.d_h);
    get_f64_block(is, p.W_o.a);
    p.b_o.resize(static_cast<size_t>(V));
    get_f64_block(is, p.b_o);
    p.gate_w.resize(static_cast<size_t>(p.d_img));
    get_f64_block(is, p.gate_w);
    p.gate_b = get_f64(is);
    p.refusal_bias.resize(static_cast<size_t>(V));
    get_f64_block(is, p.refusal_bias);

    Vocab v;
    v.size = V;
    v.refusal_ids = get_id_list(is);
    v.noncontent_ids = get_id_list(is);
    v.display.resize(static_cast<size_t>(V));
    for (TokenId id = 0; id < V; ++id) v.display[static_cast<size_t>(id)] = "tok" + std::to_string(id);
    for (size_t i = 0; i < v.refusal_ids.size(); ++i) {
        v.display[static_cast<size_t>(v.refusal_ids[i])] = "ref" + std::to_string(i);
    }
    for (size_t i = 0; i < v.noncontent_ids.size(); ++i) {
        v.display[static_cast<size_t>(v.noncontent_ids[i])] = "<s" + std::to_string(i) + ">";
    }
    p.vocab = std::move(v);
    p.validate();
    return p;
}

void save_toy_params(const ToyVlmParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    save_toy_params(params, os);
}

ToyVlmParams load_toy_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return load_toy_params(is);
}

void save_vector(std::span<const double> v, std::ostream& os) {
    put_bytes(os, kMagic, 5);
    put_u32(os, static_cast<uint32_t>(v.size()));
    put_f64_block(os, v);
    if (!os) throw std::runtime_error("write failure while saving vector");
}

std::vector<double> load_vector(std::istream& is) {
    check_magic(is);
    uint32_t n = get_u32(is);
    if (n > 100'000'000u) throw std::runtime_error("implausible vector length");
    std::vector<double> v(n);
    get_f64_block(is, v);
    return v;
}

void save_vector(std::span<const double> v, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    save_vector(v, os);
}

std::vector<double> load_vector(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return load_vector(is);
}

} // namespace ujem
