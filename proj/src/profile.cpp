#include "ujem/profile.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ujem {

double shannon_entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double shannon_entropy(const StepDistribution& dist) {
    return shannon_entropy(std::span<const double>(dist.probs));
}

std::vector<uint8_t> candidate_mask(const Trajectory& traj, const Vocab& vocab) {
    std::vector<uint8_t> mask(traj.response.size());
    for (size_t t = 0; t < traj.response.size(); ++t)
        mask[t] = vocab.is_noncontent(traj.response[t]) ? 0 : 1;
    return mask;
}

DecisionSets select_decision_sets(const EntropyProfile& profile, double rho) {
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("select_decision_sets: rho outside (0,1]");
    if (profile.mask.size() != profile.entropies.size())
        throw std::invalid_argument("select_decision_sets: mask/entropy length mismatch");

    std::vector<int> candidates;
    for (int t = 0; t < profile.length(); ++t)
        if (profile.mask[static_cast<size_t>(t)]) candidates.push_back(t);
    if (candidates.empty()) throw std::invalid_argument("select_decision_sets: empty candidate set");

    const int k = std::max(1, static_cast<int>(std::floor(rho * static_cast<double>(candidates.size()))));

    // Rank by entropy descending; equal entropies prefer the earlier position.
    std::vector<int> order = candidates;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double ha = profile.entropies[static_cast<size_t>(a)];
        double hb = profile.entropies[static_cast<size_t>(b)];
        if (ha != hb) return ha > hb;
        return a < b;
    });

    DecisionSets sets;
    sets.rho = rho;
    sets.decision.assign(order.begin(), order.begin() + k);
    sets.structural.assign(order.begin() + k, order.end());
    std::sort(sets.decision.begin(), sets.decision.end());
    std::sort(sets.structural.begin(), sets.structural.end());
    return sets;
}

EntropyProfile profile(const Model& model, std::span<const double> image, const Trajectory& traj) {
    std::vector<StepDistribution> dists = model.forward(image, traj);
    EntropyProfile p;
    p.entropies.reserve(dists.size());
    for (const StepDistribution& d : dists) p.entropies.push_back(shannon_entropy(d));
    p.mask = candidate_mask(traj, model.vocab());
    return p;
}

double refusal_mass(std::span<const double> probs, const Vocab& vocab) {
    double m = 0.0;
    for (TokenId id : vocab.refusal_ids) {
        if (id >= 0 && static_cast<size_t>(id) < probs.size()) m += probs[static_cast<size_t>(id)];
    }
    return m;
}

double refusal_mass(const StepDistribution& dist, const Vocab& vocab) {
    return refusal_mass(std::span<const double>(dist.probs), vocab);
}

namespace {

// Argmax with smallest-id tie-break.
TokenId argmax_token(std::span<const double> probs) {
    TokenId best = 0;
    for (size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[static_cast<size_t>(best)]) best = static_cast<TokenId>(i);
    return best;
}

// Top-k token ids by probability, ties toward the smaller id.
std::vector<TokenId> topk_ids(std::span<const double> probs, int k) {
    std::vector<TokenId> ids(probs.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
        double pa = probs[static_cast<size_t>(a)];
        double pb = probs[static_cast<size_t>(b)];
        if (pa != pb) return pa > pb;
        return a < b;
    });
    ids.resize(std::min<size_t>(ids.size(), static_cast<size_t>(k)));
    return ids;
}

} // namespace

std::vector<TopkShift> topk_shift_report(const Model& model,
                                         std::span<const double> image_clean,
                                         std::span<const double> image_adv,
                                         const Trajectory& traj,
                                         std::span<const int> positions,
                                         int k) {
    if (k < 1) throw std::invalid_argument("topk_shift_report: k must be >= 1");
    const std::vector<StepDistribution> clean = model.forward(image_clean, traj);
    const std::vector<StepDistribution> adv = model.forward(image_adv, traj);
    const Vocab& vocab = model.vocab();

    std::vector<TopkShift> report;
    report.reserve(positions.size());
    for (int pos : positions) {
        if (pos < 0 || static_cast<size_t>(pos) >= clean.size())
            throw std::invalid_argument("topk_shift_report: position out of range");
        const auto& pc = clean[static_cast<size_t>(pos)].probs;
        const auto& pa = adv[static_cast<size_t>(pos)].probs;

        std::vector<TokenId> union_ids = topk_ids(pc, k);
        for (TokenId id : topk_ids(pa, k))
            if (std::find(union_ids.begin(), union_ids.end(), id) == union_ids.end())
                union_ids.push_back(id);

        TopkShift shift;
        shift.position = pos;
        for (TokenId id : union_ids)
            shift.entries.push_back({id, pc[static_cast<size_t>(id)], pa[static_cast<size_t>(id)]});
        std::sort(shift.entries.begin(), shift.entries.end(), [](const TopkEntry& a, const TopkEntry& b) {
            if (a.adv_prob != b.adv_prob) return a.adv_prob > b.adv_prob;
            return a.token < b.token;
        });
        shift.clean_argmax = argmax_token(pc);
        shift.adv_argmax = argmax_token(pa);
        shift.argmax_flipped_from_refusal =
            vocab.is_refusal(shift.clean_argmax) && !vocab.is_refusal(shift.adv_argmax);
        report.push_back(std::move(shift));
    }
    return report;
}

} // namespace ujem
