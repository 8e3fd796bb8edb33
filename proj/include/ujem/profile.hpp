#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ujem/types.hpp"

namespace ujem {

// Teacher-forced entropies H_1..H_T (nats) plus the content-position mask.
struct EntropyProfile {
    std::vector<double> entropies;
    std::vector<uint8_t> mask; // 1 = content position

    int length() const { return static_cast<int>(entropies.size()); }
};

// Partition of the content positions into the high-entropy decision set and
// the low-entropy structural set. Positions are 0-based and sorted.
struct DecisionSets {
    std::vector<int> decision;
    std::vector<int> structural;
    double rho = 0.0;
};

// Shannon entropy in nats, with 0*ln(0) = 0.
double shannon_entropy(std::span<const double> probs);
double shannon_entropy(const StepDistribution& dist);

// Content mask: position t is a candidate iff y_t is not a non-content token.
// Refusal tokens are ordinary content.
std::vector<uint8_t> candidate_mask(const Trajectory& traj, const Vocab& vocab);

// Selects the k = max(1, floor(rho*|C|)) highest-entropy candidate positions.
// Equal entropies break toward the earlier position.
DecisionSets select_decision_sets(const EntropyProfile& profile, double rho);

// Full teacher-forced profile along the fixed trajectory.
EntropyProfile profile(const Model& model, std::span<const double> image, const Trajectory& traj);

// Total probability on the refusal set, in [0,1].
double refusal_mass(std::span<const double> probs, const Vocab& vocab);
double refusal_mass(const StepDistribution& dist, const Vocab& vocab);

struct TopkEntry {
    TokenId token = 0;
    double clean_prob = 0.0;
    double adv_prob = 0.0;
};

// Per-position comparison of the clean and adversarial top-k candidates.
struct TopkShift {
    int position = 0; // 0-based
    std::vector<TopkEntry> entries; // union of both top-k sets, adv_prob descending
    TokenId clean_argmax = 0;
    TokenId adv_argmax = 0;
    bool argmax_flipped_from_refusal = false;
};

std::vector<TopkShift> topk_shift_report(const Model& model,
                                         std::span<const double> image_clean,
                                         std::span<const double> image_adv,
                                         const Trajectory& traj,
                                         std::span<const int> positions,
                                         int k);

} // namespace ujem
