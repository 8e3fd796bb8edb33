#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ujem {

using TokenId = int32_t;

// Token vocabulary with a designated refusal set and a set of non-content
// tokens (boundary markers, punctuation) that never count as content
// positions.
struct Vocab {
    int size = 0;
    std::vector<TokenId> refusal_ids;    // sorted, disjoint from noncontent_ids
    std::vector<TokenId> noncontent_ids; // sorted
    std::vector<std::string> display;    // size entries when non-empty

    bool is_refusal(TokenId id) const;
    bool is_noncontent(TokenId id) const;
    const std::string& name(TokenId id) const;

    // Throws std::invalid_argument on violated invariants.
    void validate() const;
};

// Flat image vector; pixels are dimensionless intensities in [0,1].
struct ImageInput {
    std::vector<double> pixels;

    int dim() const { return static_cast<int>(pixels.size()); }
    void validate() const; // every pixel in [0,1]
};

// Fixed teacher-forcing trajectory: a pre-tokenized prompt plus the response
// y_1..y_T decoded on the clean input.
struct Trajectory {
    std::vector<TokenId> prompt;
    std::vector<TokenId> response;

    int length() const { return static_cast<int>(response.size()); } // T
    void validate(const Vocab& vocab) const;
    std::string to_string() const; // diagnostic form "prompt=[..] response=[..]"
};

// Per-position token distribution: raw logits and softmax probabilities.
struct StepDistribution {
    std::vector<double> logits;
    std::vector<double> probs;
};

// Max-subtracted softmax over logits, natural exponent.
std::vector<double> softmax(std::span<const double> logits);

StepDistribution make_step_distribution(std::vector<double> logits);

// Abstract autoregressive model contract. Teacher-forced logits at step t
// depend only on (image, prompt, y_<t); implementations hold no mutable state
// and are safe to share across threads.
class Model {
  public:
    virtual ~Model() = default;

    virtual const Vocab& vocab() const = 0;
    virtual int image_dim() const = 0;
    virtual int max_response_len() const = 0;
    virtual bool supports_analytic_grad() const = 0;

    // Logits for the next response token given the generated tokens so far.
    virtual std::vector<double> next_logits(std::span<const double> image,
                                            std::span<const TokenId> prompt,
                                            std::span<const TokenId> generated) const = 0;

    // Teacher-forced distributions at every step of the trajectory.
    virtual std::vector<StepDistribution> forward(std::span<const double> image,
                                                  const Trajectory& traj) const = 0;
};

} // namespace ujem
