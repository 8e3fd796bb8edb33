#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ujem/objectives.hpp"
#include "ujem/types.hpp"

namespace ujem {

// Dense row-major matrix, just large enough for the toy model sizes.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

    double& at(int r, int c) { return a[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
    const double& at(int r, int c) const { return a[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
    std::span<const double> row(int r) const { return {a.data() + static_cast<size_t>(r) * static_cast<size_t>(cols), static_cast<size_t>(cols)}; }
};

// Parameters of the toy vision-language model. The forward map is
//   h_t = tanh(W_h * prefixmean(y_<t) + W_x * image + P_t)
//   z_t = W_o * h_t + b_o + sigmoid(gate_w . image + gate_b) * refusal_bias
// where prefixmean is the mean embedding of prompt plus decoded prefix
// (zero vector when empty) and refusal_bias is the gate-coupled logit bias
// (refusal ids plus the affirmative marker in the seeded family).
struct ToyVlmParams {
    uint64_t seed = 0;
    int d_h = 0;
    int d_img = 0;
    int t_max = 0;
    Vocab vocab;
    Matrix E;   // |V| x d_h token embeddings
    Matrix P;   // t_max x d_h positional rows
    Matrix W_h; // d_h x d_h
    Matrix W_x; // d_h x d_img
    Matrix W_o; // |V| x d_h
    std::vector<double> b_o;          // |V|
    std::vector<double> gate_w;       // d_img
    double gate_b = 0.0;
    std::vector<double> refusal_bias; // |V| gate-coupled logit bias

    void validate() const;
};

// Shape of the seeded toy family: dimensions plus the scale knobs that place
// members in the image-gated refusal regime. Members share the gate sign
// pattern up to per-member flips, which is what gives distinct seeds a common
// vulnerable direction to transfer along.
struct ToyFamilyConfig {
    int vocab_size = 16;
    int refusal_count = 2;
    int noncontent_count = 2;
    int d_h = 16;
    int d_img = 48;
    int t_max = 24;
    uint64_t family_seed = 0xf00dULL;
    int refusal_window = 2;        // early positions with damped positional signal
    double gain_embed = 0.6;
    double gain_pos = 1.2;
    double pos_early_scale = 0.25;
    double gain_hidden = 0.4;
    double gain_image = 5.0;
    double gain_output = 4.0;
    double gain_out_bias = 0.5;
    double refusal_logit_penalty = 4.0;   // subtracted from b_o on refusal ids
    double noncontent_logit_penalty = 3.0; // subtracted from b_o on noncontent ids
    double refusal_row_gain = 6.0;  // anti-alignment of refusal output rows with the
                                    // dominant hidden sign pattern
    double refusal_row_mix = 0.1;   // residual random component kept in refusal rows
    double affirmative_boost = 1.0;   // b_o bump on the affirmative marker token
    double affirmative_row_gain = 3.0; // alignment of the marker's output row with the
                                       // dominant hidden sign pattern
    double affirmative_row_mix = 0.3;  // residual random component kept in the marker row
    double affirmative_gate_ratio = 0.35; // gate-coupled bias on the marker token,
                                          // as a fraction of the mean refusal bias
    double window_compensation = 0.9; // fraction of the baseline pre-activation removed
                                       // from window rows of P
    double gate_swing = 6.0;              // max |delta(gate_w . x)| over the eps_ref ball
    double gate_bias_shift = 1.0;       // clean-image gate pre-activation margin
    double gate_flip_prob = 0.15;       // per-member sign flips of the shared gate pattern
    double epsilon_ref = 8.0 / 255.0;
    double image_jitter = 0.02;         // instance images: 0.5 + jitter*(u-0.5)

    void validate() const;
    TokenId affirmative_id() const { return static_cast<TokenId>(noncontent_count + refusal_count); }
    std::vector<TokenId> default_prompt() const;
};

// Targets for make_refusal_toy: clean refusal mass band at the designated
// decision position and the minimum non-refusal presence in the top-k there.
struct CalibrationSpec {
    double band_lo = 0.4;
    double band_hi = 0.6;
    int min_nonrefusal_topk = 3;
    int topk = 10;
    int position = 0; // 0-based t*
    int max_bisection_steps = 200;
    std::vector<TokenId> prompt; // empty = family default prompt
};

class CalibrationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Raw seeded member of the family; deterministic in (seed, family).
ToyVlmParams seeded_toy_params(uint64_t seed, const ToyFamilyConfig& family);

// Seeded instance image: mid-gray plus uniform jitter.
ImageInput family_image(uint64_t image_seed, const ToyFamilyConfig& family);

// The clean image a model is calibrated against.
ImageInput calibration_image(uint64_t model_seed, const ToyFamilyConfig& family);

// Seeded params rescaled (refusal bias magnitude, gate norm) by bisection so
// the clean refusal mass at t* lands in the band and the top-k condition
// holds. Throws CalibrationError when the seed cannot realize the band.
ToyVlmParams make_refusal_toy(uint64_t seed, const ToyFamilyConfig& family, const CalibrationSpec& calib);

// Teacher-forced distributions along the trajectory.
std::vector<StepDistribution> toy_forward(const ToyVlmParams& params,
                                          std::span<const double> image,
                                          const Trajectory& traj);

// Next-token logits after `generated`, for autoregressive decoding.
std::vector<double> toy_step_logits(const ToyVlmParams& params,
                                    std::span<const double> image,
                                    std::span<const TokenId> prompt,
                                    std::span<const TokenId> generated);

struct LossGrad {
    double value = 0.0;
    std::vector<double> grad; // d/d(image), length d_img
};

// Objective value plus its exact analytic gradient w.r.t. the image pixels.
// Model parameters, the trajectory and clean references are constants.
LossGrad toy_loss_grad(const ToyVlmParams& params,
                       std::span<const double> image,
                       const Trajectory& traj,
                       const ObjectiveSpec& objective);

double evaluate_objective(const ToyVlmParams& params,
                          std::span<const double> image,
                          const Trajectory& traj,
                          const ObjectiveSpec& objective);

// Central finite differences of an arbitrary scalar function of the image,
// evaluated without clipping to [0,1].
std::vector<double> fd_grad_fn(const std::function<double(std::span<const double>)>& f,
                               std::span<const double> image,
                               double h);

std::vector<double> fd_grad(const ToyVlmParams& params,
                            std::span<const double> image,
                            const Trajectory& traj,
                            const ObjectiveSpec& objective,
                            double h);

// Model with an analytic image-gradient path.
class DifferentiableModel : public Model {
  public:
    virtual LossGrad loss_grad(std::span<const double> image,
                               const Trajectory& traj,
                               const ObjectiveSpec& objective) const = 0;
};

class ToyVlm final : public DifferentiableModel {
  public:
    explicit ToyVlm(ToyVlmParams params);

    const ToyVlmParams& params() const { return params_; }

    const Vocab& vocab() const override { return params_.vocab; }
    int image_dim() const override { return params_.d_img; }
    int max_response_len() const override { return params_.t_max; }
    bool supports_analytic_grad() const override { return true; }

    std::vector<double> next_logits(std::span<const double> image,
                                    std::span<const TokenId> prompt,
                                    std::span<const TokenId> generated) const override;
    std::vector<StepDistribution> forward(std::span<const double> image,
                                          const Trajectory& traj) const override;
    LossGrad loss_grad(std::span<const double> image,
                       const Trajectory& traj,
                       const ObjectiveSpec& objective) const override;

  private:
    ToyVlmParams params_;
};

// Binary container ("ETFV1", little-endian, 64-bit floats). The display map
// is presentation-only and not serialized; loading regenerates generic names.
void save_toy_params(const ToyVlmParams& params, std::ostream& os);
void save_toy_params(const ToyVlmParams& params, const std::string& path);
ToyVlmParams load_toy_params(std::istream& is);
ToyVlmParams load_toy_params(const std::string& path);

// Same container conventions for flat vectors (perturbations, images).
void save_vector(std::span<const double> v, std::ostream& os);
void save_vector(std::span<const double> v, const std::string& path);
std::vector<double> load_vector(std::istream& is);
std::vector<double> load_vector(const std::string& path);

} // namespace ujem
