#include "ujem/types.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ujem {

bool Vocab::is_refusal(TokenId id) const {
    return std::binary_search(refusal_ids.begin(), refusal_ids.end(), id);
}

bool Vocab::is_noncontent(TokenId id) const {
    return std::binary_search(noncontent_ids.begin(), noncontent_ids.end(), id);
}

const std::string& Vocab::name(TokenId id) const {
    static const std::string unknown = "?";
    if (id < 0 || id >= static_cast<TokenId>(display.size())) return unknown;
    return display[static_cast<size_t>(id)];
}

void Vocab::validate() const {
    if (size < 4) throw std::invalid_argument("vocab: size must be >= 4");
    auto in_range = [this](TokenId id) { return id >= 0 && id < size; };
    for (TokenId id : refusal_ids)
        if (!in_range(id)) throw std::invalid_argument("vocab: refusal id out of range");
    for (TokenId id : noncontent_ids)
        if (!in_range(id)) throw std::invalid_argument("vocab: noncontent id out of range");
    if (!std::is_sorted(refusal_ids.begin(), refusal_ids.end()) ||
        !std::is_sorted(noncontent_ids.begin(), noncontent_ids.end()))
        throw std::invalid_argument("vocab: id lists must be sorted");
    for (TokenId id : refusal_ids)
        if (std::binary_search(noncontent_ids.begin(), noncontent_ids.end(), id))
            throw std::invalid_argument("vocab: refusal and noncontent sets overlap");
    if (refusal_ids.empty()) throw std::invalid_argument("vocab: refusal set must be nonempty");
    if (size - static_cast<int>(refusal_ids.size()) < 2)
        throw std::invalid_argument("vocab: need at least 2 non-refusal tokens");
    if (!display.empty() && static_cast<int>(display.size()) != size)
        throw std::invalid_argument("vocab: display size mismatch");
}

void ImageInput::validate() const {
    for (double p : pixels)
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument("image: pixel outside [0,1]");
}

void Trajectory::validate(const Vocab& vocab) const {
    if (response.empty()) throw std::invalid_argument("trajectory: T must be >= 1");
    auto check = [&](TokenId id) {
        if (id < 0 || id >= vocab.size)
            throw std::invalid_argument("trajectory: token id out of vocab range");
    };
    for (TokenId id : prompt) check(id);
    for (TokenId id : response) check(id);
}

std::string Trajectory::to_string() const {
    std::ostringstream os;
    os << "prompt=[";
    for (size_t i = 0; i < prompt.size(); ++i) os << (i ? "," : "") << prompt[i];
    os << "] response=[";
    for (size_t i = 0; i < response.size(); ++i) os << (i ? "," : "") << response[i];
    os << "]";
    return os.str();
}

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
    double zmax = logits[0];
    for (double z : logits) zmax = std::max(zmax, z);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - zmax);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

StepDistribution make_step_distribution(std::vector<double> logits) {
    StepDistribution d;
    d.probs = softmax(logits);
    d.logits = std::move(logits);
    return d;
}

} // namespace ujem
