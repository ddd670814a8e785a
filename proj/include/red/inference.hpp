#ifndef RED_INFERENCE_HPP
#define RED_INFERENCE_HPP

#include "red/ablation.hpp"
#include "red/model.hpp"

#include <vector>

namespace red {

struct VoteResult {
    int predicted = 0;
    std::vector<int> histogram;     // votes per class, sums to the number of ablations
    int margin = 0;                 // top votes - runner-up votes
    std::vector<int> per_ablation;  // prediction of each ablated image, in ablation order
};

/// Mode of `predictions`; ties go to the lowest class id.
inline VoteResult tally(const std::vector<int>& predictions, int classes)
{
    if (predictions.empty()) {
        throw ValidationError("majority vote needs at least one ablation");
    }
    VoteResult r;
    r.per_ablation = predictions;
    r.histogram.assign(classes, 0);
    for (int p : predictions) {
        if (p < 0 || p >= classes) {
            throw ValidationError("prediction outside class range");
        }
        ++r.histogram[p];
    }
    int best = 0;
    for (int k = 1; k < classes; ++k) {
        if (r.histogram[k] > r.histogram[best]) {
            best = k;
        }
    }
    int runner = 0;
    for (int k = 0; k < classes; ++k) {
        if (k != best) {
            runner = std::max(runner, r.histogram[k]);
        }
    }
    r.predicted = best;
    r.margin = r.histogram[best] - runner;
    return r;
}

inline VoteResult vote_predict(const Classifier& f, const Image& x, const std::vector<Mask>& keep_masks)
{
    std::vector<int> preds;
    preds.reserve(keep_masks.size());
    Workspace ws;
    for (const auto& m : keep_masks) {
        preds.push_back(argmax(f.forward(apply_mask(x, m), ws)));
    }
    return tally(preds, f.classes());
}

inline VoteResult vote_predict(const Classifier& f, const Image& x, const AblationSpec& spec)
{
    return vote_predict(f, x, ablation_family(spec, x.height, x.width));
}

/// Prediction on one uniformly placed a x a ablation.
inline int single_predict(const Classifier& f, const Image& x, int a, Rng& rng)
{
    return f.predict(random_ablation(x, a, rng).image);
}

/// True iff no single contiguous b x b patch can change the tile vote: margin > 2k,
/// k = the most tiles such a patch can touch.
inline bool certified_margin(const VoteResult& vote, const AblationSpec& spec, int b)
{
    if (spec.kind != AblationKind::tile) {
        throw ValidationError("certificate requires tile ablation");
    }
    return vote.margin > 2 * max_tiles_intersected(spec.size, b);
}

/// Fraction of examples whose majority vote over `keep_masks` equals the label.
template <typename Examples>
double vote_accuracy(const Classifier& f, const Examples& examples, const std::vector<Mask>& keep_masks)
{
    if (examples.empty()) {
        return 0.0;
    }
    std::size_t hit = 0;
    for (const auto& ex : examples) {
        hit += vote_predict(f, ex.image, keep_masks).predicted == ex.label ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(examples.size());
}

} // namespace red

#endif // RED_INFERENCE_HPP
