#ifndef RED_ATTACKS_HPP
#define RED_ATTACKS_HPP

// Patch attacks: mask construction, sign-gradient PGD inside a mask, anchor search,
// the sticker layout, and the multi-patch attack against tile-vote inference.

#include "red/ablation.hpp"
#include "red/inference.hpp"
#include "red/model.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace red {

enum class AttackShape { rectangle, triangle, circle, sticker, multi };

inline const char* to_string(AttackShape s) noexcept
{
    switch (s) {
    case AttackShape::rectangle: return "rectangle";
    case AttackShape::triangle: return "triangle";
    case AttackShape::circle: return "circle";
    case AttackShape::sticker: return "sticker";
    case AttackShape::multi: return "multi";
    }
    return "?";
}

inline AttackShape parse_shape(const std::string& s)
{
    for (auto k : {AttackShape::rectangle, AttackShape::triangle, AttackShape::circle, AttackShape::sticker,
                   AttackShape::multi}) {
        if (s == to_string(k)) {
            return k;
        }
    }
    throw ParseError("unknown attack shape '" + s + "'");
}

struct AttackSpec {
    AttackShape shape = AttackShape::rectangle;
    double budget = 0.1; // fraction of the whole image area
    double eps = 1.0;
    int iterations = 100;
    double step = 0.01;
    int sub_patch = 6;         // multi only
    int stride = 0;            // anchor grid; 0 = half the defense tile, or 4 px without one
    int screen_iterations = 0; // >0: short PGD at every anchor, full PGD only at the best
    int restarts = 1;
    bool stop_on_success = true;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (shape != AttackShape::sticker && !(budget > 0.0 && budget < 1.0)) {
            throw ValidationError("attack budget must lie in (0, 1)");
        }
        if (!(eps >= 0.0 && eps <= 1.0)) {
            throw ValidationError("attack eps must lie in [0, 1]");
        }
        if (iterations < 1 || restarts < 1 || sub_patch < 1 || stride < 0 || screen_iterations < 0) {
            throw ValidationError("attack counts must be positive");
        }
        if (!(step > 0.0)) {
            throw ValidationError("attack step must be positive");
        }
    }
};

/// B = floor(w * H * W); the epsilon absorbs representation error in w (0.3 * 900 = 269.999...).
inline int budget_pixels(double w, int height, int width)
{
    return static_cast<int>(std::floor(w * height * width + 1e-9));
}

struct Anchor {
    int top = 0;
    int left = 0;
    bool operator==(const Anchor&) const = default;
};

/// Rectangle with the largest area <= B and aspect ratio at most 2 (rows <= cols).
inline std::pair<int, int> rectangle_dims(int budget)
{
    if (budget < 1) {
        throw ValidationError("patch budget must be >= 1 pixel");
    }
    int best_h = 1, best_w = std::min(budget, 2);
    int best_area = best_h * best_w;
    for (int h = static_cast<int>(std::sqrt(static_cast<double>(budget))); h >= 1; --h) {
        const int w = std::min(budget / h, 2 * h);
        if (w < h) {
            continue;
        }
        if (h * w > best_area) {
            best_area = h * w;
            best_h = h;
            best_w = w;
        }
    }
    return {best_h, best_w};
}

/// Leg length of the largest half-square right triangle with L(L+1)/2 <= B.
inline int triangle_leg(int budget)
{
    int l = 0;
    while ((l + 1) * (l + 2) / 2 <= budget) {
        ++l;
    }
    return l;
}

inline int disc_area(int r)
{
    int n = 0;
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            n += dy * dy + dx * dx <= r * r ? 1 : 0;
        }
    }
    return n;
}

inline int circle_radius(int budget)
{
    int r = 0;
    while (disc_area(r + 1) <= budget) {
        ++r;
    }
    return r;
}

/// Bounding box (rows, cols) of the shape a budget produces.
inline std::pair<int, int> shape_extent(AttackShape shape, int budget)
{
    switch (shape) {
    case AttackShape::rectangle: return rectangle_dims(budget);
    case AttackShape::triangle: {
        const int l = triangle_leg(budget);
        return {l, l};
    }
    case AttackShape::circle: {
        const int r = circle_radius(budget);
        return {2 * r + 1, 2 * r + 1};
    }
    default: throw ValidationError(std::string("shape '") + to_string(shape) + "' has no single-mask extent");
    }
}

/// Contiguous mask of `shape` with area <= B, bounding box anchored at its top-left corner.
inline Mask make_mask(AttackShape shape, int budget, Anchor anchor, int side)
{
    if (budget < 1) {
        throw ValidationError("patch budget must be >= 1 pixel");
    }
    if (anchor.top < 0 || anchor.left < 0 || anchor.top >= side || anchor.left >= side) {
        throw ValidationError("anchor outside image");
    }
    const auto [bh, bw] = shape_extent(shape, budget);
    if (bh < 1 || bw < 1) {
        throw ValidationError(std::string(to_string(shape)) + " budget too small to rasterize");
    }
    if (anchor.top + bh > side || anchor.left + bw > side) {
        throw ValidationError(std::string(to_string(shape)) + " of extent " + std::to_string(bh) + "x"
                              + std::to_string(bw) + " does not fit at (" + std::to_string(anchor.top) + ","
                              + std::to_string(anchor.left) + ")");
    }
    Mask m(side, side);
    switch (shape) {
    case AttackShape::rectangle:
        for (int y = 0; y < bh; ++y) {
            for (int x = 0; x < bw; ++x) {
                m.set(anchor.top + y, anchor.left + x);
            }
        }
        break;
    case AttackShape::triangle:
        // scanline fill: row r keeps L - r pixels
        for (int y = 0; y < bh; ++y) {
            for (int x = 0; x < bw - y; ++x) {
                m.set(anchor.top + y, anchor.left + x);
            }
        }
        break;
    case AttackShape::circle: {
        const int r = bh / 2;
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                if (dy * dy + dx * dx <= r * r) {
                    m.set(anchor.top + r + dy, anchor.left + r + dx);
                }
            }
        }
        break;
    }
    default: break;
    }
    return m;
}

/// Two horizontal bars centred at 1/3 and 2/3 of the height, 15% x 60% of the side each.
inline std::vector<Mask> sticker_masks(int side)
{
    if (side < 20) {
        throw ValidationError("sticker layout needs side >= 20");
    }
    const int h = std::max(1, static_cast<int>(0.15 * side));
    const int w = std::max(1, static_cast<int>(0.6 * side));
    const int left = (side - w) / 2;
    std::vector<Mask> out;
    for (int k = 1; k <= 2; ++k) {
        const int centre = k * side / 3;
        const int top = centre - h / 2;
        Mask m(side, side);
        for (int y = top; y < top + h; ++y) {
            for (int x = left; x < left + w; ++x) {
                m.set(y, x);
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

/// The defense an attacker optimizes against: vote over `keep_masks` (a single full mask = plain classifier).
struct Defense {
    std::string name;
    std::vector<Mask> keep_masks;
    std::optional<AblationSpec> spec; // the ablation family, when there is one

    static Defense plain(int side)
    {
        return {"none", {Mask(side, side, true)}, std::nullopt};
    }

    static Defense ablated(std::string name, const AblationSpec& s, int side)
    {
        return {std::move(name), ablation_family(s, side, side), s};
    }

    [[nodiscard]] VoteResult predict(const Classifier& f, const Image& x) const { return vote_predict(f, x, keep_masks); }

    [[nodiscard]] int tile_size() const { return spec && spec->kind == AblationKind::tile ? spec->size : 0; }
};

struct AdvExample {
    Image image;
    Mask mask;
    Image delta;
    bool success = false;
    double objective = -std::numeric_limits<double>::infinity();
    int predicted = -1;
    Anchor anchor;
    int steps = 0;
};

/// Called after every projected step with (X', delta, step index).
using PgdObserver = std::function<void(const Image&, const Image&, int)>;

namespace detail {

// Evaluates the attacker objective at X' and its gradient w.r.t. X' (restricted to `mask`).
class PatchObjective {
public:
    PatchObjective(const Classifier& f, const Image& x, int y, const Mask& mask, const Defense* defense, int target)
        : f_(f), y_(y), target_(target), mask_(mask)
    {
        if (defense) {
            for (const auto& k : defense->keep_masks) {
                if (k.intersects(mask)) {
                    active_.push_back(&k);
                } else {
                    fixed_.push_back(argmax(f.forward(apply_mask(x, k), ws_)));
                }
            }
        } else {
            full_ = Mask(x.height, x.width, true);
            active_.push_back(&full_);
        }
    }

    struct Eval {
        double objective;
        int predicted;
        bool success;
    };

    Eval operator()(const Image& xp, Image* grad)
    {
        if (grad) {
            grad->height = xp.height;
            grad->width = xp.width;
            grad->data.assign(xp.data.size(), 0.0);
        }
        std::vector<int> preds = fixed_;
        double obj = 0.0;
        const double w = active_.empty() ? 0.0 : 1.0 / static_cast<double>(active_.size());
        for (const Mask* k : active_) {
            const auto logits = f_.forward(apply_mask(xp, *k), ws_);
            preds.push_back(argmax(logits));
            // ascend CE(y) untargeted; descend CE(target) when targeted
            const int cls = target_ >= 0 ? target_ : y_;
            const double sgn = target_ >= 0 ? -1.0 : 1.0;
            obj += sgn * w * xent(logits, cls);
            if (grad) {
                auto g = xent_grad(logits, cls);
                for (auto& v : g) {
                    v *= sgn * w;
                }
                f_.backward(ws_, g, {}, &gin_);
                const std::size_t n = xp.plane();
                for (int c = 0; c < Image::channels; ++c) {
                    for (std::size_t i = 0; i < n; ++i) {
                        if (k->bits[i] && mask_.bits[i]) {
                            grad->data[c * n + i] += gin_.data[c * n + i];
                        }
                    }
                }
            }
        }
        const int pred = tally(preds, f_.classes()).predicted;
        const bool success = target_ >= 0 ? pred == target_ : pred != y_;
        return {obj, pred, success};
    }

private:
    const Classifier& f_;
    int y_;
    int target_;
    const Mask& mask_;
    Mask full_;
    std::vector<const Mask*> active_;
    std::vector<int> fixed_;
    Workspace ws_;
    Image gin_;
};

inline bool better(bool s1, double o1, bool s2, double o2) { return s1 != s2 ? s1 : o1 > o2; }

} // namespace detail

/// Sign-gradient PGD on delta inside `mask`:
///   X' = (1 - M) * X + M * clip(X + delta),  |delta| <= eps.
/// With `defense` the objective is the mean cross-entropy over ablations touching the mask and
/// success means the vote changes; otherwise the plain classifier is attacked.
/// `target` >= 0 turns the objective into -CE(target). Returns the best iterate.
inline AdvExample pgd_patch(const Classifier& f, const Image& x, int y, const Mask& mask, const AttackSpec& spec,
                            const Defense* defense = nullptr, const PgdObserver& observer = {}, int target = -1)
{
    spec.validate();
    detail::PatchObjective objective(f, x, y, mask, defense, target);
    const std::size_t n = x.plane();
    AdvExample best;
    best.mask = mask;
    Image grad;
    for (int restart = 0; restart < spec.restarts; ++restart) {
        Image delta(x.height, x.width, 0.0);
        Image xp = x;
        if (restart > 0 && spec.eps > 0.0) {
            Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(restart)));
            for (int c = 0; c < Image::channels; ++c) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (mask.bits[i]) {
                        const std::size_t j = c * n + i;
                        delta.data[j] = uniform(rng, -spec.eps, spec.eps);
                        xp.data[j] = std::clamp(x.data[j] + delta.data[j], 0.0, 1.0);
                    }
                }
            }
        }
        const int steps = spec.eps > 0.0 ? spec.iterations : 0;
        for (int t = 0;; ++t) {
            const bool last = t == steps;
            const auto ev = objective(xp, last ? nullptr : &grad);
            if (restart == 0 && t == 0 ? true : detail::better(ev.success, ev.objective, best.success, best.objective)) {
                best.image = xp;
                best.delta = delta;
                best.success = ev.success;
                best.objective = ev.objective;
                best.predicted = ev.predicted;
                best.steps = t;
            }
            if (last || (ev.success && spec.stop_on_success)) {
                break;
            }
            for (int c = 0; c < Image::channels; ++c) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (!mask.bits[i]) {
                        continue;
                    }
                    const std::size_t j = c * n + i;
                    const double g = grad.data[j];
                    double d = delta.data[j] + spec.step * static_cast<double>((g > 0.0) - (g < 0.0));
                    d = std::clamp(d, -spec.eps, spec.eps);
                    const double v = std::clamp(x.data[j] + d, 0.0, 1.0);
                    d = std::clamp(v - x.data[j], -spec.eps, spec.eps);
                    delta.data[j] = d;
                    xp.data[j] = std::clamp(x.data[j] + d, 0.0, 1.0);
                }
            }
            if (observer) {
                observer(xp, delta, t + 1);
            }
        }
        if (best.success && spec.stop_on_success) {
            break;
        }
    }
    return best;
}

/// Anchor grid for a bounding box of (bh, bw): 0, s, 2s, ... while the box fits.
inline std::vector<Anchor> anchor_grid(int side, int bh, int bw, int stride)
{
    std::vector<Anchor> out;
    for (int top = 0; top + bh <= side; top += stride) {
        for (int left = 0; left + bw <= side; left += stride) {
            out.push_back({top, left});
        }
    }
    return out;
}

inline int search_stride(const AttackSpec& spec, const Defense* defense)
{
    if (spec.stride > 0) {
        return spec.stride;
    }
    const int a = defense ? defense->tile_size() : 0;
    return a > 1 ? a / 2 : 4;
}

/// Runs pgd_patch at every anchor of the stride grid and keeps the best (success, objective).
inline AdvExample attack_location_search(const Classifier& f, const Image& x, int y, const AttackSpec& spec,
                                         const Defense* defense = nullptr)
{
    spec.validate();
    const int side = x.height;
    const int budget = budget_pixels(spec.budget, side, side);
    const auto [bh, bw] = shape_extent(spec.shape, budget);
    const auto anchors = anchor_grid(side, bh, bw, search_stride(spec, defense));
    if (anchors.empty()) {
        throw ValidationError("patch does not fit in the image");
    }
    AttackSpec pass = spec;
    const bool screening = spec.screen_iterations > 0 && spec.screen_iterations < spec.iterations;
    if (screening) {
        pass.iterations = spec.screen_iterations;
    }
    AdvExample best;
    bool have = false;
    for (const auto& a : anchors) {
        auto r = pgd_patch(f, x, y, make_mask(spec.shape, budget, a, side), pass, defense);
        r.anchor = a;
        if (!have || detail::better(r.success, r.objective, best.success, best.objective)) {
            best = std::move(r);
            have = true;
        }
        if (best.success && spec.stop_on_success) {
            return best;
        }
    }
    if (screening) {
        auto r = pgd_patch(f, x, y, best.mask, spec, defense);
        r.anchor = best.anchor;
        if (detail::better(r.success, r.objective, best.success, best.objective)) {
            best = std::move(r);
        }
    }
    return best;
}

/// Greedy multi-patch attack on tile-vote inference: m x m sub-patches, one per correctly voting
/// tile (least confident first), each PGD-optimized toward the vote's runner-up class, until the
/// vote flips or the budget runs out.
inline AdvExample multi_patch_attack(const Classifier& f, const Image& x, int y, double w, int m,
                                     const AblationSpec& g, const AttackSpec& spec)
{
    if (g.kind != AblationKind::tile) {
        throw ValidationError("multi-patch attack targets tile ablation");
    }
    const int side = x.height;
    const int budget = budget_pixels(w, side, side);
    if (m * m > budget) {
        throw ValidationError("sub-patch exceeds budget");
    }
    if (m > g.size) {
        throw ValidationError("sub-patch larger than a defense tile");
    }
    const auto tiles = tile_keep_masks(side, side, g.size);
    const int per_row = side / g.size;
    const int rounds = budget / (m * m);

    AdvExample out;
    out.image = x;
    out.mask = Mask(side, side);
    Workspace ws;

    std::vector<std::vector<double>> logits(tiles.size());
    std::vector<int> preds(tiles.size());
    auto refresh = [&](std::size_t j) {
        const auto l = f.forward(apply_mask(out.image, tiles[j]), ws);
        logits[j].assign(l.begin(), l.end());
        preds[j] = argmax(l);
    };
    for (std::size_t j = 0; j < tiles.size(); ++j) {
        refresh(j);
    }
    std::vector<std::size_t> correct;
    for (std::size_t j = 0; j < tiles.size(); ++j) {
        if (preds[j] == y) {
            correct.push_back(j);
        }
    }

    AttackSpec sub = spec;
    sub.stop_on_success = true;
    for (int r = 0; r < rounds && !correct.empty(); ++r) {
        auto vote = tally(preds, f.classes());
        if (vote.predicted != y) {
            break;
        }
        // runner-up: most votes among other classes, then largest summed logit
        int target = -1;
        for (int k = 0; k < f.classes(); ++k) {
            if (k == y) {
                continue;
            }
            if (target < 0 || vote.histogram[k] > vote.histogram[target]) {
                target = k;
            } else if (vote.histogram[k] == vote.histogram[target]) {
                double sk = 0, st = 0;
                for (const auto& l : logits) {
                    sk += l[k];
                    st += l[target];
                }
                if (sk > st) {
                    target = k;
                }
            }
        }
        // least confident correct tile
        std::size_t pick = 0;
        double low = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < correct.size(); ++i) {
            const auto& l = logits[correct[i]];
            const double margin = l[y] - l[target];
            if (margin < low) {
                low = margin;
                pick = i;
            }
        }
        const std::size_t tile = correct[pick];
        correct.erase(correct.begin() + static_cast<std::ptrdiff_t>(pick));
        const Anchor a{static_cast<int>(tile) / per_row * g.size + (g.size - m) / 2,
                       static_cast<int>(tile) % per_row * g.size + (g.size - m) / 2};
        const Mask sub_mask = make_mask(AttackShape::rectangle, m * m, a, side);
        const Defense single{"tile", {tiles[tile]}, std::nullopt};
        const auto res = pgd_patch(f, out.image, y, sub_mask, sub, &single, {}, target);
        out.image = res.image;
        out.mask |= sub_mask;
        refresh(tile);
    }
    out.delta = Image(side, side, 0.0);
    for (std::size_t i = 0; i < out.image.size(); ++i) {
        out.delta.data[i] = out.image.data[i] - x.data[i];
    }
    const auto vote = tally(preds, f.classes());
    out.predicted = vote.predicted;
    out.success = vote.predicted != y;
    out.objective = out.success ? 1.0 : 0.0;
    return out;
}

/// Dispatches on the attack shape against `defense`.
inline AdvExample run_attack(const Classifier& f, const Image& x, int y, const AttackSpec& spec, const Defense& defense)
{
    spec.validate();
    switch (spec.shape) {
    case AttackShape::sticker: {
        const auto bars = sticker_masks(x.height);
        Mask m = bars[0];
        m |= bars[1];
        return pgd_patch(f, x, y, m, spec, &defense);
    }
    case AttackShape::multi: {
        if (!defense.spec || defense.spec->kind != AblationKind::tile) {
            // no tiles to split across: spend the budget on one rectangle instead
            AttackSpec rect = spec;
            rect.shape = AttackShape::rectangle;
            return attack_location_search(f, x, y, rect, &defense);
        }
        return multi_patch_attack(f, x, y, spec.budget, spec.sub_patch, *defense.spec, spec);
    }
    default: return attack_location_search(f, x, y, spec, &defense);
    }
}

} // namespace red

#endif // RED_ATTACKS_HPP
