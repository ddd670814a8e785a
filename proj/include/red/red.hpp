#ifndef RED_RED_HPP
#define RED_RED_HPP

// Joint optimization of per-class background patterns and the classifier over ablated,
// composited sign images; optionally with a simulated patch attacker in the loop.

#include "red/ablation.hpp"
#include "red/attacks.hpp"
#include "red/compositing.hpp"
#include "red/dataset.hpp"
#include "red/model.hpp"

#include <optional>
#include <vector>

namespace red {

struct RedSchedule {
    int warmup_epochs = 5;
    int joint_update_period = 10; // 1 = update f every epoch
    int epochs = 20;

    void validate() const
    {
        if (epochs < 0 || warmup_epochs < 0 || warmup_epochs > epochs) {
            throw ValidationError("schedule: need 0 <= warmup <= epochs");
        }
        if (joint_update_period < 1) {
            throw ValidationError("schedule: update period must be >= 1");
        }
    }

    [[nodiscard]] bool update_model(int epoch) const
    {
        return epoch < warmup_epochs || epoch % joint_update_period == 0;
    }
};

struct RedConfig {
    TrainConfig train;
    Architecture arch;
    int grid_size = 3;
    double init_scale = 1.0;
    /// false keeps the initial patterns (e.g. the native flat backgrounds) and trains f only.
    bool train_patterns = true;
    std::optional<PatternSet> init_patterns;
    CaptureJitter jitter;
    double loss_weight = 1.0;
    // attacker-aware weights on the clean and adversarial terms
    double clean_weight = 1.0;
    double adv_weight = 1.0;
};

struct RedResult {
    PatternSet patterns;
    Classifier model;
    std::vector<double> loss_trace;
};

class RedDiverged : public TrainingDiverged {
public:
    RedDiverged(const std::string& what, RedResult last) : TrainingDiverged(what), last_good(std::move(last)) {}
    RedResult last_good;
};

/// Sum over examples and ablations of L(f(g_j(X_alpha)), y), each example rendered with its stored capture.
inline double red_loss(const Classifier& f, const PatternSet& patterns, const std::vector<LabeledExample>& batch,
                       const std::vector<Mask>& keep_masks, const std::vector<SignTemplate>& templates,
                       const std::vector<ColorModel>& conditions)
{
    Workspace ws;
    double total = 0.0;
    for (const auto& ex : batch) {
        if (!ex.capture) {
            throw ValidationError("example has no capture to render");
        }
        const Image x = capture_image(patterns.at(ex.label), templates.at(ex.label), *ex.capture, conditions);
        for (const auto& m : keep_masks) {
            total += xent(f.forward(apply_mask(x, m), ws), ex.label);
        }
    }
    return total;
}

struct RedGradient {
    double loss = 0.0;
    std::vector<std::vector<double>> patterns; // per class, same layout as PatternGrid::params
    std::vector<double> model;
};

namespace detail {

// Ablated CE terms of one rendered image: adds parameter gradients to `fgrad` (when non-empty)
// and d/dX to `dx`. Returns the summed loss.
inline double ablated_terms(const Classifier& f, const Image& x, int y, const std::vector<Mask>& masks, Workspace& ws,
                            std::span<double> fgrad, Image& dx, Image& gin)
{
    double loss = 0.0;
    const std::size_t n = x.plane();
    for (const auto& m : masks) {
        loss += f.loss_grad(apply_mask(x, m), y, ws, fgrad, &gin);
        for (int c = 0; c < Image::channels; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                if (m.bits[i]) {
                    dx.data[c * n + i] += gin.data[c * n + i];
                }
            }
        }
    }
    return loss;
}

} // namespace detail

/// red_loss with its gradients w.r.t. every pattern grid and every model parameter.
inline RedGradient red_loss_grad(const Classifier& f, const PatternSet& patterns,
                                 const std::vector<LabeledExample>& batch, const std::vector<Mask>& keep_masks,
                                 const std::vector<SignTemplate>& templates, const std::vector<ColorModel>& conditions,
                                 ClipGradient clip = ClipGradient::straight_through)
{
    RedGradient g;
    g.model.assign(f.param_count(), 0.0);
    for (const auto& grid : patterns.grids) {
        g.patterns.emplace_back(grid.params.size(), 0.0);
    }
    Workspace ws;
    Image gin;
    for (const auto& ex : batch) {
        if (!ex.capture) {
            throw ValidationError("example has no capture to render");
        }
        const auto& grid = patterns.at(ex.label);
        const auto& tmpl = templates.at(ex.label);
        CompositeCache cache;
        const Image x = capture_image(grid, tmpl, *ex.capture, conditions, &cache);
        Image dx(x.height, x.width, 0.0);
        g.loss += detail::ablated_terms(f, x, ex.label, keep_masks, ws, g.model, dx, gin);
        const auto da = composite_backward(cache, grid, tmpl, conditions.at(ex.capture->condition), dx, clip);
        for (std::size_t i = 0; i < da.size(); ++i) {
            g.patterns[ex.label][i] += da[i];
        }
    }
    return g;
}

namespace detail {

struct AttackerInLoop {
    AttackSpec spec;
    Defense defense;
};

inline RedResult optimize(const Dataset& data, const AblationSpec& g, const RedSchedule& schedule,
                          const RedConfig& cfg, const AttackerInLoop* attacker)
{
    cfg.train.validate();
    schedule.validate();
    data.validate();
    if (data.empty()) {
        throw ValidationError("cannot train on an empty dataset");
    }
    if (!data.renderable()) {
        throw ValidationError("pattern training needs sign templates and lighting conditions (synthetic dataset)");
    }
    Architecture arch = cfg.arch;
    arch.side = data.side;
    arch.classes = data.classes;

    RedResult res;
    res.model = Classifier(arch, mix_seed(cfg.train.seed, 1));
    if (cfg.init_patterns) {
        res.patterns = *cfg.init_patterns;
        if (static_cast<int>(res.patterns.grids.size()) != data.classes) {
            throw ValidationError("initial pattern set does not have one grid per class");
        }
    } else {
        Rng init(mix_seed(cfg.train.seed, 2));
        res.patterns = PatternSet::random(data.classes, cfg.grid_size, init, cfg.init_scale);
    }
    res.patterns.validate();

    Classifier& f = res.model;
    const int K = data.classes;
    std::vector<std::size_t> offsets{0};
    for (const auto& grid : res.patterns.grids) {
        offsets.push_back(offsets.back() + grid.params.size());
    }
    std::vector<double> alpha(offsets.back());
    auto pull = [&] {
        for (int k = 0; k < K; ++k) {
            std::copy(res.patterns.grids[k].params.begin(), res.patterns.grids[k].params.end(), alpha.begin() + offsets[k]);
        }
    };
    auto push = [&] {
        for (int k = 0; k < K; ++k) {
            std::copy(alpha.begin() + offsets[k], alpha.begin() + offsets[k + 1], res.patterns.grids[k].params.begin());
        }
    };
    pull();

    AblationSampler sampler(g, data.side, cfg.train.ablations_per_example);
    Optimizer fopt(cfg.train.optimizer, cfg.train.lr_model);
    Optimizer aopt(cfg.train.pattern_optimizer, cfg.train.lr_pattern);
    std::vector<double> fgrad(f.param_count()), agrad(alpha.size());
    std::vector<double> s_clean(f.param_count()), s_adv(attacker ? f.param_count() : 0);
    Workspace ws;
    Image gin;
    const int ncond = static_cast<int>(data.conditions.size());

    for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
        RedResult last_good = res;
        const bool update_f = schedule.update_model(epoch);
        Rng rng(mix_seed(cfg.train.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        const auto order = shuffled_indices(data.size(), rng);
        double epoch_loss = 0.0;
        std::size_t epoch_terms = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.train.batch_size);
            std::fill(fgrad.begin(), fgrad.end(), 0.0);
            std::fill(agrad.begin(), agrad.end(), 0.0);
            std::size_t batch_terms = 0;
            for (std::size_t i = start; i < end; ++i) {
                const int y = data.examples[order[i]].label;
                const Capture cap = random_capture(rng, data.side, ncond, cfg.jitter);
                const auto masks = sampler.draw(rng);
                batch_terms += masks.size();
                const auto& tmpl = data.templates[y];
                const auto& grid = res.patterns.grids[y];
                CompositeCache cache;
                const Image x = capture_image(grid, tmpl, cap, data.conditions, &cache);

                std::span<double> sc = update_f ? std::span<double>(s_clean) : std::span<double>();
                std::fill(s_clean.begin(), s_clean.end(), 0.0);
                Image dx(x.height, x.width, 0.0);
                double loss = detail::ablated_terms(f, x, y, masks, ws, sc, dx, gin);

                if (attacker) {
                    const auto adv = run_attack(f, x, y, attacker->spec, attacker->defense);
                    std::span<double> sa = update_f ? std::span<double>(s_adv) : std::span<double>();
                    std::fill(s_adv.begin(), s_adv.end(), 0.0);
                    // straight-through the patch clip: d/dX of X' is the identity
                    Image dx_adv(x.height, x.width, 0.0);
                    const double adv_loss = detail::ablated_terms(f, adv.image, y, masks, ws, sa, dx_adv, gin);
                    for (std::size_t j = 0; j < dx.size(); ++j) {
                        dx.data[j] = cfg.clean_weight * dx.data[j] + cfg.adv_weight * dx_adv.data[j];
                    }
                    if (update_f) {
                        for (std::size_t j = 0; j < fgrad.size(); ++j) {
                            fgrad[j] += cfg.clean_weight * s_clean[j] + cfg.adv_weight * s_adv[j];
                        }
                    }
                    loss = cfg.clean_weight * loss + cfg.adv_weight * adv_loss;
                } else {
                    for (auto& v : dx.data) {
                        v = cfg.loss_weight * v;
                    }
                    if (update_f) {
                        for (std::size_t j = 0; j < fgrad.size(); ++j) {
                            fgrad[j] += cfg.loss_weight * s_clean[j];
                        }
                    }
                    loss = cfg.loss_weight * loss;
                }
                if (!std::isfinite(loss)) {
                    throw RedDiverged("non-finite loss at epoch " + std::to_string(epoch), std::move(last_good));
                }
                epoch_loss += loss;
                epoch_terms += masks.size();
                if (cfg.train_patterns) {
                    const auto da = composite_backward(cache, grid, tmpl, data.conditions[cap.condition], dx);
                    for (std::size_t j = 0; j < da.size(); ++j) {
                        agrad[offsets[y] + j] += da[j];
                    }
                }
            }
            const double scale = 1.0 / static_cast<double>(batch_terms);
            if (update_f) {
                for (auto& v : fgrad) {
                    v *= scale;
                }
                fopt.step(f.params(), fgrad);
            }
            if (cfg.train_patterns) {
                for (auto& v : agrad) {
                    v *= scale;
                }
                aopt.step(alpha, agrad);
                push();
            }
        }
        res.loss_trace.push_back(epoch_loss / static_cast<double>(epoch_terms));
        for (double v : f.params()) {
            if (!std::isfinite(v)) {
                throw RedDiverged("non-finite model parameter after epoch " + std::to_string(epoch), std::move(last_good));
            }
        }
    }
    return res;
}

} // namespace detail

/// Learns one background pattern per class jointly with the classifier.
inline RedResult optimize_red(const Dataset& data, const AblationSpec& g, const RedSchedule& schedule,
                              const RedConfig& cfg)
{
    return detail::optimize(data, g, schedule, cfg, nullptr);
}

/// As optimize_red, with the attacker's best response against the current (f, alpha) recomputed for
/// every example and its ablated loss added to the clean one.
inline RedResult optimize_aa_red(const Dataset& data, const AblationSpec& g, const AttackSpec& attack,
                                 const RedSchedule& schedule, const RedConfig& cfg)
{
    attack.validate();
    const detail::AttackerInLoop attacker{attack, Defense::ablated("train", g, data.side)};
    return detail::optimize(data, g, schedule, cfg, &attacker);
}

} // namespace red

#endif // RED_RED_HPP
