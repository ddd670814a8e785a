#ifndef RED_DATASET_HPP
#define RED_DATASET_HPP

#include "red/compositing.hpp"
#include "red/core.hpp"
#include "red/sign_template.hpp"

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace red {

struct LabeledExample {
    Image image;
    int label = 0;
    /// Present for synthetic examples: how the sign was photographed, so the same
    /// shot can be re-rendered with a different background pattern.
    std::optional<Capture> capture;

    bool operator==(const LabeledExample&) const = default;
};

struct Dataset {
    int classes = 0;
    int side = 0;
    std::vector<LabeledExample> examples;
    /// Per-class templates and lighting conditions; empty for datasets loaded from disk.
    std::vector<SignTemplate> templates;
    std::vector<ColorModel> conditions;

    [[nodiscard]] std::size_t size() const noexcept { return examples.size(); }
    [[nodiscard]] bool empty() const noexcept { return examples.empty(); }
    [[nodiscard]] bool renderable() const noexcept
    {
        return static_cast<int>(templates.size()) == classes && !conditions.empty();
    }

    void validate() const
    {
        if (classes < 2) {
            throw ValidationError("dataset needs at least 2 classes");
        }
        std::set<int> seen;
        for (std::size_t i = 0; i < examples.size(); ++i) {
            const auto& ex = examples[i];
            if (ex.label < 0 || ex.label >= classes) {
                throw ValidationError("example " + std::to_string(i) + ": label " + std::to_string(ex.label)
                                      + " out of range");
            }
            if (ex.image.height != side || ex.image.width != side) {
                throw ValidationError("example " + std::to_string(i) + ": image is not " + std::to_string(side) + "x"
                                      + std::to_string(side));
            }
            if (!in_unit_range(ex.image)) {
                throw ValidationError("example " + std::to_string(i) + ": pixel outside [0,1]");
            }
            seen.insert(ex.label);
        }
        if (static_cast<int>(seen.size()) != classes) {
            throw ValidationError("dataset does not contain every class");
        }
    }

    bool operator==(const Dataset&) const = default;
};

/// Current-design patterns: one flat grid per class holding the template's native background.
inline PatternSet native_patterns(const std::vector<SignTemplate>& templates)
{
    PatternSet set;
    set.grid_size = 1;
    for (const auto& t : templates) {
        set.grids.push_back(PatternGrid::flat(t.native_background));
    }
    return set;
}

/// Re-photographs every example with `patterns` as background, reusing each stored capture.
inline Dataset restyle(const Dataset& ds, const PatternSet& patterns)
{
    if (!ds.renderable()) {
        throw ValidationError("dataset has no sign templates; it cannot be re-rendered");
    }
    Dataset out = ds;
    for (auto& ex : out.examples) {
        if (!ex.capture) {
            throw ValidationError("example without capture cannot be re-rendered");
        }
        ex.image = capture_image(patterns.at(ex.label), ds.templates[ex.label], *ex.capture, ds.conditions);
    }
    return out;
}

} // namespace red

#endif // RED_DATASET_HPP
