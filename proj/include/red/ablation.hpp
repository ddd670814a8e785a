#ifndef RED_ABLATION_HPP
#define RED_ABLATION_HPP

#include "red/core.hpp"

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

namespace red {

enum class AblationKind { tile, band, random };

/// Family of defense-side ablations g_1..g_m.
///   tile:   disjoint a x a squares, row-major; remainder rows/cols are never kept
///   band:   W column bands of width a with wrap-around
///   random: m uniformly placed a x a squares drawn from `seed`
struct AblationSpec {
    AblationKind kind = AblationKind::tile;
    int size = 10;
    int count = 1;
    std::uint64_t seed = 0;

    void validate(int side) const
    {
        if (size < 1 || size > side) {
            throw ValidationError("ablation size " + std::to_string(size) + " outside [1, " + std::to_string(side) + "]");
        }
        if (count < 1) {
            throw ValidationError("ablation count must be >= 1");
        }
    }

    [[nodiscard]] std::string str() const
    {
        switch (kind) {
        case AblationKind::tile: return "tile:a=" + std::to_string(size);
        case AblationKind::band: return "band:w=" + std::to_string(size);
        case AblationKind::random:
            return "random:a=" + std::to_string(size) + ",m=" + std::to_string(count)
                 + (seed ? ",seed=" + std::to_string(seed) : "");
        }
        return "?";
    }

    bool operator==(const AblationSpec&) const = default;
};

/// Parses "tile:a=10", "band:w=4", "random:a=10,m=25[,seed=3]".
inline AblationSpec parse_ablation(const std::string& text)
{
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw ParseError("ablation '" + text + "': expected kind:key=value[,key=value]");
    }
    const std::string kind = text.substr(0, colon);
    AblationSpec spec;
    if (kind == "tile") {
        spec.kind = AblationKind::tile;
    } else if (kind == "band") {
        spec.kind = AblationKind::band;
    } else if (kind == "random") {
        spec.kind = AblationKind::random;
    } else {
        throw ParseError("ablation '" + text + "': unknown kind '" + kind + "'");
    }
    bool have_size = false;
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw ParseError("ablation '" + text + "': malformed field '" + item + "'");
        }
        const std::string key = item.substr(0, eq);
        long long value = 0;
        try {
            std::size_t used = 0;
            value = std::stoll(item.substr(eq + 1), &used);
            if (used != item.size() - eq - 1) {
                throw std::invalid_argument("trailing");
            }
        } catch (const std::exception&) {
            throw ParseError("ablation '" + text + "': field '" + key + "' is not an integer");
        }
        if (key == "a" || key == "w") {
            spec.size = static_cast<int>(value);
            have_size = true;
        } else if (key == "m") {
            spec.count = static_cast<int>(value);
        } else if (key == "seed") {
            spec.seed = static_cast<std::uint64_t>(value);
        } else {
            throw ParseError("ablation '" + text + "': unknown field '" + key + "'");
        }
    }
    if (!have_size) {
        throw ParseError("ablation '" + text + "': missing size (a= or w=)");
    }
    if (spec.size < 1 || spec.count < 1) {
        throw ParseError("ablation '" + text + "': sizes must be positive");
    }
    return spec;
}

/// An ablated image together with the pixels it retains. The keep-mask is carried
/// explicitly because retained pixels may legitimately be 0.
struct AblatedImage {
    Image image;
    Mask keep;
};

inline Mask square_keep_mask(int height, int width, int top, int left, int a)
{
    Mask m(height, width);
    for (int y = top; y < top + a && y < height; ++y) {
        for (int x = left; x < left + a && x < width; ++x) {
            m.set(y, x);
        }
    }
    return m;
}

inline std::vector<Mask> tile_keep_masks(int height, int width, int a)
{
    if (a <= 0) {
        throw ValidationError("tile size must be positive");
    }
    if (a > height || a > width) {
        throw ValidationError("tile size exceeds image side");
    }
    std::vector<Mask> masks;
    for (int i = 0; i < height / a; ++i) {
        for (int j = 0; j < width / a; ++j) {
            masks.push_back(square_keep_mask(height, width, i * a, j * a, a));
        }
    }
    return masks;
}

inline std::vector<Mask> band_keep_masks(int height, int width, int band_width)
{
    if (band_width < 1 || band_width > width) {
        throw ValidationError("band width must be in [1, W]");
    }
    std::vector<Mask> masks;
    for (int k = 0; k < width; ++k) {
        Mask m(height, width);
        for (int d = 0; d < band_width; ++d) {
            const int x = (k + d) % width;
            for (int y = 0; y < height; ++y) {
                m.set(y, x);
            }
        }
        masks.push_back(std::move(m));
    }
    return masks;
}

inline Mask random_keep_mask(int height, int width, int a, Rng& rng)
{
    if (a < 1 || a > height || a > width) {
        throw ValidationError("random ablation size outside image");
    }
    const int top = uniform_int(rng, 0, height - a);
    const int left = uniform_int(rng, 0, width - a);
    return square_keep_mask(height, width, top, left, a);
}

/// Materializes the keep-masks of a spec for an image of the given size.
inline std::vector<Mask> ablation_family(const AblationSpec& spec, int height, int width)
{
    spec.validate(std::min(height, width));
    switch (spec.kind) {
    case AblationKind::tile: return tile_keep_masks(height, width, spec.size);
    case AblationKind::band: return band_keep_masks(height, width, spec.size);
    case AblationKind::random: {
        Rng rng(spec.seed);
        std::vector<Mask> masks;
        for (int i = 0; i < spec.count; ++i) {
            masks.push_back(random_keep_mask(height, width, spec.size, rng));
        }
        return masks;
    }
    }
    return {};
}

inline std::vector<AblatedImage> ablate_all(const Image& x, const std::vector<Mask>& masks)
{
    std::vector<AblatedImage> out;
    out.reserve(masks.size());
    for (const auto& m : masks) {
        out.push_back({apply_mask(x, m), m});
    }
    return out;
}

inline std::vector<AblatedImage> tile_ablations(const Image& x, int a)
{
    return ablate_all(x, tile_keep_masks(x.height, x.width, a));
}

inline std::vector<AblatedImage> band_ablations(const Image& x, int band_width)
{
    return ablate_all(x, band_keep_masks(x.height, x.width, band_width));
}

inline AblatedImage random_ablation(const Image& x, int a, Rng& rng)
{
    Mask keep = random_keep_mask(x.height, x.width, a, rng);
    return {apply_mask(x, keep), std::move(keep)};
}

/// Upper bound on the number of a x a tiles a contiguous b x b patch can touch.
inline int max_tiles_intersected(int a, int b)
{
    if (a < 1 || b < 1) {
        throw ValidationError("tile and patch sides must be positive");
    }
    const int per_axis = (b + a - 1 + a - 1) / a; // ceil((b + a - 1) / a)
    return per_axis * per_axis;
}

/// Fraction of image area a single ablation retains.
inline double ablation_area_fraction(const AblationSpec& spec, int side)
{
    const double kept = spec.kind == AblationKind::band ? static_cast<double>(spec.size) * side
                                                        : static_cast<double>(spec.size) * spec.size;
    return kept / (static_cast<double>(side) * side);
}

} // namespace red

#endif // RED_ABLATION_HPP
