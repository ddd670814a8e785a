#ifndef RED_CORE_HPP
#define RED_CORE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace red {

// Error hierarchy. Everything thrown by the library derives from red::Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

using Rgb = std::array<double, 3>;

/// Planar RGB image, values nominally in [0,1].
/// Storage is channel-major: data[c*H*W + y*W + x].
struct Image {
    static constexpr int channels = 3;

    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), data(static_cast<std::size_t>(channels) * h * w, fill)
    {
        if (h < 0 || w < 0) {
            throw ValidationError("image dimensions must be non-negative");
        }
    }

    [[nodiscard]] std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
    [[nodiscard]] std::size_t size() const noexcept { return data.size(); }
    [[nodiscard]] bool empty() const noexcept { return data.empty(); }

    double& at(int c, int y, int x) noexcept { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] double at(int c, int y, int x) const noexcept
    {
        return data[c * plane() + static_cast<std::size_t>(y) * width + x];
    }

    [[nodiscard]] Rgb pixel(int y, int x) const noexcept { return {at(0, y, x), at(1, y, x), at(2, y, x)}; }
    void set_pixel(int y, int x, const Rgb& rgb) noexcept
    {
        for (int c = 0; c < channels; ++c) {
            at(c, y, x) = rgb[c];
        }
    }

    [[nodiscard]] bool same_shape(const Image& other) const noexcept
    {
        return height == other.height && width == other.width;
    }

    bool operator==(const Image&) const = default;
};

/// Binary H x W mask. Used for attacker patches, ablation keep-regions and template regions.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int h, int w, bool fill = false)
        : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill ? 1 : 0)
    {
    }

    [[nodiscard]] bool at(int y, int x) const noexcept { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int y, int x, bool v = true) noexcept { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }

    [[nodiscard]] int area() const noexcept
    {
        return static_cast<int>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
    }

    [[nodiscard]] bool intersects(const Mask& other) const noexcept
    {
        for (std::size_t i = 0; i < bits.size() && i < other.bits.size(); ++i) {
            if (bits[i] && other.bits[i]) {
                return true;
            }
        }
        return false;
    }

    Mask& operator|=(const Mask& other)
    {
        for (std::size_t i = 0; i < bits.size(); ++i) {
            bits[i] = static_cast<std::uint8_t>(bits[i] | other.bits[i]);
        }
        return *this;
    }

    bool operator==(const Mask&) const = default;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds from (seed, tag) pairs.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) noexcept
{
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi)
{
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double sigmoid(double v) noexcept
{
    if (v >= 0) {
        return 1.0 / (1.0 + std::exp(-v));
    }
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline double logit(double p) noexcept
{
    p = std::clamp(p, 1e-6, 1.0 - 1e-6);
    return std::log(p / (1.0 - p));
}

/// Zero everything outside `keep`.
inline Image apply_mask(const Image& img, const Mask& keep)
{
    Image out(img.height, img.width, 0.0);
    const std::size_t n = img.plane();
    for (int c = 0; c < Image::channels; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            if (keep.bits[i]) {
                out.data[c * n + i] = img.data[c * n + i];
            }
        }
    }
    return out;
}

inline bool in_unit_range(const Image& img) noexcept
{
    return std::all_of(img.data.begin(), img.data.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

} // namespace red

#endif // RED_CORE_HPP
