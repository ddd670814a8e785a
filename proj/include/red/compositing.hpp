#ifndef RED_COMPOSITING_HPP
#define RED_COMPOSITING_HPP

// Differentiable placement of a per-class pattern onto a sign template and simulated
// camera capture: pattern render -> sign composition -> homography warp -> color model -> clip.

#include "red/core.hpp"
#include "red/sign_template.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace red {

// ---------------------------------------------------------------------------------------------
// Pattern grids
// ---------------------------------------------------------------------------------------------

/// g x g grid of colors, stored as unconstrained parameters squashed by a logistic sigmoid.
struct PatternGrid {
    int grid_size = 1;
    std::vector<double> params; // ((row * g) + col) * 3 + channel

    static bool supported(int g) noexcept { return g == 1 || g == 3 || g == 5 || g == 10; }

    PatternGrid() : params(3, 0.0) {}
    explicit PatternGrid(int g) : grid_size(g)
    {
        if (!supported(g)) {
            throw ValidationError("unsupported grid size " + std::to_string(g) + " (expected 1, 3, 5 or 10)");
        }
        params.assign(static_cast<std::size_t>(g) * g * 3, 0.0);
    }

    [[nodiscard]] std::size_t index(int row, int col, int c) const noexcept
    {
        return (static_cast<std::size_t>(row) * grid_size + col) * 3 + c;
    }
    double& param(int row, int col, int c) noexcept { return params[index(row, col, c)]; }
    [[nodiscard]] double param(int row, int col, int c) const noexcept { return params[index(row, col, c)]; }

    [[nodiscard]] Rgb color(int row, int col) const noexcept
    {
        return {sigmoid(param(row, col, 0)), sigmoid(param(row, col, 1)), sigmoid(param(row, col, 2))};
    }

    void set_color(int row, int col, const Rgb& rgb) noexcept
    {
        for (int c = 0; c < 3; ++c) {
            param(row, col, c) = logit(rgb[c]);
        }
    }

    static PatternGrid flat(const Rgb& rgb)
    {
        PatternGrid g(1);
        g.set_color(0, 0, rgb);
        return g;
    }

    bool operator==(const PatternGrid&) const = default;
};

/// One pattern grid per class, all with the same grid size.
struct PatternSet {
    int grid_size = 1;
    std::vector<PatternGrid> grids;

    [[nodiscard]] int classes() const noexcept { return static_cast<int>(grids.size()); }

    [[nodiscard]] const PatternGrid& at(int cls) const
    {
        if (cls < 0 || cls >= classes()) {
            throw ValidationError("no pattern for class " + std::to_string(cls));
        }
        return grids[cls];
    }
    PatternGrid& at(int cls)
    {
        if (cls < 0 || cls >= classes()) {
            throw ValidationError("no pattern for class " + std::to_string(cls));
        }
        return grids[cls];
    }

    void validate() const
    {
        if (!PatternGrid::supported(grid_size)) {
            throw ValidationError("unsupported grid size " + std::to_string(grid_size));
        }
        for (const auto& g : grids) {
            if (g.grid_size != grid_size
                || g.params.size() != static_cast<std::size_t>(grid_size) * grid_size * 3) {
                throw ValidationError("pattern set mixes grid sizes");
            }
        }
    }

    /// Random initialization; parameters ~ N(0, scale).
    static PatternSet random(int classes, int g, Rng& rng, double scale = 1.0)
    {
        PatternSet set;
        set.grid_size = g;
        std::normal_distribution<double> n(0.0, scale);
        for (int k = 0; k < classes; ++k) {
            PatternGrid grid(g);
            for (auto& p : grid.params) {
                p = n(rng);
            }
            set.grids.push_back(std::move(grid));
        }
        return set;
    }

    bool operator==(const PatternSet&) const = default;
};

/// Start offsets of the g cells along an axis of length `side` (size g+1).
/// The first (side mod g) cells get one extra pixel.
inline std::vector<int> cell_bounds(int side, int g)
{
    std::vector<int> bounds(static_cast<std::size_t>(g) + 1, 0);
    const int base = side / g;
    const int extra = side % g;
    for (int i = 0; i < g; ++i) {
        bounds[i + 1] = bounds[i] + base + (i < extra ? 1 : 0);
    }
    return bounds;
}

inline std::vector<int> cell_owner(int side, int g)
{
    const auto bounds = cell_bounds(side, g);
    std::vector<int> owner(side);
    for (int i = 0; i < g; ++i) {
        for (int p = bounds[i]; p < bounds[i + 1]; ++p) {
            owner[p] = i;
        }
    }
    return owner;
}

inline Image render_pattern(const PatternGrid& grid, int side)
{
    if (!PatternGrid::supported(grid.grid_size)) {
        throw ValidationError("unsupported grid size " + std::to_string(grid.grid_size));
    }
    if (side < grid.grid_size) {
        throw ValidationError("pattern side smaller than grid size");
    }
    const auto owner = cell_owner(side, grid.grid_size);
    Image out(side, side);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            out.set_pixel(y, x, grid.color(owner[y], owner[x]));
        }
    }
    return out;
}

/// Vector-Jacobian product of render_pattern: d(loss)/d(params) given d(loss)/d(image).
inline std::vector<double> render_pattern_backward(const PatternGrid& grid, const Image& grad)
{
    const int side = grad.height;
    const auto owner = cell_owner(side, grid.grid_size);
    std::vector<double> dcolor(grid.params.size(), 0.0);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < side; ++y) {
            for (int x = 0; x < side; ++x) {
                dcolor[grid.index(owner[y], owner[x], c)] += grad.at(c, y, x);
            }
        }
    }
    for (std::size_t i = 0; i < dcolor.size(); ++i) {
        const double s = sigmoid(grid.params[i]);
        dcolor[i] *= s * (1.0 - s);
    }
    return dcolor;
}

// ---------------------------------------------------------------------------------------------
// Homography warp
// ---------------------------------------------------------------------------------------------

/// 3x3 projective map from source (x, y) to destination coordinates, row-major, m[8] == 1.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography identity() { return {}; }

    static Homography translation(double dx, double dy)
    {
        Homography h;
        h.m[2] = dx;
        h.m[5] = dy;
        return h;
    }

    static Homography from(const std::array<double, 9>& raw)
    {
        if (raw[8] == 0.0 || !std::isfinite(raw[8])) {
            throw ValidationError("homography cannot be normalized (m22 == 0)");
        }
        Homography h;
        for (int i = 0; i < 9; ++i) {
            h.m[i] = raw[i] / raw[8];
        }
        h.m[8] = 1.0;
        h.check();
        return h;
    }

    [[nodiscard]] double det() const noexcept
    {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
             + m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    void check() const
    {
        const double d = det();
        if (!std::isfinite(d) || std::abs(d) <= 1e-9) {
            throw ValidationError("homography is singular (|det| <= 1e-9)");
        }
    }

    [[nodiscard]] Homography inverse() const
    {
        check();
        const double d = det();
        std::array<double, 9> a{
            (m[4] * m[8] - m[5] * m[7]) / d, (m[2] * m[7] - m[1] * m[8]) / d, (m[1] * m[5] - m[2] * m[4]) / d,
            (m[5] * m[6] - m[3] * m[8]) / d, (m[0] * m[8] - m[2] * m[6]) / d, (m[2] * m[3] - m[0] * m[5]) / d,
            (m[3] * m[7] - m[4] * m[6]) / d, (m[1] * m[6] - m[0] * m[7]) / d, (m[0] * m[4] - m[1] * m[3]) / d,
        };
        return from(a);
    }

    [[nodiscard]] std::array<double, 2> apply(double x, double y) const noexcept
    {
        const double w = m[6] * x + m[7] * y + m[8];
        return {(m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w};
    }

    Homography operator*(const Homography& rhs) const
    {
        std::array<double, 9> r{};
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                for (int k = 0; k < 3; ++k) {
                    r[i * 3 + j] += m[i * 3 + k] * rhs.m[k * 3 + j];
                }
            }
        }
        return from(r);
    }

    bool operator==(const Homography&) const = default;
};

/// Precomputed bilinear taps for an inverse-mapped warp. Warping is linear in the source
/// pixels, so the same plan gives the forward pass and its transpose.
struct WarpPlan {
    struct Tap {
        std::array<std::int32_t, 4> src{-1, -1, -1, -1};
        std::array<double, 4> weight{0, 0, 0, 0};
    };
    int src_height = 0;
    int src_width = 0;
    int dst_height = 0;
    int dst_width = 0;
    std::vector<Tap> taps;
};

inline WarpPlan make_warp_plan(const Homography& h, int src_height, int src_width, int dst_height, int dst_width)
{
    const Homography inv = h.inverse();
    WarpPlan plan{src_height, src_width, dst_height, dst_width, {}};
    plan.taps.resize(static_cast<std::size_t>(dst_height) * dst_width);
    for (int y = 0; y < dst_height; ++y) {
        for (int x = 0; x < dst_width; ++x) {
            const auto [u, v] = inv.apply(x, y);
            auto& tap = plan.taps[static_cast<std::size_t>(y) * dst_width + x];
            if (!std::isfinite(u) || !std::isfinite(v) || u <= -1.0 || v <= -1.0 || u >= src_width || v >= src_height) {
                continue;
            }
            const double fx = std::floor(u);
            const double fy = std::floor(v);
            const int x0 = static_cast<int>(fx);
            const int y0 = static_cast<int>(fy);
            const double ax = u - fx;
            const double ay = v - fy;
            const std::array<int, 4> xs{x0, x0 + 1, x0, x0 + 1};
            const std::array<int, 4> ys{y0, y0, y0 + 1, y0 + 1};
            const std::array<double, 4> ws{(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
            for (int k = 0; k < 4; ++k) {
                if (ws[k] == 0.0 || xs[k] < 0 || ys[k] < 0 || xs[k] >= src_width || ys[k] >= src_height) {
                    continue;
                }
                tap.src[k] = ys[k] * src_width + xs[k];
                tap.weight[k] = ws[k];
            }
        }
    }
    return plan;
}

inline Image warp(const WarpPlan& plan, const Image& src)
{
    Image out(plan.dst_height, plan.dst_width, 0.0);
    const std::size_t sp = src.plane();
    const std::size_t dp = out.plane();
    for (std::size_t i = 0; i < plan.taps.size(); ++i) {
        const auto& tap = plan.taps[i];
        for (int c = 0; c < Image::channels; ++c) {
            double v = 0.0;
            bool any = false;
            for (int k = 0; k < 4; ++k) {
                if (tap.src[k] >= 0) {
                    const double s = src.data[c * sp + tap.src[k]];
                    v = any ? v + tap.weight[k] * s : tap.weight[k] * s;
                    any = true;
                }
            }
            out.data[c * dp + i] = v;
        }
    }
    return out;
}

/// Inverse-mapped bilinear warp; samples outside the source read as 0.
inline Image warp(const Image& src, const Homography& h)
{
    return warp(make_warp_plan(h, src.height, src.width, src.height, src.width), src);
}

inline Image warp_backward(const WarpPlan& plan, const Image& grad_dst)
{
    Image grad_src(plan.src_height, plan.src_width, 0.0);
    const std::size_t sp = grad_src.plane();
    const std::size_t dp = grad_dst.plane();
    for (std::size_t i = 0; i < plan.taps.size(); ++i) {
        const auto& tap = plan.taps[i];
        for (int c = 0; c < Image::channels; ++c) {
            const double g = grad_dst.data[c * dp + i];
            if (g == 0.0) {
                continue;
            }
            for (int k = 0; k < 4; ++k) {
                if (tap.src[k] >= 0) {
                    grad_src.data[c * sp + tap.src[k]] += tap.weight[k] * g;
                }
            }
        }
    }
    return grad_src;
}

// ---------------------------------------------------------------------------------------------
// Color models
// ---------------------------------------------------------------------------------------------

struct DenseLayer {
    int inputs = 0;
    int outputs = 0;
    std::vector<double> weight; // outputs x inputs, row-major
    std::vector<double> bias;

    bool operator==(const DenseLayer&) const = default;
};

/// RGB -> RGB map: three fully connected layers with ReLU between them.
/// One model per lighting condition.
struct ColorModel {
    static constexpr int max_hidden = 64;

    std::string condition;
    std::vector<DenseLayer> layers;
    double fit_mse = std::numeric_limits<double>::quiet_NaN();

    [[nodiscard]] int hidden() const noexcept { return layers.empty() ? 0 : layers.front().outputs; }

    static ColorModel initialized(std::string condition, int hidden, Rng& rng)
    {
        if (hidden < 1 || hidden > max_hidden) {
            throw ValidationError("color model hidden width must be in [1, 64]");
        }
        ColorModel model;
        model.condition = std::move(condition);
        const std::array<std::pair<int, int>, 3> shapes{{{3, hidden}, {hidden, hidden}, {hidden, 3}}};
        for (const auto& [in, out] : shapes) {
            DenseLayer layer{in, out, std::vector<double>(static_cast<std::size_t>(in) * out), std::vector<double>(out, 0.0)};
            std::normal_distribution<double> n(0.0, std::sqrt(2.0 / in));
            for (auto& w : layer.weight) {
                w = n(rng);
            }
            model.layers.push_back(std::move(layer));
        }
        return model;
    }

    void validate() const
    {
        if (layers.size() != 3 || layers[0].inputs != 3 || layers[2].outputs != 3
            || layers[0].outputs != layers[1].inputs || layers[1].outputs != layers[2].inputs
            || hidden() > max_hidden) {
            throw ValidationError("color model must be a 3 -> h -> h -> 3 network");
        }
        for (const auto& l : layers) {
            if (l.weight.size() != static_cast<std::size_t>(l.inputs) * l.outputs
                || l.bias.size() != static_cast<std::size_t>(l.outputs)) {
                throw ValidationError("color model layer has inconsistent shape");
            }
            for (double w : l.weight) {
                if (!std::isfinite(w)) {
                    throw ValidationError("color model has non-finite weights");
                }
            }
        }
    }

    [[nodiscard]] Rgb apply(const Rgb& in) const noexcept
    {
        std::array<double, max_hidden> h1{};
        std::array<double, max_hidden> h2{};
        Rgb out{};
        forward(in, h1, h2, out);
        return out;
    }

    /// Gradient of (dout . model(in)) with respect to in.
    [[nodiscard]] Rgb backward(const Rgb& in, const Rgb& dout) const noexcept
    {
        std::array<double, max_hidden> h1{};
        std::array<double, max_hidden> h2{};
        Rgb out{};
        forward(in, h1, h2, out);
        const auto& l1 = layers[0];
        const auto& l2 = layers[1];
        const auto& l3 = layers[2];
        std::array<double, max_hidden> g2{};
        for (int j = 0; j < l3.inputs; ++j) {
            double s = 0.0;
            for (int o = 0; o < 3; ++o) {
                s += l3.weight[o * l3.inputs + j] * dout[o];
            }
            g2[j] = h2[j] > 0.0 ? s : 0.0;
        }
        std::array<double, max_hidden> g1{};
        for (int j = 0; j < l2.inputs; ++j) {
            double s = 0.0;
            for (int o = 0; o < l2.outputs; ++o) {
                s += l2.weight[o * l2.inputs + j] * g2[o];
            }
            g1[j] = h1[j] > 0.0 ? s : 0.0;
        }
        Rgb din{};
        for (int i = 0; i < 3; ++i) {
            double s = 0.0;
            for (int o = 0; o < l1.outputs; ++o) {
                s += l1.weight[o * 3 + i] * g1[o];
            }
            din[i] = s;
        }
        return din;
    }

    [[nodiscard]] Image apply(const Image& img) const
    {
        Image out(img.height, img.width);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                out.set_pixel(y, x, apply(img.pixel(y, x)));
            }
        }
        return out;
    }

    // Post-ReLU activations are written to h1/h2.
    void forward(const Rgb& in, std::array<double, max_hidden>& h1, std::array<double, max_hidden>& h2,
                 Rgb& out) const noexcept
    {
        const auto& l1 = layers[0];
        const auto& l2 = layers[1];
        const auto& l3 = layers[2];
        for (int o = 0; o < l1.outputs; ++o) {
            double s = l1.bias[o];
            for (int i = 0; i < 3; ++i) {
                s += l1.weight[o * 3 + i] * in[i];
            }
            h1[o] = s > 0.0 ? s : 0.0;
        }
        for (int o = 0; o < l2.outputs; ++o) {
            double s = l2.bias[o];
            for (int i = 0; i < l2.inputs; ++i) {
                s += l2.weight[o * l2.inputs + i] * h1[i];
            }
            h2[o] = s > 0.0 ? s : 0.0;
        }
        for (int o = 0; o < 3; ++o) {
            double s = l3.bias[o];
            for (int i = 0; i < l3.inputs; ++i) {
                s += l3.weight[o * l3.inputs + i] * h2[i];
            }
            out[o] = s;
        }
    }

    bool operator==(const ColorModel&) const = default;
};

/// Kelly's 22 colors of maximum contrast, sRGB in [0,1].
inline const std::array<Rgb, 22>& kelly_colors()
{
    static const std::array<Rgb, 22> colors = [] {
        const std::array<std::uint32_t, 22> hex{
            0xF2F3F4, 0x222222, 0xF3C300, 0x875692, 0xF38400, 0xA1CAF1, 0xBE0032, 0xC2B280,
            0x848482, 0x008856, 0xE68FAC, 0x0067A5, 0xF99379, 0x604E97, 0xF6A600, 0xB3446C,
            0xDCD300, 0x882D17, 0x8DB600, 0x654522, 0xE25822, 0x2B3D26};
        std::array<Rgb, 22> out{};
        for (std::size_t i = 0; i < hex.size(); ++i) {
            out[i] = {((hex[i] >> 16) & 0xFF) / 255.0, ((hex[i] >> 8) & 0xFF) / 255.0, (hex[i] & 0xFF) / 255.0};
        }
        return out;
    }();
    return colors;
}

struct ColorPair {
    Rgb designed;
    Rgb observed;
};

struct ColorFitOptions {
    int hidden = 16;
    int iterations = 4000;
    double learning_rate = 1e-2;
    std::uint64_t seed = 0;
};

inline double color_mse(const ColorModel& model, const std::vector<ColorPair>& pairs)
{
    double total = 0.0;
    for (const auto& p : pairs) {
        const Rgb out = model.apply(p.designed);
        for (int c = 0; c < 3; ++c) {
            total += (out[c] - p.observed[c]) * (out[c] - p.observed[c]);
        }
    }
    return total / (3.0 * static_cast<double>(pairs.size()));
}

/// Full-batch Adam on mean squared error. Needs at least the 22 Kelly patches.
inline ColorModel fit_color_model(const std::vector<ColorPair>& pairs, const std::string& condition,
                                  const ColorFitOptions& opts = {})
{
    if (pairs.size() < 22) {
        throw ValidationError("insufficient calibration data: " + std::to_string(pairs.size())
                              + " color pairs, need at least 22");
    }
    Rng rng(opts.seed);
    ColorModel model = ColorModel::initialized(condition, opts.hidden, rng);

    std::vector<double*> params;
    for (auto& l : model.layers) {
        for (auto& w : l.weight) {
            params.push_back(&w);
        }
        for (auto& b : l.bias) {
            params.push_back(&b);
        }
    }
    std::vector<double> grad(params.size()), m1(params.size(), 0.0), m2(params.size(), 0.0);
    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    const int h = opts.hidden;
    const double scale = 2.0 / (3.0 * static_cast<double>(pairs.size()));

    for (int it = 0; it < opts.iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        auto& l1 = model.layers[0];
        auto& l2 = model.layers[1];
        auto& l3 = model.layers[2];
        const std::size_t o1w = 0, o1b = l1.weight.size(), o2w = o1b + l1.bias.size(), o2b = o2w + l2.weight.size(),
                          o3w = o2b + l2.bias.size(), o3b = o3w + l3.weight.size();
        for (const auto& p : pairs) {
            std::array<double, ColorModel::max_hidden> h1{}, h2{};
            Rgb out{};
            model.forward(p.designed, h1, h2, out);
            Rgb dout{};
            for (int c = 0; c < 3; ++c) {
                dout[c] = scale * (out[c] - p.observed[c]);
            }
            std::array<double, ColorModel::max_hidden> g2{}, g1{};
            for (int o = 0; o < 3; ++o) {
                grad[o3b + o] += dout[o];
                for (int j = 0; j < h; ++j) {
                    grad[o3w + o * h + j] += dout[o] * h2[j];
                    g2[j] += l3.weight[o * h + j] * dout[o];
                }
            }
            for (int j = 0; j < h; ++j) {
                if (h2[j] <= 0.0) {
                    continue;
                }
                grad[o2b + j] += g2[j];
                for (int i = 0; i < h; ++i) {
                    grad[o2w + j * h + i] += g2[j] * h1[i];
                    g1[i] += l2.weight[j * h + i] * g2[j];
                }
            }
            for (int j = 0; j < h; ++j) {
                if (h1[j] <= 0.0) {
                    continue;
                }
                grad[o1b + j] += g1[j];
                for (int i = 0; i < 3; ++i) {
                    grad[o1w + j * 3 + i] += g1[j] * p.designed[i];
                }
            }
        }
        const double t = it + 1;
        const double lr = opts.learning_rate * (it < opts.iterations / 2 ? 1.0 : 0.3);
        for (std::size_t k = 0; k < params.size(); ++k) {
            m1[k] = beta1 * m1[k] + (1 - beta1) * grad[k];
            m2[k] = beta2 * m2[k] + (1 - beta2) * grad[k] * grad[k];
            const double mh = m1[k] / (1 - std::pow(beta1, t));
            const double vh = m2[k] / (1 - std::pow(beta2, t));
            *params[k] -= lr * mh / (std::sqrt(vh) + adam_eps);
        }
    }
    model.fit_mse = color_mse(model, pairs);
    model.validate();
    return model;
}

/// Analytic stand-in for a lighting condition: out = clip(gain * in^gamma + bias).
struct LightingTransform {
    std::string name;
    Rgb gain{1, 1, 1};
    Rgb bias{0, 0, 0};
    double gamma = 1.0;

    [[nodiscard]] Rgb apply(const Rgb& in) const noexcept
    {
        Rgb out{};
        for (int c = 0; c < 3; ++c) {
            out[c] = std::clamp(gain[c] * std::pow(std::max(in[c], 0.0), gamma) + bias[c], 0.0, 1.0);
        }
        return out;
    }
};

inline const std::vector<LightingTransform>& lighting_roster()
{
    static const std::vector<LightingTransform> roster{
        {"overcast", {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, 1.0},
        {"noon", {1.1, 1.1, 1.08}, {0.06, 0.06, 0.05}, 0.9},
        {"dusk", {0.75, 0.65, 0.55}, {0.0, 0.0, 0.02}, 1.15},
        {"morning", {0.9, 0.95, 1.05}, {0.03, 0.03, 0.04}, 1.0},
        {"shade", {0.8, 0.82, 0.85}, {0.02, 0.02, 0.03}, 1.05},
    };
    return roster;
}

/// Kelly patches plus a 5x5x5 lattice, each mapped through `t`.
inline std::vector<ColorPair> calibration_pairs(const LightingTransform& t)
{
    std::vector<ColorPair> pairs;
    for (const auto& k : kelly_colors()) {
        pairs.push_back({k, t.apply(k)});
    }
    for (int r = 0; r < 5; ++r) {
        for (int g = 0; g < 5; ++g) {
            for (int b = 0; b < 5; ++b) {
                const Rgb in{r / 4.0, g / 4.0, b / 4.0};
                pairs.push_back({in, t.apply(in)});
            }
        }
    }
    return pairs;
}

/// Fixed roster of synthetic lighting conditions, each distilled into a fitted ColorModel.
inline std::vector<ColorModel> synth_conditions(std::uint64_t seed, ColorFitOptions opts = {})
{
    std::vector<ColorModel> models;
    const auto& roster = lighting_roster();
    for (std::size_t i = 0; i < roster.size(); ++i) {
        opts.seed = mix_seed(seed, i);
        models.push_back(fit_color_model(calibration_pairs(roster[i]), roster[i].name, opts));
    }
    return models;
}

// ---------------------------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------------------------

enum class ClipGradient {
    straight_through, // pass gradients through the [0,1] clip unchanged
    exact             // zero gradient where the clip is active
};

/// Background pixels from `pattern`, foreground from the template colors, empty elsewhere.
inline Image compose_sign(const Image& pattern, const SignTemplate& tmpl)
{
    Image sign(tmpl.side, tmpl.side, 0.0);
    for (int y = 0; y < tmpl.side; ++y) {
        for (int x = 0; x < tmpl.side; ++x) {
            if (tmpl.background.at(y, x)) {
                sign.set_pixel(y, x, pattern.pixel(y, x));
            } else if (tmpl.foreground.at(y, x)) {
                sign.set_pixel(y, x, tmpl.foreground_color.pixel(y, x));
            }
        }
    }
    return sign;
}

/// Intermediate values kept for the backward pass.
struct CompositeCache {
    WarpPlan plan;
    Image warped;
    Image pre_clip;
};

/// One simulated photograph of a sign: viewpoint, lighting condition and sensor noise.
struct Capture {
    Homography homography;
    int condition = 0;
    std::uint64_t noise_seed = 0;
    double noise_sigma = 0.0;

    bool operator==(const Capture&) const = default;
};

struct CaptureJitter {
    double min_scale = 0.85;
    double max_scale = 1.0;
    double max_rotation_deg = 8.0;
    double max_shift = 1.5;
    double max_perspective = 0.004;
    double noise_sigma = 0.02;
};

inline Homography jitter_homography(Rng& rng, int side, const CaptureJitter& j)
{
    const double s = uniform(rng, j.min_scale, j.max_scale);
    const double theta = uniform(rng, -j.max_rotation_deg, j.max_rotation_deg) * 3.14159265358979323846 / 180.0;
    const double tx = uniform(rng, -j.max_shift, j.max_shift);
    const double ty = uniform(rng, -j.max_shift, j.max_shift);
    const double px = uniform(rng, -j.max_perspective, j.max_perspective);
    const double py = uniform(rng, -j.max_perspective, j.max_perspective);
    const double c = (side - 1) / 2.0;
    const Homography to_origin = Homography::translation(-c, -c);
    const Homography back = Homography::translation(c + tx, c + ty);
    const Homography core = Homography::from(
        {s * std::cos(theta), -s * std::sin(theta), 0.0, s * std::sin(theta), s * std::cos(theta), 0.0, px, py, 1.0});
    return back * core * to_origin;
}

inline Capture random_capture(Rng& rng, int side, int condition_count, const CaptureJitter& j = {})
{
    Capture cap;
    cap.homography = jitter_homography(rng, side, j);
    cap.condition = condition_count > 0 ? uniform_int(rng, 0, condition_count - 1) : 0;
    cap.noise_seed = rng();
    cap.noise_sigma = j.noise_sigma;
    return cap;
}

inline Image capture_noise(const Capture& cap, int side)
{
    Image noise(side, side, 0.0);
    if (cap.noise_sigma <= 0.0) {
        return noise;
    }
    Rng rng(cap.noise_seed);
    std::normal_distribution<double> n(0.0, cap.noise_sigma);
    for (auto& v : noise.data) {
        v = n(rng);
    }
    return noise;
}

namespace detail {

inline Image composite_impl(const PatternGrid& grid, const SignTemplate& tmpl, const Homography& h,
                            const ColorModel& color, const Image* additive, CompositeCache* cache)
{
    tmpl.validate();
    CompositeCache local;
    CompositeCache& c = cache ? *cache : local;
    c.plan = make_warp_plan(h, tmpl.side, tmpl.side, tmpl.side, tmpl.side);
    c.warped = warp(c.plan, compose_sign(render_pattern(grid, tmpl.side), tmpl));
    c.pre_clip = color.apply(c.warped);
    if (additive) {
        for (std::size_t i = 0; i < c.pre_clip.size(); ++i) {
            c.pre_clip.data[i] += additive->data[i];
        }
    }
    Image out = c.pre_clip;
    for (auto& v : out.data) {
        v = std::clamp(v, 0.0, 1.0);
    }
    return out;
}

} // namespace detail

/// Pattern -> sign -> warp by `h` -> color model -> clip to [0,1].
inline Image composite(const PatternGrid& grid, const SignTemplate& tmpl, const Homography& h, const ColorModel& color,
                       CompositeCache* cache = nullptr)
{
    return detail::composite_impl(grid, tmpl, h, color, nullptr, cache);
}

/// d(loss)/d(grid params) from d(loss)/d(composite output).
inline std::vector<double> composite_backward(const CompositeCache& cache, const PatternGrid& grid,
                                              const SignTemplate& tmpl, const ColorModel& color,
                                              const Image& grad_out,
                                              ClipGradient clip_mode = ClipGradient::straight_through)
{
    Image grad_warped(tmpl.side, tmpl.side, 0.0);
    for (int y = 0; y < tmpl.side; ++y) {
        for (int x = 0; x < tmpl.side; ++x) {
            Rgb dout{};
            bool nonzero = false;
            for (int c = 0; c < 3; ++c) {
                double g = grad_out.at(c, y, x);
                if (clip_mode == ClipGradient::exact) {
                    const double v = cache.pre_clip.at(c, y, x);
                    if (v < 0.0 || v > 1.0) {
                        g = 0.0;
                    }
                }
                dout[c] = g;
                nonzero = nonzero || g != 0.0;
            }
            if (nonzero) {
                grad_warped.set_pixel(y, x, color.backward(cache.warped.pixel(y, x), dout));
            }
        }
    }
    Image grad_sign = warp_backward(cache.plan, grad_warped);
    Image grad_pattern(tmpl.side, tmpl.side, 0.0);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < tmpl.side; ++y) {
            for (int x = 0; x < tmpl.side; ++x) {
                if (tmpl.background.at(y, x)) {
                    grad_pattern.at(c, y, x) = grad_sign.at(c, y, x);
                }
            }
        }
    }
    return render_pattern_backward(grid, grad_pattern);
}

/// composite() for a concrete capture: lighting condition picked from `conditions`,
/// sensor noise added before the clip.
inline Image capture_image(const PatternGrid& grid, const SignTemplate& tmpl, const Capture& cap,
                           const std::vector<ColorModel>& conditions, CompositeCache* cache = nullptr)
{
    if (cap.condition < 0 || cap.condition >= static_cast<int>(conditions.size())) {
        throw ValidationError("capture references unknown lighting condition " + std::to_string(cap.condition));
    }
    const Image noise = capture_noise(cap, tmpl.side);
    return detail::composite_impl(grid, tmpl, cap.homography, conditions[cap.condition], &noise, cache);
}

} // namespace red

#endif // RED_COMPOSITING_HPP
