#ifndef RED_MODEL_HPP
#define RED_MODEL_HPP

// Road-sign classifier: a small CNN (3x3 same-padded conv -> ReLU -> 2x2 max-pool blocks,
// then an optional ReLU hidden layer and a K-way linear output), cross-entropy loss,
// optimizers, and clean training on ablated images.

#include "red/ablation.hpp"
#include "red/core.hpp"
#include "red/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace red {

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

struct Architecture {
    int side = 30;
    int classes = 2;
    std::vector<int> conv_channels{16, 32};
    int hidden = 64;

    void validate() const
    {
        if (classes < 2) {
            throw ValidationError("classifier needs at least 2 classes");
        }
        int s = side;
        for (int c : conv_channels) {
            if (c < 1) {
                throw ValidationError("conv channel counts must be positive");
            }
            s /= 2;
        }
        if (s < 1) {
            throw ValidationError("input side " + std::to_string(side) + " too small for "
                                  + std::to_string(conv_channels.size()) + " pooling stages");
        }
        if (hidden < 0) {
            throw ValidationError("hidden width must be >= 0");
        }
    }

    [[nodiscard]] std::string str() const
    {
        std::ostringstream os;
        os << "side=" << side << ";classes=" << classes << ";conv=";
        for (std::size_t i = 0; i < conv_channels.size(); ++i) {
            os << (i ? "," : "") << conv_channels[i];
        }
        os << ";hidden=" << hidden;
        return os.str();
    }

    bool operator==(const Architecture&) const = default;
};

/// Numerically stable -log softmax(logits)[y].
inline double xent(std::span<const double> logits, int y)
{
    if (y < 0 || static_cast<std::size_t>(y) >= logits.size()) {
        throw ValidationError("label out of range for logits");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) {
        sum += std::exp(l - mx);
    }
    return std::log(sum) + mx - logits[y];
}

/// softmax(logits) - onehot(y)
inline std::vector<double> xent_grad(std::span<const double> logits, int y)
{
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> g(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        g[i] = std::exp(logits[i] - mx);
        sum += g[i];
    }
    for (auto& v : g) {
        v /= sum;
    }
    g[y] -= 1.0;
    return g;
}

inline int argmax(std::span<const double> v)
{
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Scratch buffers for one forward/backward pass. Reusable across calls on the same architecture.
struct Workspace {
    std::vector<std::vector<double>> padded; // block input, zero border: C x (H+2) x (W+2)
    std::vector<std::vector<double>> conv;   // pre-activation: C x H x W
    std::vector<std::vector<double>> pooled; // C x H/2 x W/2
    std::vector<std::vector<int>> pool_arg;  // conv index of each pooled max
    std::vector<double> input; // flattened input when there are no conv blocks
    std::vector<double> hidden_pre;
    std::vector<double> hidden;
    std::vector<double> logits;

    std::vector<double> grad_pooled;
    std::vector<double> grad_conv;
    std::vector<double> grad_conv_padded;
    std::vector<double> grad_padded;
    std::vector<double> grad_hidden;
    std::vector<double> acc;
};

class Classifier {
public:
    struct Block {
        int in_channels, out_channels, height, width; // input spatial size
        std::size_t weight_offset, bias_offset;
    };

    Classifier() = default;

    Classifier(Architecture arch, std::uint64_t seed) : arch_(std::move(arch))
    {
        arch_.validate();
        layout();
        Rng rng(seed);
        for (const auto& b : blocks_) {
            std::normal_distribution<double> n(0.0, std::sqrt(2.0 / (b.in_channels * 9.0)));
            for (std::size_t i = 0; i < static_cast<std::size_t>(b.out_channels) * b.in_channels * 9; ++i) {
                params_[b.weight_offset + i] = n(rng);
            }
        }
        const int h = arch_.hidden;
        if (h > 0) {
            std::normal_distribution<double> n1(0.0, std::sqrt(2.0 / flat_));
            for (std::size_t i = 0; i < static_cast<std::size_t>(h) * flat_; ++i) {
                params_[hidden_w_ + i] = n1(rng);
            }
        }
        const int in = h > 0 ? h : flat_;
        std::normal_distribution<double> n2(0.0, std::sqrt(1.0 / in));
        for (std::size_t i = 0; i < static_cast<std::size_t>(arch_.classes) * in; ++i) {
            params_[out_w_ + i] = n2(rng);
        }
    }

    /// Builds a classifier around existing parameters (checkpoint loading).
    static Classifier from_params(Architecture arch, std::vector<double> params)
    {
        Classifier f;
        f.arch_ = std::move(arch);
        f.arch_.validate();
        f.layout();
        if (params.size() != f.params_.size()) {
            throw ValidationError("parameter count " + std::to_string(params.size()) + " does not match architecture ("
                                  + std::to_string(f.params_.size()) + ")");
        }
        f.params_ = std::move(params);
        return f;
    }

    [[nodiscard]] const Architecture& arch() const noexcept { return arch_; }
    [[nodiscard]] int classes() const noexcept { return arch_.classes; }
    [[nodiscard]] int side() const noexcept { return arch_.side; }
    [[nodiscard]] std::size_t param_count() const noexcept { return params_.size(); }
    std::span<double> params() noexcept { return params_; }
    [[nodiscard]] std::span<const double> params() const noexcept { return params_; }

    [[nodiscard]] std::vector<double> forward(const Image& x) const
    {
        Workspace ws;
        const auto l = forward(x, ws);
        return {l.begin(), l.end()};
    }

    [[nodiscard]] int predict(const Image& x) const { return argmax(forward(x)); }

    std::span<const double> forward(const Image& x, Workspace& ws) const
    {
        if (x.height != arch_.side || x.width != arch_.side) {
            throw ValidationError("input is " + std::to_string(x.height) + "x" + std::to_string(x.width)
                                  + ", classifier expects " + std::to_string(arch_.side) + "x"
                                  + std::to_string(arch_.side));
        }
        prepare(ws);
        if (blocks_.empty()) {
            ws.input = x.data;
        } else {
            // Copy the input into the zero-padded buffer of block 0.
            const auto& b = blocks_.front();
            const int wp = b.width + 2;
            auto& pad = ws.padded[0];
            for (int c = 0; c < b.in_channels; ++c) {
                for (int y = 0; y < b.height; ++y) {
                    const double* src = x.data.data() + (static_cast<std::size_t>(c) * b.height + y) * b.width;
                    std::copy(src, src + b.width, pad.data() + (static_cast<std::size_t>(c) * (b.height + 2) + y + 1) * wp + 1);
                }
            }
        }
        for (std::size_t k = 0; k < blocks_.size(); ++k) {
            const auto& b = blocks_[k];
            conv_forward(b, ws.padded[k].data(), ws.conv[k].data());
            const int ph = b.height / 2;
            const int pw = b.width / 2;
            pool_forward(b, ws.conv[k].data(), ws.pooled[k].data(), ws.pool_arg[k].data());
            if (k + 1 < blocks_.size()) {
                auto& next = ws.padded[k + 1];
                const int wp = pw + 2;
                for (int c = 0; c < b.out_channels; ++c) {
                    for (int y = 0; y < ph; ++y) {
                        const double* src = ws.pooled[k].data() + (static_cast<std::size_t>(c) * ph + y) * pw;
                        std::copy(src, src + pw, next.data() + (static_cast<std::size_t>(c) * (ph + 2) + y + 1) * wp + 1);
                    }
                }
            }
        }
        const std::vector<double>& flat = features(ws);
        const int h = arch_.hidden;
        const double* out_in = flat.data();
        int out_in_size = flat_;
        if (h > 0) {
            for (int o = 0; o < h; ++o) {
                ws.hidden_pre[o] = params_[hidden_b_ + o] + dot(&params_[hidden_w_ + static_cast<std::size_t>(o) * flat_], flat.data(), flat_);
                ws.hidden[o] = ws.hidden_pre[o] > 0.0 ? ws.hidden_pre[o] : 0.0;
            }
            out_in = ws.hidden.data();
            out_in_size = h;
        }
        for (int o = 0; o < arch_.classes; ++o) {
            ws.logits[o] = params_[out_b_ + o] + dot(&params_[out_w_ + static_cast<std::size_t>(o) * out_in_size], out_in, out_in_size);
        }
        return ws.logits;
    }

    /// Backpropagates d(loss)/d(logits) through the pass stored in `ws`.
    /// Parameter gradients are accumulated into `param_grad` (skipped when empty);
    /// the input gradient is written to `grad_input` when non-null.
    void backward(Workspace& ws, std::span<const double> dlogits, std::span<double> param_grad, Image* grad_input) const
    {
        const bool want_params = !param_grad.empty();
        if (want_params && param_grad.size() != params_.size()) {
            throw ValidationError("gradient buffer size mismatch");
        }
        const int h = arch_.hidden;
        const int out_in_size = h > 0 ? h : flat_;
        const double* out_in = h > 0 ? ws.hidden.data() : features(ws).data();

        auto& gflat = ws.grad_pooled;
        gflat.assign(flat_, 0.0);
        if (h > 0) {
            ws.grad_hidden.assign(h, 0.0);
            for (int o = 0; o < arch_.classes; ++o) {
                const double g = dlogits[o];
                if (want_params) {
                    param_grad[out_b_ + o] += g;
                    axpy(g, out_in, &param_grad[out_w_ + static_cast<std::size_t>(o) * out_in_size], out_in_size);
                }
                axpy(g, &params_[out_w_ + static_cast<std::size_t>(o) * out_in_size], ws.grad_hidden.data(), out_in_size);
            }
            for (int j = 0; j < h; ++j) {
                const double g = ws.hidden_pre[j] > 0.0 ? ws.grad_hidden[j] : 0.0;
                if (g == 0.0) {
                    continue;
                }
                if (want_params) {
                    param_grad[hidden_b_ + j] += g;
                    axpy(g, features(ws).data(), &param_grad[hidden_w_ + static_cast<std::size_t>(j) * flat_], flat_);
                }
                axpy(g, &params_[hidden_w_ + static_cast<std::size_t>(j) * flat_], gflat.data(), flat_);
            }
        } else {
            for (int o = 0; o < arch_.classes; ++o) {
                const double g = dlogits[o];
                if (want_params) {
                    param_grad[out_b_ + o] += g;
                    axpy(g, out_in, &param_grad[out_w_ + static_cast<std::size_t>(o) * out_in_size], out_in_size);
                }
                axpy(g, &params_[out_w_ + static_cast<std::size_t>(o) * out_in_size], gflat.data(), out_in_size);
            }
        }

        if (blocks_.empty()) {
            if (grad_input) {
                grad_input->height = arch_.side;
                grad_input->width = arch_.side;
                grad_input->data = gflat;
            }
            return;
        }
        // gflat now holds d/d(pooled output of the last block).
        for (std::size_t kk = blocks_.size(); kk-- > 0;) {
            const auto& b = blocks_[kk];
            const bool need_input_grad = kk > 0 || grad_input != nullptr;
            const std::size_t conv_size = static_cast<std::size_t>(b.out_channels) * b.height * b.width;
            ws.grad_conv.assign(conv_size, 0.0);
            const auto& arg = ws.pool_arg[kk];
            const auto& conv = ws.conv[kk];
            for (std::size_t i = 0; i < arg.size(); ++i) {
                const int src = arg[i];
                if (conv[src] > 0.0) {
                    ws.grad_conv[src] += ws.grad_pooled[i];
                }
            }
            if (want_params) {
                conv_weight_grad(b, ws.padded[kk].data(), ws.grad_conv.data(), param_grad, ws.acc);
            }
            if (!need_input_grad) {
                break;
            }
            conv_input_grad(b, ws.grad_conv.data(), ws);
            // ws.grad_padded: in_channels x height x width (unpadded)
            if (kk > 0) {
                ws.grad_pooled.swap(ws.grad_padded);
            } else {
                grad_input->height = b.height;
                grad_input->width = b.width;
                grad_input->data.assign(ws.grad_padded.begin(), ws.grad_padded.end());
            }
        }
    }

    /// Forward + cross-entropy + backward. Gradients are scaled by `weight`. Returns the unscaled loss.
    double loss_grad(const Image& x, int y, Workspace& ws, std::span<double> param_grad, Image* grad_input,
                     double weight = 1.0) const
    {
        const auto logits = forward(x, ws);
        const double loss = xent(logits, y);
        auto g = xent_grad(logits, y);
        for (auto& v : g) {
            v *= weight;
        }
        backward(ws, g, param_grad, grad_input);
        return loss;
    }

    [[nodiscard]] const std::vector<Block>& blocks() const noexcept { return blocks_; }

    bool operator==(const Classifier& other) const { return arch_ == other.arch_ && params_ == other.params_; }

private:
    const std::vector<double>& features(const Workspace& ws) const
    {
        return blocks_.empty() ? ws.input : ws.pooled.back();
    }

    static double dot(const double* a, const double* b, int n) noexcept
    {
        double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
        int i = 0;
        for (; i + 4 <= n; i += 4) {
            s0 += a[i] * b[i];
            s1 += a[i + 1] * b[i + 1];
            s2 += a[i + 2] * b[i + 2];
            s3 += a[i + 3] * b[i + 3];
        }
        for (; i < n; ++i) {
            s0 += a[i] * b[i];
        }
        return (s0 + s1) + (s2 + s3);
    }

    static void axpy(double a, const double* x, double* y, int n) noexcept
    {
        for (int i = 0; i < n; ++i) {
            y[i] += a * x[i];
        }
    }

    void layout()
    {
        blocks_.clear();
        std::size_t off = 0;
        int c = Image::channels;
        int s = arch_.side;
        for (int oc : arch_.conv_channels) {
            Block b{c, oc, s, s, off, off + static_cast<std::size_t>(oc) * c * 9};
            off = b.bias_offset + oc;
            blocks_.push_back(b);
            c = oc;
            s /= 2;
        }
        flat_ = c * s * s;
        hidden_w_ = off;
        if (arch_.hidden > 0) {
            hidden_b_ = hidden_w_ + static_cast<std::size_t>(arch_.hidden) * flat_;
            off = hidden_b_ + arch_.hidden;
        } else {
            hidden_b_ = off;
        }
        const int in = arch_.hidden > 0 ? arch_.hidden : flat_;
        out_w_ = off;
        out_b_ = out_w_ + static_cast<std::size_t>(arch_.classes) * in;
        off = out_b_ + arch_.classes;
        params_.assign(off, 0.0);
    }

    void prepare(Workspace& ws) const
    {
        const std::size_t n = blocks_.size();
        if (ws.padded.size() != n || ws.logits.size() != static_cast<std::size_t>(arch_.classes)
            || ws.hidden.size() != static_cast<std::size_t>(std::max(arch_.hidden, 0))
            || (n > 0 && ws.padded[0].size() != static_cast<std::size_t>(blocks_[0].in_channels) * (blocks_[0].height + 2) * (blocks_[0].width + 2))) {
            ws = Workspace{};
            ws.padded.resize(n);
            ws.conv.resize(n);
            ws.pooled.resize(n);
            ws.pool_arg.resize(n);
            for (std::size_t k = 0; k < n; ++k) {
                const auto& b = blocks_[k];
                ws.padded[k].assign(static_cast<std::size_t>(b.in_channels) * (b.height + 2) * (b.width + 2), 0.0);
                ws.conv[k].assign(static_cast<std::size_t>(b.out_channels) * b.height * b.width, 0.0);
                const std::size_t pn = static_cast<std::size_t>(b.out_channels) * (b.height / 2) * (b.width / 2);
                ws.pooled[k].assign(pn, 0.0);
                ws.pool_arg[k].assign(pn, 0);
            }
            ws.hidden_pre.assign(std::max(arch_.hidden, 0), 0.0);
            ws.hidden.assign(std::max(arch_.hidden, 0), 0.0);
            ws.logits.assign(arch_.classes, 0.0);
        }
    }

    void conv_forward(const Block& b, const double* in, double* out) const noexcept
    {
        const int H = b.height, W = b.width, Wp = W + 2;
        const std::size_t in_plane = static_cast<std::size_t>(H + 2) * Wp;
        for (int oc = 0; oc < b.out_channels; ++oc) {
            double* o = out + static_cast<std::size_t>(oc) * H * W;
            std::fill(o, o + static_cast<std::size_t>(H) * W, params_[b.bias_offset + oc]);
            for (int ic = 0; ic < b.in_channels; ++ic) {
                const double* w = &params_[b.weight_offset + (static_cast<std::size_t>(oc) * b.in_channels + ic) * 9];
                const double w0 = w[0], w1 = w[1], w2 = w[2], w3 = w[3], w4 = w[4], w5 = w[5], w6 = w[6], w7 = w[7], w8 = w[8];
                const double* src = in + ic * in_plane;
                for (int y = 0; y < H; ++y) {
                    const double* r0 = src + static_cast<std::size_t>(y) * Wp;
                    const double* r1 = r0 + Wp;
                    const double* r2 = r1 + Wp;
                    double* d = o + static_cast<std::size_t>(y) * W;
                    for (int x = 0; x < W; ++x) {
                        d[x] += w0 * r0[x] + w1 * r0[x + 1] + w2 * r0[x + 2] + w3 * r1[x] + w4 * r1[x + 1] + w5 * r1[x + 2]
                              + w6 * r2[x] + w7 * r2[x + 1] + w8 * r2[x + 2];
                    }
                }
            }
        }
    }

    // ReLU fused into the pool: pooled = max(0, max window); arg is the first maximal element.
    static void pool_forward(const Block& b, const double* conv, double* pooled, int* arg) noexcept
    {
        const int H = b.height, W = b.width, ph = H / 2, pw = W / 2;
        for (int c = 0; c < b.out_channels; ++c) {
            const std::size_t base = static_cast<std::size_t>(c) * H * W;
            for (int y = 0; y < ph; ++y) {
                for (int x = 0; x < pw; ++x) {
                    std::size_t best = base + static_cast<std::size_t>(2 * y) * W + 2 * x;
                    const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
                    for (std::size_t cidx : cand) {
                        if (conv[cidx] > conv[best]) {
                            best = cidx;
                        }
                    }
                    const std::size_t o = (static_cast<std::size_t>(c) * ph + y) * pw + x;
                    pooled[o] = conv[best] > 0.0 ? conv[best] : 0.0;
                    arg[o] = static_cast<int>(best);
                }
            }
        }
    }

    void conv_weight_grad(const Block& b, const double* in, const double* gout, std::span<double> grad,
                          std::vector<double>& acc) const
    {
        const int H = b.height, W = b.width, Wp = W + 2;
        const std::size_t in_plane = static_cast<std::size_t>(H + 2) * Wp;
        acc.assign(static_cast<std::size_t>(9) * W, 0.0);
        for (int oc = 0; oc < b.out_channels; ++oc) {
            const double* g = gout + static_cast<std::size_t>(oc) * H * W;
            double bias_sum = 0.0;
            for (int i = 0; i < H * W; ++i) {
                bias_sum += g[i];
            }
            grad[b.bias_offset + oc] += bias_sum;
            for (int ic = 0; ic < b.in_channels; ++ic) {
                std::fill(acc.begin(), acc.end(), 0.0);
                const double* src = in + ic * in_plane;
                double* a = acc.data();
                for (int y = 0; y < H; ++y) {
                    const double* gr = g + static_cast<std::size_t>(y) * W;
                    const double* r0 = src + static_cast<std::size_t>(y) * Wp;
                    const double* r1 = r0 + Wp;
                    const double* r2 = r1 + Wp;
                    for (int x = 0; x < W; ++x) {
                        const double gv = gr[x];
                        a[x] += gv * r0[x];
                        a[W + x] += gv * r0[x + 1];
                        a[2 * W + x] += gv * r0[x + 2];
                        a[3 * W + x] += gv * r1[x];
                        a[4 * W + x] += gv * r1[x + 1];
                        a[5 * W + x] += gv * r1[x + 2];
                        a[6 * W + x] += gv * r2[x];
                        a[7 * W + x] += gv * r2[x + 1];
                        a[8 * W + x] += gv * r2[x + 2];
                    }
                }
                double* gw = &grad[b.weight_offset + (static_cast<std::size_t>(oc) * b.in_channels + ic) * 9];
                for (int k = 0; k < 9; ++k) {
                    double s = 0.0;
                    for (int x = 0; x < W; ++x) {
                        s += a[k * W + x];
                    }
                    gw[k] += s;
                }
            }
        }
    }

    // Input gradient as a correlation of the zero-padded output gradient with the flipped kernel.
    void conv_input_grad(const Block& b, const double* gout, Workspace& ws) const
    {
        const int H = b.height, W = b.width, Wp = W + 2;
        ws.grad_conv_padded.assign(static_cast<std::size_t>(b.out_channels) * (H + 2) * Wp, 0.0);
        for (int oc = 0; oc < b.out_channels; ++oc) {
            for (int y = 0; y < H; ++y) {
                const double* src = gout + (static_cast<std::size_t>(oc) * H + y) * W;
                std::copy(src, src + W, ws.grad_conv_padded.data() + (static_cast<std::size_t>(oc) * (H + 2) + y + 1) * Wp + 1);
            }
        }
        ws.grad_padded.assign(static_cast<std::size_t>(b.in_channels) * H * W, 0.0);
        const std::size_t gplane = static_cast<std::size_t>(H + 2) * Wp;
        for (int ic = 0; ic < b.in_channels; ++ic) {
            double* o = ws.grad_padded.data() + static_cast<std::size_t>(ic) * H * W;
            for (int oc = 0; oc < b.out_channels; ++oc) {
                const double* w = &params_[b.weight_offset + (static_cast<std::size_t>(oc) * b.in_channels + ic) * 9];
                // flipped kernel
                const double w0 = w[8], w1 = w[7], w2 = w[6], w3 = w[5], w4 = w[4], w5 = w[3], w6 = w[2], w7 = w[1], w8 = w[0];
                const double* src = ws.grad_conv_padded.data() + oc * gplane;
                for (int y = 0; y < H; ++y) {
                    const double* r0 = src + static_cast<std::size_t>(y) * Wp;
                    const double* r1 = r0 + Wp;
                    const double* r2 = r1 + Wp;
                    double* d = o + static_cast<std::size_t>(y) * W;
                    for (int x = 0; x < W; ++x) {
                        d[x] += w0 * r0[x] + w1 * r0[x + 1] + w2 * r0[x + 2] + w3 * r1[x] + w4 * r1[x + 1] + w5 * r1[x + 2]
                              + w6 * r2[x] + w7 * r2[x + 1] + w8 * r2[x + 2];
                    }
                }
            }
        }
    }

    Architecture arch_;
    std::vector<double> params_;
    std::vector<Block> blocks_;
    int flat_ = 0;
    std::size_t hidden_w_ = 0, hidden_b_ = 0, out_w_ = 0, out_b_ = 0;
};

// ---------------------------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s)
{
    if (s == "sgd") {
        return OptimizerKind::sgd;
    }
    if (s == "adam") {
        return OptimizerKind::adam;
    }
    throw ParseError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

inline const char* to_string(OptimizerKind k) noexcept { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

/// Momentum SGD or Adam over a flat parameter vector.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, double momentum = 0.9) : kind_(kind), lr_(lr), momentum_(momentum) {}

    void step(std::span<double> params, std::span<const double> grad)
    {
        if (m_.size() != params.size()) {
            m_.assign(params.size(), 0.0);
            v_.assign(params.size(), 0.0);
            t_ = 0;
        }
        ++t_;
        if (kind_ == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i] = momentum_ * m_[i] + grad[i];
                params[i] -= lr_ * m_[i];
            }
            return;
        }
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, t_);
        const double c2 = 1.0 - std::pow(b2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = b1 * m_[i] + (1 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1 - b2) * grad[i] * grad[i];
            params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
        }
    }

private:
    OptimizerKind kind_;
    double lr_;
    double momentum_;
    std::vector<double> m_, v_;
    int t_ = 0;
};

// ---------------------------------------------------------------------------------------------
// Clean training
// ---------------------------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 20;
    int batch_size = 16;
    double lr_model = 1e-2;
    double lr_pattern = 5e-2;
    std::uint64_t seed = 0;
    AblationSpec ablation{AblationKind::tile, 10, 1, 0};
    OptimizerKind optimizer = OptimizerKind::sgd;
    OptimizerKind pattern_optimizer = OptimizerKind::adam;
    /// Ablations sampled per example per epoch; 0 uses the whole family.
    int ablations_per_example = 0;

    void validate() const
    {
        if (epochs < 0 || batch_size < 1 || ablations_per_example < 0) {
            throw ValidationError("train config: epochs >= 0, batch size >= 1, ablations per example >= 0");
        }
        if (!(lr_model > 0) || !(lr_pattern > 0)) {
            throw ValidationError("train config: learning rates must be positive");
        }
    }
};

struct TrainResult {
    Classifier model;
    std::vector<double> loss_trace; // mean per-ablation loss of each epoch
};

/// Per-example ablation sampler shared by clean and pattern training.
class AblationSampler {
public:
    AblationSampler(const AblationSpec& spec, int side, int per_example) : spec_(spec), side_(side), per_example_(per_example)
    {
        spec_.validate(side);
        if (spec_.kind != AblationKind::random) {
            family_ = ablation_family(spec_, side, side);
        }
    }

    /// Masks for one example; random kinds and subsampling draw from `rng`.
    std::vector<Mask> draw(Rng& rng) const
    {
        if (spec_.kind == AblationKind::random) {
            const int m = per_example_ > 0 ? per_example_ : spec_.count;
            std::vector<Mask> out;
            out.reserve(m);
            for (int i = 0; i < m; ++i) {
                out.push_back(random_keep_mask(side_, side_, spec_.size, rng));
            }
            return out;
        }
        if (per_example_ == 0 || per_example_ >= static_cast<int>(family_.size())) {
            return family_;
        }
        std::vector<int> idx(family_.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<Mask> out;
        for (int i = 0; i < per_example_; ++i) {
            const int j = uniform_int(rng, i, static_cast<int>(idx.size()) - 1);
            std::swap(idx[i], idx[j]);
            out.push_back(family_[idx[i]]);
        }
        return out;
    }

    [[nodiscard]] const std::vector<Mask>& family() const noexcept { return family_; }

private:
    AblationSpec spec_;
    int side_;
    int per_example_;
    std::vector<Mask> family_;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, i - 1)(rng));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

/// Minimizes sum_i sum_{s in g(X_i)} L(f(s), y_i) over the model parameters only.
inline TrainResult train_clean(Classifier f, const Dataset& data, const AblationSpec& ablation, const TrainConfig& cfg)
{
    cfg.validate();
    if (data.empty()) {
        throw ValidationError("cannot train on an empty dataset");
    }
    if (data.side != f.side()) {
        throw ValidationError("dataset side does not match classifier input side");
    }
    AblationSampler sampler(ablation, data.side, cfg.ablations_per_example);
    Optimizer opt(cfg.optimizer, cfg.lr_model);
    std::vector<double> grad(f.param_count());
    Workspace ws;
    TrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        const auto order = shuffled_indices(data.size(), rng);
        double epoch_loss = 0.0;
        std::size_t terms = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            std::vector<std::vector<Mask>> masks;
            std::size_t batch_terms = 0;
            for (std::size_t i = start; i < end; ++i) {
                masks.push_back(sampler.draw(rng));
                batch_terms += masks.back().size();
            }
            const double weight = 1.0 / static_cast<double>(batch_terms);
            for (std::size_t i = start; i < end; ++i) {
                const auto& ex = data.examples[order[i]];
                for (const Mask& m : masks[i - start]) {
                    const double l = f.loss_grad(apply_mask(ex.image, m), ex.label, ws, grad, nullptr, weight);
                    if (!std::isfinite(l)) {
                        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", example "
                                               + std::to_string(order[i]));
                    }
                    epoch_loss += l;
                    ++terms;
                }
            }
            opt.step(f.params(), grad);
        }
        result.loss_trace.push_back(epoch_loss / static_cast<double>(terms));
        for (double v : f.params()) {
            if (!std::isfinite(v)) {
                throw TrainingDiverged("non-finite model parameter after epoch " + std::to_string(epoch));
            }
        }
    }
    result.model = std::move(f);
    return result;
}

} // namespace red

#endif // RED_MODEL_HPP
