// Victim classifiers: the gradient-oracle contract, two reference models with
// hand-written gradients, finite-difference checking, training, ensembles and
// checkpoints.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "freqattack/dataset.hpp"
#include "freqattack/errors.hpp"
#include "freqattack/imaging.hpp"
#include "freqattack/random.hpp"
#include "freqattack/spectral.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

inline constexpr double kProbabilityClamp = 1e-12;

inline double sigmoid(double z) noexcept {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Binary cross-entropy of a logit with probabilities clamped to
/// [1e-12, 1 - 1e-12]. loss(z, fake) == loss(-z, real) exactly.
inline double bce_loss(double logit, Label label) {
    if (!std::isfinite(logit)) throw NumericError("bce_loss: non-finite logit");
    const double p = sigmoid(label == Label::fake ? logit : -logit);
    return -std::log(std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp));
}

/// d bce / d logit.
inline double bce_dlogit(double logit, Label label) noexcept { return sigmoid(logit) - to_target(label); }

inline Label predict_from_logit(double logit) noexcept { return logit > 0.0 ? Label::fake : Label::real; }

struct Evaluation {
    double logit = 0.0;
    double loss = 0.0;
    Label predicted = Label::real;
};

/// Victim-classifier contract used by every attack.
///
/// Inputs are plain tensors rather than Images so attacks can evaluate
/// unclipped intermediate iterates. Implementations are immutable after
/// construction and safe to call concurrently.
class GradientOracle {
public:
    virtual ~GradientOracle() = default;

    virtual Shape input_shape() const = 0;
    virtual double logit(const Tensor& x) const = 0;
    /// Gradient of the logit with respect to every input element.
    virtual Tensor logit_grad(const Tensor& x) const = 0;

    virtual Label predict(const Tensor& x) const { return predict_from_logit(logit(x)); }
    virtual double loss(const Tensor& x, Label label) const { return bce_loss(logit(x), label); }

    /// Gradient of loss(x, label) with respect to the input.
    virtual Tensor grad_input(const Tensor& x, Label label) const {
        Tensor g = logit_grad(x);
        g *= bce_dlogit(logit(x), label);
        if (!g.all_finite()) throw NumericError("grad_input: non-finite gradient");
        return g;
    }

    virtual Evaluation evaluate(const Tensor& x, Label label) const {
        const double z = logit(x);
        return {z, bce_loss(z, label), predict_from_logit(z)};
    }

protected:
    void require_input(const Tensor& x) const {
        if (x.shape() != input_shape()) {
            throw ShapeMismatch("model expects input " + input_shape().str() + ", got " + x.shape().str());
        }
    }
};

enum class ModelKind : std::uint32_t { linear_spectral = 1, tiny_cnn = 2 };

inline std::string_view to_string(ModelKind k) {
    return k == ModelKind::linear_spectral ? "linear_spectral" : "tiny_cnn";
}

inline ModelKind model_kind_from_string(std::string_view s) {
    if (s == "linear_spectral" || s == "linear") return ModelKind::linear_spectral;
    if (s == "tiny_cnn" || s == "cnn") return ModelKind::tiny_cnn;
    throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

/// A GradientOracle with a flat trainable parameter vector.
class DifferentiableModel : public GradientOracle {
public:
    virtual ModelKind kind() const = 0;
    /// Architecture integers written into checkpoint headers.
    virtual std::vector<std::int32_t> architecture() const = 0;
    virtual std::span<double> parameters() = 0;
    virtual std::span<const double> parameters() const = 0;
    /// Adds d loss / d parameters into grad and returns the loss.
    virtual double accumulate_param_grad(const Tensor& x, Label label, std::span<double> grad) const = 0;
    virtual std::unique_ptr<DifferentiableModel> clone() const = 0;
};

// ---------------------------------------------------------------------------
// LinearSpectralClassifier

/// logit = bias + mean over blocks of sum_{c,u,v} w[c][u][v] * D_block,c(u, v).
/// The logit is affine in the pixels.
class LinearSpectralClassifier final : public DifferentiableModel {
public:
    LinearSpectralClassifier(Shape input, int block_size)
        : input_(input), n_(block_size),
          params_(static_cast<std::size_t>(input.channels) * block_size * block_size + 1, 0.0) {
        require_divisible(input, block_size);
    }

    /// Small seeded normal weights, zero bias.
    static LinearSpectralClassifier random(Shape input, int block_size, std::uint64_t seed, double scale = 0.01) {
        LinearSpectralClassifier m(input, block_size);
        Rng rng(seed);
        auto p = m.parameters();
        for (std::size_t i = 0; i + 1 < p.size(); ++i) p[i] = scale * rng.normal();
        return m;
    }

    int block_size() const noexcept { return n_; }
    double weight(int c, int u, int v) const noexcept { return params_[slot(c, u, v)]; }
    double& weight(int c, int u, int v) noexcept { return params_[slot(c, u, v)]; }
    double bias() const noexcept { return params_.back(); }
    double& bias() noexcept { return params_.back(); }

    Shape input_shape() const override { return input_; }
    ModelKind kind() const override { return ModelKind::linear_spectral; }
    std::vector<std::int32_t> architecture() const override {
        return {input_.height, input_.width, input_.channels, n_};
    }
    std::span<double> parameters() override { return params_; }
    std::span<const double> parameters() const override { return params_; }
    std::unique_ptr<DifferentiableModel> clone() const override {
        return std::make_unique<LinearSpectralClassifier>(*this);
    }

    double logit(const Tensor& x) const override {
        require_input(x);
        const std::vector<double> feats = features(x);
        double z = params_.back();
        for (std::size_t k = 0; k < feats.size(); ++k) z += params_[k] * feats[k];
        return z;
    }

    /// Input-independent: tile-wise IDCT of the weight layout divided by the block count.
    Tensor logit_grad(const Tensor& x) const override {
        require_input(x);
        return pixel_weights();
    }

    Tensor pixel_weights() const {
        const int rows = input_.height / n_;
        const int cols = input_.width / n_;
        Spectrum spec(n_, rows, cols, input_.channels);
        const double inv_blocks = 1.0 / static_cast<double>(rows * cols);
        const std::size_t area = spec.tile_area();
        for (std::size_t t = 0; t < spec.tile_count(); ++t) {
            const std::size_t base = static_cast<std::size_t>(spec.tile_channel(t)) * area;
            auto tile = spec.tile(t);
            for (std::size_t k = 0; k < area; ++k) tile[k] = params_[base + k] * inv_blocks;
        }
        return inverse_spectrum(spec);
    }

    double accumulate_param_grad(const Tensor& x, Label label, std::span<double> grad) const override {
        require_input(x);
        const std::vector<double> feats = features(x);
        double z = params_.back();
        for (std::size_t k = 0; k < feats.size(); ++k) z += params_[k] * feats[k];
        const double dz = bce_dlogit(z, label);
        for (std::size_t k = 0; k < feats.size(); ++k) grad[k] += dz * feats[k];
        grad[feats.size()] += dz;
        return bce_loss(z, label);
    }

    /// Per-channel mean spectrum, flattened as [c][u][v].
    std::vector<double> features(const Tensor& x) const {
        const Spectrum spec = forward_spectrum(x, n_);
        const std::size_t area = spec.tile_area();
        std::vector<double> f(static_cast<std::size_t>(input_.channels) * area, 0.0);
        for (std::size_t t = 0; t < spec.tile_count(); ++t) {
            const std::size_t base = static_cast<std::size_t>(spec.tile_channel(t)) * area;
            auto tile = spec.tile(t);
            for (std::size_t k = 0; k < area; ++k) f[base + k] += tile[k];
        }
        const double inv = 1.0 / static_cast<double>(spec.block_count());
        for (double& v : f) v *= inv;
        return f;
    }

private:
    std::size_t slot(int c, int u, int v) const noexcept {
        return (static_cast<std::size_t>(c) * n_ + u) * n_ + v;
    }

    Shape input_;
    int n_;
    std::vector<double> params_;  // C*N*N weights then bias
};

// ---------------------------------------------------------------------------
// TinyCnnClassifier

/// conv3x3(C->8) -> ReLU -> avgpool2 -> conv3x3(8->16) -> ReLU -> avgpool2
/// -> global average pool -> affine -> logit. Convolutions use zero padding.
class TinyCnnClassifier final : public DifferentiableModel {
public:
    static constexpr int kC1 = 8;
    static constexpr int kC2 = 16;

    explicit TinyCnnClassifier(Shape input) : input_(input) {
        if (input.height % 4 != 0 || input.width % 4 != 0 || input.height < 4 || input.width < 4) {
            throw DimensionError("TinyCnn input sides must be positive multiples of 4, got " + input.str());
        }
        params_.assign(param_count(input.channels), 0.0);
    }

    /// He-normal convolution and affine weights, zero biases.
    static TinyCnnClassifier random(Shape input, std::uint64_t seed) {
        TinyCnnClassifier m(input);
        Rng rng(seed);
        const int c = input.channels;
        const double s1 = std::sqrt(2.0 / (9.0 * c));
        const double s2 = std::sqrt(2.0 / (9.0 * kC1));
        const double s3 = std::sqrt(1.0 / kC2);
        for (std::size_t i = 0; i < m.w1_size(); ++i) m.params_[m.w1_off() + i] = s1 * rng.normal();
        for (std::size_t i = 0; i < m.w2_size(); ++i) m.params_[m.w2_off() + i] = s2 * rng.normal();
        for (int i = 0; i < kC2; ++i) m.params_[m.fc_off() + i] = s3 * rng.normal();
        return m;
    }

    static std::size_t param_count(int channels) {
        return static_cast<std::size_t>(9) * channels * kC1 + kC1 + 9 * kC1 * kC2 + kC2 + kC2 + 1;
    }

    Shape input_shape() const override { return input_; }
    ModelKind kind() const override { return ModelKind::tiny_cnn; }
    std::vector<std::int32_t> architecture() const override {
        return {input_.height, input_.width, input_.channels, kC1, kC2};
    }
    std::span<double> parameters() override { return params_; }
    std::span<const double> parameters() const override { return params_; }
    std::unique_ptr<DifferentiableModel> clone() const override {
        return std::make_unique<TinyCnnClassifier>(*this);
    }

    double logit(const Tensor& x) const override {
        require_input(x);
        Activations a;
        return forward(x, a);
    }

    Tensor logit_grad(const Tensor& x) const override {
        require_input(x);
        Activations a;
        forward(x, a);
        Tensor dx(input_);
        backward(x, a, 1.0, nullptr, &dx);
        return dx;
    }

    Tensor grad_input(const Tensor& x, Label label) const override {
        require_input(x);
        Activations a;
        const double z = forward(x, a);
        Tensor dx(input_);
        backward(x, a, bce_dlogit(z, label), nullptr, &dx);
        if (!dx.all_finite()) throw NumericError("grad_input: non-finite gradient");
        return dx;
    }

    double accumulate_param_grad(const Tensor& x, Label label, std::span<double> grad) const override {
        require_input(x);
        Activations a;
        const double z = forward(x, a);
        backward(x, a, bce_dlogit(z, label), &grad, nullptr);
        return bce_loss(z, label);
    }

    /// On/off state of every ReLU unit; equal patterns at two inputs mean the
    /// network is a single affine-composed smooth piece between them.
    std::vector<bool> relu_pattern(const Tensor& x) const {
        require_input(x);
        Activations a;
        forward(x, a);
        std::vector<bool> p;
        p.reserve(a.pre1.size() + a.pre2.size());
        for (double v : a.pre1) p.push_back(v > 0.0);
        for (double v : a.pre2) p.push_back(v > 0.0);
        return p;
    }

private:
    struct Activations {
        std::vector<double> pre1;  // H x W x C1
        std::vector<double> pool1; // H/2 x W/2 x C1
        std::vector<double> pre2;  // H/2 x W/2 x C2
        std::vector<double> gap;   // C2
    };

    // Parameter layout (declaration order):
    //   w1[((ky*3+kx)*C + c)*C1 + o], b1[C1], w2[((ky*3+kx)*C1 + c)*C2 + o], b2[C2], fc[C2], fc_bias
    std::size_t w1_off() const noexcept { return 0; }
    std::size_t w1_size() const noexcept { return static_cast<std::size_t>(9) * input_.channels * kC1; }
    std::size_t b1_off() const noexcept { return w1_off() + w1_size(); }
    std::size_t w2_off() const noexcept { return b1_off() + kC1; }
    std::size_t w2_size() const noexcept { return static_cast<std::size_t>(9) * kC1 * kC2; }
    std::size_t b2_off() const noexcept { return w2_off() + w2_size(); }
    std::size_t fc_off() const noexcept { return b2_off() + kC2; }
    std::size_t fcb_off() const noexcept { return fc_off() + kC2; }

    // Same-padded 3x3 convolution, channel-last.
    static void conv3x3(const double* in, int h, int w, int cin, const double* weights, const double* bias,
                        int cout, double* out) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double* o = out + (static_cast<std::size_t>(y) * w + x) * cout;
                for (int k = 0; k < cout; ++k) o[k] = bias[k];
                for (int ky = 0; ky < 3; ++ky) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        const double* src = in + (static_cast<std::size_t>(sy) * w + sx) * cin;
                        const double* wk = weights + static_cast<std::size_t>(ky * 3 + kx) * cin * cout;
                        for (int c = 0; c < cin; ++c) {
                            const double s = src[c];
                            const double* wc = wk + static_cast<std::size_t>(c) * cout;
                            for (int k = 0; k < cout; ++k) o[k] += s * wc[k];
                        }
                    }
                }
            }
        }
    }

    // Backward of conv3x3: accumulates weight/bias gradients and, if din is
    // non-null, the input gradient.
    static void conv3x3_backward(const double* in, int h, int w, int cin, const double* weights, int cout,
                                 const double* dout, double* dweights, double* dbias, double* din) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double* go = dout + (static_cast<std::size_t>(y) * w + x) * cout;
                if (dbias) {
                    for (int k = 0; k < cout; ++k) dbias[k] += go[k];
                }
                for (int ky = 0; ky < 3; ++ky) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        const std::size_t src_off = (static_cast<std::size_t>(sy) * w + sx) * cin;
                        const std::size_t wk_off = static_cast<std::size_t>(ky * 3 + kx) * cin * cout;
                        for (int c = 0; c < cin; ++c) {
                            const std::size_t wc = wk_off + static_cast<std::size_t>(c) * cout;
                            if (dweights) {
                                const double s = in[src_off + c];
                                for (int k = 0; k < cout; ++k) dweights[wc + k] += s * go[k];
                            }
                            if (din) {
                                double acc = 0.0;
                                for (int k = 0; k < cout; ++k) acc += weights[wc + k] * go[k];
                                din[src_off + c] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    // 2x2 average pooling of relu(pre).
    static void relu_avgpool(const std::vector<double>& pre, int h, int w, int ch, std::vector<double>& out) {
        const int oh = h / 2;
        const int ow = w / 2;
        out.assign(static_cast<std::size_t>(oh) * ow * ch, 0.0);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double* p = pre.data() + (static_cast<std::size_t>(y) * w + x) * ch;
                double* o = out.data() + (static_cast<std::size_t>(y / 2) * ow + x / 2) * ch;
                for (int k = 0; k < ch; ++k) o[k] += 0.25 * (p[k] > 0.0 ? p[k] : 0.0);
            }
        }
    }

    double forward(const Tensor& x, Activations& a) const {
        const int h = input_.height;
        const int w = input_.width;
        const int c = input_.channels;
        const double* p = params_.data();
        a.pre1.assign(static_cast<std::size_t>(h) * w * kC1, 0.0);
        conv3x3(x.raw().data(), h, w, c, p + w1_off(), p + b1_off(), kC1, a.pre1.data());
        relu_avgpool(a.pre1, h, w, kC1, a.pool1);
        const int h2 = h / 2;
        const int w2 = w / 2;
        a.pre2.assign(static_cast<std::size_t>(h2) * w2 * kC2, 0.0);
        conv3x3(a.pool1.data(), h2, w2, kC1, p + w2_off(), p + b2_off(), kC2, a.pre2.data());
        std::vector<double> pool2;
        relu_avgpool(a.pre2, h2, w2, kC2, pool2);
        const int cells = (h2 / 2) * (w2 / 2);
        a.gap.assign(kC2, 0.0);
        for (int i = 0; i < cells; ++i) {
            for (int k = 0; k < kC2; ++k) a.gap[k] += pool2[static_cast<std::size_t>(i) * kC2 + k];
        }
        double z = p[fcb_off()];
        for (int k = 0; k < kC2; ++k) {
            a.gap[k] /= cells;
            z += p[fc_off() + k] * a.gap[k];
        }
        return z;
    }

    // Backpropagates dz (d objective / d logit).
    void backward(const Tensor& x, const Activations& a, double dz, std::span<double>* pgrad, Tensor* dx) const {
        const int h = input_.height;
        const int w = input_.width;
        const int c = input_.channels;
        const int h2 = h / 2;
        const int w2 = w / 2;
        const int cells = (h2 / 2) * (w2 / 2);
        const double* p = params_.data();
        double* g = pgrad ? pgrad->data() : nullptr;

        if (g) {
            for (int k = 0; k < kC2; ++k) g[fc_off() + k] += dz * a.gap[k];
            g[fcb_off()] += dz;
        }
        // d pre2: gap -> pool2 (1/cells) -> upsample (1/4) -> relu mask
        std::vector<double> dpre2(a.pre2.size());
        for (int y = 0; y < h2; ++y) {
            for (int xx = 0; xx < w2; ++xx) {
                const std::size_t off = (static_cast<std::size_t>(y) * w2 + xx) * kC2;
                for (int k = 0; k < kC2; ++k) {
                    dpre2[off + k] = a.pre2[off + k] > 0.0 ? dz * p[fc_off() + k] * 0.25 / cells : 0.0;
                }
            }
        }
        std::vector<double> dpool1(a.pool1.size(), 0.0);
        conv3x3_backward(a.pool1.data(), h2, w2, kC1, p + w2_off(), kC2, dpre2.data(), g ? g + w2_off() : nullptr,
                         g ? g + b2_off() : nullptr, dpool1.data());
        std::vector<double> dpre1(a.pre1.size());
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const std::size_t off = (static_cast<std::size_t>(y) * w + xx) * kC1;
                const std::size_t poff = (static_cast<std::size_t>(y / 2) * w2 + xx / 2) * kC1;
                for (int k = 0; k < kC1; ++k) {
                    dpre1[off + k] = a.pre1[off + k] > 0.0 ? 0.25 * dpool1[poff + k] : 0.0;
                }
            }
        }
        double* din = dx ? dx->values().data() : nullptr;
        conv3x3_backward(x.raw().data(), h, w, c, p + w1_off(), kC1, dpre1.data(), g ? g + w1_off() : nullptr,
                         g ? g + b1_off() : nullptr, din);
    }

    Shape input_;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Finite differences

struct FiniteDiffEntry {
    std::size_t index;
    double value;
};

/// Central differences (L(x + h e_i) - L(x - h e_i)) / 2h at each coordinate.
inline std::vector<FiniteDiffEntry> finite_diff_grad(const GradientOracle& model, const Tensor& x, Label label,
                                                     double h, std::span<const std::size_t> coords) {
    if (!(h > 0.0)) throw RangeError("finite_diff_grad: h must be > 0");
    std::vector<FiniteDiffEntry> out;
    out.reserve(coords.size());
    Tensor probe = x;
    for (std::size_t i : coords) {
        if (i >= x.size()) throw RangeError("finite_diff_grad: coordinate out of bounds");
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = model.loss(probe, label);
        probe[i] = orig - h;
        const double down = model.loss(probe, label);
        probe[i] = orig;
        out.push_back({i, (up - down) / (2.0 * h)});
    }
    return out;
}

/// |a - b| / max(|a|, |b|), zero when both vanish.
inline double relative_error(double a, double b) noexcept {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

// ---------------------------------------------------------------------------
// Training

enum class Optimizer { sgd, adam };

inline std::string_view to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }

inline Optimizer optimizer_from_string(std::string_view s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    throw ConfigError("unknown optimizer: " + std::string(s));
}

struct TrainOptions {
    int epochs = 100;
    double lr = 0.1;
    int batch_size = 0;  // 0 = full batch
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::sgd;
};

struct TrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double train_accuracy = 0.0;
    double holdout_accuracy = 0.0;
    int epochs_run = 0;
};

inline double accuracy(const GradientOracle& model, const LabeledDataset& data) {
    if (data.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& it : data.items) ok += model.predict(it.image) == it.label ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(data.size());
}

inline double mean_loss(const GradientOracle& model, const LabeledDataset& data) {
    double s = 0.0;
    for (const auto& it : data.items) s += model.loss(it.image, it.label);
    return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

/// Minibatch descent on mean BCE, plain or Adam (beta1 0.9, beta2 0.999).
/// Deterministic given options.seed.
inline TrainReport train(DifferentiableModel& model, const LabeledDataset& data, const LabeledDataset* holdout,
                         const TrainOptions& opt) {
    if (data.empty()) throw PreconditionError("train: empty dataset");
    if (data.count(Label::real) == 0 || data.count(Label::fake) == 0) {
        throw PreconditionError("train: dataset needs both labels");
    }
    if (opt.epochs < 0 || !(opt.lr >= 0.0)) throw ConfigError("train: invalid epochs or learning rate");

    TrainReport rep;
    rep.initial_loss = mean_loss(model, data);
    const std::size_t n = data.size();
    const std::size_t batch = opt.batch_size <= 0 ? n : std::min<std::size_t>(n, static_cast<std::size_t>(opt.batch_size));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(opt.seed);
    auto params = model.parameters();
    std::vector<double> grad(params.size());
    std::vector<double> m1(params.size(), 0.0), m2(params.size(), 0.0);
    double b1t = 1.0, b2t = 1.0;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t k = start; k < end; ++k) {
                const auto& it = data.items[order[k]];
                try {
                    epoch_loss += model.accumulate_param_grad(it.image, it.label, grad);
                } catch (const NumericError& e) {
                    throw DivergenceError("train: " + std::string(e.what()) + " at epoch " + std::to_string(epoch));
                }
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            if (opt.optimizer == Optimizer::sgd) {
                for (std::size_t j = 0; j < params.size(); ++j) params[j] -= opt.lr * inv * grad[j];
            } else {
                b1t *= 0.9;
                b2t *= 0.999;
                for (std::size_t j = 0; j < params.size(); ++j) {
                    const double g = grad[j] * inv;
                    m1[j] = 0.9 * m1[j] + 0.1 * g;
                    m2[j] = 0.999 * m2[j] + 0.001 * g * g;
                    params[j] -= opt.lr * (m1[j] / (1.0 - b1t)) / (std::sqrt(m2[j] / (1.0 - b2t)) + 1e-8);
                }
            }
        }
        if (!std::isfinite(epoch_loss)) throw DivergenceError("train: loss became non-finite at epoch " + std::to_string(epoch));
        for (double v : params) {
            if (!std::isfinite(v)) throw DivergenceError("train: parameters became non-finite at epoch " + std::to_string(epoch));
        }
        rep.epochs_run = epoch + 1;
    }
    rep.final_loss = mean_loss(model, data);
    rep.train_accuracy = accuracy(model, data);
    rep.holdout_accuracy = holdout ? accuracy(model, *holdout) : rep.train_accuracy;
    return rep;
}

// ---------------------------------------------------------------------------
// Ensembles

enum class EnsembleMode { pixel, loss, logits };

inline std::string_view to_string(EnsembleMode m) {
    switch (m) {
        case EnsembleMode::pixel: return "pixel";
        case EnsembleMode::loss: return "loss";
        case EnsembleMode::logits: return "logits";
    }
    return "logits";
}

inline EnsembleMode ensemble_mode_from_string(std::string_view s) {
    if (s == "pixel") return EnsembleMode::pixel;
    if (s == "loss") return EnsembleMode::loss;
    if (s == "logits") return EnsembleMode::logits;
    throw ConfigError("unknown ensemble mode '" + std::string(s) + "'");
}

/// Fuses member classifiers. logits: one BCE on the mean logit. loss: mean of
/// member losses and gradients. pixel: mean of member gradient signs, with the
/// mean member loss reported. All modes predict from the mean logit.
class EnsembleOracle final : public GradientOracle {
public:
    EnsembleOracle(std::vector<std::shared_ptr<const GradientOracle>> members, EnsembleMode mode)
        : members_(std::move(members)), mode_(mode) {
        if (members_.empty()) throw EmptyEnsemble("ensemble needs at least one member");
        for (const auto& m : members_) {
            if (!m) throw EmptyEnsemble("ensemble member is null");
            if (m->input_shape() != members_.front()->input_shape()) {
                throw ShapeMismatch("ensemble members disagree on input shape");
            }
        }
    }

    EnsembleMode mode() const noexcept { return mode_; }
    std::size_t size() const noexcept { return members_.size(); }

    Shape input_shape() const override { return members_.front()->input_shape(); }

    double logit(const Tensor& x) const override {
        double s = 0.0;
        for (const auto& m : members_) s += m->logit(x);
        return s / static_cast<double>(members_.size());
    }

    Tensor logit_grad(const Tensor& x) const override {
        Tensor g = members_.front()->logit_grad(x);
        for (std::size_t i = 1; i < members_.size(); ++i) g += members_[i]->logit_grad(x);
        g *= 1.0 / static_cast<double>(members_.size());
        return g;
    }

    double loss(const Tensor& x, Label label) const override {
        if (mode_ == EnsembleMode::logits) return bce_loss(logit(x), label);
        double s = 0.0;
        for (const auto& m : members_) s += m->loss(x, label);
        return s / static_cast<double>(members_.size());
    }

    Tensor grad_input(const Tensor& x, Label label) const override {
        if (mode_ == EnsembleMode::logits) return GradientOracle::grad_input(x, label);
        const bool signs = mode_ == EnsembleMode::pixel;
        Tensor g = member_grad(0, x, label, signs);
        for (std::size_t i = 1; i < members_.size(); ++i) g += member_grad(i, x, label, signs);
        g *= 1.0 / static_cast<double>(members_.size());
        return g;
    }

    Evaluation evaluate(const Tensor& x, Label label) const override {
        double zs = 0.0;
        double ls = 0.0;
        for (const auto& m : members_) {
            const double z = m->logit(x);
            zs += z;
            ls += bce_loss(z, label);
        }
        const double z = zs / static_cast<double>(members_.size());
        const double l = mode_ == EnsembleMode::logits ? bce_loss(z, label) : ls / static_cast<double>(members_.size());
        return {z, l, predict_from_logit(z)};
    }

private:
    Tensor member_grad(std::size_t i, const Tensor& x, Label label, bool signs) const {
        Tensor g = members_[i]->grad_input(x, label);
        return signs ? sign(g) : g;
    }

    std::vector<std::shared_ptr<const GradientOracle>> members_;
    EnsembleMode mode_;
};

inline std::shared_ptr<const GradientOracle> ensemble(std::vector<std::shared_ptr<const GradientOracle>> members,
                                                      EnsembleMode mode) {
    return std::make_shared<EnsembleOracle>(std::move(members), mode);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian): "FQAM" | u32 version | u32 kind | u32 n | i32[n]
// architecture | u64 parameter count | f64[count] parameters.

inline constexpr char kCheckpointMagic[4] = {'F', 'Q', 'A', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
    char buf[sizeof(T)];
    if (!is.read(buf, sizeof(T))) throw FormatError("truncated checkpoint: " + path);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const DifferentiableModel& model) {
    os.write(kCheckpointMagic, 4);
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(model.kind()));
    const auto arch = model.architecture();
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(arch.size()));
    for (std::int32_t v : arch) detail::put<std::int32_t>(os, v);
    const auto params = model.parameters();
    detail::put<std::uint64_t>(os, params.size());
    for (double v : params) detail::put<double>(os, v);
}

inline void save_checkpoint(const DifferentiableModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    write_checkpoint(os, model);
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline std::unique_ptr<DifferentiableModel> read_checkpoint(std::istream& is, const std::string& path = "<stream>") {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError("not a model checkpoint: " + path);
    }
    const auto version = detail::get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version in " + path);
    const auto kind = detail::get<std::uint32_t>(is, path);
    const auto narch = detail::get<std::uint32_t>(is, path);
    if (narch > 16) throw FormatError("corrupt checkpoint header: " + path);
    std::vector<std::int32_t> arch(narch);
    for (auto& v : arch) v = detail::get<std::int32_t>(is, path);

    std::unique_ptr<DifferentiableModel> model;
    if (kind == static_cast<std::uint32_t>(ModelKind::linear_spectral) && narch == 4) {
        model = std::make_unique<LinearSpectralClassifier>(Shape{arch[0], arch[1], arch[2]}, arch[3]);
    } else if (kind == static_cast<std::uint32_t>(ModelKind::tiny_cnn) && narch == 5 &&
               arch[3] == TinyCnnClassifier::kC1 && arch[4] == TinyCnnClassifier::kC2) {
        model = std::make_unique<TinyCnnClassifier>(Shape{arch[0], arch[1], arch[2]});
    } else {
        throw FormatError("unknown model kind or architecture in " + path);
    }
    const auto count = detail::get<std::uint64_t>(is, path);
    auto params = model->parameters();
    if (count != params.size()) throw FormatError("parameter count mismatch in " + path);
    for (double& v : params) v = detail::get<double>(is, path);
    return model;
}

inline std::unique_ptr<DifferentiableModel> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    return read_checkpoint(is, path);
}

} // namespace freqattack
