// Image quality (MSE, PSNR, SSIM), attack success rates and transfer matrices.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqattack/attacks.hpp"
#include "freqattack/dataset.hpp"
#include "freqattack/errors.hpp"
#include "freqattack/models.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

inline double mse(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

/// Peak signal-to-noise ratio for unit dynamic range; +inf for identical inputs.
inline double psnr_from_mse(double m) {
    return m == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / m);
}

inline double psnr(const Tensor& a, const Tensor& b) { return psnr_from_mse(mse(a, b)); }

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

/// Mean single-scale SSIM over all valid window positions and channels,
/// with a normalized Gaussian window.
inline double ssim(const Tensor& a, const Tensor& b, const SsimParams& p = {}) {
    a.require_same_shape(b, "ssim");
    const int win = p.window;
    if (a.height() < win || a.width() < win) {
        throw WindowTooLarge("ssim: image " + a.shape().str() + " smaller than " + std::to_string(win) + "px window");
    }
    std::vector<double> g(static_cast<std::size_t>(win));
    const double centre = (win - 1) / 2.0;
    double gs = 0.0;
    for (int i = 0; i < win; ++i) {
        g[i] = std::exp(-((i - centre) * (i - centre)) / (2.0 * p.sigma * p.sigma));
        gs += g[i];
    }
    for (double& v : g) v /= gs;

    const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
    const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
    const int oh = a.height() - win + 1;
    const int ow = a.width() - win + 1;
    double total = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
                for (int i = 0; i < win; ++i) {
                    for (int j = 0; j < win; ++j) {
                        const double w = g[i] * g[j];
                        const double va = a(y + i, x + j, c);
                        const double vb = b(y + i, x + j, c);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                const double var_a = saa - ma * ma;
                const double var_b = sbb - mb * mb;
                const double cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
        }
    }
    return total / (static_cast<double>(oh) * ow * a.channels());
}

struct QualityReport {
    double mse = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

inline QualityReport quality(const Tensor& reference, const Tensor& distorted) {
    const double m = mse(reference, distorted);
    return {m, psnr_from_mse(m), ssim(reference, distorted)};
}

/// Non-finite reals are written as strings ("inf", "-inf", "nan").
inline nlohmann::json json_real(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline double real_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        return std::numeric_limits<double>::quiet_NaN();
    }
    return j.get<double>();
}

inline nlohmann::json to_json(const QualityReport& q) {
    return {{"mse", json_real(q.mse)}, {"psnr", json_real(q.psnr)}, {"ssim", json_real(q.ssim)}};
}

// ---------------------------------------------------------------------------
// Success rates

struct RateCount {
    std::size_t successes = 0;
    std::size_t attempts = 0;

    double rate() const noexcept {
        return attempts == 0 ? std::numeric_limits<double>::quiet_NaN()
                             : static_cast<double>(successes) / static_cast<double>(attempts);
    }
    bool operator==(const RateCount&) const = default;
};

inline nlohmann::json to_json(const RateCount& r) {
    nlohmann::json j{{"successes", r.successes}, {"attempts", r.attempts}};
    j["rate"] = r.attempts == 0 ? nlohmann::json(nullptr) : nlohmann::json(r.rate());
    return j;
}

struct AttackSample {
    const Tensor* init;
    const Tensor* adv;
    Label label;
};

/// Fraction of samples whose adversarial prediction differs from the clean
/// prediction. Every clean input must be classified fake by the evaluator.
inline RateCount attack_success_count(const GradientOracle& evaluator, const std::vector<AttackSample>& samples) {
    if (samples.empty()) throw EmptyInput("attack_success_rate: no samples");
    RateCount rc;
    for (const auto& s : samples) {
        const Label clean = evaluator.predict(*s.init);
        if (clean != Label::fake) {
            throw PreconditionError("attack_success_rate: an input is not classified fake by the evaluator");
        }
        ++rc.attempts;
        rc.successes += evaluator.predict(*s.adv) != clean ? 1 : 0;
    }
    return rc;
}

inline double attack_success_rate(const GradientOracle& evaluator, const std::vector<AttackSample>& samples) {
    return attack_success_count(evaluator, samples).rate();
}

// ---------------------------------------------------------------------------
// Transfer matrices

/// Rows are source (attacked) models, columns target (evaluated) models; the
/// diagonal of a square matrix with identical rosters is white-box.
struct TransferMatrix {
    std::vector<std::string> sources;
    std::vector<std::string> targets;
    std::vector<std::vector<RateCount>> cells;  // [source][target]

    const RateCount& at(std::size_t s, std::size_t t) const { return cells.at(s).at(t); }
    bool operator==(const TransferMatrix&) const = default;
};

inline nlohmann::json to_json(const TransferMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : m.cells) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& c : row) r.push_back(to_json(c));
        rows.push_back(r);
    }
    return {{"sources", m.sources}, {"targets", m.targets}, {"cells", rows}};
}

struct NamedModel {
    std::string name;
    std::shared_ptr<const GradientOracle> model;
};

/// One cell: adversarial examples made against the source, scored on the
/// target over inputs that both classify as fake.
inline RateCount transfer_cell(const GradientOracle& source, const GradientOracle& target,
                               const std::vector<const Tensor*>& inits, const std::vector<const Tensor*>& advs) {
    RateCount rc;
    for (std::size_t i = 0; i < inits.size(); ++i) {
        if (source.predict(*inits[i]) != Label::fake || target.predict(*inits[i]) != Label::fake) continue;
        ++rc.attempts;
        rc.successes += target.predict(*advs[i]) != Label::fake ? 1 : 0;
    }
    return rc;
}

/// Generates adversarial examples once per source model over the fake
/// inputs it classifies correctly, then scores them on every target.
inline TransferMatrix transfer_matrix(const std::vector<NamedModel>& sources, const std::vector<NamedModel>& targets,
                                      const LabeledDataset& data, AttackKind attack, const AttackConfig& cfg) {
    TransferMatrix m;
    for (const auto& s : sources) m.sources.push_back(s.name);
    for (const auto& t : targets) m.targets.push_back(t.name);
    for (const auto& s : sources) {
        std::vector<Image> advs;
        std::vector<const Tensor*> inits;
        for (std::size_t i = 0; i < data.items.size(); ++i) {
            const auto& it = data.items[i];
            if (it.label != Label::fake || s.model->predict(it.image) != Label::fake) continue;
            AttackConfig c = cfg;
            c.seed = derive_seed(cfg.seed, 0x7a11, i);
            advs.push_back(run_attack(attack, *s.model, it.image, Label::fake, c).adv);
            inits.push_back(&it.image.tensor());
        }
        std::vector<const Tensor*> adv_ptrs;
        for (const auto& a : advs) adv_ptrs.push_back(&a.tensor());
        std::vector<RateCount> row;
        for (const auto& t : targets) row.push_back(transfer_cell(*s.model, *t.model, inits, adv_ptrs));
        m.cells.push_back(std::move(row));
    }
    return m;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace freqattack
