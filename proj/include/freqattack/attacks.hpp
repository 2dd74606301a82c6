// Sign-gradient attacks: FGSM and PGD in pixel space, the block-DCT
// frequency attack, the alternating hybrid attack and the summed-perturbation
// variant.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "freqattack/dataset.hpp"
#include "freqattack/errors.hpp"
#include "freqattack/imaging.hpp"
#include "freqattack/models.hpp"
#include "freqattack/random.hpp"
#include "freqattack/spectral.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

enum class AttackKind { fgsm, pgd, frequency, hybrid, sum };

inline std::string_view to_string(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::pgd: return "pgd";
        case AttackKind::frequency: return "frequency";
        case AttackKind::hybrid: return "hybrid";
        case AttackKind::sum: return "sum";
    }
    return "pgd";
}

inline AttackKind attack_kind_from_string(std::string_view s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "pgd") return AttackKind::pgd;
    if (s == "frequency") return AttackKind::frequency;
    if (s == "hybrid") return AttackKind::hybrid;
    if (s == "sum") return AttackKind::sum;
    throw ConfigError("unknown attack '" + std::string(s) + "'");
}

/// How the stand-alone frequency attack bounds its iterate.
enum class FrequencyConstraint {
    /// |D(adv) - D(init)| <= eps * max(M, weight_floor) per coefficient, then pixel clamp.
    coefficient_box,
    /// Project onto the pixel eps-ball at the end of every iteration (hybrid-style).
    spatial_linf,
};

inline std::string_view to_string(FrequencyConstraint c) {
    return c == FrequencyConstraint::coefficient_box ? "coefficient_box" : "spatial_linf";
}

inline FrequencyConstraint frequency_constraint_from_string(std::string_view s) {
    if (s == "coefficient_box") return FrequencyConstraint::coefficient_box;
    if (s == "spatial_linf") return FrequencyConstraint::spatial_linf;
    throw ConfigError("unknown frequency constraint '" + std::string(s) + "'");
}

struct AttackConfig {
    double eps = 0.1;
    double step_spatial = 0.01;  // PGD alpha, hybrid gamma_s
    double step_freq = 0.01;     // frequency lambda, hybrid gamma_f
    int max_iters = 40;
    int block_size = 8;
    Band band = Band::all;
    std::uint64_t seed = 0;
    bool early_stop = true;
    bool random_init = true;  // PGD uniform start in the eps-ball
    FrequencyConstraint freq_constraint = FrequencyConstraint::coefficient_box;
    double weight_floor = 0.01;
    bool record_trace = false;

    void validate() const {
        if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("attack eps must be finite and >= 0");
        if (!(step_spatial >= 0.0) || !(step_freq >= 0.0)) throw ConfigError("attack steps must be >= 0");
        if (max_iters < 1) throw ConfigError("attack max_iters must be >= 1");
        if (block_size < 3) throw ConfigError("attack block_size must be >= 3");
        if (!(weight_floor > 0.0)) throw ConfigError("attack weight_floor must be > 0");
    }
};

/// Frequency perturbation P with its weight matrix M. M is fixed for one run.
struct PerturbationState {
    Spectrum perturbation;
    WeightMatrix weights;
    int iteration = 0;
};

struct TraceRow {
    int iteration = 0;
    double loss = 0.0;
    std::string ops;
    double slack = 0.0;  // eps - ||adv - init||_inf
};

struct AttackResult {
    Image adv;
    bool success = false;
    int iterations_used = 0;
    double final_loss = 0.0;
    int grad_calls = 0;
    std::vector<TraceRow> trace;
    /// Frequency-domain iterates only: D(adv) - D(init) before pixel clamping.
    std::optional<Spectrum> spectral_deviation;
    std::optional<PerturbationState> state;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
    os << "iteration,loss,ops,slack\n";
    os.precision(17);
    for (const auto& r : trace) os << r.iteration << ',' << r.loss << ',' << r.ops << ',' << r.slack << '\n';
}

namespace detail {

/// Counts gradient evaluations made through it.
class CountedOracle {
public:
    explicit CountedOracle(const GradientOracle& m) : model_(m) {}
    Tensor grad(const Tensor& x, Label y) {
        ++calls_;
        return model_.grad_input(x, y);
    }
    Evaluation evaluate(const Tensor& x, Label y) const { return model_.evaluate(x, y); }
    int calls() const noexcept { return calls_; }

private:
    const GradientOracle& model_;
    int calls_ = 0;
};

inline void record(AttackResult& r, const AttackConfig& cfg, int iteration, const Evaluation& ev,
                   std::string ops, const Tensor& adv, const Tensor& init) {
    if (!cfg.record_trace) return;
    r.trace.push_back({iteration, ev.loss, std::move(ops), cfg.eps - linf_distance(adv, init)});
}

inline Spectrum uniform_perturbation(const Spectrum& like, std::uint64_t seed) {
    Spectrum p(like.block_size(), like.rows(), like.cols(), like.channels());
    Rng rng(seed);
    for (double& v : p.values()) v = rng.uniform();
    return p;
}

inline void require_block_compatible(const Tensor& img, const AttackConfig& cfg) {
    require_divisible(img.shape(), cfg.block_size);
}

} // namespace detail

/// Gradient of the loss with respect to the frequency perturbation P at the
/// current iterate: M (.) D(grad_x). Valid because the inverse block DCT is
/// the adjoint of the forward one.
inline Spectrum frequency_gradient(const Tensor& grad_x, const WeightMatrix& weights, int block_size) {
    Spectrum g = forward_spectrum(grad_x, block_size);
    scale_positions(g, weights.weights);
    return g;
}

/// P_{n+1} - P_n = step * sign(grad_p) inside the band, zero outside.
inline Spectrum perturbation_update(const Spectrum& grad_p, const BandMask& mask, double step) {
    Spectrum s(grad_p.block_size(), grad_p.rows(), grad_p.cols(), grad_p.channels());
    const std::size_t area = s.tile_area();
    for (std::size_t t = 0; t < s.tile_count(); ++t) {
        auto in = grad_p.tile(t);
        auto out = s.tile(t);
        for (std::size_t k = 0; k < area; ++k) out[k] = mask.mask[k] ? step * sign(in[k]) : 0.0;
    }
    return s;
}

/// Coefficient change injected by the fusion D(X) + M (.) P for one update of P.
inline Spectrum fused_increment(const Spectrum& update, const WeightMatrix& weights) {
    Spectrum s = update;
    scale_positions(s, weights.weights);
    return s;
}

// ---------------------------------------------------------------------------

/// Single step: clamp(img + eps * sign(grad)).
inline AttackResult fgsm(const GradientOracle& model, const Image& img, Label label, const AttackConfig& cfg) {
    cfg.validate();
    detail::CountedOracle oracle(model);
    Tensor x = img.tensor();
    Tensor g = oracle.grad(x, label);
    x += sign(g) * cfg.eps;
    Image adv = project_linf(x, img, cfg.eps);
    const Evaluation ev = oracle.evaluate(adv, label);
    AttackResult r{adv, ev.predicted != label, 1, ev.loss, oracle.calls(), {}, std::nullopt, std::nullopt};
    detail::record(r, cfg, 0, ev, "S", adv, img);
    return r;
}

/// Iterated sign steps with projection onto the eps-ball after each one.
inline AttackResult pgd(const GradientOracle& model, const Image& img, Label label, const AttackConfig& cfg) {
    cfg.validate();
    detail::CountedOracle oracle(model);
    Image x = img;
    if (cfg.random_init) {
        Rng rng(cfg.seed);
        Tensor start = img.tensor();
        for (double& v : start.values()) v += rng.uniform(-cfg.eps, cfg.eps);
        x = project_linf(start, img, cfg.eps);
    }
    AttackResult r{x, false, 0, 0.0, 0, {}, std::nullopt, std::nullopt};
    Evaluation ev{};
    for (int n = 0; n < cfg.max_iters; ++n) {
        Tensor step = sign(oracle.grad(x, label));
        step *= cfg.step_spatial;
        x = project_linf(x.tensor() + step, img, cfg.eps);
        ev = oracle.evaluate(x, label);
        r.iterations_used = n + 1;
        detail::record(r, cfg, n, ev, "S", x, img);
        if (cfg.early_stop && ev.predicted != label) break;
    }
    r.adv = x;
    r.success = ev.predicted != label;
    r.final_loss = ev.loss;
    r.grad_calls = oracle.calls();
    return r;
}

/// Frequency attack with an explicit weight matrix.
inline AttackResult frequency_attack(const GradientOracle& model, const Image& img, Label label,
                                     const AttackConfig& cfg, const WeightMatrix& weights) {
    cfg.validate();
    detail::require_block_compatible(img, cfg);
    if (weights.block_size != cfg.block_size) throw ShapeMismatch("weight matrix block size differs from config");
    const int n_block = cfg.block_size;
    const BandMask mask = band_mask(n_block, cfg.band);
    detail::CountedOracle oracle(model);

    const Spectrum init_spec = forward_spectrum(img, n_block);
    PerturbationState state{detail::uniform_perturbation(init_spec, cfg.seed), weights, 0};

    // Per-position bound on |D(adv) - D(init)|.
    std::vector<double> bound(weights.weights.size());
    for (std::size_t k = 0; k < bound.size(); ++k) bound[k] = cfg.eps * std::max(weights.at(k), cfg.weight_floor);

    Spectrum deviation(n_block, init_spec.rows(), init_spec.cols(), init_spec.channels());
    const bool box = cfg.freq_constraint == FrequencyConstraint::coefficient_box;
    const std::size_t area = deviation.tile_area();

    Image x = img;
    AttackResult r{x, false, 0, 0.0, 0, {}, std::nullopt, std::nullopt};
    Evaluation ev{};
    for (int n = 0; n < cfg.max_iters; ++n) {
        const Tensor g = oracle.grad(x, label);
        const Spectrum update = perturbation_update(frequency_gradient(g, weights, n_block), mask, cfg.step_freq);
        for (std::size_t i = 0; i < update.size(); ++i) state.perturbation[i] += update[i];
        const Spectrum step = fused_increment(update, weights);
        if (box) {
            for (std::size_t i = 0; i < step.size(); ++i) {
                const double b = bound[i % area];
                deviation[i] = std::clamp(deviation[i] + step[i], -b, b);
            }
            x = clamp_pixels(img.tensor() + inverse_spectrum(deviation));
        } else {
            x = project_linf(x.tensor() + inverse_spectrum(step), img, cfg.eps);
        }
        state.iteration = n + 1;
        ev = oracle.evaluate(x, label);
        r.iterations_used = n + 1;
        detail::record(r, cfg, n, ev, "F", x, img);
        if (cfg.early_stop && ev.predicted != label) break;
    }
    r.adv = x;
    r.success = ev.predicted != label;
    r.final_loss = ev.loss;
    r.grad_calls = oracle.calls();
    if (box) r.spectral_deviation = deviation;
    r.state = std::move(state);
    return r;
}

/// Frequency attack with M computed from the input's own spectrum.
inline AttackResult frequency_attack(const GradientOracle& model, const Image& img, Label label,
                                     const AttackConfig& cfg) {
    cfg.validate();
    detail::require_block_compatible(img, cfg);
    return frequency_attack(model, img, label, cfg, compute_weight_matrix(forward_spectrum(img, cfg.block_size)));
}

/// Alternates one frequency step and one spatial sign step per iteration,
/// swapping their order every iteration (F,S then S,F ...). Neither step
/// clips; the eps-ball projection runs once at the end of each iteration.
inline AttackResult hybrid_attack(const GradientOracle& model, const Image& img, Label label,
                                  const AttackConfig& cfg, const WeightMatrix& weights) {
    cfg.validate();
    detail::require_block_compatible(img, cfg);
    if (weights.block_size != cfg.block_size) throw ShapeMismatch("weight matrix block size differs from config");
    const int n_block = cfg.block_size;
    const BandMask mask = band_mask(n_block, cfg.band);
    detail::CountedOracle oracle(model);
    PerturbationState state{detail::uniform_perturbation(forward_spectrum(img, n_block), cfg.seed), weights, 0};

    Image x = img;
    AttackResult r{x, false, 0, 0.0, 0, {}, std::nullopt, std::nullopt};
    Evaluation ev{};
    for (int n = 0; n < cfg.max_iters; ++n) {
        const bool frequency_first = n % 2 == 0;
        Tensor cur = x.tensor();
        for (int half = 0; half < 2; ++half) {
            const bool do_freq = (half == 0) == frequency_first;
            const Tensor g = oracle.grad(cur, label);
            if (do_freq) {
                const Spectrum update =
                    perturbation_update(frequency_gradient(g, weights, n_block), mask, cfg.step_freq);
                for (std::size_t i = 0; i < update.size(); ++i) state.perturbation[i] += update[i];
                cur += inverse_spectrum(fused_increment(update, weights));
            } else {
                Tensor s = sign(g);
                s *= cfg.step_spatial;
                cur += s;
            }
        }
        x = project_linf(cur, img, cfg.eps);
        state.iteration = n + 1;
        ev = oracle.evaluate(x, label);
        r.iterations_used = n + 1;
        detail::record(r, cfg, n, ev, frequency_first ? "F,S" : "S,F", x, img);
        if (cfg.early_stop && ev.predicted != label) break;
    }
    r.adv = x;
    r.success = ev.predicted != label;
    r.final_loss = ev.loss;
    r.grad_calls = oracle.calls();
    r.state = std::move(state);
    return r;
}

inline AttackResult hybrid_attack(const GradientOracle& model, const Image& img, Label label,
                                  const AttackConfig& cfg) {
    cfg.validate();
    detail::require_block_compatible(img, cfg);
    return hybrid_attack(model, img, label, cfg, compute_weight_matrix(forward_spectrum(img, cfg.block_size)));
}

/// PGD and the frequency attack run independently from img; their
/// perturbations are added and projected onto the eps-ball.
inline AttackResult sum_attack(const GradientOracle& model, const Image& img, Label label, const AttackConfig& cfg) {
    cfg.validate();
    const AttackResult spatial = pgd(model, img, label, cfg);
    const AttackResult freq = frequency_attack(model, img, label, cfg);
    Tensor combined = img.tensor();
    combined += spatial.adv.tensor() - img.tensor();
    combined += freq.adv.tensor() - img.tensor();
    Image adv = project_linf(combined, img, cfg.eps);
    const Evaluation ev = model.evaluate(adv, label);
    AttackResult r{adv, ev.predicted != label, spatial.iterations_used + freq.iterations_used, ev.loss,
                   spatial.grad_calls + freq.grad_calls, {}, std::nullopt, std::nullopt};
    detail::record(r, cfg, 0, ev, "S+F", adv, img);
    return r;
}

inline AttackResult run_attack(AttackKind kind, const GradientOracle& model, const Image& img, Label label,
                               const AttackConfig& cfg) {
    switch (kind) {
        case AttackKind::fgsm: return fgsm(model, img, label, cfg);
        case AttackKind::pgd: return pgd(model, img, label, cfg);
        case AttackKind::frequency: return frequency_attack(model, img, label, cfg);
        case AttackKind::hybrid: return hybrid_attack(model, img, label, cfg);
        case AttackKind::sum: return sum_attack(model, img, label, cfg);
    }
    throw ConfigError("unknown attack kind");
}

} // namespace freqattack
