// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
// The default experiment is run once up front; its data and trained models
// are shared by the effectiveness and quality checks.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "freqattack/freqattack.hpp"

using namespace freqattack;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
    int id;
    bool pass;
    std::string title;
    std::string detail;
};

std::vector<Line> lines;

void report(int id, bool pass, const std::string& title, std::string detail) {
    while (!detail.empty() && (detail.back() == ' ' || detail.back() == ';')) detail.pop_back();
    lines.push_back({id, pass, title, detail});
    std::printf("criterion %d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", title.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::vector<double> direct_dct(std::span<const double> x, int n) {
    std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
    const auto c = [n](int k) { return k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n); };
    for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    s += x[i * n + j] * std::cos((2 * i + 1) * u * std::numbers::pi / (2.0 * n)) *
                         std::cos((2 * j + 1) * v * std::numbers::pi / (2.0 * n));
                }
            }
            out[u * n + v] = c(u) * c(v) * s;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

void dct_correctness() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    double worst_direct = 0.0, worst_parseval = 0.0, worst_roundtrip = 0.0;
    std::vector<double> tile(64);
    for (int t = 0; t < 1000; ++t) {
        for (double& v : tile) v = rng.uniform(-1.0, 1.0);
        const auto fast = dct2_block(tile);
        const auto slow = direct_dct(tile, 8);
        double ex = 0.0, ed = 0.0;
        for (int k = 0; k < 64; ++k) {
            worst_direct = std::max(worst_direct, std::abs(fast[k] - slow[k]));
            ex += tile[k] * tile[k];
            ed += fast[k] * fast[k];
        }
        worst_parseval = std::max(worst_parseval, std::abs(ed - ex) / ex);
    }
    for (int i = 0; i < 10; ++i) {
        Tensor img(Shape{64, 64, 3});
        for (double& v : img.values()) v = rng.uniform();
        worst_roundtrip = std::max(worst_roundtrip, max_abs_diff(inverse_spectrum(forward_spectrum(img, 8)), img));
        const Spectrum s = forward_spectrum(img, 8);
        const BlockGrid g = split_blocks(img, 8);
        for (std::size_t t = 0; t < s.tile_count(); ++t) {
            double ex = 0.0, ed = 0.0;
            for (int k = 0; k < 64; ++k) {
                ex += g.tile(t)[k] * g.tile(t)[k];
                ed += s.tile(t)[k] * s.tile(t)[k];
            }
            worst_parseval = std::max(worst_parseval, std::abs(ed - ex) / ex);
        }
    }
    const double secs = seconds_since(t0);
    const bool pass = worst_direct < 1e-10 && worst_roundtrip < 1e-6 && worst_parseval < 1e-9 && secs < 5.0;
    report(1, pass, "DCT correctness",
           fmt("max |fast-direct| %.2e (<1e-10) over 1000 tiles, round-trip %.2e (<1e-6), Parseval rel %.2e (<1e-9), "
               "%.2f s (<5 s)",
               worst_direct, worst_roundtrip, worst_parseval, secs));
}

void gradient_fidelity(const std::vector<TrainedModel>& roster, const LabeledDataset& eval) {
    const auto t0 = Clock::now();
    Rng rng(77);
    const double h = 1e-5;
    std::ostringstream detail;
    bool pass = true;
    for (const auto& m : roster) {
        const Image& x = eval.items[1].image;  // a fake
        const Tensor g = m.model->grad_input(x, Label::fake);
        const auto* cnn = dynamic_cast<const TinyCnnClassifier*>(m.model.get());
        double worst = 0.0;
        int kinks = 0;
        for (int taken = 0; taken < 100;) {
            const std::size_t i = rng.below(x.size());
            if (cnn) {
                Tensor up = x.tensor(), down = x.tensor();
                up[i] += h;
                down[i] -= h;
                if (cnn->relu_pattern(up) != cnn->relu_pattern(down)) {
                    ++kinks;
                    continue;  // the difference quotient straddles a ReLU kink
                }
            }
            const std::size_t coords[] = {i};
            const double fd = finite_diff_grad(*m.model, x, Label::fake, h, coords)[0].value;
            const double err = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-8});
            worst = std::max(worst, err);
            ++taken;
        }
        pass = pass && worst < 1e-4;
        detail << m.name << " max rel err " << fmt("%.2e", worst) << " (" << kinks << " kink redraws); ";
    }
    // Chain rule against an independent direct-sum DCT of the pixel gradient.
    double worst_chain = 0.0;
    for (const auto& m : roster) {
        const Image& x = eval.items[3].image;
        const Tensor g = m.model->grad_input(x, Label::fake);
        const WeightMatrix M = compute_weight_matrix(forward_spectrum(x, 8));
        const Spectrum gp = frequency_gradient(g, M, 8);
        const BlockGrid blocks = split_blocks(g, 8);
        double scale = 0.0;
        for (double v : gp.values()) scale = std::max(scale, std::abs(v));
        for (std::size_t t = 0; t < blocks.tile_count(); ++t) {
            const auto d = direct_dct(blocks.tile(t), 8);
            for (int k = 0; k < 64; ++k) {
                worst_chain = std::max(worst_chain, std::abs(gp.tile(t)[k] - M.at(k) * d[k]) / std::max(scale, 1e-300));
            }
        }
    }
    const double secs = seconds_since(t0);
    pass = pass && worst_chain < 1e-8 && secs < 30.0;
    detail << fmt("grad_P vs M.DCT(grad_X) max rel dev %.2e (<1e-8); %.1f s (<30 s)", worst_chain, secs);
    report(2, pass, "Gradient fidelity", detail.str());
}

void constraint_soundness(const std::vector<TrainedModel>& roster, const LabeledDataset& eval) {
    const auto t0 = Clock::now();
    Rng rng(99);
    int runs = 0, range_viol = 0, ball_viol = 0, band_runs = 0, band_viol = 0;
    double worst_ball = 0.0, worst_band = 0.0;
    const AttackKind kinds[] = {AttackKind::fgsm, AttackKind::pgd, AttackKind::frequency, AttackKind::hybrid,
                                AttackKind::sum};
    for (int trial = 0; trial < 100; ++trial) {
        const auto& m = *roster[trial % roster.size()].model;
        const Image& img = eval.items[rng.below(eval.size())].image;
        AttackConfig cfg;
        cfg.eps = 0.1;
        cfg.step_spatial = rng.uniform(0.002, 0.05);
        cfg.step_freq = rng.uniform(0.002, 0.5);
        cfg.max_iters = 1 + static_cast<int>(rng.below(10));
        cfg.band = static_cast<Band>(rng.below(4));
        cfg.early_stop = rng.below(2) == 0;
        cfg.random_init = rng.below(2) == 0;
        cfg.freq_constraint = rng.below(3) == 0 ? FrequencyConstraint::spatial_linf : FrequencyConstraint::coefficient_box;
        cfg.seed = static_cast<std::uint64_t>(trial);
        for (AttackKind k : kinds) {
            const AttackResult r = run_attack(k, m, img, Label::fake, cfg);
            ++runs;
            for (double v : r.adv.tensor().values()) {
                if (!(v >= 0.0 && v <= 1.0)) {
                    ++range_viol;
                    break;
                }
            }
            if (k != AttackKind::frequency) {
                const double d = linf_distance(r.adv, img);
                worst_ball = std::max(worst_ball, d);
                if (d > 0.1 + 1e-9) ++ball_viol;
            }
            if (k == AttackKind::frequency && cfg.band != Band::all && r.spectral_deviation) {
                ++band_runs;
                const double total = energy(*r.spectral_deviation);
                const double frac = total > 0.0 ? energy_outside(*r.spectral_deviation, band_mask(8, cfg.band)) / total : 0.0;
                worst_band = std::max(worst_band, frac);
                if (frac >= 1e-9) ++band_viol;
            }
        }
    }
    const bool pass = runs == 500 && range_viol == 0 && ball_viol == 0 && band_viol == 0 && band_runs > 0;
    report(3, pass, "Constraint soundness",
           fmt("%d runs: %d pixel-range violations, %d eps-ball violations (max linf %.6f <= 0.1+1e-9), "
               "%d band-restricted runs with max out-of-band energy fraction %.2e (<1e-9); %.1f s",
               runs, range_viol, ball_viol, worst_ball, band_runs, worst_band, seconds_since(t0)));
}

struct WhiteBox {
    std::string model;
    AttackKind kind;
    RateCount rate;
    std::vector<double> psnr;  // per eval fake; NaN where the attack failed
    std::vector<double> mse;
};

std::vector<WhiteBox> white_box_runs(const std::vector<TrainedModel>& roster, const LabeledDataset& eval,
                                     const ExperimentConfig& cfg, double& secs) {
    const auto t0 = Clock::now();
    std::vector<WhiteBox> out;
    for (const auto& m : roster) {
        for (AttackKind k : {AttackKind::pgd, AttackKind::frequency, AttackKind::hybrid}) {
            WhiteBox wb{m.name, k, {}, {}, {}};
            AttackConfig c = find_attack(cfg, k)->cfg;
            for (std::size_t i = 0; i < eval.size(); ++i) {
                const auto& ex = eval.items[i];
                if (ex.label != Label::fake) continue;
                if (m.model->predict(ex.image) != Label::fake) {
                    wb.psnr.push_back(std::nan(""));
                    wb.mse.push_back(std::nan(""));
                    continue;
                }
                c.seed = derive_seed(cfg.seed, 0xacce, i);
                const AttackResult r = run_attack(k, *m.model, ex.image, Label::fake, c);
                ++wb.rate.attempts;
                wb.rate.successes += r.success ? 1 : 0;
                wb.psnr.push_back(r.success ? psnr(ex.image, r.adv) : std::nan(""));
                wb.mse.push_back(r.success ? mse(ex.image, r.adv) : std::nan(""));
            }
            out.push_back(std::move(wb));
        }
    }
    secs = seconds_since(t0);
    return out;
}

void white_box_effectiveness(const std::vector<TrainedModel>& roster, const LabeledDataset& eval,
                             const std::vector<WhiteBox>& wb, double secs) {
    std::ostringstream detail;
    bool pass = true;
    for (const auto& m : roster) {
        std::size_t ok = 0;
        for (const auto& ex : eval.items) ok += m.model->predict(ex.image) == ex.label ? 1 : 0;
        const double acc = static_cast<double>(ok) / static_cast<double>(eval.size());
        pass = pass && acc >= 0.95;
        detail << m.name << " clean acc " << ok << "/" << eval.size() << "; ";
    }
    for (const auto& w : wb) {
        const bool ok = w.rate.attempts > 0 && w.rate.rate() >= 0.90;
        pass = pass && ok;
        detail << w.model << "/" << to_string(w.kind) << " " << w.rate.successes << "/" << w.rate.attempts
               << (ok ? "" : " [<0.90]") << "; ";
    }
    pass = pass && secs < 300.0;
    detail << fmt("eps 0.1, 40 iters, %zu images, %.1f s (<300 s)", eval.size(), secs);
    report(4, pass, "White-box effectiveness", detail.str());
}

void quality_ordering(const std::vector<WhiteBox>& wb) {
    std::ostringstream detail;
    bool pass = true;
    for (std::size_t base = 0; base + 2 < wb.size(); base += 3) {
        const WhiteBox& p = wb[base];  // pgd
        auto valid = [](const std::vector<double>& v) {
            std::vector<double> o;
            for (double x : v) {
                if (!std::isnan(x)) o.push_back(x);
            }
            return o;
        };
        for (std::size_t k = 1; k <= 2; ++k) {
            const WhiteBox& q = wb[base + k];
            const bool matched = p.rate.rate() >= 0.90 && q.rate.rate() >= 0.90;
            std::size_t both = 0, psnr_better = 0, mse_better = 0;
            for (std::size_t i = 0; i < p.psnr.size(); ++i) {
                if (std::isnan(p.psnr[i]) || std::isnan(q.psnr[i])) continue;
                ++both;
                psnr_better += q.psnr[i] > p.psnr[i] ? 1 : 0;
                mse_better += q.mse[i] < p.mse[i] ? 1 : 0;
            }
            const double mq = median(valid(q.psnr)), mp = median(valid(p.psnr));
            const double eq = median(valid(q.mse)), ep = median(valid(p.mse));
            const bool med = mq > mp && eq < ep;
            const bool per = both > 0 && psnr_better >= 0.7 * both && mse_better >= 0.7 * both;
            const bool ok = matched && med && per;
            pass = pass && ok;
            detail << p.model << ": " << to_string(q.kind)
                   << fmt(" median PSNR %.2f vs pgd %.2f, median MSE %.2e vs %.2e, per-image %zu/%zu", mq, mp, eq, ep,
                          psnr_better, both)
                   << (matched ? "" : " [success <0.90]") << (ok ? "" : " FAIL") << "; ";
        }
    }
    report(5, pass, "Quality ordering", detail.str());
}

void diversity_premise(const GeneratedData& data) {
    std::size_t pairs = 0, richer = 0;
    for (const LabeledDataset* ds : {&data.train, &data.eval}) {
        for (std::size_t i = 0; i + 1 < ds->size(); i += 2) {
            ++pairs;
            richer += high_band_energy(ds->items[i + 1].image, 8) > high_band_energy(ds->items[i].image, 8) ? 1 : 0;
        }
    }
    report(6, pairs > 0 && richer == pairs, "Frequency-diversity premise",
           fmt("%zu/%zu pairs with fake high-band energy > real at default amplitude", richer, pairs));
}

void hybrid_mechanics(const std::vector<TrainedModel>& roster, const LabeledDataset& eval) {
    bool order_ok = true, freq_ok = true, pgd_ok = true;
    int compared = 0;
    for (const auto& m : roster) {
        for (std::size_t i = 1; i < 8; i += 2) {
            const Image& img = eval.items[i].image;
            AttackConfig c;
            c.early_stop = false;
            c.record_trace = true;
            c.max_iters = 12;
            c.seed = i;
            const auto both = hybrid_attack(*m.model, img, Label::fake, c);
            for (std::size_t n = 0; n < both.trace.size(); ++n) order_ok = order_ok && both.trace[n].ops == (n % 2 == 0 ? "F,S" : "S,F");
            order_ok = order_ok && both.trace.size() == 12;

            AttackConfig fs = c;
            fs.step_spatial = 0.0;
            fs.freq_constraint = FrequencyConstraint::spatial_linf;
            const auto h0 = hybrid_attack(*m.model, img, Label::fake, fs);
            const auto fr = frequency_attack(*m.model, img, Label::fake, fs);
            bool same = h0.adv.tensor() == fr.adv.tensor() && h0.trace.size() == fr.trace.size();
            for (std::size_t n = 0; same && n < h0.trace.size(); ++n) same = h0.trace[n].loss == fr.trace[n].loss;
            freq_ok = freq_ok && same;

            AttackConfig ps = c;
            ps.step_freq = 0.0;
            ps.random_init = false;
            const auto h1 = hybrid_attack(*m.model, img, Label::fake, ps);
            const auto pg = pgd(*m.model, img, Label::fake, ps);
            same = h1.adv.tensor() == pg.adv.tensor() && h1.trace.size() == pg.trace.size();
            for (std::size_t n = 0; same && n < h1.trace.size(); ++n) same = h1.trace[n].loss == pg.trace[n].loss;
            pgd_ok = pgd_ok && same;
            ++compared;
        }
    }
    report(7, order_ok && freq_ok && pgd_ok, "Hybrid mechanics",
           fmt("%d trajectories of 12 iterations: order log F,S/S,F %s; gamma_s=0 == frequency attack %s; "
               "gamma_f=0 == PGD from init %s (bit-exact per-iteration losses and final image)",
               compared, order_ok ? "ok" : "WRONG", freq_ok ? "ok" : "DIFFERS", pgd_ok ? "ok" : "DIFFERS"));
}

} // namespace

int main() {
    const ExperimentConfig cfg = ExperimentConfig::defaults();

    dct_correctness();

    std::printf("running the default experiment (%d train / %d eval images, %dx%d)...\n", cfg.dataset.train_count,
                cfg.dataset.eval_count, cfg.dataset.image_size, cfg.dataset.image_size);
    std::fflush(stdout);
    auto t0 = Clock::now();
    const ExperimentOutputs first = run_experiment(cfg);
    const double first_secs = seconds_since(t0);
    std::printf("default experiment finished in %.1f s\n", first_secs);

    gradient_fidelity(first.roster, first.data.eval);
    constraint_soundness(first.roster, first.data.eval);
    double wb_secs = 0.0;
    const auto wb = white_box_runs(first.roster, first.data.eval, cfg, wb_secs);
    white_box_effectiveness(first.roster, first.data.eval, wb, wb_secs);
    quality_ordering(wb);
    diversity_premise(first.data);
    hybrid_mechanics(first.roster, first.data.eval);

    t0 = Clock::now();
    const ExperimentOutputs second = run_experiment(cfg);
    const double second_secs = seconds_since(t0);
    const bool same = canonical_report(first.report) == canonical_report(second.report);
    report(8, same && first_secs < 600.0 && second_secs < 600.0, "Determinism",
           fmt("two default runs %s (timestamp excluded); runtimes %.1f s and %.1f s (<600 s)",
               same ? "byte-identical" : "DIFFER", first_secs, second_secs));

    int failed = 0;
    for (const auto& l : lines) failed += l.pass ? 0 : 1;
    std::printf("acceptance: %zu/%zu criteria pass\n", lines.size() - failed, lines.size());
    return failed == 0 ? 0 : 1;
}
