// Synthetic forgery dataset, experiment orchestration and report emission.
//
// The experiment runs as four stages that can also be driven one at a time
// from the CLI: generate data, train the model roster, run every attack job,
// and build the report. run_experiment() is exactly their composition.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqattack/attacks.hpp"
#include "freqattack/dataset.hpp"
#include "freqattack/errors.hpp"
#include "freqattack/imaging.hpp"
#include "freqattack/metrics.hpp"
#include "freqattack/models.hpp"
#include "freqattack/png_io.hpp"
#include "freqattack/random.hpp"
#include "freqattack/spectral.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

inline constexpr const char* kToolkitVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    int train_count = 200;  // images, half real and half fake
    int eval_count = 100;
    int image_size = 64;
    int channels = 1;
    int block_size = 8;
    double amplitude = 0.05;   // mean magnitude of each injected high-band coefficient
    double blur_sigma = 0.0;   // 0 selects image_size / 16
};

struct ModelSpec {
    std::string name;
    ModelKind kind = ModelKind::linear_spectral;
    TrainOptions train;
    double init_scale = 0.01;  // linear model only
};

struct AttackSpec {
    std::string name;
    AttackKind kind = AttackKind::pgd;
    AttackConfig cfg;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    DatasetConfig dataset;
    std::vector<ModelSpec> models;
    std::vector<AttackSpec> attacks;
    bool band_ablation = true;
    AttackKind band_attack = AttackKind::hybrid;
    bool ensembles = true;
    AttackKind ensemble_attack = AttackKind::hybrid;
    int dump_examples = 0;           // Fig.-4 style PNG triplets per run and source
    double diff_amplification = 10.0;
    std::string output_dir;

    static ExperimentConfig defaults() {
        ExperimentConfig c;
        ModelSpec lin{"linear", ModelKind::linear_spectral, {50, 0.01, 20, 0, Optimizer::adam}, 0.01};
        ModelSpec cnn{"cnn", ModelKind::tiny_cnn, {60, 0.002, 20, 0, Optimizer::adam}, 0.0};
        c.models = {lin, cnn};
        for (AttackKind k : {AttackKind::fgsm, AttackKind::pgd, AttackKind::frequency, AttackKind::hybrid,
                             AttackKind::sum}) {
            c.attacks.push_back({std::string(to_string(k)), k, AttackConfig{}});
        }
        return c;
    }

    void validate() const {
        const auto& d = dataset;
        if (d.train_count < 2 || d.eval_count < 2) throw ConfigError("dataset counts must be >= 2");
        if (d.train_count % 2 != 0 || d.eval_count % 2 != 0) throw ConfigError("dataset counts must be even");
        if (d.channels != 1 && d.channels != 3) throw ConfigError("dataset channels must be 1 or 3");
        if (d.block_size < 3) throw ConfigError("dataset block_size must be >= 3");
        if (d.image_size <= 0 || d.image_size % d.block_size != 0) {
            throw ConfigError("image_size must be a positive multiple of block_size");
        }
        if (!(d.amplitude >= 0.0)) throw ConfigError("dataset amplitude must be >= 0");
        if (!(d.blur_sigma >= 0.0)) throw ConfigError("dataset blur_sigma must be >= 0");
        if (models.empty()) throw ConfigError("model roster is empty");
        if (attacks.empty()) throw ConfigError("attack roster is empty");
        std::map<std::string, int> names;
        for (const auto& m : models) {
            if (m.name.empty() || ++names[m.name] > 1) throw ConfigError("model names must be unique and non-empty");
            if (m.kind == ModelKind::tiny_cnn && d.image_size % 4 != 0) {
                throw ConfigError("tiny_cnn needs image_size divisible by 4");
            }
        }
        names.clear();
        for (const auto& a : attacks) {
            if (a.name.empty() || ++names[a.name] > 1) throw ConfigError("attack names must be unique and non-empty");
            a.cfg.validate();
            if (a.cfg.block_size > 0 && d.image_size % a.cfg.block_size != 0) {
                throw ConfigError("attack '" + a.name + "' block_size does not divide image_size");
            }
        }
        if (diff_amplification <= 0.0) throw ConfigError("diff_amplification must be > 0");
    }

    double blur_sigma() const {
        return dataset.blur_sigma > 0.0 ? dataset.blur_sigma : dataset.image_size / 16.0;
    }
};

// --- JSON ------------------------------------------------------------------

inline nlohmann::json to_json(const AttackConfig& c) {
    return {{"eps", c.eps},
            {"step_spatial", c.step_spatial},
            {"step_freq", c.step_freq},
            {"max_iters", c.max_iters},
            {"block_size", c.block_size},
            {"band", std::string(to_string(c.band))},
            {"early_stop", c.early_stop},
            {"random_init", c.random_init},
            {"freq_constraint", std::string(to_string(c.freq_constraint))},
            {"weight_floor", c.weight_floor},
            {"record_trace", c.record_trace}};
}

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

inline void require_object(const nlohmann::json& j, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
}

} // namespace detail

inline AttackConfig attack_config_from_json(const nlohmann::json& j, AttackConfig c = {}) {
    detail::require_object(j, "attack config");
    detail::read_opt(j, "eps", c.eps);
    detail::read_opt(j, "step_spatial", c.step_spatial);
    detail::read_opt(j, "step_freq", c.step_freq);
    detail::read_opt(j, "max_iters", c.max_iters);
    detail::read_opt(j, "block_size", c.block_size);
    detail::read_opt(j, "early_stop", c.early_stop);
    detail::read_opt(j, "random_init", c.random_init);
    detail::read_opt(j, "weight_floor", c.weight_floor);
    detail::read_opt(j, "record_trace", c.record_trace);
    if (j.contains("band")) c.band = band_from_string(j.at("band").get<std::string>());
    if (j.contains("freq_constraint")) {
        c.freq_constraint = frequency_constraint_from_string(j.at("freq_constraint").get<std::string>());
    }
    if (j.contains("norm") && j.at("norm").get<std::string>() != "inf") {
        throw ConfigError("only the inf norm is supported");
    }
    return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : c.models) {
        models.push_back({{"name", m.name},
                          {"kind", std::string(to_string(m.kind))},
                          {"epochs", m.train.epochs},
                          {"lr", m.train.lr},
                          {"batch_size", m.train.batch_size},
                          {"optimizer", std::string(to_string(m.train.optimizer))},
                          {"init_scale", m.init_scale}});
    }
    nlohmann::json attacks = nlohmann::json::array();
    for (const auto& a : c.attacks) {
        nlohmann::json aj = to_json(a.cfg);
        aj["name"] = a.name;
        aj["kind"] = std::string(to_string(a.kind));
        attacks.push_back(aj);
    }
    const auto& d = c.dataset;
    return {{"seed", c.seed},
            {"dataset",
             {{"train_count", d.train_count},
              {"eval_count", d.eval_count},
              {"image_size", d.image_size},
              {"channels", d.channels},
              {"block_size", d.block_size},
              {"amplitude", d.amplitude},
              {"blur_sigma", d.blur_sigma}}},
            {"models", models},
            {"attacks", attacks},
            {"band_ablation", c.band_ablation},
            {"band_attack", std::string(to_string(c.band_attack))},
            {"ensembles", c.ensembles},
            {"ensemble_attack", std::string(to_string(c.ensemble_attack))},
            {"dump_examples", c.dump_examples},
            {"diff_amplification", c.diff_amplification}};
}

/// Missing keys keep their defaults; a missing "models" or "attacks" key
/// keeps the default roster.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    detail::require_object(j, "config");
    ExperimentConfig c = ExperimentConfig::defaults();
    try {
        detail::read_opt(j, "seed", c.seed);
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            detail::require_object(d, "dataset");
            detail::read_opt(d, "train_count", c.dataset.train_count);
            detail::read_opt(d, "eval_count", c.dataset.eval_count);
            detail::read_opt(d, "image_size", c.dataset.image_size);
            detail::read_opt(d, "channels", c.dataset.channels);
            detail::read_opt(d, "block_size", c.dataset.block_size);
            detail::read_opt(d, "amplitude", c.dataset.amplitude);
            detail::read_opt(d, "blur_sigma", c.dataset.blur_sigma);
        }
        if (j.contains("models")) {
            c.models.clear();
            for (const auto& m : j.at("models")) {
                detail::require_object(m, "model spec");
                ModelSpec s;
                s.kind = model_kind_from_string(m.at("kind").get<std::string>());
                s.name = m.value("name", std::string(to_string(s.kind)));
                const ModelSpec& base = s.kind == ModelKind::tiny_cnn ? ExperimentConfig::defaults().models[1]
                                                                      : ExperimentConfig::defaults().models[0];
                s.train = base.train;
                s.init_scale = base.init_scale;
                detail::read_opt(m, "epochs", s.train.epochs);
                detail::read_opt(m, "lr", s.train.lr);
                detail::read_opt(m, "batch_size", s.train.batch_size);
                detail::read_opt(m, "init_scale", s.init_scale);
                if (m.contains("optimizer")) s.train.optimizer = optimizer_from_string(m.at("optimizer").get<std::string>());
                c.models.push_back(s);
            }
        }
        if (j.contains("attacks")) {
            c.attacks.clear();
            for (const auto& a : j.at("attacks")) {
                detail::require_object(a, "attack spec");
                AttackSpec s;
                s.kind = attack_kind_from_string(a.at("kind").get<std::string>());
                s.name = a.value("name", std::string(to_string(s.kind)));
                s.cfg = attack_config_from_json(a);
                c.attacks.push_back(s);
            }
        }
        detail::read_opt(j, "band_ablation", c.band_ablation);
        if (j.contains("band_attack")) c.band_attack = attack_kind_from_string(j.at("band_attack").get<std::string>());
        detail::read_opt(j, "ensembles", c.ensembles);
        if (j.contains("ensemble_attack")) {
            c.ensemble_attack = attack_kind_from_string(j.at("ensemble_attack").get<std::string>());
        }
        detail::read_opt(j, "dump_examples", c.dump_examples);
        detail::read_opt(j, "diff_amplification", c.diff_amplification);
        detail::read_opt(j, "output_dir", c.output_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return experiment_config_from_json(j);
}

inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(to_json(c).dump()); }

// --- Seed streams ------------------------------------------------------------

enum SeedStream : std::uint64_t {
    kDatasetStream = 1,
    kModelInitStream = 2,
    kModelTrainStream = 3,
    kAttackStream = 4,
    kFingerprintStream = 5,
};

inline std::uint64_t dataset_seed(const ExperimentConfig& c) { return derive_seed(c.seed, kDatasetStream); }

// ---------------------------------------------------------------------------
// Synthetic data

/// Separable Gaussian blur with periodic boundaries, one channel at a time.
inline Tensor gaussian_blur(const Tensor& in, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double ks = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        ks += k[i + radius];
    }
    for (double& v : k) v /= ks;
    const int h = in.height();
    const int w = in.width();
    const auto wrap = [](int i, int n) { return ((i % n) + n) % n; };
    Tensor tmp(in.shape());
    Tensor out(in.shape());
    for (int c = 0; c < in.channels(); ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) s += k[i + radius] * in(y, wrap(x + i, w), c);
                tmp(y, x, c) = s;
            }
        }
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp(wrap(y + i, h), x, c);
                out(y, x, c) = s;
            }
        }
    }
    return out;
}

/// Signs of the synthetic generator's high-band fingerprint, one per (channel, u, v).
inline std::vector<double> fingerprint_signs(std::uint64_t seed, int channels, int block_size) {
    Rng rng(derive_seed(seed, kFingerprintStream));
    std::vector<double> s(static_cast<std::size_t>(channels) * block_size * block_size);
    for (double& v : s) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return s;
}

struct ImagePair {
    Image real;
    Image fake;
};

/// Low-pass random field, min-max normalized and quantized to 8-bit levels.
inline Image generate_real(const DatasetConfig& d, double sigma, Rng& rng) {
    const Shape shape{d.image_size, d.image_size, d.channels};
    Tensor noise(shape);
    for (double& v : noise.values()) v = rng.normal();
    Tensor field = gaussian_blur(noise, sigma);
    const auto [lo, hi] = std::minmax_element(field.values().begin(), field.values().end());
    const double mn = *lo;
    const double span = *hi - *lo;
    for (double& v : field.values()) v = span > 0.0 ? (v - mn) / span : 0.5;
    return quantize8(field);
}

/// real + high-band coefficients of magnitude amplitude * U(0.5, 1.5) with
/// the dataset's fixed sign pattern, clamped and quantized.
inline Image add_high_band_fingerprint(const Image& real, const DatasetConfig& d, const std::vector<double>& signs,
                                       Rng& rng) {
    if (d.amplitude == 0.0) return real;
    const int n = d.block_size;
    const BandMask high = band_mask(n, Band::high);
    Spectrum coeffs(n, d.image_size / n, d.image_size / n, d.channels);
    const std::size_t area = coeffs.tile_area();
    for (std::size_t t = 0; t < coeffs.tile_count(); ++t) {
        auto tile = coeffs.tile(t);
        const std::size_t base = static_cast<std::size_t>(coeffs.tile_channel(t)) * area;
        for (std::size_t k = 0; k < area; ++k) {
            if (high.mask[k]) tile[k] = d.amplitude * signs[base + k] * rng.uniform(0.5, 1.5);
        }
    }
    return quantize8(real.tensor() + inverse_spectrum(coeffs));
}

inline double high_band_energy(const Tensor& img, int block_size) {
    return band_energy(band_energy_profile(img, block_size), block_size, Band::high);
}

/// One (real, fake) pair. For positive amplitude the fake's high-band energy
/// is verified to exceed the real's; the pair is redrawn otherwise.
inline ImagePair generate_pair(const DatasetConfig& d, double sigma, const std::vector<double>& signs,
                               std::uint64_t pair_seed) {
    for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
        Rng rng(derive_seed(pair_seed, attempt));
        Image real = generate_real(d, sigma, rng);
        Image fake = add_high_band_fingerprint(real, d, signs, rng);
        if (d.amplitude == 0.0 || high_band_energy(fake, d.block_size) > high_band_energy(real, d.block_size)) {
            return {std::move(real), std::move(fake)};
        }
    }
    throw ConfigError("generator could not produce a fake with more high-band energy than its real; raise amplitude");
}

struct GeneratedData {
    LabeledDataset train;
    LabeledDataset eval;
};

inline LabeledDataset generate_split(const ExperimentConfig& cfg, const std::string& split, int count,
                                     std::uint64_t split_id) {
    const auto& d = cfg.dataset;
    const std::uint64_t seed = dataset_seed(cfg);
    const auto signs = fingerprint_signs(seed, d.channels, d.block_size);
    LabeledDataset ds;
    ds.meta = {seed, d.image_size, d.channels, d.block_size, d.amplitude, split};
    for (int p = 0; p < count / 2; ++p) {
        const std::uint64_t pair_seed = derive_seed(seed, split_id, static_cast<std::uint64_t>(p));
        ImagePair pair = generate_pair(d, cfg.blur_sigma(), signs, pair_seed);
        std::ostringstream stem;
        stem << split << '_' << std::setw(4) << std::setfill('0') << p;
        ds.items.push_back({std::move(pair.real), Label::real, pair_seed, stem.str() + "_real"});
        ds.items.push_back({std::move(pair.fake), Label::fake, pair_seed, stem.str() + "_fake"});
    }
    return ds;
}

inline GeneratedData generate_dataset(const ExperimentConfig& cfg) {
    cfg.validate();
    return {generate_split(cfg, "train", cfg.dataset.train_count, 1),
            generate_split(cfg, "eval", cfg.dataset.eval_count, 2)};
}

// --- Dataset files -------------------------------------------------------------
// <dir>/labels.csv holds "filename,label,seed" lines; <dir>/meta.json the generator parameters.

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream labels(dir / "labels.csv");
    if (!labels) throw IoError("cannot write " + (dir / "labels.csv").string());
    labels << "filename,label,seed\n";
    for (const auto& it : ds.items) {
        const std::string file = it.name + ".png";
        write_png((dir / file).string(), it.image);
        labels << file << ',' << to_int(it.label) << ',' << it.seed << '\n';
    }
    const nlohmann::json meta{{"seed", ds.meta.seed},           {"image_size", ds.meta.image_size},
                              {"channels", ds.meta.channels},   {"block_size", ds.meta.block_size},
                              {"amplitude", ds.meta.amplitude}, {"split", ds.meta.split}};
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

inline LabeledDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream labels(dir / "labels.csv");
    if (!labels) throw IoError("cannot open " + (dir / "labels.csv").string());
    LabeledDataset ds;
    std::string line;
    std::getline(labels, line);
    if (line != "filename,label,seed") throw FormatError("unexpected labels.csv header in " + dir.string());
    while (std::getline(labels, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string file, label, seed;
        if (!std::getline(ls, file, ',') || !std::getline(ls, label, ',') || !std::getline(ls, seed)) {
            throw FormatError("malformed labels.csv line: " + line);
        }
        LabeledExample ex{read_png((dir / file).string()), label_from_int(std::stoi(label)), std::stoull(seed),
                          std::filesystem::path(file).stem().string()};
        ds.items.push_back(std::move(ex));
    }
    std::ifstream ms(dir / "meta.json");
    if (ms) {
        nlohmann::json m;
        ms >> m;
        ds.meta = {m.at("seed").get<std::uint64_t>(), m.at("image_size").get<int>(), m.at("channels").get<int>(),
                   m.at("block_size").get<int>(), m.at("amplitude").get<double>(), m.at("split").get<std::string>()};
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Model roster

struct TrainedModel {
    std::string name;
    std::shared_ptr<DifferentiableModel> model;
    TrainReport report;
};

inline std::unique_ptr<DifferentiableModel> make_model(const ModelSpec& spec, const DatasetConfig& d,
                                                       std::uint64_t init_seed) {
    const Shape shape{d.image_size, d.image_size, d.channels};
    if (spec.kind == ModelKind::linear_spectral) {
        return std::make_unique<LinearSpectralClassifier>(
            LinearSpectralClassifier::random(shape, d.block_size, init_seed, spec.init_scale));
    }
    return std::make_unique<TinyCnnClassifier>(TinyCnnClassifier::random(shape, init_seed));
}

inline std::vector<TrainedModel> train_roster(const ExperimentConfig& cfg, const GeneratedData& data) {
    std::vector<TrainedModel> out;
    for (std::size_t i = 0; i < cfg.models.size(); ++i) {
        const auto& spec = cfg.models[i];
        std::shared_ptr<DifferentiableModel> m = make_model(spec, cfg.dataset, derive_seed(cfg.seed, kModelInitStream, i));
        TrainOptions opt = spec.train;
        opt.seed = derive_seed(cfg.seed, kModelTrainStream, i);
        const TrainReport rep = train(*m, data.train, &data.eval, opt);
        out.push_back({spec.name, std::move(m), rep});
    }
    return out;
}

inline nlohmann::json to_json(const TrainReport& r) {
    return {{"initial_loss", r.initial_loss},
            {"final_loss", r.final_loss},
            {"train_accuracy", r.train_accuracy},
            {"holdout_accuracy", r.holdout_accuracy},
            {"epochs_run", r.epochs_run}};
}

inline TrainReport train_report_from_json(const nlohmann::json& j) {
    return {j.at("initial_loss").get<double>(), j.at("final_loss").get<double>(),
            j.at("train_accuracy").get<double>(), j.at("holdout_accuracy").get<double>(),
            j.at("epochs_run").get<int>()};
}

// ---------------------------------------------------------------------------
// Attack jobs

/// One attack configuration applied against one source over the eval fakes it
/// classifies correctly. Sources are roster model names or "ensemble:<mode>".
struct AttackJob {
    std::string run;      // e.g. "pgd", "band:low", "ensemble:logits"
    std::string group;    // "attack", "band" or "ensemble"
    std::string source;
    AttackKind kind;
    AttackConfig cfg;
};

inline const AttackSpec* find_attack(const ExperimentConfig& cfg, AttackKind kind) {
    for (const auto& a : cfg.attacks) {
        if (a.kind == kind) return &a;
    }
    return nullptr;
}

/// Band-ablation and ensemble jobs run only when their base attack kind is
/// in the roster; they inherit that attack's configuration.
inline std::vector<AttackJob> plan_attack_jobs(const ExperimentConfig& cfg) {
    std::vector<AttackJob> jobs;
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
        const auto& spec = cfg.attacks[a];
        AttackConfig c = spec.cfg;
        c.seed = derive_seed(cfg.seed, kAttackStream, a);
        for (const auto& m : cfg.models) jobs.push_back({spec.name, "attack", m.name, spec.kind, c});
    }
    const AttackSpec* band_base = find_attack(cfg, cfg.band_attack);
    if (cfg.band_ablation && band_base) {
        AttackConfig c = band_base->cfg;
        std::uint64_t k = 100;
        for (Band b : {Band::low, Band::middle, Band::high, Band::all}) {
            c.band = b;
            c.seed = derive_seed(cfg.seed, kAttackStream, k++);
            for (const auto& m : cfg.models) {
                jobs.push_back({"band:" + std::string(to_string(b)), "band", m.name, cfg.band_attack, c});
            }
        }
    }
    const AttackSpec* ens_base = find_attack(cfg, cfg.ensemble_attack);
    if (cfg.ensembles && ens_base && cfg.models.size() >= 2) {
        AttackConfig c = ens_base->cfg;
        std::uint64_t k = 200;
        for (EnsembleMode mode : {EnsembleMode::pixel, EnsembleMode::loss, EnsembleMode::logits}) {
            c.seed = derive_seed(cfg.seed, kAttackStream, k++);
            const std::string src = "ensemble:" + std::string(to_string(mode));
            jobs.push_back({src, "ensemble", src, cfg.ensemble_attack, c});
        }
    }
    return jobs;
}

struct AttackRecord {
    std::string run;
    std::string source;
    std::size_t image_index = 0;  // into the eval split
    std::string image_name;
    Image adv;
    bool success = false;
    int iterations_used = 0;
    int grad_calls = 0;
    double final_loss = 0.0;
};

struct AttackFailure {
    std::string run;
    std::string source;
    std::size_t image_index = 0;
    std::string message;
};

struct AttackArchive {
    std::vector<AttackRecord> records;
    std::vector<AttackFailure> failures;
};

using ModelTable = std::map<std::string, std::shared_ptr<const GradientOracle>>;

inline ModelTable model_table(const std::vector<TrainedModel>& roster) {
    ModelTable t;
    std::vector<std::shared_ptr<const GradientOracle>> members;
    for (const auto& m : roster) {
        t[m.name] = m.model;
        members.push_back(m.model);
    }
    if (members.size() >= 2) {
        for (EnsembleMode mode : {EnsembleMode::pixel, EnsembleMode::loss, EnsembleMode::logits}) {
            t["ensemble:" + std::string(to_string(mode))] = ensemble(members, mode);
        }
    }
    return t;
}

inline AttackRecord run_job_on_image(const AttackJob& job, const GradientOracle& source, const LabeledExample& ex,
                                     std::size_t index) {
    AttackConfig c = job.cfg;
    c.seed = derive_seed(job.cfg.seed, index);
    AttackResult r = run_attack(job.kind, source, ex.image, Label::fake, c);
    return {job.run, job.source, index, ex.name, std::move(r.adv), r.success, r.iterations_used, r.grad_calls,
            r.final_loss};
}

inline AttackArchive run_attacks(const ExperimentConfig& cfg, const LabeledDataset& eval,
                                 const std::vector<TrainedModel>& roster) {
    const ModelTable models = model_table(roster);
    AttackArchive archive;
    for (const auto& job : plan_attack_jobs(cfg)) {
        const auto& src = *models.at(job.source);
        for (std::size_t i = 0; i < eval.items.size(); ++i) {
            const auto& ex = eval.items[i];
            if (ex.label != Label::fake || src.predict(ex.image) != Label::fake) continue;
            try {
                archive.records.push_back(run_job_on_image(job, src, ex, i));
            } catch (const Error& e) {
                archive.failures.push_back({job.run, job.source, i, e.what()});
            }
        }
    }
    return archive;
}

// --- Archive files -------------------------------------------------------------
// Adversarial tensors are stored losslessly as "FQAT" sidecars: u32 height,
// width, channels, then float64 values in tensor order. The PNG next to each
// is a quantized preview only.

inline void save_tensor_bin(const Tensor& t, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write("FQAT", 4);
    for (int d : {t.height(), t.width(), t.channels()}) {
        const auto v = static_cast<std::uint32_t>(d);
        os.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    os.write(reinterpret_cast<const char*>(t.raw().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!os) throw IoError("failed writing " + path.string());
}

inline Tensor load_tensor_bin(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    std::uint32_t dims[3];
    if (!is.read(magic, 4) || std::string(magic, 4) != "FQAT" ||
        !is.read(reinterpret_cast<char*>(dims), sizeof dims)) {
        throw FormatError("not a tensor file: " + path.string());
    }
    const Shape shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2])};
    std::vector<double> v(shape.size());
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
        throw FormatError("truncated tensor file: " + path.string());
    }
    return Tensor(shape, std::move(v));
}

inline std::string record_stem(const AttackRecord& r) {
    std::string s = r.run + "__" + r.source + "__" + r.image_name;
    std::replace(s.begin(), s.end(), ':', '_');
    return s;
}

inline nlohmann::json to_json(const AttackRecord& r) {
    return {{"run", r.run},
            {"source", r.source},
            {"image_index", r.image_index},
            {"image_name", r.image_name},
            {"success", r.success},
            {"iterations_used", r.iterations_used},
            {"grad_calls", r.grad_calls},
            {"final_loss", json_real(r.final_loss)},
            {"adv_tensor", record_stem(r) + ".bin"},
            {"adv_png", record_stem(r) + ".png"}};
}

/// <dir>/index.json lists every record and failure; each record also gets
/// its own JSON, lossless tensor and PNG preview.
inline void save_archive(const AttackArchive& a, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : a.records) {
        const nlohmann::json j = to_json(r);
        save_tensor_bin(r.adv, dir / j.at("adv_tensor").get<std::string>());
        write_png((dir / j.at("adv_png").get<std::string>()).string(), r.adv);
        std::ofstream(dir / (record_stem(r) + ".json")) << j.dump(2) << '\n';
        records.push_back(j);
    }
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : a.failures) {
        failures.push_back({{"run", f.run}, {"source", f.source}, {"image_index", f.image_index}, {"message", f.message}});
    }
    std::ofstream os(dir / "index.json");
    if (!os) throw IoError("cannot write " + (dir / "index.json").string());
    os << nlohmann::json{{"records", records}, {"failures", failures}}.dump(2) << '\n';
}

inline AttackArchive load_archive(const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.json");
    if (!is) throw IoError("cannot open " + (dir / "index.json").string());
    nlohmann::json j;
    is >> j;
    AttackArchive a;
    for (const auto& r : j.at("records")) {
        a.records.push_back({r.at("run").get<std::string>(), r.at("source").get<std::string>(),
                             r.at("image_index").get<std::size_t>(), r.at("image_name").get<std::string>(),
                             Image(load_tensor_bin(dir / r.at("adv_tensor").get<std::string>())),
                             r.at("success").get<bool>(), r.at("iterations_used").get<int>(),
                             r.at("grad_calls").get<int>(), real_from_json(r.at("final_loss"))});
    }
    for (const auto& f : j.at("failures")) {
        a.failures.push_back({f.at("run").get<std::string>(), f.at("source").get<std::string>(),
                              f.at("image_index").get<std::size_t>(), f.at("message").get<std::string>()});
    }
    return a;
}

/// <dir>/<name>.fqam checkpoints plus <dir>/training.json with the reports.
inline void save_roster(const std::vector<TrainedModel>& roster, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& m : roster) {
        save_checkpoint(*m.model, (dir / (m.name + ".fqam")).string());
        j.push_back({{"name", m.name}, {"checkpoint", m.name + ".fqam"}, {"report", to_json(m.report)}});
    }
    std::ofstream(dir / "training.json") << j.dump(2) << '\n';
}

inline std::vector<TrainedModel> load_roster(const std::filesystem::path& dir) {
    std::ifstream is(dir / "training.json");
    if (!is) throw IoError("cannot open " + (dir / "training.json").string());
    nlohmann::json j;
    is >> j;
    std::vector<TrainedModel> out;
    for (const auto& m : j) {
        std::shared_ptr<DifferentiableModel> model = load_checkpoint((dir / m.at("checkpoint").get<std::string>()).string());
        out.push_back({m.at("name").get<std::string>(), std::move(model), train_report_from_json(m.at("report"))});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report

struct QualityRow {
    std::string run;
    std::string source;
    std::size_t count = 0;  // white-box successes measured
    double mean_mse = 0.0;
    double median_mse = 0.0;
    double mean_psnr = 0.0;
    double median_psnr = 0.0;
    double mean_ssim = 0.0;
};

inline nlohmann::json rate_json(std::size_t num, std::size_t den) { return to_json(RateCount{num, den}); }

/// Per-run transfer matrix: sources are the job sources, targets the roster.
inline TransferMatrix run_transfer(const std::string& run, const std::vector<std::string>& sources,
                                   const std::vector<TrainedModel>& roster, const ModelTable& models,
                                   const LabeledDataset& eval, const AttackArchive& archive) {
    TransferMatrix m;
    m.sources = sources;
    for (const auto& t : roster) m.targets.push_back(t.name);
    for (const auto& s : sources) {
        std::vector<const Tensor*> inits;
        std::vector<const Tensor*> advs;
        for (const auto& r : archive.records) {
            if (r.run != run || r.source != s) continue;
            inits.push_back(&eval.items.at(r.image_index).image.tensor());
            advs.push_back(&r.adv.tensor());
        }
        std::vector<RateCount> row;
        for (const auto& t : roster) row.push_back(transfer_cell(*models.at(s), *t.model, inits, advs));
        m.cells.push_back(std::move(row));
    }
    return m;
}

inline QualityRow quality_row(const std::string& run, const std::string& source, const LabeledDataset& eval,
                              const AttackArchive& archive) {
    std::vector<double> mses, psnrs, ssims;
    for (const auto& r : archive.records) {
        if (r.run != run || r.source != source || !r.success) continue;
        const QualityReport q = quality(eval.items.at(r.image_index).image, r.adv);
        mses.push_back(q.mse);
        psnrs.push_back(q.psnr);
        ssims.push_back(q.ssim);
    }
    return {run, source, mses.size(), mean(mses), median(mses), mean(psnrs), median(psnrs), mean(ssims)};
}

inline nlohmann::json to_json(const QualityRow& q) {
    return {{"run", q.run},
            {"source", q.source},
            {"count", q.count},
            {"mean_mse", json_real(q.mean_mse)},
            {"median_mse", json_real(q.median_mse)},
            {"mean_psnr", json_real(q.mean_psnr)},
            {"median_psnr", json_real(q.median_psnr)},
            {"mean_ssim", json_real(q.mean_ssim)}};
}

inline nlohmann::json dataset_summary(const GeneratedData& data) {
    nlohmann::json j;
    for (const LabeledDataset* ds : {&data.train, &data.eval}) {
        std::size_t pairs = 0, richer = 0;
        std::vector<double> real_e, fake_e;
        for (std::size_t i = 0; i + 1 < ds->items.size(); i += 2) {
            const int n = ds->meta.block_size;
            const double er = high_band_energy(ds->items[i].image, n);
            const double ef = high_band_energy(ds->items[i + 1].image, n);
            real_e.push_back(er);
            fake_e.push_back(ef);
            ++pairs;
            richer += ef > er ? 1 : 0;
        }
        j[ds->meta.split] = {{"images", ds->size()},
                             {"real", ds->count(Label::real)},
                             {"fake", ds->count(Label::fake)},
                             {"mean_high_band_energy_real", json_real(mean(real_e))},
                             {"mean_high_band_energy_fake", json_real(mean(fake_e))},
                             {"fake_richer_pairs", rate_json(richer, pairs)}};
    }
    return j;
}

/// Builds the report from the outputs of the earlier stages. Contains no
/// timestamp; stamp_report() adds one.
inline nlohmann::json build_report(const ExperimentConfig& cfg, const GeneratedData& data,
                                   const std::vector<TrainedModel>& roster, const AttackArchive& archive) {
    const ModelTable models = model_table(roster);
    const auto jobs = plan_attack_jobs(cfg);
    nlohmann::json rep;
    rep["toolkit"] = {{"name", "freqattack"}, {"version", kToolkitVersion}};
    nlohmann::json seeds{{"master", cfg.seed}, {"dataset", dataset_seed(cfg)}};
    for (std::size_t i = 0; i < cfg.models.size(); ++i) {
        seeds["models"][cfg.models[i].name] = {{"init", derive_seed(cfg.seed, kModelInitStream, i)},
                                               {"train", derive_seed(cfg.seed, kModelTrainStream, i)}};
    }
    rep["provenance"] = {{"config_hash", config_hash(cfg)}, {"seeds", seeds}};
    rep["config"] = to_json(cfg);
    rep["dataset"] = dataset_summary(data);

    nlohmann::json mj = nlohmann::json::array();
    for (const auto& m : roster) {
        std::size_t ok_train = 0, ok_eval = 0, fakes_ok = 0;
        for (const auto& it : data.train.items) ok_train += m.model->predict(it.image) == it.label ? 1 : 0;
        for (const auto& it : data.eval.items) {
            const bool ok = m.model->predict(it.image) == it.label;
            ok_eval += ok ? 1 : 0;
            fakes_ok += ok && it.label == Label::fake ? 1 : 0;
        }
        mj.push_back({{"name", m.name},
                      {"kind", std::string(to_string(m.model->kind()))},
                      {"train_accuracy", rate_json(ok_train, data.train.size())},
                      {"holdout_accuracy", rate_json(ok_eval, data.eval.size())},
                      {"eval_fakes_detected", rate_json(fakes_ok, data.eval.count(Label::fake))},
                      {"training", to_json(m.report)}});
    }
    rep["models"] = mj;

    // Distinct runs in plan order.
    std::vector<std::pair<std::string, std::string>> runs;  // (run, group)
    std::map<std::string, std::vector<std::string>> run_sources;
    for (const auto& j : jobs) {
        if (run_sources.find(j.run) == run_sources.end()) runs.emplace_back(j.run, j.group);
        run_sources[j.run].push_back(j.source);
    }

    nlohmann::json attacks = nlohmann::json::object(), bands = nlohmann::json::object(),
                   ens = nlohmann::json::object(), quality_rows = nlohmann::json::array();
    for (const auto& [run, group] : runs) {
        const TransferMatrix tm = run_transfer(run, run_sources[run], roster, models, data.eval, archive);
        nlohmann::json budget = nlohmann::json::object();
        for (const auto& s : run_sources[run]) {
            std::vector<double> iters, calls;
            for (const auto& r : archive.records) {
                if (r.run == run && r.source == s) {
                    iters.push_back(r.iterations_used);
                    calls.push_back(r.grad_calls);
                }
            }
            std::size_t failed = 0;
            for (const auto& f : archive.failures) failed += f.run == run && f.source == s ? 1 : 0;
            budget[s] = {{"mean_iterations", json_real(mean(iters))},
                         {"mean_grad_calls", json_real(mean(calls))},
                         {"failed_images", failed}};
            quality_rows.push_back(to_json(quality_row(run, s, data.eval, archive)));
        }
        nlohmann::json entry{{"transfer", to_json(tm)}, {"budget", budget}};
        if (group == "attack") {
            attacks[run] = entry;
        } else if (group == "band") {
            bands[run.substr(5)] = entry;
        } else {
            ens[run.substr(9)] = entry;
        }
    }
    rep["attacks"] = attacks;
    rep["bands"] = bands;
    rep["ensembles"] = ens;
    rep["quality"] = quality_rows;
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : archive.failures) {
        failures.push_back({{"run", f.run}, {"source", f.source}, {"image_index", f.image_index}, {"message", f.message}});
    }
    rep["failures"] = failures;

    // Variant ablation: spatial / frequency / sum / hybrid rates per source and target.
    nlohmann::json variants = nlohmann::json::object();
    for (AttackKind k : {AttackKind::pgd, AttackKind::frequency, AttackKind::sum, AttackKind::hybrid}) {
        const AttackSpec* spec = find_attack(cfg, k);
        if (spec) variants[std::string(to_string(k))] = attacks[spec->name]["transfer"];
    }
    rep["variants"] = variants;
    rep["generated_at"] = nullptr;
    return rep;
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline void stamp_report(nlohmann::json& rep) { rep["generated_at"] = utc_timestamp(); }

/// Report with the timestamp blanked, for byte-level comparisons.
inline std::string canonical_report(nlohmann::json rep) {
    rep["generated_at"] = nullptr;
    return rep.dump(2);
}

struct ExperimentOutputs {
    GeneratedData data;
    std::vector<TrainedModel> roster;
    AttackArchive archive;
    nlohmann::json report;
};

/// Writes init / adv / amplified-difference triplets for the first k records
/// of each (run, source).
inline void dump_examples(const ExperimentConfig& cfg, const LabeledDataset& eval, const AttackArchive& archive,
                          const std::filesystem::path& dir) {
    if (cfg.dump_examples <= 0) return;
    std::map<std::string, int> written;
    for (const auto& r : archive.records) {
        std::string key = r.run + "__" + r.source;
        if (written[key]++ >= cfg.dump_examples) continue;
        std::replace(key.begin(), key.end(), ':', '_');
        const auto sub = dir / "examples" / key;
        std::filesystem::create_directories(sub);
        const Tensor& init = eval.items.at(r.image_index).image;
        Tensor diff = (r.adv.tensor() - init) * cfg.diff_amplification;
        for (double& v : diff.values()) v += 0.5;
        write_png((sub / (r.image_name + "_init.png")).string(), init);
        write_png((sub / (r.image_name + "_adv.png")).string(), r.adv);
        write_png((sub / (r.image_name + "_diff.png")).string(), clamp_pixels(diff));
    }
    const nlohmann::json meta{{"diff_amplification", cfg.diff_amplification}, {"diff_offset", 0.5}};
    std::filesystem::create_directories(dir / "examples");
    std::ofstream(dir / "examples" / "meta.json") << meta.dump(2) << '\n';
}

inline ExperimentOutputs run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentOutputs out;
    out.data = generate_dataset(cfg);
    out.roster = train_roster(cfg, out.data);
    out.archive = run_attacks(cfg, out.data.eval, out.roster);
    out.report = build_report(cfg, out.data, out.roster, out.archive);
    if (!cfg.output_dir.empty()) {
        std::filesystem::create_directories(cfg.output_dir);
        dump_examples(cfg, out.data.eval, out.archive, cfg.output_dir);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Human-readable tables derived from a report

inline std::string format_rate(const nlohmann::json& cell) {
    std::ostringstream os;
    if (cell.at("rate").is_null()) {
        os << "   n/a";
    } else {
        os << std::fixed << std::setprecision(1) << std::setw(5) << 100.0 * cell.at("rate").get<double>() << '%';
    }
    os << " (" << cell.at("successes").get<std::size_t>() << '/' << cell.at("attempts").get<std::size_t>() << ')';
    return os.str();
}

inline void format_matrix(std::ostream& os, const std::string& title, const nlohmann::json& tm) {
    os << title << '\n';
    os << std::left << std::setw(22) << "  source \\ target";
    for (const auto& t : tm.at("targets")) os << std::setw(22) << t.get<std::string>();
    os << '\n';
    const auto& sources = tm.at("sources");
    for (std::size_t s = 0; s < sources.size(); ++s) {
        os << "  " << std::setw(20) << sources[s].get<std::string>();
        for (const auto& c : tm.at("cells")[s]) os << std::setw(22) << format_rate(c);
        os << '\n';
    }
    os << std::right;
}

inline std::string format_report_text(const nlohmann::json& rep) {
    std::ostringstream os;
    os << "freqattack report (config " << rep.at("provenance").at("config_hash").get<std::string>() << ")\n\n";
    os << "Model accuracy\n";
    for (const auto& m : rep.at("models")) {
        os << "  " << std::left << std::setw(12) << m.at("name").get<std::string>() << std::right
           << " train " << format_rate(m.at("train_accuracy")) << "  holdout " << format_rate(m.at("holdout_accuracy"))
           << '\n';
    }
    os << '\n';
    for (const auto& [name, entry] : rep.at("attacks").items()) format_matrix(os, "Attack: " + name, entry.at("transfer"));
    os << '\n';
    for (const auto& [name, entry] : rep.at("bands").items()) format_matrix(os, "Band: " + name, entry.at("transfer"));
    os << '\n';
    for (const auto& [name, entry] : rep.at("ensembles").items()) {
        format_matrix(os, "Ensemble in " + name, entry.at("transfer"));
    }
    os << "\nImage quality on white-box successes\n";
    os << "  " << std::left << std::setw(18) << "run" << std::setw(18) << "source" << std::right << std::setw(6)
       << "n" << std::setw(12) << "MSE" << std::setw(10) << "PSNR" << std::setw(10) << "SSIM" << '\n';
    for (const auto& q : rep.at("quality")) {
        const auto num = [](const nlohmann::json& v) {
            std::ostringstream s;
            if (v.is_number()) {
                s << std::setprecision(4) << v.get<double>();
            } else {
                s << v.get<std::string>();
            }
            return s.str();
        };
        os << "  " << std::left << std::setw(18) << q.at("run").get<std::string>() << std::setw(18)
           << q.at("source").get<std::string>() << std::right << std::setw(6) << q.at("count").get<std::size_t>()
           << std::setw(12) << num(q.at("mean_mse")) << std::setw(10) << num(q.at("median_psnr")) << std::setw(10)
           << num(q.at("mean_ssim")) << '\n';
    }
    return os.str();
}

} // namespace freqattack
