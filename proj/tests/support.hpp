// Fixtures shared by the unit tests.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "freqattack/freqattack.hpp"

namespace fa_test {

using namespace freqattack;

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor t(s);
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline Image random_image(Shape s, std::uint64_t seed) { return Image(random_tensor(s, seed, 0.05, 0.95)); }

/// Fresh scratch directory under the build tree (or the system temp dir).
inline std::filesystem::path scratch_dir(const std::string& name) {
    const char* env = std::getenv("FREQATTACK_TMP");
    const std::filesystem::path root = env ? env : std::filesystem::temp_directory_path() / "freqattack_tests";
    const auto dir = root / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Small config that trains in about a second: 32x32 images, linear model.
inline ExperimentConfig small_config() {
    ExperimentConfig c = ExperimentConfig::defaults();
    c.seed = 11;
    c.dataset.train_count = 40;
    c.dataset.eval_count = 20;
    c.dataset.image_size = 32;
    c.models = {{"linear", ModelKind::linear_spectral, {40, 0.01, 10, 0, Optimizer::adam}, 0.01}};
    for (auto& a : c.attacks) a.cfg.max_iters = 10;
    return c;
}

/// Linear detector trained on small_config() data, plus that data.
struct TrainedFixture {
    ExperimentConfig cfg;
    GeneratedData data;
    std::shared_ptr<DifferentiableModel> model;
};

inline const TrainedFixture& trained_linear() {
    static const TrainedFixture fx = [] {
        TrainedFixture f{small_config(), {}, nullptr};
        f.data = generate_dataset(f.cfg);
        auto roster = train_roster(f.cfg, f.data);
        f.model = roster.front().model;
        return f;
    }();
    return fx;
}

} // namespace fa_test
