// Labels and labeled image collections.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "freqattack/tensor.hpp"

namespace freqattack {

enum class Label : int { real = 0, fake = 1 };

inline int to_int(Label l) noexcept { return static_cast<int>(l); }
inline double to_target(Label l) noexcept { return l == Label::fake ? 1.0 : 0.0; }
inline Label flip(Label l) noexcept { return l == Label::fake ? Label::real : Label::fake; }
inline Label label_from_int(int v) {
    if (v != 0 && v != 1) throw RangeError("label must be 0 or 1, got " + std::to_string(v));
    return v == 1 ? Label::fake : Label::real;
}

struct LabeledExample {
    Image image;
    Label label;
    std::uint64_t seed = 0;  // generator seed of this item
    std::string name;        // file stem when stored on disk
};

struct DatasetMeta {
    std::uint64_t seed = 0;
    int image_size = 0;
    int channels = 0;
    int block_size = 0;
    double amplitude = 0.0;
    std::string split;
    bool operator==(const DatasetMeta&) const = default;
};

struct LabeledDataset {
    std::vector<LabeledExample> items;
    DatasetMeta meta;

    std::size_t size() const noexcept { return items.size(); }
    bool empty() const noexcept { return items.empty(); }

    std::size_t count(Label l) const noexcept {
        std::size_t n = 0;
        for (const auto& it : items) n += it.label == l ? 1 : 0;
        return n;
    }
};

} // namespace freqattack
