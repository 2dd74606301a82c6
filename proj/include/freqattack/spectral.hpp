// Orthonormal block DCT, frequency bands, energy profiles and the adaptive
// per-coefficient weight matrix.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "freqattack/errors.hpp"
#include "freqattack/imaging.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

struct CoefficientTileTag {};
/// Per-block, per-channel DCT coefficients in BlockGrid layout; tile entry
/// u * N + v holds D(u, v).
using Spectrum = BlockArray<CoefficientTileTag>;

/// Orthonormal type-II DCT matrix: basis[u * N + i] = c(u) cos((2i + 1) u pi / 2N)
/// with c(0) = sqrt(1/N) and c(u > 0) = sqrt(2/N). Rows are orthonormal, so the
/// inverse is the transpose.
class DctBasis {
public:
    explicit DctBasis(int n) : n_(n), m_(static_cast<std::size_t>(n) * n) {
        if (n < 2) throw DimensionError("DCT block size must be >= 2");
        for (int u = 0; u < n; ++u) {
            const double cu = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
            for (int i = 0; i < n; ++i) {
                m_[static_cast<std::size_t>(u) * n + i] =
                    cu * std::cos((2.0 * i + 1.0) * u * std::numbers::pi / (2.0 * n));
            }
        }
    }

    int size() const noexcept { return n_; }
    double operator()(int u, int i) const noexcept { return m_[static_cast<std::size_t>(u) * n_ + i]; }

    /// out = C * in * C^T. `in` and `out` must not alias.
    void forward(std::span<const double> in, std::span<double> out) const {
        const int n = n_;
        std::vector<double> tmp(static_cast<std::size_t>(n) * n, 0.0);
        for (int u = 0; u < n; ++u) {
            for (int i = 0; i < n; ++i) {
                const double c = m_[u * n + i];
                for (int j = 0; j < n; ++j) tmp[u * n + j] += c * in[i * n + j];
            }
        }
        for (int u = 0; u < n; ++u) {
            for (int v = 0; v < n; ++v) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) s += tmp[u * n + j] * m_[v * n + j];
                out[u * n + v] = s;
            }
        }
    }

    /// out = C^T * in * C. `in` and `out` must not alias.
    void inverse(std::span<const double> in, std::span<double> out) const {
        const int n = n_;
        std::vector<double> tmp(static_cast<std::size_t>(n) * n, 0.0);
        for (int u = 0; u < n; ++u) {
            for (int i = 0; i < n; ++i) {
                const double c = m_[u * n + i];
                for (int v = 0; v < n; ++v) tmp[i * n + v] += c * in[u * n + v];
            }
        }
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int v = 0; v < n; ++v) s += tmp[i * n + v] * m_[v * n + j];
                out[i * n + j] = s;
            }
        }
    }

private:
    int n_;
    std::vector<double> m_;
};

/// Shared read-only basis for block size n, built on first use.
inline const DctBasis& dct_basis(int n) {
    static std::mutex mu;
    static std::map<int, std::unique_ptr<DctBasis>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[n];
    if (!slot) slot = std::make_unique<DctBasis>(n);
    return *slot;
}

namespace detail {

inline int square_side(std::span<const double> tile) {
    const auto n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tile.size()))));
    if (n < 2 || static_cast<std::size_t>(n) * n != tile.size()) {
        throw DimensionError("tile of " + std::to_string(tile.size()) + " values is not a square with N >= 2");
    }
    return n;
}

inline void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
    }
}

} // namespace detail

inline std::vector<double> dct2_block(std::span<const double> tile) {
    const int n = detail::square_side(tile);
    detail::require_finite(tile, "dct2_block");
    std::vector<double> out(tile.size());
    dct_basis(n).forward(tile, out);
    return out;
}

inline std::vector<double> idct2_block(std::span<const double> coeffs) {
    const int n = detail::square_side(coeffs);
    detail::require_finite(coeffs, "idct2_block");
    std::vector<double> out(coeffs.size());
    dct_basis(n).inverse(coeffs, out);
    return out;
}

inline Spectrum forward_spectrum(const Tensor& img, int block_size) {
    require_divisible(img.shape(), block_size);
    detail::require_finite(img.values(), "forward_spectrum");
    const BlockGrid grid = split_blocks(img, block_size);
    Spectrum spec(block_size, grid.rows(), grid.cols(), grid.channels());
    const DctBasis& basis = dct_basis(block_size);
    for (std::size_t t = 0; t < grid.tile_count(); ++t) basis.forward(grid.tile(t), spec.tile(t));
    return spec;
}

/// Pixels of the result may leave [0, 1]; callers clamp.
inline Tensor inverse_spectrum(const Spectrum& spec) {
    detail::require_finite(spec.values(), "inverse_spectrum");
    BlockGrid grid(spec.block_size(), spec.rows(), spec.cols(), spec.channels());
    const DctBasis& basis = dct_basis(spec.block_size());
    for (std::size_t t = 0; t < spec.tile_count(); ++t) basis.inverse(spec.tile(t), grid.tile(t));
    return merge_blocks(grid);
}

// ---------------------------------------------------------------------------
// Frequency bands

enum class Band { low, middle, high, all };

inline std::string_view to_string(Band b) {
    switch (b) {
        case Band::low: return "low";
        case Band::middle: return "middle";
        case Band::high: return "high";
        case Band::all: return "all";
    }
    return "all";
}

inline Band band_from_string(std::string_view s) {
    if (s == "low") return Band::low;
    if (s == "middle") return Band::middle;
    if (s == "high") return Band::high;
    if (s == "all") return Band::all;
    throw ConfigError("unknown band '" + std::string(s) + "'");
}

struct BandMask {
    int block_size = 0;
    Band band = Band::all;
    std::vector<unsigned char> mask;  // N x N, row u, column v

    bool contains(int u, int v) const noexcept { return mask[static_cast<std::size_t>(u) * block_size + v] != 0; }
    std::size_t count() const noexcept { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

/// Largest anti-diagonal index u + v that still belongs to the low band.
inline int low_band_limit(int n) { return (2 * (n - 1)) / 3; }
/// Anti-diagonal indices strictly above this belong to the high band.
inline int high_band_start(int n) { return (4 * (n - 1)) / 3; }

inline Band classify_position(int n, int u, int v) {
    const int d = u + v;
    if (d <= low_band_limit(n)) return Band::low;
    if (d > high_band_start(n)) return Band::high;
    return Band::middle;
}

inline BandMask band_mask(int block_size, Band band) {
    if (block_size < 3) throw DimensionError("band_mask needs block size >= 3");
    BandMask m{block_size, band, std::vector<unsigned char>(static_cast<std::size_t>(block_size) * block_size, 0)};
    for (int u = 0; u < block_size; ++u) {
        for (int v = 0; v < block_size; ++v) {
            const bool in = band == Band::all || classify_position(block_size, u, v) == band;
            m.mask[static_cast<std::size_t>(u) * block_size + v] = in ? 1 : 0;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Energy statistics

/// Entry d is the mean, over all tiles, of the squared coefficients on the
/// anti-diagonal u + v == d. The entries sum to the mean tile energy.
inline std::vector<double> band_energy_profile(const Spectrum& spec) {
    const int n = spec.block_size();
    std::vector<double> profile(static_cast<std::size_t>(2 * n - 1), 0.0);
    for (std::size_t t = 0; t < spec.tile_count(); ++t) {
        auto tile = spec.tile(t);
        for (int u = 0; u < n; ++u) {
            for (int v = 0; v < n; ++v) {
                const double c = tile[u * n + v];
                profile[u + v] += c * c;
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(spec.tile_count());
    for (double& e : profile) e *= inv;
    return profile;
}

inline std::vector<double> band_energy_profile(const Tensor& img, int block_size) {
    return band_energy_profile(forward_spectrum(img, block_size));
}

/// Mean per-tile energy over the anti-diagonals of one band.
inline double band_energy(const std::vector<double>& profile, int block_size, Band band) {
    double e = 0.0;
    for (int d = 0; d < static_cast<int>(profile.size()); ++d) {
        const bool in = band == Band::all ||
                        (band == Band::low && d <= low_band_limit(block_size)) ||
                        (band == Band::high && d > high_band_start(block_size)) ||
                        (band == Band::middle && d > low_band_limit(block_size) && d <= high_band_start(block_size));
        if (in) e += profile[d];
    }
    return e;
}

inline void write_energy_profile_csv(std::ostream& os, const std::vector<double>& profile) {
    os << "d,energy\n";
    os.precision(17);
    for (std::size_t d = 0; d < profile.size(); ++d) os << d << ',' << profile[d] << '\n';
}

// ---------------------------------------------------------------------------
// Adaptive weight matrix

/// N x N nonnegative per-coefficient step scale with maximum exactly 1.
struct WeightMatrix {
    int block_size = 0;
    std::vector<double> weights;

    double operator()(int u, int v) const noexcept { return weights[static_cast<std::size_t>(u) * block_size + v]; }
    double at(std::size_t uv) const noexcept { return weights[uv]; }

    static WeightMatrix ones(int n) {
        return {n, std::vector<double>(static_cast<std::size_t>(n) * n, 1.0)};
    }
};

/// Mean absolute coefficient per position, normalized by its maximum.
inline WeightMatrix compute_weight_matrix(const Spectrum& spec) {
    const int n = spec.block_size();
    const std::size_t area = spec.tile_area();
    std::vector<double> w(area, 0.0);
    for (std::size_t t = 0; t < spec.tile_count(); ++t) {
        auto tile = spec.tile(t);
        for (std::size_t k = 0; k < area; ++k) w[k] += std::abs(tile[k]);
    }
    const double inv = 1.0 / static_cast<double>(spec.tile_count());
    for (double& x : w) x *= inv;
    const double mx = *std::max_element(w.begin(), w.end());
    if (!std::isfinite(mx)) throw NumericError("compute_weight_matrix: non-finite coefficients");
    if (mx <= 0.0) throw DegenerateInput("compute_weight_matrix: spectrum is identically zero");
    for (double& x : w) x = x == mx ? 1.0 : x / mx;
    return {n, std::move(w)};
}

/// Multiply every tile elementwise by an N x N per-position factor.
inline void scale_positions(Spectrum& spec, std::span<const double> per_position) {
    const std::size_t area = spec.tile_area();
    for (std::size_t t = 0; t < spec.tile_count(); ++t) {
        auto tile = spec.tile(t);
        for (std::size_t k = 0; k < area; ++k) tile[k] *= per_position[k];
    }
}

inline double energy(const Spectrum& spec) {
    double s = 0.0;
    for (double c : spec.values()) s += c * c;
    return s;
}

/// Energy of the coefficients outside the given band.
inline double energy_outside(const Spectrum& spec, const BandMask& mask) {
    const std::size_t area = spec.tile_area();
    double s = 0.0;
    for (std::size_t t = 0; t < spec.tile_count(); ++t) {
        auto tile = spec.tile(t);
        for (std::size_t k = 0; k < area; ++k) {
            if (!mask.mask[k]) s += tile[k] * tile[k];
        }
    }
    return s;
}

} // namespace freqattack
