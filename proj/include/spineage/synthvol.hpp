#ifndef SPINEAGE_SYNTHVOL_HPP
#define SPINEAGE_SYNTHVOL_HPP

#include "errors.hpp"
#include "io.hpp"
#include "report_features.hpp"
#include "rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

/**
 * @file synthvol.hpp
 *
 * Synthetic spine volumes with matching condition reports, and the
 * preprocessing chain applied before the network: resample to a common
 * spacing, center crop/pad, dilated-mask removal of non-spine tissue and
 * optional restriction to one spinal region.
 *
 * Grids are stored x-fastest: index = x + nx * (y + ny * z). The spine runs
 * along y (cervical at y = 0); z is the slice axis.
 */

namespace spineage::vol {

struct Dims {
    std::size_t x = 1, y = 1, z = 1;
    std::size_t count() const { return x * y * z; }
    friend bool operator==(const Dims&, const Dims&) = default;
};

struct Spacing {
    double x = 1.0, y = 1.0, z = 1.0;
    friend bool operator==(const Spacing&, const Spacing&) = default;
};

enum class RegionLabel : std::uint8_t { Background = 0, Cervical = 1, Thoracic = 2, Lumbar = 3, Other = 4 };

inline RegionLabel region_label(Region r) { return static_cast<RegionLabel>(static_cast<int>(r) + 1); }

struct Volume {
    Dims dims;
    Spacing spacing{0.9, 0.9, 3.0};
    std::vector<float> intensity;
    std::vector<std::uint8_t> mask;
    std::vector<std::uint8_t> regions;

    Volume() = default;
    Volume(Dims d, Spacing s) : dims(d), spacing(s), intensity(d.count(), 0.0f), mask(d.count(), 0), regions(d.count(), 0) {}

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims.x * (y + dims.y * z); }

    void validate() const {
        const std::size_t n = dims.count();
        if (intensity.size() != n || mask.size() != n || regions.size() != n) {
            throw DimensionError("volume grids disagree with dims");
        }
        if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0)) {
            throw ValidationError("volume spacing must be positive");
        }
        for (float v : intensity) {
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
                throw ValidationError("volume intensities must be finite and within [0, 1]");
            }
        }
    }
};

enum class Sex : std::uint8_t { Male = 0, Female = 1 };
enum class Split : std::uint8_t { Unassigned = 0, Train, Val, Test };

inline std::string_view name(Sex s) { return s == Sex::Male ? "male" : "female"; }
inline std::string_view name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    default: return "unassigned";
    }
}

struct Covariates {
    double packs_per_day = 0.0;
    double alcohol_days_per_week = 0.0;
    double sedentary_hours = 0.0;
    int work_level = 0;     ///< 0 light, 1 physically moderate, 2 physically heavy
    int exercise_level = 0; ///< 0 none, 1 moderate, 2 vigorous
};

struct Subject {
    std::string id;
    double age = 25.0;
    Sex sex = Sex::Male;
    int bracket = 30;
    Covariates covariates;
    Split split = Split::Unassigned;
};

inline constexpr std::array<int, 6> kBrackets{30, 40, 50, 60, 70, 80};

/// Decade bracket: 30 covers 25-34, ..., 80 covers 75-84.
inline int bracket_of(double age) {
    if (age < 25.0 || age >= 85.0) {
        throw ValidationError("age " + std::to_string(age) + " outside [25, 85)");
    }
    return 30 + 10 * static_cast<int>(std::floor((age - 25.0) / 10.0));
}

struct SynthConfig {
    Dims grid{96, 192, 8};
    Spacing target_spacing{0.9, 0.9, 3.0};
    std::size_t vertebrae = 23; ///< 6 cervical + 12 thoracic + 5 lumbar; a sacral block is added below
    double spacing_jitter = 0.2;
    double coverage_jitter = 0.1;
    // degeneration model
    double intensity_slope = 0.011;
    double intensity_noise_sd = 0.05;
    double blob_rate_slope = 0.05;
    double voxel_noise_sd = 0.02;
    double bio_offset_sd = 1.5;
    double atypical_probability = 0.35;
    std::size_t dilation_radius = 2;

    static SynthConfig desk() { return {}; }

    /// Half the desk grid in-plane at twice the spacing; same physical field of view.
    static SynthConfig compact() {
        SynthConfig c;
        c.grid = {48, 96, 8};
        c.target_spacing = {1.8, 1.8, 3.0};
        return c;
    }

    /// Grid of the production network input; used for parameter census only.
    static SynthConfig full_scale() {
        SynthConfig c;
        c.grid = {384, 793, 14};
        return c;
    }

    void validate() const {
        if (grid.x < 32 || grid.y < 32 || grid.z < 1) {
            throw ConfigError("synth: grid must be at least 32 x 32 x 1");
        }
        if (vertebrae < 3 || vertebrae > kVertebrae) {
            throw ConfigError("synth: vertebra count must be within [3, 26]");
        }
        if (!(spacing_jitter >= 0.0 && spacing_jitter < 0.9) || !(coverage_jitter >= 0.0 && coverage_jitter < 0.5)) {
            throw ConfigError("synth: jitter out of range");
        }
    }
};

// ---------------------------------------------------------------------------
// Degeneration model

/// Disc brightness at a given (spine) age: clamp(1 - slope (age - 25) + noise, 0, 1).
inline double disc_intensity(double age, double noise, double slope = 0.011) {
    return std::clamp(1.0 - slope * (age - 25.0) + noise, 0.0, 1.0);
}

/// Expected number of osteophyte blobs at a given (spine) age.
inline double osteophyte_rate(double age, double slope = 0.05) { return std::max(0.0, slope * (age - 25.0)); }

/// Disc height as a fraction of one vertebral unit; shrinks linearly with age.
inline double disc_height_fraction(double age) { return std::clamp(0.5 - 0.005 * (age - 25.0), 0.15, 0.5); }

/// Mean of clamp(mu + N(0, sd^2), 0, 1), by numerical integration.
inline double expected_clamped_normal(double mu, double sd) {
    if (sd <= 0.0) {
        return std::clamp(mu, 0.0, 1.0);
    }
    double total = 0.0;
    const int steps = 4000;
    const double lo = -8.0, hi = 8.0, h = (hi - lo) / steps;
    for (int i = 0; i <= steps; ++i) {
        const double z = lo + h * i;
        const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
        total += w * std::clamp(mu + sd * z, 0.0, 1.0) * std::exp(-0.5 * z * z);
    }
    return total * h / std::sqrt(2.0 * 3.14159265358979323846);
}

/// Per-subject latent traits; kept constant across repeat scans.
struct SubjectBiology {
    double bio_offset = 0.0; ///< years added to chronological age to get the rendered spine age
    double disc_noise = 0.0; ///< the intensity noise term
    bool atypical = false;   ///< carries conditions outside the typical ageing pattern
    Covariates covariates;
};

struct Blob {
    double x = 0.0, y = 0.0, z = 0.0; ///< physical center, mm
    double radius = 0.0;
    std::size_t disc_level = 0;
};

/// A blob to place instead of the Poisson draw.
struct BlobSpec {
    std::size_t disc_level = 0;
    bool large = true;
};

struct GeneratedSubject {
    Volume volume;
    std::vector<ConditionRecord> records;
    Subject subject;
    SubjectBiology biology;
    double spine_age = 0.0;
    double disc_brightness = 0.0;
    std::vector<Blob> blobs;
    /// 1 on voxels covered by an osteophyte blob, same grid as `volume`.
    std::vector<std::uint8_t> blob_mask;
};

inline Covariates sample_covariates(Rng& rng) {
    Covariates c;
    c.packs_per_day = rng.bernoulli(0.3) ? rng.uniform(0.2, 2.0) : 0.0;
    c.alcohol_days_per_week = rng.bernoulli(0.6) ? static_cast<double>(1 + rng.index(7)) : 0.0;
    c.sedentary_hours = rng.uniform(2.0, 12.0);
    const double w = rng.uniform();
    c.work_level = w < 0.7 ? 0 : (w < 0.9 ? 1 : 2);
    const double e = rng.uniform();
    c.exercise_level = e < 0.4 ? 0 : (e < 0.7 ? 1 : 2);
    return c;
}

/**
 * Spine age offset in years. Smoking, heavy work early in life and alcohol
 * age the spine; exercise protects it. Heavy work flips sign after 50.
 */
inline double lifestyle_offset(const Covariates& c, double age) {
    double b = 1.2 * c.packs_per_day + 0.05 * c.alcohol_days_per_week;
    if (c.work_level == 1) {
        b += 0.3;
    } else if (c.work_level == 2) {
        b += age < 50.0 ? 1.5 : -1.0;
    }
    if (c.exercise_level == 1) {
        b -= 0.5;
    } else if (c.exercise_level == 2) {
        b -= 1.0;
    }
    return b;
}

inline SubjectBiology sample_biology(Rng& rng, double age, const SynthConfig& config) {
    SubjectBiology bio;
    bio.covariates = sample_covariates(rng);
    bio.bio_offset = rng.normal(0.0, config.bio_offset_sd) + lifestyle_offset(bio.covariates, age);
    bio.disc_noise = rng.normal(0.0, config.intensity_noise_sd);
    bio.atypical = rng.bernoulli(config.atypical_probability);
    return bio;
}

namespace detail {

inline std::size_t vertebra_ordinal_for_level(std::size_t level, std::size_t vertebrae) {
    // Rendered levels map to C2..C7, T1..T12, L1..L5 for the default 23; shorter columns drop thoracic levels.
    const std::size_t cervical = std::min<std::size_t>(6, vertebrae);
    const std::size_t lumbar = std::min<std::size_t>(5, vertebrae - cervical);
    const std::size_t thoracic = vertebrae - cervical - lumbar;
    if (level < cervical) {
        return level;
    }
    if (level < cervical + thoracic) {
        return 6 + (level - cervical);
    }
    return 19 + (level - cervical - thoracic);
}

inline Severity desiccation_severity(double brightness) {
    if (brightness < 0.45) {
        return Severity::NearComplete;
    }
    if (brightness < 0.6) {
        return Severity::Severe;
    }
    if (brightness < 0.75) {
        return Severity::Moderate;
    }
    return Severity::Mild;
}

} // namespace detail

/**
 * Renders one acquisition of a subject with known biology.
 *
 * The field of view is centered on the same physical box for every scan;
 * voxel spacing and coverage are jittered per acquisition so resampling and
 * crop/pad have work to do. The report lists one disc osteophyte record per
 * rendered blob plus age-driven bulges and desiccation; atypical subjects
 * additionally get structural pathologies and off-pattern findings.
 */
inline GeneratedSubject render_subject(const SynthConfig& config, std::string id, double age, Sex sex,
                                       const SubjectBiology& bio, std::uint64_t acquisition_seed,
                                       const std::optional<std::vector<BlobSpec>>& planted = std::nullopt) {
    config.validate();
    if (age < 25.0 || age > 84.0) {
        throw ValidationError("generate_subject: age " + std::to_string(age) + " outside [25, 84]");
    }
    Rng rng(acquisition_seed);
    GeneratedSubject out;
    out.biology = bio;
    out.subject.id = std::move(id);
    out.subject.age = age;
    out.subject.sex = sex;
    out.subject.bracket = bracket_of(age);
    out.subject.covariates = bio.covariates;
    const double spine_age = age + bio.bio_offset;
    out.spine_age = spine_age;

    const Spacing& ts = config.target_spacing;
    const double ex = static_cast<double>(config.grid.x) * ts.x;
    const double ey = static_cast<double>(config.grid.y) * ts.y;
    const double ez = static_cast<double>(config.grid.z) * ts.z;
    auto jitter = [&](double s) { return s * (1.0 + rng.uniform(-config.spacing_jitter, config.spacing_jitter)); };
    const Spacing src{jitter(ts.x), jitter(ts.y), jitter(ts.z)};
    auto extent_dim = [&](double extent, double s) {
        const double cover = 1.0 + rng.uniform(-config.coverage_jitter, config.coverage_jitter);
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(extent * cover / s)));
    };
    const Dims dims{extent_dim(ex, src.x), extent_dim(ey, src.y), extent_dim(ez, src.z)};
    out.volume = Volume(dims, src);
    out.blob_mask.assign(dims.count(), 0);

    const std::size_t V = config.vertebrae;
    const double top = 0.04 * ey, bottom = 0.96 * ey;
    const double unit = (bottom - top) / static_cast<double>(V + 1);
    const double disc_h = unit * disc_height_fraction(spine_age);
    const double cx = 0.5 * ex, cz = 0.5 * ez;
    const double half_w = 0.16 * ex, half_d = std::max(0.3 * ez, 0.6 * ts.z);
    const double brightness = disc_intensity(spine_age, bio.disc_noise, config.intensity_slope);
    out.disc_brightness = brightness;

    // Osteophyte blobs on the anterior margin at random disc levels.
    std::vector<BlobSpec> specs;
    if (planted) {
        specs = *planted;
    } else {
        const int n_blobs = rng.poisson(osteophyte_rate(spine_age, config.blob_rate_slope));
        for (int b = 0; b < n_blobs; ++b) {
            BlobSpec spec;
            spec.disc_level = rng.index(V);
            spec.large = rng.bernoulli(0.35);
            specs.push_back(spec);
        }
    }
    for (const auto& spec : specs) {
        if (spec.disc_level >= V) {
            throw ValidationError("planted blob level " + std::to_string(spec.disc_level) + " out of range");
        }
        Blob blob;
        blob.disc_level = spec.disc_level;
        const bool large = spec.large;
        blob.radius = (large ? 0.11 : 0.075) * ex;
        blob.x = cx + half_w;
        blob.y = top + unit * static_cast<double>(blob.disc_level + 1) - 0.5 * disc_h;
        blob.z = cz;
        out.blobs.push_back(blob);
        ConditionRecord rec;
        rec.vertebra = VertebraLabel::from_ordinal(detail::vertebra_ordinal_for_level(blob.disc_level, V));
        rec.condition = {ConditionKind::DiscOsteophyteComplex, large ? Severity::Moderate : Severity::Mild};
        out.records.push_back(rec);
    }

    auto level_region = [&](std::size_t level) {
        if (level >= V) {
            return RegionLabel::Other;
        }
        return region_label(VertebraLabel::from_ordinal(detail::vertebra_ordinal_for_level(level, V)).region);
    };

    Volume& v = out.volume;
    for (std::size_t z = 0; z < dims.z; ++z) {
        const double pz = cz + (static_cast<double>(z) + 0.5 - 0.5 * static_cast<double>(dims.z)) * src.z;
        for (std::size_t y = 0; y < dims.y; ++y) {
            const double py = 0.5 * ey + (static_cast<double>(y) + 0.5 - 0.5 * static_cast<double>(dims.y)) * src.y;
            for (std::size_t x = 0; x < dims.x; ++x) {
                const double px = cx + (static_cast<double>(x) + 0.5 - 0.5 * static_cast<double>(dims.x)) * src.x;
                const std::size_t i = v.index(x, y, z);
                double value = 0.25; // surrounding soft tissue
                bool in_spine = false;
                RegionLabel label = RegionLabel::Background;
                if (std::abs(px - cx) <= half_w && std::abs(pz - cz) <= half_d && py >= top && py < bottom) {
                    const double rel = (py - top) / unit;
                    const auto level = static_cast<std::size_t>(rel);
                    const double within = (rel - static_cast<double>(level)) * unit;
                    in_spine = true;
                    label = level_region(level);
                    const bool disc = level < V && within >= unit - disc_h;
                    value = disc ? brightness : 0.55;
                }
                for (const auto& blob : out.blobs) {
                    const double dx = px - blob.x, dy = py - blob.y, dz = pz - blob.z;
                    if (dx * dx + dy * dy + dz * dz <= blob.radius * blob.radius) {
                        value = 0.9;
                        in_spine = true;
                        label = level_region(blob.disc_level);
                        out.blob_mask[i] = 1;
                    }
                }
                value += rng.normal(0.0, config.voxel_noise_sd);
                v.intensity[i] = static_cast<float>(std::clamp(value, 0.0, 1.0));
                v.mask[i] = in_spine ? 1 : 0;
                v.regions[i] = static_cast<std::uint8_t>(label);
            }
        }
    }

    // Report findings driven by spine age.
    const double years = std::max(0.0, spine_age - 25.0);
    auto add_levels = [&](Region region, int count, ConditionKind kind, Severity sev) {
        const auto [lo, hi] = kVertebraRange[static_cast<std::size_t>(region)];
        const int last = region == Region::Thoracic ? 12 : (region == Region::Lumbar ? 5 : hi);
        std::vector<int> levels;
        for (int i = lo; i <= last; ++i) {
            levels.push_back(i);
        }
        rng.shuffle(levels.begin(), levels.end());
        for (int k = 0; k < std::min<int>(count, static_cast<int>(levels.size())); ++k) {
            out.records.push_back({VertebraLabel{region, levels[static_cast<std::size_t>(k)]}, {kind, sev}});
        }
    };
    add_levels(Region::Lumbar, std::min(rng.poisson(0.05 * years), 5), ConditionKind::DiscBulge, Severity::Mild);
    add_levels(Region::Cervical, std::min(rng.poisson(0.02 * years), 4), ConditionKind::DiscBulge, Severity::Mild);
    add_levels(Region::Lumbar, std::min(rng.poisson(0.025 * years), 5), ConditionKind::Desiccation,
               detail::desiccation_severity(brightness));
    if (years > 30.0 && rng.bernoulli(0.3)) {
        add_levels(Region::Lumbar, 1, ConditionKind::DiscBulge, Severity::Moderate);
    }

    if (bio.atypical) {
        const int n_struct = 1 + static_cast<int>(rng.index(2));
        for (int s = 0; s < n_struct; ++s) {
            const auto kind = static_cast<ConditionKind>(kDegenerativeKinds + rng.index(kStructuralKinds));
            out.records.push_back({std::nullopt, {kind, Severity::Present}});
        }
        const int n_extra = 1 + static_cast<int>(rng.index(3));
        for (int e = 0; e < n_extra; ++e) {
            const auto kind = static_cast<ConditionKind>(rng.index(kDegenerativeKinds));
            const auto sevs = legal_severities(kind);
            const Severity sev = sevs[rng.index(sevs.size())];
            const auto region = static_cast<Region>(rng.index(3));
            add_levels(region, 1, kind, sev);
        }
    }
    return out;
}

/// Samples biology from `seed` and renders the first acquisition.
inline GeneratedSubject generate_subject(const SynthConfig& config, double age, Sex sex, std::uint64_t seed,
                                         std::string id = "s",
                                         const std::optional<std::vector<BlobSpec>>& planted = std::nullopt) {
    Rng rng(derive_seed(seed, 0));
    const auto bio = sample_biology(rng, age, config);
    return render_subject(config, std::move(id), age, sex, bio, derive_seed(seed, 1), planted);
}

/// Age in whole years; bracket weights follow the series counts of the source cohort.
inline double sample_age(Rng& rng, bool balanced = false) {
    static constexpr std::array<double, 6> weights{1897, 5045, 4802, 3891, 1975, 460};
    std::size_t b = 0;
    if (balanced) {
        b = rng.index(6);
    } else {
        const double total = 18070.0;
        double u = rng.uniform() * total;
        while (b + 1 < weights.size() && u >= weights[b]) {
            u -= weights[b];
            ++b;
        }
    }
    return 25.0 + 10.0 * static_cast<double>(b) + static_cast<double>(rng.index(10));
}

// ---------------------------------------------------------------------------
// Preprocessing

namespace detail {

struct AxisMap {
    std::size_t out = 1;
    double ratio = 1.0; ///< target spacing / source spacing
    bool passthrough = false;

    double source(std::size_t j) const {
        return passthrough ? static_cast<double>(j) : (static_cast<double>(j) + 0.5) * ratio - 0.5;
    }
};

inline AxisMap axis_map(std::size_t n, double src, double dst) {
    AxisMap m;
    if (n <= 1) {
        m.passthrough = true;
        m.out = n;
        return m;
    }
    m.ratio = dst / src;
    m.out = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) * src / dst)));
    if (m.ratio == 1.0) {
        m.out = n;
    }
    return m;
}

inline void lerp_index(double u, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
    const double c = std::clamp(u, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    t = c - static_cast<double>(i0);
}

inline std::size_t nearest_index(double u, std::size_t n) {
    const double c = std::clamp(std::floor(u + 0.5), 0.0, static_cast<double>(n - 1));
    return static_cast<std::size_t>(c);
}

} // namespace detail

/**
 * Resamples to the target spacing. Intensities are trilinear; mask and
 * region labels take the nearest source voxel. Voxel centers are aligned at
 * the low corner of the field of view, so the physical extent is kept to
 * within one voxel. Single-voxel axes pass through unchanged.
 */
inline Volume resample(const Volume& in, Spacing target = {0.9, 0.9, 3.0}) {
    if (!(target.x > 0.0 && target.y > 0.0 && target.z > 0.0) ||
        !(in.spacing.x > 0.0 && in.spacing.y > 0.0 && in.spacing.z > 0.0)) {
        throw ValidationError("resample: spacings must be positive");
    }
    const auto mx = detail::axis_map(in.dims.x, in.spacing.x, target.x);
    const auto my = detail::axis_map(in.dims.y, in.spacing.y, target.y);
    const auto mz = detail::axis_map(in.dims.z, in.spacing.z, target.z);
    const Spacing out_spacing{mx.passthrough ? in.spacing.x : target.x, my.passthrough ? in.spacing.y : target.y,
                              mz.passthrough ? in.spacing.z : target.z};
    Volume out(Dims{mx.out, my.out, mz.out}, out_spacing);
    for (std::size_t z = 0; z < mz.out; ++z) {
        std::size_t z0, z1;
        double tz;
        detail::lerp_index(mz.source(z), in.dims.z, z0, z1, tz);
        const std::size_t zn = detail::nearest_index(mz.source(z), in.dims.z);
        for (std::size_t y = 0; y < my.out; ++y) {
            std::size_t y0, y1;
            double ty;
            detail::lerp_index(my.source(y), in.dims.y, y0, y1, ty);
            const std::size_t yn = detail::nearest_index(my.source(y), in.dims.y);
            for (std::size_t x = 0; x < mx.out; ++x) {
                std::size_t x0, x1;
                double tx;
                detail::lerp_index(mx.source(x), in.dims.x, x0, x1, tx);
                const std::size_t xn = detail::nearest_index(mx.source(x), in.dims.x);
                auto at = [&](std::size_t a, std::size_t b, std::size_t c) {
                    return static_cast<double>(in.intensity[in.index(a, b, c)]);
                };
                const double c00 = at(x0, y0, z0) * (1 - tx) + at(x1, y0, z0) * tx;
                const double c10 = at(x0, y1, z0) * (1 - tx) + at(x1, y1, z0) * tx;
                const double c01 = at(x0, y0, z1) * (1 - tx) + at(x1, y0, z1) * tx;
                const double c11 = at(x0, y1, z1) * (1 - tx) + at(x1, y1, z1) * tx;
                const double c0 = c00 * (1 - ty) + c10 * ty;
                const double c1 = c01 * (1 - ty) + c11 * ty;
                const std::size_t o = out.index(x, y, z);
                out.intensity[o] = static_cast<float>(std::clamp(c0 * (1 - tz) + c1 * tz, 0.0, 1.0));
                const std::size_t src = in.index(xn, yn, zn);
                out.mask[o] = in.mask[src];
                out.regions[o] = in.regions[src];
            }
        }
    }
    return out;
}

/**
 * Center crop where the volume is larger than the target and symmetric zero
 * padding where it is smaller; an odd remainder goes to the high side.
 */
inline Volume crop_or_pad(const Volume& in, Dims target) {
    if (target.x == 0 || target.y == 0 || target.z == 0) {
        throw ValidationError("crop_or_pad: target dims must be >= 1");
    }
    // Offset of the output origin in input coordinates (negative when padding).
    auto offset = [](std::size_t n, std::size_t t) {
        return n >= t ? static_cast<std::ptrdiff_t>((n - t) / 2) : -static_cast<std::ptrdiff_t>((t - n) / 2);
    };
    const std::ptrdiff_t ox = offset(in.dims.x, target.x), oy = offset(in.dims.y, target.y),
                         oz = offset(in.dims.z, target.z);
    Volume out(target, in.spacing);
    for (std::size_t z = 0; z < target.z; ++z) {
        const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(z) + oz;
        if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(in.dims.z)) {
            continue;
        }
        for (std::size_t y = 0; y < target.y; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + oy;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in.dims.y)) {
                continue;
            }
            for (std::size_t x = 0; x < target.x; ++x) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + ox;
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(in.dims.x)) {
                    continue;
                }
                const std::size_t s = in.index(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy),
                                               static_cast<std::size_t>(sz));
                const std::size_t o = out.index(x, y, z);
                out.intensity[o] = in.intensity[s];
                out.mask[o] = in.mask[s];
                out.regions[o] = in.regions[s];
            }
        }
    }
    return out;
}

/// Binary dilation by a city-block ball (|dx| + |dy| + |dz| <= radius).
inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& mask, Dims d, std::size_t radius) {
    std::vector<std::uint8_t> cur = mask, next;
    for (std::size_t r = 0; r < radius; ++r) {
        next = cur;
        for (std::size_t z = 0; z < d.z; ++z) {
            for (std::size_t y = 0; y < d.y; ++y) {
                for (std::size_t x = 0; x < d.x; ++x) {
                    const std::size_t i = x + d.x * (y + d.y * z);
                    if (cur[i]) {
                        continue;
                    }
                    const bool hit = (x > 0 && cur[i - 1]) || (x + 1 < d.x && cur[i + 1]) ||
                                     (y > 0 && cur[i - d.x]) || (y + 1 < d.y && cur[i + d.x]) ||
                                     (z > 0 && cur[i - d.x * d.y]) || (z + 1 < d.z && cur[i + d.x * d.y]);
                    if (hit) {
                        next[i] = 1;
                    }
                }
            }
        }
        cur.swap(next);
    }
    return cur;
}

/// Zeroes intensities outside the mask dilated by `radius`. The stored mask is unchanged.
inline Volume apply_mask(const Volume& in, std::size_t radius) {
    Volume out = in;
    const auto keep = dilate(in.mask, in.dims, radius);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) {
            out.intensity[i] = 0.0f;
        }
    }
    return out;
}

/// Keeps only the dilated voxels labeled with `region`; a missing region yields a zero volume.
inline Volume mask_region(const Volume& in, Region region, std::size_t radius) {
    const auto want = static_cast<std::uint8_t>(region_label(region));
    std::vector<std::uint8_t> sel(in.regions.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < sel.size(); ++i) {
        if (in.regions[i] == want) {
            sel[i] = 1;
            any = true;
        }
    }
    Volume out = in;
    if (!any) {
        log::warn("mask_region: region '" + std::string(name(region)) + "' absent; output is empty");
        std::fill(out.intensity.begin(), out.intensity.end(), 0.0f);
        return out;
    }
    const auto keep = dilate(sel, in.dims, radius);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) {
            out.intensity[i] = 0.0f;
        }
    }
    return out;
}

/// True iff every voxel outside the dilated region selection is zero.
inline bool verify_region_masked(const Volume& v, Region region, std::size_t radius) {
    const auto want = static_cast<std::uint8_t>(region_label(region));
    std::vector<std::uint8_t> sel(v.regions.size(), 0);
    for (std::size_t i = 0; i < sel.size(); ++i) {
        sel[i] = v.regions[i] == want ? 1 : 0;
    }
    const auto keep = dilate(sel, v.dims, radius);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i] && v.intensity[i] != 0.0f) {
            return false;
        }
    }
    return true;
}

struct Prepared {
    Volume volume;
    std::vector<std::uint8_t> blob_mask;
};

/// resample -> crop_or_pad -> apply_mask; the blob mask follows the nearest-neighbor path.
inline Prepared preprocess(const GeneratedSubject& g, const SynthConfig& config) {
    Prepared p;
    p.volume = apply_mask(crop_or_pad(resample(g.volume, config.target_spacing), config.grid), config.dilation_radius);
    Volume blobs = g.volume;
    blobs.mask = g.blob_mask;
    p.blob_mask = crop_or_pad(resample(blobs, config.target_spacing), config.grid).mask;
    return p;
}

// ---------------------------------------------------------------------------
// Binary container

inline constexpr std::array<char, 8> kVolumeMagic{'S', 'P', 'V', 'O', 'L', '0', '0', '1'};
inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 64;

/**
 * 64-byte header: magic[8], version u32, dtype u32, dims u32 x3, spacing f64 x3,
 * grid count u32, reserved (zero) to 64. Then float32 intensities, then the
 * 8-bit mask and region grids, all x-fastest and little-endian.
 */
inline std::string encode_volume(const Volume& v) {
    ByteWriter w;
    w.put_bytes(kVolumeMagic.data(), kVolumeMagic.size());
    w.put<std::uint32_t>(kVolumeVersion);
    w.put<std::uint32_t>(kDtypeFloat32);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.dims.x));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.dims.y));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.dims.z));
    w.put<double>(v.spacing.x);
    w.put<double>(v.spacing.y);
    w.put<double>(v.spacing.z);
    w.put<std::uint32_t>(3);
    w.bytes().resize(kVolumeHeaderBytes, '\0');
    w.put_bytes(v.intensity.data(), v.intensity.size() * sizeof(float));
    w.put_bytes(v.mask.data(), v.mask.size());
    w.put_bytes(v.regions.data(), v.regions.size());
    return w.bytes();
}

inline Volume decode_volume(std::string_view bytes) {
    ByteReader r(bytes);
    std::array<char, 8> magic{};
    r.get_bytes(magic.data(), magic.size());
    if (magic != kVolumeMagic) {
        throw FormatError("volume: bad magic");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kVolumeVersion) {
        throw FormatError("volume: unsupported version " + std::to_string(version));
    }
    if (r.get<std::uint32_t>() != kDtypeFloat32) {
        throw FormatError("volume: unsupported dtype");
    }
    Volume v;
    v.dims.x = r.get<std::uint32_t>();
    v.dims.y = r.get<std::uint32_t>();
    v.dims.z = r.get<std::uint32_t>();
    v.spacing.x = r.get<double>();
    v.spacing.y = r.get<double>();
    v.spacing.z = r.get<double>();
    if (r.get<std::uint32_t>() != 3) {
        throw FormatError("volume: expected 3 grids");
    }
    r.skip(kVolumeHeaderBytes - 56);
    const std::size_t n = v.dims.count();
    v.intensity.resize(n);
    v.mask.resize(n);
    v.regions.resize(n);
    r.get_bytes(v.intensity.data(), n * sizeof(float));
    r.get_bytes(v.mask.data(), n);
    r.get_bytes(v.regions.data(), n);
    return v;
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) { write_atomic(path, encode_volume(v)); }
inline Volume read_volume(const std::filesystem::path& path) { return decode_volume(read_file(path)); }

} // namespace spineage::vol

#endif
