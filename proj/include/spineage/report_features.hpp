#ifndef SPINEAGE_REPORT_FEATURES_HPP
#define SPINEAGE_REPORT_FEATURES_HPP

#include "errors.hpp"
#include "io.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

/**
 * @file report_features.hpp
 *
 * Structured spine-condition records and their two fixed-length encodings.
 *
 * Sparse layout (215): vertebra-major, 26 vertebrae (C2..C7, T1..T13, L1..L7)
 * times 8 degenerative kinds, each an occurrence count; then 7 structural flags.
 *
 * Dense layout (67): region-major (cervical, thoracic, lumbar), then the
 * degenerative kinds in declaration order, then each kind's legal severities
 * in increasing order, 20 cells per region; then the 7 structural flags.
 */

namespace spineage {

enum class Region : std::uint8_t { Cervical = 0, Thoracic = 1, Lumbar = 2 };

enum class ConditionKind : std::uint8_t {
    // degenerative, per vertebra
    DiscBulge = 0,
    DiscOsteophyteComplex,
    UncovertebralOsteophyte,
    Protrusion,
    Extrusion,
    Desiccation,
    EndplateChange,
    AnnularFissure,
    // structural and canal pathologies, per report
    BoneLesion,
    CongenitalCanalNarrowing,
    CordAbnormality,
    Fracture,
    SoftTissueEdema,
    SpinalStenosis,
    Spondylolisthesis,
};

enum class Severity : std::uint8_t { Mild = 0, Moderate, Severe, NearComplete, Present };

inline constexpr std::size_t kRegions = 3;
inline constexpr std::size_t kDegenerativeKinds = 8;
inline constexpr std::size_t kStructuralKinds = 7;
inline constexpr std::size_t kVertebrae = 26;
inline constexpr std::size_t kSparseLength = kVertebrae * kDegenerativeKinds + kStructuralKinds;
inline constexpr std::size_t kCellsPerRegion = 20;
inline constexpr std::size_t kDegenerativeCells = kRegions * kCellsPerRegion;
inline constexpr std::size_t kDenseLength = kDegenerativeCells + kStructuralKinds;

static_assert(kSparseLength == 215);
static_assert(kDenseLength == 67);

inline constexpr bool is_degenerative(ConditionKind k) { return static_cast<int>(k) < 8; }
inline constexpr bool is_structural(ConditionKind k) { return !is_degenerative(k); }

/// First and last legal vertebra index per region (C2-C7, T1-T13, L1-L7).
inline constexpr std::array<std::pair<int, int>, 3> kVertebraRange{{{2, 7}, {1, 13}, {1, 7}}};

struct VertebraLabel {
    Region region = Region::Lumbar;
    int index = 1;

    static constexpr bool valid(Region r, int i) {
        const auto [lo, hi] = kVertebraRange[static_cast<std::size_t>(r)];
        return i >= lo && i <= hi;
    }

    /// Position in the 26-label order C2..C7, T1..T13, L1..L7.
    constexpr std::size_t ordinal() const {
        switch (region) {
        case Region::Cervical: return static_cast<std::size_t>(index - 2);
        case Region::Thoracic: return 6 + static_cast<std::size_t>(index - 1);
        case Region::Lumbar: return 19 + static_cast<std::size_t>(index - 1);
        }
        return 0;
    }

    static constexpr VertebraLabel from_ordinal(std::size_t o) {
        if (o < 6) {
            return {Region::Cervical, static_cast<int>(o) + 2};
        }
        if (o < 19) {
            return {Region::Thoracic, static_cast<int>(o - 6) + 1};
        }
        return {Region::Lumbar, static_cast<int>(o - 19) + 1};
    }

    friend constexpr bool operator==(const VertebraLabel&, const VertebraLabel&) = default;
};

struct Condition {
    ConditionKind kind = ConditionKind::DiscBulge;
    Severity severity = Severity::Mild;
};

struct ConditionRecord {
    std::optional<VertebraLabel> vertebra;
    Condition condition;
};

namespace detail {
inline constexpr std::array<Severity, 3> kThree{Severity::Mild, Severity::Moderate, Severity::Severe};
inline constexpr std::array<Severity, 2> kTwo{Severity::Mild, Severity::Moderate};
inline constexpr std::array<Severity, 4> kFour{Severity::Mild, Severity::Moderate, Severity::Severe,
                                               Severity::NearComplete};
inline constexpr std::array<Severity, 1> kPresent{Severity::Present};
} // namespace detail

/// Legal severities per degenerative kind; 20 per region in total.
inline constexpr std::span<const Severity> legal_severities(ConditionKind k) {
    using namespace detail;
    switch (k) {
    case ConditionKind::DiscBulge:
    case ConditionKind::DiscOsteophyteComplex:
    case ConditionKind::UncovertebralOsteophyte:
    case ConditionKind::Protrusion: return kThree;
    case ConditionKind::Extrusion: return kTwo;
    case ConditionKind::Desiccation: return kFour;
    default: return kPresent;
    }
}

inline constexpr bool severity_legal(ConditionKind k, Severity s) {
    for (Severity allowed : legal_severities(k)) {
        if (allowed == s) {
            return true;
        }
    }
    return false;
}

/// Offset of (kind, severity) within one region's 20 dense cells.
inline constexpr std::size_t region_cell(ConditionKind k, Severity s) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
        offset += legal_severities(static_cast<ConditionKind>(i)).size();
    }
    const auto sev = legal_severities(k);
    for (std::size_t j = 0; j < sev.size(); ++j) {
        if (sev[j] == s) {
            return offset + j;
        }
    }
    return offset + sev.size();
}

static_assert(region_cell(ConditionKind::AnnularFissure, Severity::Present) == kCellsPerRegion - 1);

inline std::size_t dense_index(Region r, ConditionKind k, Severity s) {
    return static_cast<std::size_t>(r) * kCellsPerRegion + region_cell(k, s);
}

inline std::size_t structural_offset(ConditionKind k) {
    return static_cast<std::size_t>(k) - kDegenerativeKinds;
}

// ---------------------------------------------------------------------------
// Names

inline constexpr std::array<std::string_view, 3> kRegionNames{"cervical", "thoracic", "lumbar"};
inline constexpr std::array<std::string_view, 3> kRegionPrefix{"C", "T", "L"};
inline constexpr std::array<std::string_view, 15> kKindNames{
    "disc_bulge",  "disc_osteophyte_complex", "uncovertebral_osteophyte", "protrusion",
    "extrusion",   "desiccation",             "endplate_change",          "annular_fissure",
    "bone_lesion", "congenital_canal_narrowing", "cord_abnormality",      "fracture",
    "soft_tissue_edema", "spinal_stenosis",   "spondylolisthesis"};
inline constexpr std::array<std::string_view, 5> kSeverityNames{"mild", "moderate", "severe", "near_complete",
                                                                "present"};

inline std::string_view name(Region r) { return kRegionNames[static_cast<std::size_t>(r)]; }
inline std::string_view name(ConditionKind k) { return kKindNames[static_cast<std::size_t>(k)]; }
inline std::string_view name(Severity s) { return kSeverityNames[static_cast<std::size_t>(s)]; }

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view text, const std::array<std::string_view, N>& names, const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == text) {
            return static_cast<Enum>(i);
        }
    }
    throw ValidationError(std::string("unknown ") + what + " '" + std::string(text) + "'");
}

inline Region parse_region(std::string_view s) { return parse_enum<Region>(s, kRegionNames, "region"); }
inline ConditionKind parse_kind(std::string_view s) { return parse_enum<ConditionKind>(s, kKindNames, "condition kind"); }
inline Severity parse_severity(std::string_view s) { return parse_enum<Severity>(s, kSeverityNames, "severity"); }

inline std::string vertebra_name(const VertebraLabel& v) {
    return std::string(kRegionPrefix[static_cast<std::size_t>(v.region)]) + std::to_string(v.index);
}

/// Column names of the dense vector, in layout order.
inline const std::vector<std::string>& dense_column_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (std::size_t r = 0; r < kRegions; ++r) {
            for (std::size_t k = 0; k < kDegenerativeKinds; ++k) {
                for (Severity s : legal_severities(static_cast<ConditionKind>(k))) {
                    out.push_back(std::string(kRegionPrefix[r]) + "_" + std::string(kKindNames[k]) + "_" +
                                  std::string(name(s)));
                }
            }
        }
        for (std::size_t k = kDegenerativeKinds; k < kKindNames.size(); ++k) {
            out.emplace_back(kKindNames[k]);
        }
        return out;
    }();
    return names;
}

// ---------------------------------------------------------------------------
// Validation and encodings

inline void validate(const ConditionRecord& rec) {
    const auto kind = rec.condition.kind;
    if (static_cast<std::size_t>(kind) >= kKindNames.size()) {
        throw ValidationError("condition kind out of range");
    }
    if (is_structural(kind)) {
        if (rec.vertebra) {
            throw ValidationError("structural pathology '" + std::string(name(kind)) + "' must not carry a vertebra");
        }
        if (rec.condition.severity != Severity::Present) {
            throw ValidationError("structural pathology '" + std::string(name(kind)) + "' must have severity present");
        }
        return;
    }
    if (!rec.vertebra) {
        throw ValidationError("degenerative condition '" + std::string(name(kind)) + "' needs a vertebra");
    }
    if (!VertebraLabel::valid(rec.vertebra->region, rec.vertebra->index)) {
        throw ValidationError("illegal vertebra " + std::string(name(rec.vertebra->region)) + " " +
                              std::to_string(rec.vertebra->index));
    }
    if (!severity_legal(kind, rec.condition.severity)) {
        throw ValidationError("severity '" + std::string(name(rec.condition.severity)) + "' is not legal for '" +
                              std::string(name(kind)) + "'");
    }
}

using SparseFeatures = std::array<int, kSparseLength>;
using DenseFeatures = std::array<int, kDenseLength>;

/// Per-vertebra occurrence counts (severity dropped) plus structural presence flags.
inline SparseFeatures encode_sparse(std::span<const ConditionRecord> records) {
    SparseFeatures out{};
    for (const auto& rec : records) {
        validate(rec);
        const auto kind = rec.condition.kind;
        if (is_structural(kind)) {
            out[kVertebrae * kDegenerativeKinds + structural_offset(kind)] = 1;
        } else {
            out[rec.vertebra->ordinal() * kDegenerativeKinds + static_cast<std::size_t>(kind)] += 1;
        }
    }
    return out;
}

/// Region x kind x severity counts plus structural presence flags.
inline DenseFeatures aggregate(std::span<const ConditionRecord> records) {
    DenseFeatures out{};
    for (const auto& rec : records) {
        validate(rec);
        const auto kind = rec.condition.kind;
        if (is_structural(kind)) {
            out[kDegenerativeCells + structural_offset(kind)] = 1;
        } else {
            out[dense_index(rec.vertebra->region, kind, rec.condition.severity)] += 1;
        }
    }
    return out;
}

/// Canberra distance; 0/0 terms contribute nothing.
template <class A, class B>
double canberra(const A& p, const B& q) {
    if (std::size(p) != std::size(q)) {
        throw DimensionError("canberra: length " + std::to_string(std::size(p)) + " vs " +
                             std::to_string(std::size(q)));
    }
    double d = 0.0;
    auto qi = std::begin(q);
    for (auto pi = std::begin(p); pi != std::end(p); ++pi, ++qi) {
        const double a = static_cast<double>(*pi), b = static_cast<double>(*qi);
        const double den = std::abs(a) + std::abs(b);
        if (den > 0.0) {
            d += std::abs(a - b) / den;
        }
    }
    return d;
}

/// Canberra metric as a callable, for the neighbor-graph templates.
struct CanberraMetric {
    template <class A, class B>
    double operator()(const A& p, const B& q) const {
        return canberra(p, q);
    }
};

// ---------------------------------------------------------------------------
// CSV boundary

/**
 * Reads `subject_id, region, vertebra_index, condition_kind, severity` rows.
 * Structural pathologies leave region and vertebra_index empty. Subjects keep
 * their records in file order.
 */
inline std::map<std::string, std::vector<ConditionRecord>> read_condition_csv(const std::filesystem::path& path) {
    const auto table = read_csv(path);
    const auto c_id = table.column("subject_id");
    const auto c_region = table.column("region");
    const auto c_index = table.column("vertebra_index");
    const auto c_kind = table.column("condition_kind");
    const auto c_sev = table.column("severity");
    std::map<std::string, std::vector<ConditionRecord>> out;
    for (const auto& row : table.rows) {
        ConditionRecord rec;
        rec.condition.kind = parse_kind(row[c_kind]);
        rec.condition.severity = parse_severity(row[c_sev]);
        if (!row[c_region].empty()) {
            int index = 0;
            try {
                index = std::stoi(row[c_index]);
            } catch (const std::exception&) {
                throw ValidationError("bad vertebra index '" + row[c_index] + "' for subject " + row[c_id]);
            }
            rec.vertebra = VertebraLabel{parse_region(row[c_region]), index};
        }
        validate(rec);
        out[row[c_id]].push_back(rec);
    }
    return out;
}

inline std::string condition_csv_header() { return "subject_id,region,vertebra_index,condition_kind,severity\n"; }

inline std::string condition_csv_row(std::string_view subject_id, const ConditionRecord& rec) {
    std::string line(subject_id);
    line += ',';
    if (rec.vertebra) {
        line += std::string(name(rec.vertebra->region)) + "," + std::to_string(rec.vertebra->index);
    } else {
        line += ",";
    }
    line += "," + std::string(name(rec.condition.kind)) + "," + std::string(name(rec.condition.severity)) + "\n";
    return line;
}

inline std::string dense_csv(const std::vector<std::pair<std::string, DenseFeatures>>& rows) {
    std::string out = "subject_id";
    for (const auto& c : dense_column_names()) {
        out += "," + c;
    }
    out += "\n";
    for (const auto& [id, v] : rows) {
        out += id;
        for (int x : v) {
            out += "," + std::to_string(x);
        }
        out += "\n";
    }
    return out;
}

} // namespace spineage

#endif
