#ifndef SPINEAGE_EVAL_STATS_HPP
#define SPINEAGE_EVAL_STATS_HPP

#include "errors.hpp"
#include "io.hpp"
#include "report_features.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace spineage {

// ---------------------------------------------------------------------------
// Bias correction

/// Linear age bias of a predictor: prediction = alpha * age + beta.
struct BiasCorrection {
    double alpha = 1.0;
    double beta = 0.0;

    double apply(double prediction) const { return (prediction - beta) / alpha; }
};

inline constexpr double kMinBiasSlope = 1e-6;

/// Least-squares fit of prediction on age; fit on validation data only.
inline BiasCorrection fit_bias(std::span<const double> ages, std::span<const double> predictions) {
    if (ages.size() != predictions.size()) {
        throw DimensionError("fit_bias: ages and predictions differ in length");
    }
    if (ages.size() < 2) {
        throw ValidationError("fit_bias: need at least 2 validation pairs");
    }
    const double n = static_cast<double>(ages.size());
    const double my = std::accumulate(ages.begin(), ages.end(), 0.0) / n;
    const double mp = std::accumulate(predictions.begin(), predictions.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < ages.size(); ++i) {
        sxx += (ages[i] - my) * (ages[i] - my);
        sxy += (ages[i] - my) * (predictions[i] - mp);
    }
    if (sxx == 0.0) {
        throw ValidationError("fit_bias: validation ages have zero variance");
    }
    BiasCorrection bc{sxy / sxx, 0.0};
    bc.beta = mp - bc.alpha * my;
    if (std::abs(bc.alpha) < kMinBiasSlope) {
        throw ValidationError("fit_bias: slope " + fmt_double(bc.alpha) + " is degenerate");
    }
    return bc;
}

inline double apply_bias(const BiasCorrection& bc, double prediction) { return bc.apply(prediction); }

inline std::vector<double> apply_bias(const BiasCorrection& bc, std::span<const double> predictions) {
    std::vector<double> out(predictions.size());
    std::transform(predictions.begin(), predictions.end(), out.begin(), [&](double p) { return bc.apply(p); });
    return out;
}

// ---------------------------------------------------------------------------
// Accuracy metrics

namespace detail {
inline void check_pairs(std::span<const double> y, std::span<const double> p, const char* what) {
    if (y.size() != p.size()) {
        throw DimensionError(std::string(what) + ": targets and predictions differ in length");
    }
    if (y.empty()) {
        throw ValidationError(std::string(what) + ": empty input");
    }
}
} // namespace detail

inline double mae(std::span<const double> y, std::span<const double> p) {
    detail::check_pairs(y, p, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += std::abs(y[i] - p[i]);
    }
    return s / static_cast<double>(y.size());
}

/// 1 - SS_res / SS_tot.
inline double r2(std::span<const double> y, std::span<const double> p) {
    detail::check_pairs(y, p, "r2");
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double res = 0.0, tot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        res += (y[i] - p[i]) * (y[i] - p[i]);
        tot += (y[i] - mean) * (y[i] - mean);
    }
    if (tot == 0.0) {
        throw ValidationError("r2: targets have zero variance");
    }
    return 1.0 - res / tot;
}

/// Unweighted mean of per-bracket MAEs over `required` brackets; each must be nonempty.
inline double wmae(std::span<const double> y, std::span<const double> p, std::span<const int> brackets,
                   std::span<const int> required) {
    detail::check_pairs(y, p, "wmae");
    if (brackets.size() != y.size()) {
        throw DimensionError("wmae: bracket list differs in length");
    }
    if (required.empty()) {
        throw ValidationError("wmae: no brackets requested");
    }
    std::map<int, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < y.size(); ++i) {
        auto& [sum, count] = acc[brackets[i]];
        sum += std::abs(y[i] - p[i]);
        ++count;
    }
    std::string missing;
    double total = 0.0;
    for (int b : required) {
        const auto it = acc.find(b);
        if (it == acc.end()) {
            missing += (missing.empty() ? "" : ", ") + std::to_string(b);
            continue;
        }
        total += it->second.first / static_cast<double>(it->second.second);
    }
    if (!missing.empty()) {
        throw ValidationError("wmae: empty bracket(s): " + missing);
    }
    return total / static_cast<double>(required.size());
}

/// Brackets present in `brackets`, ascending.
inline std::vector<int> present_brackets(std::span<const int> brackets) {
    std::vector<int> out(brackets.begin(), brackets.end());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

struct Metrics {
    double mae = 0.0;
    double wmae = 0.0;
    double r2 = 0.0;
};

inline Metrics compute_metrics(std::span<const double> y, std::span<const double> p, std::span<const int> brackets) {
    const auto present = present_brackets(brackets);
    return {mae(y, p), wmae(y, p, brackets, present), r2(y, p)};
}

// ---------------------------------------------------------------------------
// Student t distribution

/// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
inline double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) {
        return 0.0;
    }
    if (x >= 1.0) {
        return 1.0;
    }
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    if (x > (a + 1.0) / (a + b + 2.0)) {
        return 1.0 - incomplete_beta(b, a, 1.0 - x);
    }
    constexpr double tiny = 1e-300, eps = 1e-15;
    double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
    d = std::abs(d) < tiny ? tiny : d;
    d = 1.0 / d;
    double f = d;
    for (int m = 1; m <= 500; ++m) {
        const double mm = m;
        double num = mm * (b - mm) * x / ((a + 2 * mm - 1) * (a + 2 * mm));
        d = 1.0 + num * d;
        d = std::abs(d) < tiny ? tiny : d;
        c = 1.0 + num / c;
        c = std::abs(c) < tiny ? tiny : c;
        d = 1.0 / d;
        f *= d * c;
        num = -(a + mm) * (a + b + mm) * x / ((a + 2 * mm) * (a + 2 * mm + 1));
        d = 1.0 + num * d;
        d = std::abs(d) < tiny ? tiny : d;
        c = 1.0 + num / c;
        c = std::abs(c) < tiny ? tiny : c;
        d = 1.0 / d;
        const double delta = d * c;
        f *= delta;
        if (std::abs(delta - 1.0) < eps) {
            break;
        }
    }
    return std::exp(ln_front) * f / a;
}

inline double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) {
        throw ValidationError("student_t_cdf: degrees of freedom must be positive");
    }
    const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    return t >= 0.0 ? 1.0 - tail : tail;
}

/// Inverse CDF by bisection on the incomplete-beta CDF.
inline double student_t_quantile(double p, double df) {
    if (!(p > 0.0 && p < 1.0)) {
        throw ValidationError("student_t_quantile: p must be in (0, 1)");
    }
    double lo = -1.0, hi = 1.0;
    while (student_t_cdf(lo, df) > p) {
        lo *= 2.0;
    }
    while (student_t_cdf(hi, df) < p) {
        hi *= 2.0;
    }
    for (int i = 0; i < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(lo)); ++i) {
        const double mid = 0.5 * (lo + hi);
        (student_t_cdf(mid, df) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Ordinary least squares

struct OlsFit {
    std::vector<std::string> names;
    std::vector<double> coef;
    std::vector<double> se;
    std::vector<double> ci_low;
    std::vector<double> ci_high;
    std::vector<std::size_t> n_nonzero; ///< rows with a nonzero value in that column
    std::vector<bool> significant;
    std::vector<double> residuals;
    std::vector<std::string> dropped; ///< degenerate columns removed before fitting
    std::size_t n = 0;
    std::size_t df = 0;
    double sigma2 = 0.0;

    std::size_t index(std::string_view name) const {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) {
            throw ValidationError("ols: no column '" + std::string(name) + "'");
        }
        return static_cast<std::size_t>(it - names.begin());
    }
};

/// Row-major design matrix with named columns.
struct Design {
    std::vector<std::string> names;
    std::vector<std::vector<double>> rows;

    std::size_t cols() const { return names.size(); }
    double at(std::size_t r, std::size_t c) const { return rows[r][c]; }
};

namespace detail {

using Matrix = std::vector<std::vector<double>>;

/// Gauss-Jordan inverse with partial pivoting; returns false when a pivot is below `tol`.
inline bool invert(Matrix a, Matrix& inv, double tol) {
    const std::size_t p = a.size();
    inv.assign(p, std::vector<double>(p, 0.0));
    for (std::size_t i = 0; i < p; ++i) {
        inv[i][i] = 1.0;
    }
    for (std::size_t col = 0; col < p; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < p; ++r) {
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) {
                piv = r;
            }
        }
        if (std::abs(a[piv][col]) <= tol) {
            return false;
        }
        std::swap(a[piv], a[col]);
        std::swap(inv[piv], inv[col]);
        const double d = a[col][col];
        for (std::size_t c = 0; c < p; ++c) {
            a[col][c] /= d;
            inv[col][c] /= d;
        }
        for (std::size_t r = 0; r < p; ++r) {
            if (r == col || a[r][col] == 0.0) {
                continue;
            }
            const double f = a[r][col];
            for (std::size_t c = 0; c < p; ++c) {
                a[r][c] -= f * a[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    return true;
}

/// Column j of a design as a vector.
inline std::vector<double> column(const Design& d, std::size_t j) {
    std::vector<double> v(d.rows.size());
    for (std::size_t r = 0; r < d.rows.size(); ++r) {
        v[r] = d.rows[r][j];
    }
    return v;
}

/**
 * Scans columns left to right and returns the first one that lies in the span
 * of the earlier independent ones, together with the columns that express it.
 * Empty when the design has full column rank.
 */
inline std::vector<std::size_t> first_dependency(const Design& d) {
    std::vector<std::vector<double>> basis; // orthonormal, modified Gram-Schmidt
    std::vector<std::size_t> basis_cols;
    std::vector<std::vector<double>> raw;
    for (std::size_t j = 0; j < d.cols(); ++j) {
        auto v = column(d, j);
        const double norm0 = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        auto w = v;
        for (const auto& q : basis) {
            const double proj = std::inner_product(w.begin(), w.end(), q.begin(), 0.0);
            for (std::size_t r = 0; r < w.size(); ++r) {
                w[r] -= proj * q[r];
            }
        }
        const double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
        if (norm0 == 0.0 || norm <= 1e-9 * norm0) {
            // Express v in terms of the independent columns to name the participants.
            std::vector<std::size_t> involved{j};
            if (norm0 == 0.0) {
                return involved;
            }
            const std::size_t k = basis_cols.size();
            Matrix g(k, std::vector<double>(k, 0.0));
            std::vector<double> rhs(k, 0.0);
            for (std::size_t a = 0; a < k; ++a) {
                for (std::size_t b = 0; b < k; ++b) {
                    g[a][b] = std::inner_product(raw[a].begin(), raw[a].end(), raw[b].begin(), 0.0);
                }
                rhs[a] = std::inner_product(raw[a].begin(), raw[a].end(), v.begin(), 0.0);
            }
            Matrix gi;
            if (invert(g, gi, 0.0)) {
                for (std::size_t a = 0; a < k; ++a) {
                    double c = 0.0;
                    for (std::size_t b = 0; b < k; ++b) {
                        c += gi[a][b] * rhs[b];
                    }
                    if (std::abs(c) > 1e-8) {
                        involved.push_back(basis_cols[a]);
                    }
                }
            }
            return involved;
        }
        for (auto& x : w) {
            x /= norm;
        }
        basis.push_back(std::move(w));
        basis_cols.push_back(j);
        raw.push_back(std::move(v));
    }
    return {};
}

inline std::string dependency_message(const Design& d, const std::vector<std::size_t>& dep) {
    std::string msg = "ols: rank-deficient design; column '" + d.names[dep[0]] + "'";
    if (dep.size() == 1) {
        return msg + " is identically zero";
    }
    msg += " is collinear with";
    for (std::size_t i = 1; i < dep.size(); ++i) {
        msg += (i == 1 ? " '" : ", '") + d.names[dep[i]] + "'";
    }
    return msg;
}

inline void drop_column(Design& d, std::size_t j) {
    d.names.erase(d.names.begin() + static_cast<std::ptrdiff_t>(j));
    for (auto& row : d.rows) {
        row.erase(row.begin() + static_cast<std::ptrdiff_t>(j));
    }
}

} // namespace detail

class OlsRankError : public RankDeficiencyError {
public:
    OlsRankError(const std::string& msg, std::vector<std::string> columns)
        : RankDeficiencyError(msg), columns_(std::move(columns)) {}
    const std::vector<std::string>& columns() const { return columns_; }

private:
    std::vector<std::string> columns_;
};

struct OlsOptions {
    double confidence = 0.95;
    /// Drop columns that are collinear with earlier ones (protected columns excepted) instead of failing.
    bool drop_degenerate = false;
    std::size_t protected_columns = 0;
};

/// Normal-equation OLS with t-based confidence intervals.
inline OlsFit ols(Design design, std::span<const double> y, const OlsOptions& opt = {}) {
    if (design.rows.size() != y.size()) {
        throw DimensionError("ols: design rows and outcome differ in length");
    }
    for (const auto& row : design.rows) {
        if (row.size() != design.cols()) {
            throw DimensionError("ols: ragged design matrix");
        }
    }
    OlsFit fit;
    for (;;) {
        const auto dep = detail::first_dependency(design);
        if (dep.empty()) {
            break;
        }
        if (!opt.drop_degenerate || dep[0] < opt.protected_columns) {
            std::vector<std::string> cols;
            for (auto j : dep) {
                cols.push_back(design.names[j]);
            }
            throw OlsRankError(detail::dependency_message(design, dep), cols);
        }
        fit.dropped.push_back(design.names[dep[0]]);
        detail::drop_column(design, dep[0]);
    }
    const std::size_t n = design.rows.size(), p = design.cols();
    if (n <= p) {
        throw ValidationError("ols: need more rows (" + std::to_string(n) + ") than columns (" + std::to_string(p) +
                              ")");
    }
    detail::Matrix xtx(p, std::vector<double>(p, 0.0));
    std::vector<double> xty(p, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const auto& row = design.rows[r];
        for (std::size_t a = 0; a < p; ++a) {
            xty[a] += row[a] * y[r];
            for (std::size_t b = a; b < p; ++b) {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    for (std::size_t a = 0; a < p; ++a) {
        for (std::size_t b = 0; b < a; ++b) {
            xtx[a][b] = xtx[b][a];
        }
    }
    detail::Matrix inv;
    if (!detail::invert(xtx, inv, 0.0)) {
        throw RankDeficiencyError("ols: normal equations are singular");
    }
    fit.names = design.names;
    fit.n = n;
    fit.df = n - p;
    fit.coef.assign(p, 0.0);
    for (std::size_t a = 0; a < p; ++a) {
        for (std::size_t b = 0; b < p; ++b) {
            fit.coef[a] += inv[a][b] * xty[b];
        }
    }
    fit.residuals.resize(n);
    double rss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        double pred = 0.0;
        for (std::size_t a = 0; a < p; ++a) {
            pred += design.rows[r][a] * fit.coef[a];
        }
        fit.residuals[r] = y[r] - pred;
        rss += fit.residuals[r] * fit.residuals[r];
    }
    fit.sigma2 = rss / static_cast<double>(fit.df);
    const double tq = student_t_quantile(0.5 + 0.5 * opt.confidence, static_cast<double>(fit.df));
    for (std::size_t a = 0; a < p; ++a) {
        const double se = std::sqrt(std::max(0.0, fit.sigma2 * inv[a][a]));
        fit.se.push_back(se);
        fit.ci_low.push_back(fit.coef[a] - tq * se);
        fit.ci_high.push_back(fit.coef[a] + tq * se);
        fit.significant.push_back(fit.ci_low.back() > 0.0 || fit.ci_high.back() < 0.0);
        std::size_t nz = 0;
        for (const auto& row : design.rows) {
            nz += row[a] != 0.0 ? 1 : 0;
        }
        fit.n_nonzero.push_back(nz);
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Spine age gap regressions

enum class CovariateGroup { LumbarDegenerative, Structural, Lifestyle, CervicalDegenerative, ThoracicDegenerative };

inline constexpr std::array<std::string_view, 5> kGroupNames{"lumbar_degenerative", "structural", "lifestyle",
                                                             "cervical_degenerative", "thoracic_degenerative"};

inline std::string_view name(CovariateGroup g) { return kGroupNames[static_cast<std::size_t>(g)]; }

inline CovariateGroup parse_group(std::string_view s) {
    for (std::size_t i = 0; i < kGroupNames.size(); ++i) {
        if (kGroupNames[i] == s) {
            return static_cast<CovariateGroup>(i);
        }
    }
    throw ValidationError("unknown covariate group '" + std::string(s) + "'");
}

/// One subject's inputs to the biomarker regressions.
struct SagSubject {
    std::string id;
    double sag = 0.0;
    bool female = false;
    DenseFeatures features{};
    // lifestyle
    double packs_per_day = 0.0;
    double alcohol_days_per_week = 0.0;
    double sedentary_hours = 0.0;
    int work_level = 0;
    int exercise_level = 0;
};

/// A degenerative indicator: count of (kind, severity) in a region strictly above `threshold`.
struct IndicatorDef {
    std::string label;
    ConditionKind kind;
    Severity severity;
    int threshold;
};

/// Indicator rows of the degenerative regressions, most severe first within each kind.
inline const std::vector<IndicatorDef>& degenerative_indicators() {
    static const std::vector<IndicatorDef> defs{
        {"severe_disc_bulge", ConditionKind::DiscBulge, Severity::Severe, 0},
        {"moderate_disc_bulge", ConditionKind::DiscBulge, Severity::Moderate, 1},
        {"mild_disc_bulge", ConditionKind::DiscBulge, Severity::Mild, 2},
        {"near_complete_desiccation", ConditionKind::Desiccation, Severity::NearComplete, 0},
        {"severe_desiccation", ConditionKind::Desiccation, Severity::Severe, 0},
        {"moderate_desiccation", ConditionKind::Desiccation, Severity::Moderate, 0},
        {"mild_desiccation", ConditionKind::Desiccation, Severity::Mild, 1},
        {"annular_fissure", ConditionKind::AnnularFissure, Severity::Present, 0},
        {"endplate_change", ConditionKind::EndplateChange, Severity::Present, 0},
        {"moderate_disc_osteophyte", ConditionKind::DiscOsteophyteComplex, Severity::Moderate, 0},
        {"mild_disc_osteophyte", ConditionKind::DiscOsteophyteComplex, Severity::Mild, 1},
        {"moderate_protrusion", ConditionKind::Protrusion, Severity::Moderate, 0},
        {"mild_protrusion", ConditionKind::Protrusion, Severity::Mild, 1},
        {"mild_extrusion", ConditionKind::Extrusion, Severity::Mild, 0},
    };
    return defs;
}

/**
 * 0/1 indicators for one region. Within a kind the subject is assigned only
 * to the most severe category whose count threshold is met.
 */
inline std::vector<double> degenerative_indicator_row(const DenseFeatures& f, Region region) {
    const auto& defs = degenerative_indicators();
    std::vector<double> row(defs.size(), 0.0);
    std::vector<bool> kind_taken(kDegenerativeKinds, false);
    for (std::size_t i = 0; i < defs.size(); ++i) {
        const auto k = static_cast<std::size_t>(defs[i].kind);
        if (kind_taken[k]) {
            continue;
        }
        if (f[dense_index(region, defs[i].kind, defs[i].severity)] > defs[i].threshold) {
            row[i] = 1.0;
            kind_taken[k] = true;
        }
    }
    return row;
}

/// Intercept and sex, then the group's covariates.
inline Design sag_design(std::span<const SagSubject> subjects, CovariateGroup group) {
    Design d;
    d.names = {"intercept", "female"};
    switch (group) {
    case CovariateGroup::LumbarDegenerative:
    case CovariateGroup::CervicalDegenerative:
    case CovariateGroup::ThoracicDegenerative:
        for (const auto& def : degenerative_indicators()) {
            d.names.push_back(def.label);
        }
        break;
    case CovariateGroup::Structural:
        for (std::size_t k = 0; k < kStructuralKinds; ++k) {
            d.names.emplace_back(name(static_cast<ConditionKind>(kDegenerativeKinds + k)));
        }
        break;
    case CovariateGroup::Lifestyle:
        d.names.insert(d.names.end(), {"packs_per_day", "alcohol_days_per_week", "sedentary_hours", "moderate_work",
                                       "heavy_work", "moderate_exercise", "vigorous_exercise"});
        break;
    }
    const Region region = group == CovariateGroup::CervicalDegenerative   ? Region::Cervical
                          : group == CovariateGroup::ThoracicDegenerative ? Region::Thoracic
                                                                          : Region::Lumbar;
    for (const auto& s : subjects) {
        std::vector<double> row{1.0, s.female ? 1.0 : 0.0};
        switch (group) {
        case CovariateGroup::LumbarDegenerative:
        case CovariateGroup::CervicalDegenerative:
        case CovariateGroup::ThoracicDegenerative: {
            const auto ind = degenerative_indicator_row(s.features, region);
            row.insert(row.end(), ind.begin(), ind.end());
            break;
        }
        case CovariateGroup::Structural:
            for (std::size_t k = 0; k < kStructuralKinds; ++k) {
                row.push_back(s.features[kDegenerativeCells + k] > 0 ? 1.0 : 0.0);
            }
            break;
        case CovariateGroup::Lifestyle:
            row.insert(row.end(), {s.packs_per_day, s.alcohol_days_per_week, s.sedentary_hours,
                                   s.work_level == 1 ? 1.0 : 0.0, s.work_level == 2 ? 1.0 : 0.0,
                                   s.exercise_level == 1 ? 1.0 : 0.0, s.exercise_level == 2 ? 1.0 : 0.0});
            break;
        }
        d.rows.push_back(std::move(row));
    }
    return d;
}

/// SAG regressed on one covariate group, always controlling for sex.
inline OlsFit fit_sag_ols(std::span<const SagSubject> subjects, CovariateGroup group, bool drop_degenerate = false) {
    std::vector<double> y;
    y.reserve(subjects.size());
    for (const auto& s : subjects) {
        y.push_back(s.sag);
    }
    OlsOptions opt;
    opt.drop_degenerate = drop_degenerate;
    opt.protected_columns = 1;
    return ols(sag_design(subjects, group), y, opt);
}

/// condition,n,effect,ci_low,ci_high,significant; intercept and sex rows omitted.
inline std::string regression_csv(const std::vector<std::pair<CovariateGroup, OlsFit>>& fits) {
    std::ostringstream os;
    os << "group,condition,n,effect,ci_low,ci_high,significant\n";
    for (const auto& [group, fit] : fits) {
        for (std::size_t i = 0; i < fit.names.size(); ++i) {
            if (fit.names[i] == "intercept" || fit.names[i] == "female") {
                continue;
            }
            os << name(group) << ',' << fit.names[i] << ',' << fit.n_nonzero[i] << ',' << fmt_double(fit.coef[i]) << ','
               << fmt_double(fit.ci_low[i]) << ',' << fmt_double(fit.ci_high[i]) << ','
               << (fit.significant[i] ? "true" : "false") << '\n';
        }
        for (const auto& d : fit.dropped) {
            os << name(group) << ',' << d << ",0,,,,dropped\n";
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Odds ratios

struct OddsRatioResult {
    std::string condition;
    /// a: high SAG with condition, b: high without, c: low with, d: low without.
    double a = 0, b = 0, c = 0, d = 0;
    double odds_ratio = 1.0;
    double ci_low = 1.0;
    double ci_high = 1.0;
    bool corrected = false;
};

/// Wald odds ratio from a 2x2 table; +0.5 on every cell when any is zero.
inline OddsRatioResult odds_ratio_from_counts(double a, double b, double c, double d, double z = 1.959963984540054) {
    if (a + b == 0.0 || c + d == 0.0) {
        throw ValidationError("odds_ratio: an SAG group is empty");
    }
    OddsRatioResult r;
    r.a = a;
    r.b = b;
    r.c = c;
    r.d = d;
    if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) {
        a += 0.5;
        b += 0.5;
        c += 0.5;
        d += 0.5;
        r.corrected = true;
    }
    const double log_or = std::log(a * d / (b * c));
    const double se = std::sqrt(1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d);
    r.odds_ratio = std::exp(log_or);
    r.ci_low = std::exp(log_or - z * se);
    r.ci_high = std::exp(log_or + z * se);
    return r;
}

/// SAG > high versus SAG < low; subjects in between are excluded.
inline OddsRatioResult odds_ratios(std::span<const double> sag, std::span<const bool> condition, double high = 5.0,
                                   double low = -5.0) {
    if (sag.size() != condition.size()) {
        throw DimensionError("odds_ratios: SAG and indicator differ in length");
    }
    double a = 0, b = 0, c = 0, d = 0;
    for (std::size_t i = 0; i < sag.size(); ++i) {
        if (sag[i] > high) {
            (condition[i] ? a : b) += 1;
        } else if (sag[i] < low) {
            (condition[i] ? c : d) += 1;
        }
    }
    if (a + b == 0.0) {
        throw ValidationError("odds_ratios: no subjects with SAG > " + fmt_double(high));
    }
    if (c + d == 0.0) {
        throw ValidationError("odds_ratios: no subjects with SAG < " + fmt_double(low));
    }
    return odds_ratio_from_counts(a, b, c, d);
}

inline std::string odds_ratio_csv(const std::vector<OddsRatioResult>& rows) {
    std::ostringstream os;
    os << "condition,a_high_with,b_high_without,c_low_with,d_low_without,odds_ratio,ci_low,ci_high,corrected\n";
    for (const auto& r : rows) {
        os << r.condition << ',' << r.a << ',' << r.b << ',' << r.c << ',' << r.d << ',' << fmt_double(r.odds_ratio)
           << ',' << fmt_double(r.ci_low) << ',' << fmt_double(r.ci_high) << ',' << (r.corrected ? "true" : "false")
           << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Scan-rescan reliability

struct IccResult {
    double icc = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t n = 0;
    std::size_t k = 2;
    std::size_t replicates = 0;
};

/// One-way random-effects ICC(1,1) for k = 2; 1 when there is no within-subject spread.
inline double icc_1_1(std::span<const std::array<double, 2>> pairs) {
    const std::size_t n = pairs.size();
    if (n < 2) {
        throw ValidationError("icc: need at least 2 subjects");
    }
    double grand = 0.0;
    for (const auto& p : pairs) {
        grand += p[0] + p[1];
    }
    grand /= static_cast<double>(2 * n);
    double ssb = 0.0, ssw = 0.0;
    for (const auto& p : pairs) {
        const double m = 0.5 * (p[0] + p[1]);
        ssb += 2.0 * (m - grand) * (m - grand);
        ssw += (p[0] - m) * (p[0] - m) + (p[1] - m) * (p[1] - m);
    }
    const double msb = ssb / static_cast<double>(n - 1);
    const double msw = ssw / static_cast<double>(n);
    if (msw == 0.0) {
        return 1.0;
    }
    return (msb - msw) / (msb + msw);
}

/// Percentile of sorted data, linear interpolation between order statistics.
inline double percentile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) {
        throw ValidationError("percentile: empty input");
    }
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// ICC(1,1) with a percentile bootstrap over subjects; replicate i draws from derive_seed(seed, i).
inline IccResult icc_scan_rescan(std::span<const std::array<double, 2>> pairs, std::size_t reps = 2000,
                                 std::uint64_t seed = 0) {
    if (pairs.size() < 3) {
        throw ValidationError("icc_scan_rescan: need at least 3 subjects, got " + std::to_string(pairs.size()));
    }
    IccResult r;
    r.n = pairs.size();
    r.icc = icc_1_1(pairs);
    r.replicates = reps;
    if (reps == 0) {
        r.ci_low = r.ci_high = r.icc;
        return r;
    }
    std::vector<double> stats(reps);
    std::vector<std::array<double, 2>> sample(pairs.size());
    for (std::size_t i = 0; i < reps; ++i) {
        Rng rng(derive_seed(seed, i));
        for (auto& s : sample) {
            s = pairs[rng.index(pairs.size())];
        }
        stats[i] = icc_1_1(sample);
    }
    std::sort(stats.begin(), stats.end());
    r.ci_low = percentile_sorted(stats, 0.025);
    r.ci_high = percentile_sorted(stats, 0.975);
    return r;
}

/// Mean SAG per age bin and group level (e.g. work level), for plotting age interactions.
inline std::string age_bin_sag_csv(std::span<const double> ages, std::span<const double> sag,
                                   std::span<const int> levels, double bin_width = 5.0) {
    if (ages.size() != sag.size() || ages.size() != levels.size()) {
        throw DimensionError("age_bin_sag_csv: inputs differ in length");
    }
    std::map<std::pair<int, int>, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < ages.size(); ++i) {
        const int bin = static_cast<int>(std::floor(ages[i] / bin_width) * bin_width);
        auto& [sum, count] = acc[{levels[i], bin}];
        sum += sag[i];
        ++count;
    }
    std::ostringstream os;
    os << "level,age_bin_start,n,mean_sag\n";
    for (const auto& [key, v] : acc) {
        os << key.first << ',' << key.second << ',' << v.second << ','
           << fmt_double(v.first / static_cast<double>(v.second)) << '\n';
    }
    return os.str();
}

} // namespace spineage

#endif
