#ifndef SPINEAGE_EMBEDDING_HPP
#define SPINEAGE_EMBEDDING_HPP

#include "errors.hpp"
#include "io.hpp"
#include "report_features.hpp"
#include "rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

/**
 * @file embedding.hpp
 *
 * A small UMAP: exact neighbor graph under an arbitrary metric, smooth-kNN
 * fuzzy memberships with union symmetrization, and the attractive/repulsive
 * SGD layout with negative sampling. Initialization is uniform random.
 */

namespace spineage::umap {

struct Neighbor {
    std::size_t index = 0;
    double distance = 0.0;
};

/// neighbors[i] holds the k nearest points of i, nearest first.
using NeighborLists = std::vector<std::vector<Neighbor>>;

struct UmapConfig {
    std::size_t n_neighbors = 15;
    double min_dist = 0.0;
    double spread = 1.0;
    int n_epochs = 500;
    int negative_sample_rate = 5;
    double learning_rate = 1.0;
    std::uint64_t seed = 42;

    void validate() const {
        if (n_neighbors < 2) {
            throw ConfigError("umap: n_neighbors must be >= 2");
        }
        if (!(min_dist >= 0.0)) {
            throw ConfigError("umap: min_dist must be >= 0");
        }
        if (n_epochs < 1) {
            throw ConfigError("umap: n_epochs must be >= 1");
        }
        if (negative_sample_rate < 0 || !(learning_rate > 0.0) || !(spread > 0.0)) {
            throw ConfigError("umap: negative_sample_rate, learning_rate and spread must be positive");
        }
    }
};

/**
 * Exact k nearest neighbors by brute force.
 *
 * Self is excluded; equal distances are ordered by the lower point index.
 */
template <class Point, class Metric = CanberraMetric>
NeighborLists knn_graph(std::span<const Point> points, std::size_t k, Metric metric = {}) {
    const std::size_t n = points.size();
    if (k == 0 || n <= k) {
        throw ConfigError("knn_graph: need more points (" + std::to_string(n) + ") than neighbors (" +
                          std::to_string(k) + ")");
    }
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = metric(points[i], points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    NeighborLists out(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                order.push_back(j);
            }
        }
        const double* row = dist.data() + i * n;
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [row](std::size_t a, std::size_t b) { return row[a] < row[b] || (row[a] == row[b] && a < b); });
        out[i].reserve(k);
        for (std::size_t r = 0; r < k; ++r) {
            out[i].push_back({order[r], row[order[r]]});
        }
    }
    return out;
}

struct Edge {
    std::size_t from = 0;
    std::size_t to = 0;
    double weight = 0.0;
};

/**
 * Symmetric membership graph. `edges` lists both directions of every
 * undirected edge, sorted by (from, to).
 */
struct FuzzyGraph {
    std::size_t n = 0;
    std::vector<Edge> edges;
    std::vector<double> rho;
    std::vector<double> sigma;
    /// Directed memberships before symmetrization, aligned with the neighbor lists.
    std::vector<std::vector<double>> directed;

    double weight(std::size_t i, std::size_t j) const {
        const auto it = std::lower_bound(edges.begin(), edges.end(), std::pair{i, j}, [](const Edge& e, const auto& key) {
            return e.from < key.first || (e.from == key.first && e.to < key.second);
        });
        return (it != edges.end() && it->from == i && it->to == j) ? it->weight : 0.0;
    }
};

namespace detail {

inline double membership_sum(std::span<const Neighbor> nbrs, double rho, double sigma) {
    double s = 0.0;
    for (const auto& nb : nbrs) {
        s += std::exp(-std::max(0.0, nb.distance - rho) / sigma);
    }
    return s;
}

} // namespace detail

/**
 * Smooth-kNN memberships and their fuzzy union.
 *
 * For each point, rho is the distance to its nearest neighbor and sigma is
 * found by bisection so that the memberships exp(-max(0, d - rho) / sigma)
 * sum to log2(k). If bisection does not reach 1e-5 within 64 iterations,
 * sigma falls back to the mean neighbor distance.
 */
inline FuzzyGraph fuzzy_simplicial_set(const NeighborLists& knn) {
    constexpr int kMaxIter = 64;
    constexpr double kTol = 1e-5;
    FuzzyGraph g;
    g.n = knn.size();
    g.rho.assign(g.n, 0.0);
    g.sigma.assign(g.n, 1.0);
    g.directed.resize(g.n);
    std::size_t fallbacks = 0;

    for (std::size_t i = 0; i < g.n; ++i) {
        const auto& nb = knn[i];
        if (nb.empty()) {
            throw ConfigError("fuzzy_simplicial_set: point " + std::to_string(i) + " has no neighbors");
        }
        const double target = std::log2(static_cast<double>(nb.size()));
        const double rho = nb.front().distance;
        double lo = 0.0, hi = std::numeric_limits<double>::infinity(), mid = 1.0;
        bool converged = false;
        for (int it = 0; it < kMaxIter; ++it) {
            const double s = detail::membership_sum(nb, rho, mid);
            if (std::abs(s - target) < kTol) {
                converged = true;
                break;
            }
            if (s > target) {
                hi = mid;
                mid = 0.5 * (lo + hi);
            } else {
                lo = mid;
                mid = std::isinf(hi) ? mid * 2.0 : 0.5 * (lo + hi);
            }
        }
        if (!converged) {
            double mean = 0.0;
            for (const auto& x : nb) {
                mean += x.distance;
            }
            mean /= static_cast<double>(nb.size());
            mid = mean > 0.0 ? mean : 1.0;
            ++fallbacks;
        }
        g.rho[i] = rho;
        g.sigma[i] = mid;
        g.directed[i].reserve(nb.size());
        for (const auto& x : nb) {
            g.directed[i].push_back(std::exp(-std::max(0.0, x.distance - rho) / mid));
        }
    }
    if (fallbacks > 0) {
        log::warn("fuzzy_simplicial_set: sigma bisection did not converge for " + std::to_string(fallbacks) +
                  " point(s); used mean neighbor distance");
    }

    // Union: mu = a + b - a*b over the directed pair (i->j, j->i).
    std::vector<Edge> directed_edges;
    for (std::size_t i = 0; i < g.n; ++i) {
        for (std::size_t r = 0; r < knn[i].size(); ++r) {
            directed_edges.push_back({i, knn[i][r].index, g.directed[i][r]});
        }
    }
    auto by_key = [](const Edge& a, const Edge& b) { return a.from < b.from || (a.from == b.from && a.to < b.to); };
    std::sort(directed_edges.begin(), directed_edges.end(), by_key);
    auto lookup = [&](std::size_t i, std::size_t j) {
        const auto it = std::lower_bound(directed_edges.begin(), directed_edges.end(), Edge{i, j, 0.0}, by_key);
        return (it != directed_edges.end() && it->from == i && it->to == j) ? it->weight : 0.0;
    };
    for (const auto& e : directed_edges) {
        const double a = e.weight, b = lookup(e.to, e.from);
        const double mu = a + b - a * b;
        if (mu > 0.0) {
            g.edges.push_back({e.from, e.to, mu});
            if (b == 0.0) {
                g.edges.push_back({e.to, e.from, mu});
            }
        }
    }
    std::sort(g.edges.begin(), g.edges.end(), by_key);
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end(),
                              [](const Edge& x, const Edge& y) { return x.from == y.from && x.to == y.to; }),
                  g.edges.end());
    return g;
}

/// Parameters of the low-dimensional similarity 1 / (1 + a d^(2b)).
struct CurveParams {
    double a = 1.0;
    double b = 1.0;
};

/**
 * Least-squares fit of 1/(1 + a x^(2b)) to the target curve that is 1 below
 * min_dist and exp(-(x - min_dist)/spread) above, on 300 points of [0, 3 spread].
 * Levenberg-Marquardt on (a, b).
 */
inline CurveParams find_ab(double spread, double min_dist) {
    constexpr std::size_t kPoints = 300;
    std::vector<double> xs(kPoints), ys(kPoints);
    for (std::size_t i = 0; i < kPoints; ++i) {
        xs[i] = 3.0 * spread * static_cast<double>(i) / static_cast<double>(kPoints - 1);
        ys[i] = xs[i] < min_dist ? 1.0 : std::exp(-(xs[i] - min_dist) / spread);
    }
    auto cost = [&](double a, double b) {
        double c = 0.0;
        for (std::size_t i = 0; i < kPoints; ++i) {
            const double r = 1.0 / (1.0 + a * std::pow(xs[i], 2.0 * b)) - ys[i];
            c += r * r;
        }
        return c;
    };
    double a = 1.0, b = 1.0, lambda = 1e-3;
    double current = cost(a, b);
    for (int it = 0; it < 500; ++it) {
        double jaa = 0.0, jab = 0.0, jbb = 0.0, ga = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < kPoints; ++i) {
            const double x = xs[i];
            const double p = x > 0.0 ? std::pow(x, 2.0 * b) : 0.0;
            const double den = 1.0 + a * p;
            const double r = 1.0 / den - ys[i];
            const double da = -p / (den * den);
            const double db = x > 0.0 ? -a * p * 2.0 * std::log(x) / (den * den) : 0.0;
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        bool accepted = false;
        while (lambda < 1e12) {
            const double m00 = jaa * (1.0 + lambda), m11 = jbb * (1.0 + lambda), m01 = jab;
            const double det = m00 * m11 - m01 * m01;
            if (det == 0.0) {
                lambda *= 10.0;
                continue;
            }
            const double step_a = -(m11 * ga - m01 * gb) / det;
            const double step_b = -(-m01 * ga + m00 * gb) / det;
            const double na = a + step_a, nb = b + step_b;
            const double next = (na > 0.0 && nb > 0.0) ? cost(na, nb) : std::numeric_limits<double>::infinity();
            if (next < current) {
                const double gain = current - next;
                a = na;
                b = nb;
                current = next;
                lambda = std::max(lambda / 10.0, 1e-12);
                accepted = gain > 1e-16 * (1.0 + current);
                break;
            }
            lambda *= 10.0;
        }
        if (!accepted) {
            break;
        }
    }
    return {a, b};
}

/// min_dist of exactly 0 makes the target a step; the fit uses this floor instead.
inline constexpr double kMinDistFloor = 1e-3;

struct Embedding2D {
    std::vector<std::array<double, 2>> coords;
    UmapConfig config;
    std::uint64_t seed = 0;
    CurveParams curve;
};

namespace detail {

inline double clip4(double v) { return std::clamp(v, -4.0, 4.0); }

} // namespace detail

/**
 * Stochastic layout optimization with negative sampling.
 *
 * Each directed edge is sampled every max(w)/w epochs (edges sampled fewer
 * than once overall are dropped); each positive sample moves both endpoints
 * and draws negative_sample_rate repulsive samples for the head. The learning
 * rate decays linearly to 0 and every gradient component is clipped to +-4.
 */
inline Embedding2D optimize_layout(const FuzzyGraph& graph, const UmapConfig& config) {
    config.validate();
    if (graph.n == 0) {
        throw ConfigError("optimize_layout: empty graph");
    }
    Embedding2D emb;
    emb.config = config;
    emb.seed = config.seed;
    emb.curve = find_ab(config.spread, std::max(config.min_dist, kMinDistFloor));
    const double a = emb.curve.a, b = emb.curve.b;

    Rng rng(config.seed);
    emb.coords.resize(graph.n);
    for (auto& c : emb.coords) {
        c[0] = rng.uniform(-10.0, 10.0);
        c[1] = rng.uniform(-10.0, 10.0);
    }
    if (graph.edges.empty()) {
        return emb;
    }

    const double wmax = std::max_element(graph.edges.begin(), graph.edges.end(), [](const Edge& x, const Edge& y) {
                            return x.weight < y.weight;
                        })->weight;
    const double n_epochs = static_cast<double>(config.n_epochs);
    std::vector<Edge> edges;
    std::vector<double> eps;
    for (const auto& e : graph.edges) {
        if (e.weight * n_epochs / wmax >= 1.0) {
            edges.push_back(e);
            eps.push_back(wmax / e.weight);
        }
    }
    const double neg_rate = static_cast<double>(config.negative_sample_rate);
    std::vector<double> eps_neg(eps.size()), next_sample(eps), next_neg(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        eps_neg[i] = neg_rate > 0.0 ? eps[i] / neg_rate : std::numeric_limits<double>::infinity();
        next_neg[i] = eps_neg[i];
    }

    for (int epoch = 0; epoch < config.n_epochs; ++epoch) {
        const double n = static_cast<double>(epoch);
        const double alpha = config.learning_rate * (1.0 - n / n_epochs);
        for (std::size_t i = 0; i < edges.size(); ++i) {
            if (next_sample[i] > n) {
                continue;
            }
            auto& cur = emb.coords[edges[i].from];
            auto& oth = emb.coords[edges[i].to];
            double dx = cur[0] - oth[0], dy = cur[1] - oth[1];
            double d2 = dx * dx + dy * dy;
            if (d2 > 0.0) {
                const double coeff = -2.0 * a * b * std::pow(d2, b - 1.0) / (a * std::pow(d2, b) + 1.0);
                const double gx = detail::clip4(coeff * dx), gy = detail::clip4(coeff * dy);
                cur[0] += gx * alpha;
                cur[1] += gy * alpha;
                oth[0] -= gx * alpha;
                oth[1] -= gy * alpha;
            }
            next_sample[i] += eps[i];

            const auto n_neg = static_cast<int>((n - next_neg[i]) / eps_neg[i]);
            for (int p = 0; p < n_neg; ++p) {
                const std::size_t k = rng.index(graph.n);
                if (k == edges[i].from) {
                    continue;
                }
                const auto& neg = emb.coords[k];
                dx = cur[0] - neg[0];
                dy = cur[1] - neg[1];
                d2 = dx * dx + dy * dy;
                double gx = 4.0, gy = 4.0;
                if (d2 > 0.0) {
                    const double coeff = 2.0 * b / ((0.001 + d2) * (a * std::pow(d2, b) + 1.0));
                    gx = detail::clip4(coeff * dx);
                    gy = detail::clip4(coeff * dy);
                }
                cur[0] += gx * alpha;
                cur[1] += gy * alpha;
            }
            if (n_neg > 0) {
                next_neg[i] += static_cast<double>(n_neg) * eps_neg[i];
            }
        }
    }
    return emb;
}

/// knn_graph -> fuzzy_simplicial_set -> optimize_layout.
template <class Point, class Metric = CanberraMetric>
Embedding2D embed(std::span<const Point> points, const UmapConfig& config, Metric metric = {}) {
    config.validate();
    const auto knn = knn_graph(points, config.n_neighbors, metric);
    return optimize_layout(fuzzy_simplicial_set(knn), config);
}

/// Mean silhouette coefficient of a 2D labeling under Euclidean distance; labels < 0 are ignored.
inline double silhouette(const std::vector<std::array<double, 2>>& xy, const std::vector<int>& labels) {
    const std::size_t n = xy.size();
    double total = 0.0;
    std::size_t counted = 0;
    int max_label = -1;
    for (int l : labels) {
        max_label = std::max(max_label, l);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) {
            continue;
        }
        std::vector<double> sums(static_cast<std::size_t>(max_label + 1), 0.0);
        std::vector<std::size_t> counts(sums.size(), 0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || labels[j] < 0) {
                continue;
            }
            sums[static_cast<std::size_t>(labels[j])] += std::hypot(xy[i][0] - xy[j][0], xy[i][1] - xy[j][1]);
            ++counts[static_cast<std::size_t>(labels[j])];
        }
        const auto own = static_cast<std::size_t>(labels[i]);
        if (counts[own] == 0) {
            continue;
        }
        const double a_i = sums[own] / static_cast<double>(counts[own]);
        double b_i = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < sums.size(); ++c) {
            if (c != own && counts[c] > 0) {
                b_i = std::min(b_i, sums[c] / static_cast<double>(counts[c]));
            }
        }
        if (std::isinf(b_i)) {
            continue;
        }
        total += (b_i - a_i) / std::max(a_i, b_i);
        ++counted;
    }
    return counted ? total / static_cast<double>(counted) : 0.0;
}

/// Scatter plot as a P6 pixmap; label -1 is drawn gray, others cycle a fixed palette.
inline std::string render_scatter(const Embedding2D& emb, const std::vector<int>& labels, std::size_t size = 320) {
    static constexpr std::array<Rgb, 8> palette{{{228, 26, 28}, {55, 126, 184}, {77, 175, 74}, {152, 78, 163},
                                                 {255, 127, 0}, {166, 86, 40}, {247, 129, 191}, {23, 190, 207}}};
    std::vector<Rgb> px(size * size, Rgb{255, 255, 255});
    if (emb.coords.empty()) {
        return encode_ppm(size, size, px);
    }
    double x0 = emb.coords[0][0], x1 = x0, y0 = emb.coords[0][1], y1 = y0;
    for (const auto& c : emb.coords) {
        x0 = std::min(x0, c[0]);
        x1 = std::max(x1, c[0]);
        y0 = std::min(y0, c[1]);
        y1 = std::max(y1, c[1]);
    }
    const double sx = x1 > x0 ? (static_cast<double>(size) - 9.0) / (x1 - x0) : 0.0;
    const double sy = y1 > y0 ? (static_cast<double>(size) - 9.0) / (y1 - y0) : 0.0;
    for (std::size_t i = 0; i < emb.coords.size(); ++i) {
        const auto cx = static_cast<long>(4.0 + (emb.coords[i][0] - x0) * sx);
        const auto cy = static_cast<long>(4.0 + (y1 - emb.coords[i][1]) * sy);
        const int l = i < labels.size() ? labels[i] : -1;
        const Rgb color = l < 0 ? Rgb{160, 160, 160} : palette[static_cast<std::size_t>(l) % palette.size()];
        for (long dy = -1; dy <= 1; ++dy) {
            for (long dx = -1; dx <= 1; ++dx) {
                const long x = cx + dx, y = cy + dy;
                if (x >= 0 && y >= 0 && x < static_cast<long>(size) && y < static_cast<long>(size)) {
                    px[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = color;
                }
            }
        }
    }
    return encode_ppm(size, size, px);
}

} // namespace spineage::umap

#endif
