#ifndef SPINEAGE_CLUSTERING_HPP
#define SPINEAGE_CLUSTERING_HPP

#include "errors.hpp"
#include "io.hpp"
#include "report_features.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

/**
 * @file clustering.hpp
 *
 * HDBSCAN over planar points plus the population-share normality rule.
 *
 * Pipeline: core distances -> minimum spanning tree of the mutual
 * reachability graph (Prim) -> single-linkage merges -> condensed tree with
 * a minimum cluster size -> excess-of-mass selection -> epsilon merging.
 */

namespace spineage::hdbscan {

using Point2 = std::array<double, 2>;

inline constexpr int kNoise = -1;

struct HdbscanConfig {
    std::size_t min_cluster_size = 5;
    std::size_t min_samples = 5;
    double cluster_selection_epsilon = 0.0;

    void validate() const {
        if (min_cluster_size < 2) {
            throw ConfigError("hdbscan: min_cluster_size must be >= 2");
        }
        if (min_samples < 1) {
            throw ConfigError("hdbscan: min_samples must be >= 1");
        }
        if (!(cluster_selection_epsilon >= 0.0)) {
            throw ConfigError("hdbscan: cluster_selection_epsilon must be >= 0");
        }
    }

    /// Selection epsilon used for each age bracket.
    static double bracket_epsilon(int bracket) {
        switch (bracket) {
        case 30: return 1.0;
        case 40: return 0.7;
        case 50: return 1.0;
        case 60: return 0.7;
        case 70: return 0.3;
        case 80: return 0.3;
        default: throw ConfigError("hdbscan: no epsilon for bracket " + std::to_string(bracket));
        }
    }

    /// min_cluster_size = ceil(1% of the bracket population), at least 2.
    static HdbscanConfig for_bracket(int bracket, std::size_t population) {
        HdbscanConfig c;
        c.min_cluster_size = std::max<std::size_t>(2, (population + 99) / 100);
        c.min_samples = 5;
        c.cluster_selection_epsilon = bracket_epsilon(bracket);
        return c;
    }
};

inline double euclidean(const Point2& a, const Point2& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1];
    return std::sqrt(dx * dx + dy * dy);
}

/// Distance to the min_samples-th nearest other point.
inline std::vector<double> core_distances(std::span<const Point2> points, std::size_t min_samples) {
    const std::size_t n = points.size();
    if (min_samples == 0 || n <= min_samples) {
        throw ConfigError("core_distances: need more points (" + std::to_string(n) + ") than min_samples (" +
                          std::to_string(min_samples) + ")");
    }
    std::vector<double> core(n);
    std::vector<double> row;
    for (std::size_t i = 0; i < n; ++i) {
        row.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                row.push_back(euclidean(points[i], points[j]));
            }
        }
        std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(min_samples - 1), row.end());
        core[i] = row[min_samples - 1];
    }
    return core;
}

inline double mutual_reachability(const Point2& a, const Point2& b, double core_a, double core_b) {
    return std::max({core_a, core_b, euclidean(a, b)});
}

struct MstEdge {
    std::size_t a = 0;
    std::size_t b = 0;
    double weight = 0.0;
};

/// Exact minimum spanning tree of the mutual reachability graph, Prim's algorithm in O(n^2).
inline std::vector<MstEdge> mst_mutual_reachability(std::span<const Point2> points, std::span<const double> core) {
    const std::size_t n = points.size();
    if (core.size() != n) {
        throw DimensionError("mst_mutual_reachability: core distance count mismatch");
    }
    std::vector<MstEdge> tree;
    if (n < 2) {
        return tree;
    }
    tree.reserve(n - 1);
    std::vector<bool> in_tree(n, false);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> from(n, 0);
    std::size_t current = 0;
    in_tree[0] = true;
    for (std::size_t step = 1; step < n; ++step) {
        std::size_t next = n;
        for (std::size_t j = 0; j < n; ++j) {
            if (in_tree[j]) {
                continue;
            }
            const double w = mutual_reachability(points[current], points[j], core[current], core[j]);
            if (w < best[j]) {
                best[j] = w;
                from[j] = current;
            }
            if (next == n || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        tree.push_back({from[next], next, best[next]});
        current = next;
    }
    return tree;
}

/// One agglomeration: nodes < n are points, node n + i is created by merge i.
struct Merge {
    std::size_t left = 0;
    std::size_t right = 0;
    double distance = 0.0;
    std::size_t size = 0;
};

/// Single-linkage dendrogram from the MST: edges merged in nondecreasing weight order.
inline std::vector<Merge> single_linkage(std::vector<MstEdge> mst, std::size_t n) {
    std::stable_sort(mst.begin(), mst.end(), [](const MstEdge& x, const MstEdge& y) { return x.weight < y.weight; });
    std::vector<std::size_t> parent(2 * n), size(2 * n, 1);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    std::vector<Merge> merges;
    merges.reserve(mst.size());
    std::size_t next = n;
    for (const auto& e : mst) {
        const std::size_t ra = find(e.a), rb = find(e.b);
        merges.push_back({ra, rb, e.weight, size[ra] + size[rb]});
        parent[ra] = next;
        parent[rb] = next;
        size[next] = size[ra] + size[rb];
        ++next;
    }
    return merges;
}

/// Row of the condensed tree. Children below n are points; cluster ids start at n (the root).
struct CondensedEdge {
    std::size_t parent = 0;
    std::size_t child = 0;
    double lambda = 0.0;
    std::size_t child_size = 0;
};

inline double to_lambda(double distance) { return 1.0 / std::max(distance, 1e-12); }

/**
 * Condenses the dendrogram: a split where one side is smaller than
 * min_cluster_size is not a split; that side's points fall out of the
 * parent cluster at the split's lambda.
 */
inline std::vector<CondensedEdge> condense_tree(const std::vector<Merge>& merges, std::size_t n,
                                                std::size_t min_cluster_size) {
    std::vector<CondensedEdge> out;
    if (merges.empty()) {
        return out;
    }
    const std::size_t root = n + merges.size() - 1;
    auto node_size = [&](std::size_t node) { return node < n ? std::size_t{1} : merges[node - n].size; };
    auto leaves_of = [&](std::size_t node, auto&& fn) {
        std::vector<std::size_t> stack{node};
        while (!stack.empty()) {
            const std::size_t x = stack.back();
            stack.pop_back();
            if (x < n) {
                fn(x);
            } else {
                stack.push_back(merges[x - n].right);
                stack.push_back(merges[x - n].left);
            }
        }
    };
    std::vector<std::size_t> relabel(root + 1, 0);
    relabel[root] = n;
    std::size_t next_label = n + 1;
    // Breadth-first over internal nodes reachable without passing through ignored subtrees.
    std::vector<std::size_t> queue{root};
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
        const std::size_t node = queue[qi];
        const auto& m = merges[node - n];
        const double lambda = to_lambda(m.distance);
        const std::size_t lsize = node_size(m.left), rsize = node_size(m.right);
        const std::size_t label = relabel[node];
        auto fall_out = [&](std::size_t side) {
            leaves_of(side, [&](std::size_t p) { out.push_back({label, p, lambda, 1}); });
        };
        if (lsize >= min_cluster_size && rsize >= min_cluster_size) {
            for (std::size_t side : {m.left, m.right}) {
                relabel[side] = next_label++;
                out.push_back({label, relabel[side], lambda, node_size(side)});
                queue.push_back(side);
            }
        } else if (lsize < min_cluster_size && rsize < min_cluster_size) {
            fall_out(m.left);
            fall_out(m.right);
        } else if (lsize < min_cluster_size) {
            fall_out(m.left);
            relabel[m.right] = label;
            if (m.right >= n) {
                queue.push_back(m.right);
            } else {
                out.push_back({label, m.right, lambda, 1});
            }
        } else {
            fall_out(m.right);
            relabel[m.left] = label;
            if (m.left >= n) {
                queue.push_back(m.left);
            } else {
                out.push_back({label, m.left, lambda, 1});
            }
        }
    }
    return out;
}

struct ClusterLabeling {
    enum class Verdict { Normal, Abnormal };

    /// Cluster index per point, or kNoise.
    std::vector<int> labels;
    std::vector<std::size_t> sizes;
    std::vector<double> fractions;
    std::vector<Verdict> verdicts;
    std::vector<std::string> summaries;
    /// Merge distance at which each selected cluster was born (infinity for the root).
    std::vector<double> birth_distance;

    std::size_t num_clusters() const { return sizes.size(); }
    std::size_t noise_count() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kNoise));
    }
    bool is_normal(std::size_t point) const {
        const int l = labels.at(point);
        return l != kNoise && verdicts.size() > static_cast<std::size_t>(l) &&
               verdicts[static_cast<std::size_t>(l)] == Verdict::Normal;
    }
};

/**
 * Excess-of-mass selection on the condensed tree, then epsilon merging.
 *
 * The root is never selected on stability grounds. A selected cluster born
 * at a merge distance below epsilon is replaced by its nearest ancestor born
 * at or above epsilon; that walk may end at the root, which then becomes
 * the single cluster. Points outside every selected cluster are noise.
 */
inline ClusterLabeling condense_and_select(const std::vector<MstEdge>& mst, std::size_t n, const HdbscanConfig& config) {
    config.validate();
    ClusterLabeling result;
    result.labels.assign(n, kNoise);
    if (n < 2 || mst.size() + 1 != n) {
        if (n >= 2) {
            throw DimensionError("condense_and_select: MST must have n-1 edges");
        }
        return result;
    }
    const auto merges = single_linkage(mst, n);
    const auto tree = condense_tree(merges, n, config.min_cluster_size);
    const std::size_t root = n;
    std::size_t max_label = root;
    for (const auto& e : tree) {
        max_label = std::max(max_label, e.parent);
        if (e.child_size > 1 || e.child >= n) {
            max_label = std::max(max_label, e.child);
        }
    }
    const std::size_t num_nodes = max_label - root + 1;
    auto idx = [root](std::size_t label) { return label - root; };

    std::vector<double> birth(num_nodes, 0.0);
    std::vector<std::size_t> parent_of(num_nodes, root);
    std::vector<std::vector<std::size_t>> children(num_nodes);
    for (const auto& e : tree) {
        if (e.child >= n) {
            birth[idx(e.child)] = e.lambda;
            parent_of[idx(e.child)] = e.parent;
            children[idx(e.parent)].push_back(e.child);
        }
    }
    std::vector<double> stability(num_nodes, 0.0);
    for (const auto& e : tree) {
        stability[idx(e.parent)] += (e.lambda - birth[idx(e.parent)]) * static_cast<double>(e.child_size);
    }

    std::vector<bool> selected(num_nodes, false);
    auto deselect_below = [&](std::size_t label) {
        std::vector<std::size_t> stack(children[idx(label)]);
        while (!stack.empty()) {
            const std::size_t c = stack.back();
            stack.pop_back();
            selected[idx(c)] = false;
            stack.insert(stack.end(), children[idx(c)].begin(), children[idx(c)].end());
        }
    };
    // Children carry larger labels than their parents, so descending order is bottom-up.
    for (std::size_t label = max_label; label > root; --label) {
        const std::size_t i = idx(label);
        double child_sum = 0.0;
        for (std::size_t c : children[i]) {
            child_sum += stability[idx(c)];
        }
        if (children[i].empty() || stability[i] > child_sum) {
            selected[i] = true;
            deselect_below(label);
        } else {
            stability[i] = child_sum;
        }
    }

    if (config.cluster_selection_epsilon > 0.0) {
        std::vector<bool> eps_selected(num_nodes, false);
        std::vector<bool> processed(num_nodes, false);
        auto birth_distance = [&](std::size_t label) { return 1.0 / birth[idx(label)]; };
        for (std::size_t label = root + 1; label <= max_label; ++label) {
            if (!selected[idx(label)] || processed[idx(label)]) {
                continue;
            }
            std::size_t target = label;
            while (target != root && birth_distance(target) < config.cluster_selection_epsilon) {
                target = parent_of[idx(target)];
            }
            eps_selected[idx(target)] = true;
            processed[idx(target)] = true;
            std::vector<std::size_t> stack(children[idx(target)]);
            while (!stack.empty()) {
                const std::size_t c = stack.back();
                stack.pop_back();
                processed[idx(c)] = true;
                stack.insert(stack.end(), children[idx(c)].begin(), children[idx(c)].end());
            }
        }
        // Drop selections nested under another selection.
        for (std::size_t label = root; label <= max_label; ++label) {
            if (!eps_selected[idx(label)]) {
                continue;
            }
            for (std::size_t up = label; up != root;) {
                up = parent_of[idx(up)];
                if (eps_selected[idx(up)]) {
                    eps_selected[idx(label)] = false;
                    break;
                }
            }
        }
        selected = std::move(eps_selected);
    }

    std::vector<int> cluster_index(num_nodes, kNoise);
    for (std::size_t label = root; label <= max_label; ++label) {
        if (selected[idx(label)]) {
            cluster_index[idx(label)] = static_cast<int>(result.sizes.size());
            result.sizes.push_back(0);
            result.birth_distance.push_back(label == root ? std::numeric_limits<double>::infinity()
                                                          : 1.0 / birth[idx(label)]);
        }
    }
    for (const auto& e : tree) {
        if (e.child >= n) {
            continue;
        }
        for (std::size_t label = e.parent;; label = parent_of[idx(label)]) {
            if (selected[idx(label)]) {
                const int c = cluster_index[idx(label)];
                result.labels[e.child] = c;
                ++result.sizes[static_cast<std::size_t>(c)];
                break;
            }
            if (label == root) {
                break;
            }
        }
    }
    if (result.sizes.empty()) {
        log::info("hdbscan: no cluster selected; every point is noise");
    }
    return result;
}

/// core_distances -> mst_mutual_reachability -> condense_and_select.
inline ClusterLabeling cluster(std::span<const Point2> points, const HdbscanConfig& config) {
    config.validate();
    const auto core = core_distances(points, config.min_samples);
    const auto mst = mst_mutual_reachability(points, core);
    return condense_and_select(mst, points.size(), config);
}

/**
 * Fills fractions and verdicts. A cluster is Normal iff its share of the
 * bracket population (noise included in the denominator) is strictly above
 * the threshold.
 */
inline ClusterLabeling assign_normality(ClusterLabeling labeling, std::size_t bracket_population,
                                        double threshold = 0.15) {
    if (bracket_population == 0) {
        throw ConfigError("assign_normality: zero bracket population");
    }
    labeling.fractions.clear();
    labeling.verdicts.clear();
    for (std::size_t size : labeling.sizes) {
        const double f = static_cast<double>(size) / static_cast<double>(bracket_population);
        labeling.fractions.push_back(f);
        labeling.verdicts.push_back(f > threshold ? ClusterLabeling::Verdict::Normal
                                                  : ClusterLabeling::Verdict::Abnormal);
    }
    return labeling;
}

/// Top-3 dense cells by mean count among each cluster's members, e.g. "L_disc_bulge_mild=1.8".
inline void summarize_clusters(ClusterLabeling& labeling, std::span<const DenseFeatures> features) {
    const auto& names = dense_column_names();
    labeling.summaries.assign(labeling.num_clusters(), "");
    for (std::size_t c = 0; c < labeling.num_clusters(); ++c) {
        std::vector<double> mean(kDenseLength, 0.0);
        std::size_t members = 0;
        for (std::size_t i = 0; i < features.size(); ++i) {
            if (labeling.labels[i] == static_cast<int>(c)) {
                for (std::size_t k = 0; k < kDenseLength; ++k) {
                    mean[k] += features[i][k];
                }
                ++members;
            }
        }
        if (members == 0) {
            continue;
        }
        std::vector<std::size_t> order(kDenseLength);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean[a] > mean[b]; });
        std::string text;
        for (std::size_t r = 0; r < 3; ++r) {
            const double m = mean[order[r]] / static_cast<double>(members);
            if (m <= 0.0) {
                break;
            }
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.2f", m);
            text += (text.empty() ? "" : "; ") + names[order[r]] + "=" + buf;
        }
        labeling.summaries[c] = text.empty() ? "no findings" : text;
    }
}

} // namespace spineage::hdbscan

#endif
