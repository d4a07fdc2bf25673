#include "oracles.hpp"

#include "spineage/clustering.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace spineage;
using namespace spineage::hdbscan;

namespace {

std::vector<Point2> uniform_points(std::size_t n, std::uint64_t seed, double side = 10.0) {
    Rng rng(seed);
    std::vector<Point2> p(n);
    for (auto& q : p) {
        q = {rng.uniform(0.0, side), rng.uniform(0.0, side)};
    }
    return p;
}

double total_weight(const std::vector<MstEdge>& t) {
    double s = 0.0;
    for (const auto& e : t) {
        s += e.weight;
    }
    return s;
}

/// Kruskal over the full mutual reachability matrix.
double kruskal_weight(const std::vector<std::vector<double>>& m) {
    const std::size_t n = m.size();
    std::vector<std::tuple<double, std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            edges.emplace_back(m[i][j], i, j);
        }
    }
    std::sort(edges.begin(), edges.end());
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            x = parent[x] = parent[parent[x]];
        }
        return x;
    };
    double total = 0.0;
    for (const auto& [w, i, j] : edges) {
        const auto a = find(i), b = find(j);
        if (a != b) {
            parent[a] = b;
            total += w;
        }
    }
    return total;
}

} // namespace

TEST(CoreDistance, LineAndDuplicates) {
    std::vector<Point2> line;
    for (int i = 0; i < 6; ++i) {
        line.push_back({static_cast<double>(i), 0.0});
    }
    const auto core = core_distances(line, 2);
    EXPECT_EQ(core.front(), 2.0);
    EXPECT_EQ(core.back(), 2.0);
    for (std::size_t i = 1; i + 1 < line.size(); ++i) {
        EXPECT_EQ(core[i], 1.0);
    }
    const std::vector<Point2> dup{{0, 0}, {0, 0}, {5, 5}};
    EXPECT_EQ(core_distances(dup, 1)[0], 0.0);
    EXPECT_THROW(core_distances(dup, 3), ConfigError);
}

TEST(CoreDistance, MatchesSort) {
    const auto p = uniform_points(30, 2);
    const auto core = core_distances(p, 5);
    for (std::size_t i = 0; i < p.size(); ++i) {
        std::vector<double> row;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (j != i) {
                row.push_back(euclidean(p[i], p[j]));
            }
        }
        std::sort(row.begin(), row.end());
        EXPECT_EQ(core[i], row[4]);
    }
}

TEST(Mst, MatchesKruskal) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto p = uniform_points(12, 100 + s);
        const auto core = core_distances(p, 3);
        const auto t = mst_mutual_reachability(p, core);
        ASSERT_EQ(t.size(), 11u);
        EXPECT_NEAR(total_weight(t), kruskal_weight(oracle::mutual_reachability_matrix(p, 3)), 1e-12);
    }
}

TEST(Mst, LineIsPath) {
    std::vector<Point2> line;
    for (int i = 0; i < 8; ++i) {
        line.push_back({static_cast<double>(i), 0.0});
    }
    const auto t = mst_mutual_reachability(line, core_distances(line, 1));
    ASSERT_EQ(t.size(), 7u);
    for (const auto& e : t) {
        EXPECT_EQ(std::max(e.a, e.b) - std::min(e.a, e.b), 1u);
        EXPECT_EQ(e.weight, 1.0);
    }
}

TEST(Mst, RelabelInvariantWeight) {
    auto p = uniform_points(25, 7);
    const double w = total_weight(mst_mutual_reachability(p, core_distances(p, 4)));
    Rng rng(3);
    rng.shuffle(p.begin(), p.end());
    EXPECT_NEAR(total_weight(mst_mutual_reachability(p, core_distances(p, 4))), w, 1e-12);
}

TEST(SingleLinkage, HeightsMatchNaiveOracle) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const std::size_t n = 5 + s % 8;
        const auto p = uniform_points(n, 300 + s);
        const auto t = mst_mutual_reachability(p, core_distances(p, 2));
        const auto merges = single_linkage(t, n);
        ASSERT_EQ(merges.size(), n - 1);
        std::vector<double> got;
        for (const auto& m : merges) {
            got.push_back(m.distance);
        }
        EXPECT_EQ(got, oracle::single_linkage_heights(oracle::mutual_reachability_matrix(p, 2)));
        EXPECT_EQ(merges.back().size, n);
    }
}

TEST(Hdbscan, TwoBlobsRecovered) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        std::vector<int> truth;
        const auto p = oracle::two_blobs(50, 12.0, 40 + s, &truth);
        HdbscanConfig cfg;
        cfg.min_cluster_size = 10;
        const auto r = cluster(p, cfg);
        EXPECT_EQ(r.num_clusters(), 2u) << "seed " << s;
        EXPECT_EQ(oracle::mislabeled(truth, r.labels), 0u) << "seed " << s;
    }
}

TEST(Hdbscan, WholeSetAsMinimumIsNoise) {
    const auto p = uniform_points(40, 5);
    HdbscanConfig cfg;
    cfg.min_cluster_size = p.size();
    const auto r = cluster(p, cfg);
    EXPECT_EQ(r.num_clusters(), 0u);
    EXPECT_EQ(r.noise_count(), p.size());
}

TEST(Hdbscan, LargeEpsilonCollapsesToOneCluster) {
    const auto p = oracle::two_blobs(40, 12.0, 9);
    HdbscanConfig cfg;
    cfg.min_cluster_size = 8;
    cfg.cluster_selection_epsilon = 1e6;
    const auto r = cluster(p, cfg);
    EXPECT_EQ(r.num_clusters(), 1u);
}

TEST(Hdbscan, LabelsAreConsistent) {
    const auto p = uniform_points(120, 17);
    const auto r = cluster(p, HdbscanConfig{});
    ASSERT_EQ(r.labels.size(), p.size());
    std::vector<std::size_t> count(r.num_clusters(), 0);
    for (int l : r.labels) {
        ASSERT_GE(l, kNoise);
        ASSERT_LT(l, static_cast<int>(r.num_clusters()));
        if (l != kNoise) {
            ++count[static_cast<std::size_t>(l)];
        }
    }
    EXPECT_EQ(count, r.sizes);
}

TEST(Hdbscan, LargerMinimumNeverAddsClusters) {
    // Excess-of-mass selection is only monotone in the minimum size when the
    // data has real structure; on a uniform scatter a larger minimum can turn
    // one selected parent into several children. Use four unequal blobs plus
    // background noise.
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(500 + s);
        std::vector<Point2> p;
        const double cx[4]{0, 15, 0, 15}, cy[4]{0, 0, 15, 15};
        const std::size_t sz[4]{20, 35, 50, 70};
        for (int b = 0; b < 4; ++b) {
            for (std::size_t i = 0; i < sz[b]; ++i) {
                p.push_back({cx[b] + rng.normal(), cy[b] + rng.normal()});
            }
        }
        for (int i = 0; i < 20; ++i) {
            p.push_back({rng.uniform(-5.0, 20.0), rng.uniform(-5.0, 20.0)});
        }
        std::size_t prev = std::numeric_limits<std::size_t>::max();
        for (std::size_t m : {2u, 5u, 10u, 15u, 25u, 40u, 60u, 100u, 195u}) {
            HdbscanConfig cfg;
            cfg.min_cluster_size = m;
            const auto k = cluster(p, cfg).num_clusters();
            EXPECT_LE(k, prev) << "seed " << s << " min " << m;
            prev = k;
        }
    }
}

TEST(Hdbscan, SeparatedSmallBlobsHaveNoNoise) {
    // Two 20-point blobs of diameter about 1, centers 10 diameters apart.
    Rng rng(77);
    std::vector<Point2> p;
    std::vector<int> truth;
    for (int b = 0; b < 2; ++b) {
        for (int i = 0; i < 20; ++i) {
            const double r = 0.5 * std::sqrt(rng.uniform(0.0, 1.0)), t = rng.uniform(0.0, 6.283185307179586);
            p.push_back({10.0 * b + r * std::cos(t), r * std::sin(t)});
            truth.push_back(b);
        }
    }
    HdbscanConfig cfg;
    cfg.min_cluster_size = 5;
    const auto r = cluster(p, cfg);
    EXPECT_EQ(r.num_clusters(), 2u);
    EXPECT_EQ(r.noise_count(), 0u);
    EXPECT_EQ(oracle::mislabeled(truth, r.labels), 0u);
}

TEST(Hdbscan, ReachabilityDominatesEuclidean) {
    const auto p = uniform_points(40, 12);
    const auto core = core_distances(p, 5);
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = 0; j < p.size(); ++j) {
            EXPECT_GE(mutual_reachability(p[i], p[j], core[i], core[j]), euclidean(p[i], p[j]));
        }
    }
}

TEST(Hdbscan, Deterministic) {
    const auto p = uniform_points(90, 31);
    EXPECT_EQ(cluster(p, HdbscanConfig{}).labels, cluster(p, HdbscanConfig{}).labels);
}

TEST(Normality, ThresholdIsStrict) {
    ClusterLabeling l;
    l.sizes = {32, 15, 16};
    const auto r = assign_normality(l, 100);
    EXPECT_EQ(r.verdicts[0], ClusterLabeling::Verdict::Normal);
    EXPECT_EQ(r.verdicts[1], ClusterLabeling::Verdict::Abnormal);
    EXPECT_EQ(r.verdicts[2], ClusterLabeling::Verdict::Normal);
    EXPECT_DOUBLE_EQ(r.fractions[0], 0.32);
    EXPECT_THROW(assign_normality(l, 0), ConfigError);
}

TEST(Normality, NoisePointsAreNeverNormal) {
    ClusterLabeling l;
    l.labels = {0, kNoise, 0};
    l.sizes = {2};
    const auto r = assign_normality(l, 3);
    EXPECT_TRUE(r.is_normal(0));
    EXPECT_FALSE(r.is_normal(1));
}

TEST(Config, BracketSettings) {
    const auto c = HdbscanConfig::for_bracket(50, 250);
    EXPECT_EQ(c.min_cluster_size, 3u);
    EXPECT_EQ(c.min_samples, 5u);
    EXPECT_EQ(c.cluster_selection_epsilon, 1.0);
    EXPECT_EQ(HdbscanConfig::for_bracket(70, 10).min_cluster_size, 2u);
    EXPECT_THROW(HdbscanConfig::for_bracket(20, 10), ConfigError);
    HdbscanConfig bad;
    bad.min_cluster_size = 1;
    EXPECT_THROW(bad.validate(), ConfigError);
}
