#include "spineage/report_features.hpp"
#include "spineage/rng.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

using namespace spineage;

namespace {

ConditionRecord deg(Region r, int idx, ConditionKind k, Severity s) { return {VertebraLabel{r, idx}, {k, s}}; }

ConditionRecord structural(ConditionKind k) { return {std::nullopt, {k, Severity::Present}}; }

std::vector<ConditionRecord> bulges(int n) {
    std::vector<ConditionRecord> v;
    for (int i = 0; i < n; ++i) {
        v.push_back(deg(Region::Lumbar, 1 + i, ConditionKind::DiscBulge, Severity::Mild));
    }
    return v;
}

/// Every legal degenerative record plus every structural flag.
std::vector<ConditionRecord> all_legal() {
    std::vector<ConditionRecord> v;
    for (std::size_t o = 0; o < kVertebrae; ++o) {
        const auto lab = VertebraLabel::from_ordinal(o);
        for (std::size_t k = 0; k < kDegenerativeKinds; ++k) {
            const auto kind = static_cast<ConditionKind>(k);
            for (auto s : legal_severities(kind)) {
                v.push_back({lab, {kind, s}});
            }
        }
    }
    for (std::size_t k = 0; k < kStructuralKinds; ++k) {
        v.push_back(structural(static_cast<ConditionKind>(kDegenerativeKinds + k)));
    }
    return v;
}

} // namespace

TEST(Layout, Counts) {
    EXPECT_EQ(kSparseLength, 215u);
    EXPECT_EQ(kDenseLength, 67u);
    std::size_t combos = 0;
    for (std::size_t k = 0; k < kDegenerativeKinds; ++k) {
        combos += legal_severities(static_cast<ConditionKind>(k)).size();
    }
    EXPECT_EQ(combos * kRegions, 60u);
    EXPECT_EQ(dense_column_names().size(), kDenseLength);
}

TEST(Layout, OrdinalRoundTrip) {
    for (std::size_t o = 0; o < kVertebrae; ++o) {
        EXPECT_EQ(VertebraLabel::from_ordinal(o).ordinal(), o);
    }
    EXPECT_EQ((VertebraLabel{Region::Cervical, 2}).ordinal(), 0u);
    EXPECT_EQ((VertebraLabel{Region::Lumbar, 7}).ordinal(), 25u);
}

TEST(Layout, DenseIndicesAreABijection) {
    std::vector<int> hit(kDegenerativeCells, 0);
    for (std::size_t r = 0; r < kRegions; ++r) {
        for (std::size_t k = 0; k < kDegenerativeKinds; ++k) {
            const auto kind = static_cast<ConditionKind>(k);
            for (auto s : legal_severities(kind)) {
                ++hit.at(dense_index(static_cast<Region>(r), kind, s));
            }
        }
    }
    for (int h : hit) {
        EXPECT_EQ(h, 1);
    }
}

TEST(Sparse, Empty) {
    const auto f = encode_sparse({});
    EXPECT_EQ(std::accumulate(f.begin(), f.end(), 0), 0);
}

TEST(Sparse, DirectCounting) {
    const std::vector<ConditionRecord> r{deg(Region::Lumbar, 1, ConditionKind::DiscBulge, Severity::Mild),
                                         deg(Region::Lumbar, 2, ConditionKind::DiscBulge, Severity::Mild),
                                         structural(ConditionKind::Fracture)};
    const auto f = encode_sparse(r);
    const std::size_t l1 = VertebraLabel{Region::Lumbar, 1}.ordinal(), l2 = VertebraLabel{Region::Lumbar, 2}.ordinal();
    EXPECT_EQ(f[l1 * kDegenerativeKinds], 1);
    EXPECT_EQ(f[l2 * kDegenerativeKinds], 1);
    EXPECT_EQ(f[kVertebrae * kDegenerativeKinds + structural_offset(ConditionKind::Fracture)], 1);
    EXPECT_EQ(std::accumulate(f.begin(), f.end(), 0), 3);
}

TEST(Sparse, EveryVertebraOneDesiccation) {
    std::vector<ConditionRecord> r;
    for (std::size_t o = 0; o < kVertebrae; ++o) {
        r.push_back({VertebraLabel::from_ordinal(o), {ConditionKind::Desiccation, Severity::Moderate}});
    }
    const auto f = encode_sparse(r);
    // Enumerate every slot independently: exactly the desiccation slot of each vertebra is set.
    for (std::size_t o = 0; o < kVertebrae; ++o) {
        for (std::size_t k = 0; k < kDegenerativeKinds; ++k) {
            const int expected = static_cast<ConditionKind>(k) == ConditionKind::Desiccation ? 1 : 0;
            EXPECT_EQ(f[o * kDegenerativeKinds + k], expected);
        }
    }
    EXPECT_EQ(std::accumulate(f.begin(), f.end(), 0), 26);
}

TEST(Aggregate, WorkedExample) {
    const auto f = aggregate(bulges(3));
    const std::size_t i = dense_index(Region::Lumbar, ConditionKind::DiscBulge, Severity::Mild);
    EXPECT_EQ(f[i], 3);
    EXPECT_EQ(std::accumulate(f.begin(), f.end(), 0), 3);
    const auto empty = aggregate({});
    EXPECT_EQ(std::accumulate(empty.begin(), empty.end(), 0), 0);
}

TEST(Aggregate, RegionSumsMatchRecount) {
    Rng rng(5);
    const auto legal = all_legal();
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ConditionRecord> recs;
        for (int i = 0; i < 30; ++i) {
            recs.push_back(legal[rng.index(legal.size())]);
        }
        const auto f = aggregate(recs);
        std::array<int, 3> recount{};
        for (const auto& r : recs) {
            if (r.vertebra) {
                ++recount[static_cast<std::size_t>(r.vertebra->region)];
            }
        }
        for (std::size_t reg = 0; reg < kRegions; ++reg) {
            int sum = 0;
            for (std::size_t c = 0; c < kCellsPerRegion; ++c) {
                sum += f[reg * kCellsPerRegion + c];
            }
            EXPECT_EQ(sum, recount[reg]);
        }
        for (std::size_t k = 0; k < kStructuralKinds; ++k) {
            EXPECT_LE(f[kDegenerativeCells + k], 1);
        }
    }
}

TEST(Aggregate, PermutationInvariant) {
    Rng rng(8);
    const auto legal = all_legal();
    std::vector<ConditionRecord> recs;
    for (int i = 0; i < 40; ++i) {
        recs.push_back(legal[rng.index(legal.size())]);
    }
    const auto f = aggregate(recs);
    const auto s = encode_sparse(recs);
    for (int t = 0; t < 10; ++t) {
        rng.shuffle(recs.begin(), recs.end());
        EXPECT_EQ(aggregate(recs), f);
        EXPECT_EQ(encode_sparse(recs), s);
    }
}

TEST(Validation, RejectsIllegalRecords) {
    EXPECT_THROW(validate(deg(Region::Cervical, 1, ConditionKind::DiscBulge, Severity::Mild)), ValidationError);
    EXPECT_THROW(validate(deg(Region::Thoracic, 14, ConditionKind::DiscBulge, Severity::Mild)), ValidationError);
    EXPECT_THROW(validate(deg(Region::Lumbar, 8, ConditionKind::DiscBulge, Severity::Mild)), ValidationError);
    EXPECT_THROW(validate(deg(Region::Lumbar, 3, ConditionKind::Extrusion, Severity::Severe)), ValidationError);
    EXPECT_THROW(validate(deg(Region::Lumbar, 3, ConditionKind::DiscBulge, Severity::NearComplete)), ValidationError);
    EXPECT_THROW(validate(deg(Region::Lumbar, 3, ConditionKind::EndplateChange, Severity::Mild)), ValidationError);
    EXPECT_THROW(validate({VertebraLabel{Region::Lumbar, 1}, {ConditionKind::Fracture, Severity::Present}}),
                 ValidationError);
    EXPECT_THROW(validate({std::nullopt, {ConditionKind::Fracture, Severity::Mild}}), ValidationError);
    EXPECT_THROW(validate({std::nullopt, {ConditionKind::DiscBulge, Severity::Mild}}), ValidationError);
    EXPECT_THROW(aggregate(std::vector<ConditionRecord>{deg(Region::Lumbar, 1, ConditionKind::Extrusion,
                                                            Severity::Severe)}),
                 ValidationError);
    EXPECT_NO_THROW(validate(deg(Region::Lumbar, 7, ConditionKind::Desiccation, Severity::NearComplete)));
}

TEST(Canberra, WorkedTriple) {
    const auto p1 = aggregate(bulges(3));
    const auto p2 = aggregate(bulges(4));
    auto r3 = bulges(3);
    r3.push_back(structural(ConditionKind::Fracture));
    const auto p3 = aggregate(r3);
    EXPECT_EQ(canberra(p1, p2), 1.0 / 7.0);
    EXPECT_EQ(canberra(p1, p3), 1.0);
    EXPECT_LT(canberra(p1, p2), canberra(p1, p3));
}

TEST(Canberra, Semimetric) {
    Rng rng(12);
    const auto legal = all_legal();
    auto rand_features = [&] {
        std::vector<ConditionRecord> recs;
        const std::size_t n = rng.index(20);
        for (std::size_t i = 0; i < n; ++i) {
            recs.push_back(legal[rng.index(legal.size())]);
        }
        return aggregate(recs);
    };
    for (int t = 0; t < 200; ++t) {
        const auto p = rand_features(), q = rand_features();
        const double d = canberra(p, q);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 67.0);
        EXPECT_EQ(d, canberra(q, p));
        EXPECT_EQ(canberra(p, p), 0.0);
    }
    EXPECT_THROW(canberra(std::vector<int>{1, 2}, std::vector<int>{1}), DimensionError);
}

TEST(Csv, RoundTrip) {
    Rng rng(2);
    const auto legal = all_legal();
    std::vector<ConditionRecord> recs;
    for (int i = 0; i < 25; ++i) {
        recs.push_back(legal[rng.index(legal.size())]);
    }
    std::string text = condition_csv_header();
    for (const auto& r : recs) {
        text += condition_csv_row("p7", r);
    }
    const auto path = std::filesystem::temp_directory_path() / "spineage_conditions_test.csv";
    std::ofstream(path) << text;
    const auto back = read_condition_csv(path);
    std::filesystem::remove(path);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(aggregate(back.at("p7")), aggregate(recs));
    EXPECT_EQ(encode_sparse(back.at("p7")), encode_sparse(recs));
}
