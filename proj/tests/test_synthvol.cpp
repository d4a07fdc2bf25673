#include "spineage/synthvol.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

using namespace spineage;
using namespace spineage::vol;

namespace {

Volume ramp(Dims d, Spacing s = {1.0, 1.0, 1.0}) {
    Volume v(d, s);
    for (std::size_t i = 0; i < v.intensity.size(); ++i) {
        v.intensity[i] = static_cast<float>(i % 97) / 96.0f;
        v.mask[i] = i % 3 == 0 ? 1 : 0;
        v.regions[i] = static_cast<std::uint8_t>(i % 5);
    }
    return v;
}

std::size_t nonzero(const Volume& v) {
    return static_cast<std::size_t>(std::count_if(v.intensity.begin(), v.intensity.end(), [](float x) { return x != 0.0f; }));
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

const SynthConfig& small_config() {
    static const SynthConfig c = SynthConfig::compact();
    return c;
}

} // namespace

TEST(Generator, ModelAtOrigin) {
    EXPECT_EQ(disc_intensity(25.0, 0.0), 1.0);
    EXPECT_EQ(osteophyte_rate(25.0), 0.0);
    EXPECT_EQ(disc_intensity(84.0, 0.0), 1.0 - 0.011 * 59.0);
    EXPECT_EQ(disc_intensity(30.0, 0.5), 1.0);
}

TEST(Generator, Deterministic) {
    const auto a = generate_subject(small_config(), 57.0, Sex::Female, 99);
    const auto b = generate_subject(small_config(), 57.0, Sex::Female, 99);
    EXPECT_EQ(encode_volume(a.volume), encode_volume(b.volume));
    EXPECT_EQ(aggregate(a.records), aggregate(b.records));
    const auto c = generate_subject(small_config(), 57.0, Sex::Female, 100);
    EXPECT_NE(encode_volume(a.volume), encode_volume(c.volume));
}

TEST(Generator, OutputIsValid) {
    const auto g = generate_subject(small_config(), 70.0, Sex::Male, 5);
    EXPECT_NO_THROW(g.volume.validate());
    EXPECT_EQ(g.subject.bracket, 70);
    for (const auto& r : g.records) {
        EXPECT_NO_THROW(validate(r));
    }
    EXPECT_THROW(generate_subject(small_config(), 24.0, Sex::Male, 5), ValidationError);
    EXPECT_THROW(generate_subject(small_config(), 85.0, Sex::Male, 5), ValidationError);
}

TEST(Generator, ClosedFormBracketMeansDecrease) {
    double prev = 2.0;
    for (int b : kBrackets) {
        const double lo = std::max(25.0, static_cast<double>(b - 5)), hi = std::min(84.0, static_cast<double>(b + 4));
        double mean = 0.0;
        int k = 0;
        for (double a = lo; a <= hi; a += 1.0, ++k) {
            mean += expected_clamped_normal(1.0 - 0.011 * (a - 25.0), 0.05);
        }
        mean /= k;
        EXPECT_LT(mean, prev) << "bracket " << b;
        prev = mean;
    }
}

TEST(Generator, EmpiricalBracketMeansDecrease) {
    double prev = 2.0;
    for (int b : kBrackets) {
        double mean = 0.0;
        Rng rng(static_cast<std::uint64_t>(b));
        const int n = 200;
        for (int i = 0; i < n; ++i) {
            const double lo = std::max(25.0, static_cast<double>(b - 5));
            const double age = std::min(84.0, lo + static_cast<double>(rng.index(10)));
            Rng brng(derive_seed(static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(i)));
            const auto bio = sample_biology(brng, age, small_config());
            mean += disc_intensity(age + bio.bio_offset, bio.disc_noise);
        }
        mean /= n;
        EXPECT_LT(mean, prev) << "bracket " << b;
        prev = mean;
    }
}

TEST(Generator, AgeSignalAndRecordTrend) {
    Rng rng(2024);
    std::vector<double> ages, brightness;
    std::map<int, std::pair<double, int>> records;
    for (int i = 0; i < 600; ++i) {
        const double age = 25.0 + static_cast<double>(rng.index(60));
        const auto g = generate_subject(small_config(), age, i % 2 ? Sex::Male : Sex::Female,
                                        derive_seed(11, static_cast<std::uint64_t>(i)));
        ages.push_back(age);
        brightness.push_back(g.disc_brightness);
        auto& r = records[g.subject.bracket];
        r.first += static_cast<double>(g.records.size());
        ++r.second;
    }
    EXPECT_LT(pearson(ages, brightness), -0.8);
    double prev = -1.0;
    for (const auto& [bracket, r] : records) {
        const double mean = r.first / r.second;
        EXPECT_GE(mean, prev) << "bracket " << bracket;
        prev = mean;
    }
}

TEST(Subject, BracketOfAge) {
    EXPECT_EQ(bracket_of(25.0), 30);
    EXPECT_EQ(bracket_of(34.0), 30);
    EXPECT_EQ(bracket_of(35.0), 40);
    EXPECT_EQ(bracket_of(75.0), 80);
    EXPECT_EQ(bracket_of(84.0), 80);
}

TEST(Resample, Identity) {
    const auto v = ramp({6, 5, 4});
    const auto r = resample(v, v.spacing);
    EXPECT_EQ(r.dims.x, 6u);
    EXPECT_EQ(r.intensity, v.intensity);
    EXPECT_EQ(r.mask, v.mask);
    EXPECT_EQ(r.regions, v.regions);
}

TEST(Resample, HalvingDoublesGrid) {
    const auto v = ramp({10, 7, 5}, {2.0, 2.0, 2.0});
    const auto r = resample(v, {1.0, 1.0, 1.0});
    EXPECT_NEAR(static_cast<double>(r.dims.x), 20.0, 1.0);
    EXPECT_NEAR(static_cast<double>(r.dims.y), 14.0, 1.0);
    EXPECT_NEAR(static_cast<double>(r.dims.z), 10.0, 1.0);
    EXPECT_NO_THROW(r.validate());
}

TEST(Resample, ConstantStaysConstant) {
    Volume v({9, 8, 3}, {1.3, 0.7, 2.9});
    std::fill(v.intensity.begin(), v.intensity.end(), 0.625f);
    const auto r = resample(v, {0.9, 0.9, 3.0});
    for (float x : r.intensity) {
        EXPECT_EQ(x, 0.625f);
    }
}

TEST(Resample, SingleVoxelAxisPassesThrough) {
    const auto v = ramp({6, 6, 1}, {1.0, 1.0, 5.0});
    const auto r = resample(v, {0.5, 0.5, 3.0});
    EXPECT_EQ(r.dims.z, 1u);
    EXPECT_EQ(r.spacing.z, 5.0);
    EXPECT_THROW(resample(v, {0.0, 1.0, 1.0}), ValidationError);
}

TEST(CropPad, Identity) {
    const auto v = ramp({7, 6, 5});
    const auto r = crop_or_pad(v, v.dims);
    EXPECT_EQ(r.intensity, v.intensity);
    EXPECT_EQ(r.regions, v.regions);
}

TEST(CropPad, PadsSymmetrically) {
    Volume v({10, 1, 1}, {1, 1, 1});
    std::fill(v.intensity.begin(), v.intensity.end(), 1.0f);
    const auto r = crop_or_pad(v, {14, 1, 1});
    for (std::size_t x = 0; x < 14; ++x) {
        EXPECT_EQ(r.intensity[x], (x >= 2 && x < 12) ? 1.0f : 0.0f) << x;
    }
    const auto odd = crop_or_pad(v, {13, 1, 1});
    EXPECT_EQ(odd.intensity[0], 0.0f);
    EXPECT_EQ(odd.intensity[1], 1.0f);
    EXPECT_EQ(odd.intensity[11], 0.0f);
    EXPECT_EQ(odd.intensity[12], 0.0f);
}

TEST(CropPad, RoundTripKeepsInterior) {
    const auto v = ramp({9, 8, 5});
    const auto back = crop_or_pad(crop_or_pad(v, {14, 13, 8}), v.dims);
    EXPECT_EQ(back.intensity, v.intensity);
    EXPECT_EQ(back.mask, v.mask);
}

TEST(Mask, RadiusZeroFullMaskIsIdentity) {
    auto v = ramp({5, 5, 5});
    std::fill(v.mask.begin(), v.mask.end(), 1);
    EXPECT_EQ(apply_mask(v, 0).intensity, v.intensity);
}

TEST(Mask, EmptyMaskZeroes) {
    auto v = ramp({5, 5, 5});
    std::fill(v.mask.begin(), v.mask.end(), 0);
    EXPECT_EQ(nonzero(apply_mask(v, 3)), 0u);
}

TEST(Mask, CityBlockCross) {
    Volume v({5, 5, 5}, {1, 1, 1});
    std::fill(v.intensity.begin(), v.intensity.end(), 1.0f);
    v.mask[v.index(2, 2, 2)] = 1;
    EXPECT_EQ(nonzero(apply_mask(v, 1)), 7u);
    EXPECT_EQ(nonzero(apply_mask(v, 2)), 25u);
}

TEST(RegionMask, GeneratedColumn) {
    const auto g = generate_subject(small_config(), 45.0, Sex::Male, 3);
    const auto p = preprocess(g, small_config()).volume;
    const std::size_t r = small_config().dilation_radius;
    const auto whole = apply_mask(p, r);
    const auto cerv = mask_region(p, Region::Cervical, r);
    const auto thor = mask_region(p, Region::Thoracic, r);
    const auto lumb = mask_region(p, Region::Lumbar, r);
    EXPECT_LT(nonzero(cerv), nonzero(whole));
    EXPECT_GT(nonzero(lumb), 0u);
    EXPECT_TRUE(verify_region_masked(lumb, Region::Lumbar, r));

    // Lumbar sits at the caudal end of the column.
    auto mean_y = [](const Volume& v) {
        double s = 0.0, n = 0.0;
        for (std::size_t z = 0; z < v.dims.z; ++z) {
            for (std::size_t y = 0; y < v.dims.y; ++y) {
                for (std::size_t x = 0; x < v.dims.x; ++x) {
                    if (v.intensity[v.index(x, y, z)] != 0.0f) {
                        s += static_cast<double>(y);
                        n += 1.0;
                    }
                }
            }
        }
        return s / n;
    };
    EXPECT_LT(mean_y(cerv), mean_y(thor));
    EXPECT_LT(mean_y(thor), mean_y(lumb));

    // Union of the region outputs covers every labeled voxel the full mask keeps.
    for (std::size_t i = 0; i < p.intensity.size(); ++i) {
        const auto lab = static_cast<RegionLabel>(p.regions[i]);
        const bool labeled = lab == RegionLabel::Cervical || lab == RegionLabel::Thoracic || lab == RegionLabel::Lumbar;
        if (labeled && whole.intensity[i] != 0.0f) {
            EXPECT_TRUE(cerv.intensity[i] != 0.0f || thor.intensity[i] != 0.0f || lumb.intensity[i] != 0.0f);
        }
    }
}

TEST(RegionMask, AbsentRegionIsEmpty) {
    auto v = ramp({6, 6, 2});
    std::fill(v.regions.begin(), v.regions.end(), static_cast<std::uint8_t>(RegionLabel::Other));
    EXPECT_EQ(nonzero(mask_region(v, Region::Lumbar, 2)), 0u);
}

TEST(Preprocess, ShapeAndRange) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto g = generate_subject(small_config(), 30.0 + 10.0 * static_cast<double>(s), Sex::Female, s);
        const auto p = preprocess(g, small_config());
        EXPECT_EQ(p.volume.dims.x, small_config().grid.x);
        EXPECT_EQ(p.volume.dims.y, small_config().grid.y);
        EXPECT_EQ(p.volume.dims.z, small_config().grid.z);
        EXPECT_EQ(p.blob_mask.size(), p.volume.intensity.size());
        EXPECT_NO_THROW(p.volume.validate());
    }
}

TEST(Container, RoundTrip) {
    const auto v = ramp({7, 5, 3}, {0.9, 1.1, 3.2});
    const auto bytes = encode_volume(v);
    EXPECT_EQ(bytes.size(), kVolumeHeaderBytes + v.intensity.size() * 6);
    EXPECT_EQ(bytes.substr(0, 8), std::string(kVolumeMagic.begin(), kVolumeMagic.end()));
    const auto back = decode_volume(bytes);
    EXPECT_EQ(back.intensity, v.intensity);
    EXPECT_EQ(back.mask, v.mask);
    EXPECT_EQ(back.regions, v.regions);
    EXPECT_EQ(back.spacing.y, 1.1);

    const auto path = std::filesystem::temp_directory_path() / "spineage_volume_test.vol";
    write_volume(path, v);
    EXPECT_EQ(read_volume(path).intensity, v.intensity);
    std::filesystem::remove(path);

    EXPECT_ANY_THROW(decode_volume(bytes.substr(0, 40)));
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_ANY_THROW(decode_volume(bad));
}
