#include "spineage/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace spineage;
using namespace spineage::pipeline;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
# Tiny end-to-end run.
seed = 11

[data]
n_subjects = 120
grid = compact
rescan_fraction = 0.3

[cluster]
umap_epochs = 100

[train]
epochs = 1
bn_recalibration = 32

[biomarkers]
bootstrap_reps = 50

[gradcam]
count = 2

[ablation]
arms = loss:mse, loss:smooth_l1, region:lumbar
)";

/// Fresh scratch directory removed on scope exit.
struct Scratch {
    fs::path path;
    explicit Scratch(const std::string& name) : path(fs::temp_directory_path() / ("spineage_test_" + name)) {
        fs::remove_all(path);
    }
    ~Scratch() { fs::remove_all(path); }
};

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        rows.push_back(cells);
    }
    return rows;
}

/// Shared run so the expensive stages execute once for the whole suite.
class TinyRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        scratch_ = new Scratch("tiny_run");
        Pipeline p(parse_config(kTinyConfig), scratch_->path);
        first_ = new std::vector<std::string>(p.run("all"));
        second_ = new std::vector<std::string>(p.run("all"));
        p.run("ablation");
    }
    static void TearDownTestSuite() {
        delete first_;
        delete second_;
        delete scratch_;
    }
    static const fs::path& root() { return scratch_->path; }

    static Scratch* scratch_;
    static std::vector<std::string>* first_;
    static std::vector<std::string>* second_;
};

Scratch* TinyRun::scratch_ = nullptr;
std::vector<std::string>* TinyRun::first_ = nullptr;
std::vector<std::string>* TinyRun::second_ = nullptr;

} // namespace

TEST(ConfigParse, DefaultsAndOverrides) {
    const auto c = parse_config("seed = 5\n[train]\nepochs = 3 ; inline comment\nloss = smooth_l1\nregion = thoracic\n");
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.epochs, 3u);
    EXPECT_EQ(c.loss, LossKind::SmoothL1);
    EXPECT_EQ(c.region, RegionChoice::Thoracic);
    EXPECT_EQ(c.n_subjects, 1200u);
    EXPECT_EQ(c.arms.size(), 7u);
}

TEST(ConfigParse, Errors) {
    EXPECT_THROW(parse_config("[train]\nregion = sacral\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nepochz = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nepochs = -3\n"), ConfigError);
    EXPECT_THROW(parse_config("[ablation]\narms = data:0.1, data:0.1\n"), ConfigError);
    EXPECT_THROW(parse_config("[ablation]\narms = data:1.5\n"), ConfigError);
    EXPECT_THROW(parse_config("[ablation]\narms = optimizer:sgd\n"), ConfigError);
    EXPECT_THROW(parse_config("[data\n"), ConfigError);
    try {
        parse_config("seed = 1\n\n[data]\nbogus = 2\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
    }
}

TEST(ConfigParse, ArmParsing) {
    const auto a = parse_arm(" data : 0.25 ");
    EXPECT_EQ(a.axis, "data");
    EXPECT_EQ(a.value, "0.25");
    EXPECT_EQ(a.name, "data:0.25");
    EXPECT_THROW(parse_arm("region"), ConfigError);
    EXPECT_THROW(parse_arm("loss:huber"), ConfigError);
}

TEST(Split, StratumCountsTrackFractions) {
    const Pipeline p(Config{}, fs::temp_directory_path() / "spineage_unused");
    for (std::size_t n = 0; n < 200; ++n) {
        const auto c = p.stratum_counts(n);
        EXPECT_EQ(c[0] + c[1] + c[2], n);
        EXPECT_LE(std::abs(static_cast<double>(c[0]) - 0.8 * static_cast<double>(n)), 1.0) << n;
        EXPECT_LE(std::abs(static_cast<double>(c[1]) - 0.1 * static_cast<double>(n)), 1.0) << n;
        EXPECT_LE(std::abs(static_cast<double>(c[2]) - 0.1 * static_cast<double>(n)), 1.0) << n;
    }
}

TEST(Stages, Names) {
    EXPECT_EQ(stage_order().size(), 7u);
    EXPECT_TRUE(is_stage("ablation"));
    EXPECT_FALSE(is_stage("all"));
    EXPECT_FALSE(is_stage("deploy"));
}

TEST_F(TinyRun, AllStagesRunThenSkip) {
    EXPECT_EQ(*first_, stage_order());
    EXPECT_TRUE(second_->empty());
    for (const char* f : {"generate/subjects.csv", "generate/conditions.csv", "cluster/eligibility.csv",
                          "cluster/cluster_summary.csv", "split/split.csv", "train/model.ckpt",
                          "train/training_log.csv", "evaluate/metrics.csv", "evaluate/predictions.csv",
                          "evaluate/bias.csv", "biomarkers/regression.csv", "biomarkers/odds_ratios.csv",
                          "gradcam/gradcam_summary.csv", "manifest.tsv"}) {
        EXPECT_TRUE(fs::exists(root() / f)) << f;
    }
    EXPECT_FALSE(fs::exists(root() / ".lock"));
}

TEST_F(TinyRun, OnlyNormalsTrain) {
    std::map<std::string, bool> normal;
    for (const auto& r : csv_rows(root() / "cluster/eligibility.csv")) {
        if (r[0] != "id") {
            normal[r[0]] = r[3] == "true";
        }
    }
    std::size_t abnormal = 0;
    for (const auto& r : csv_rows(root() / "split/split.csv")) {
        if (r[0] == "id") {
            continue;
        }
        ASSERT_TRUE(normal.count(r[0])) << r[0];
        if (r[3] == "abnormal") {
            EXPECT_FALSE(normal[r[0]]);
            ++abnormal;
        } else {
            EXPECT_TRUE(normal[r[0]]) << r[0] << " in " << r[3];
        }
    }
    const auto metrics = csv_rows(root() / "evaluate/metrics.csv");
    ASSERT_EQ(metrics.size(), 5u);
    std::size_t normal_test = 0, full_test = 0;
    for (const auto& r : metrics) {
        if (r[0] == "normal_test") {
            normal_test = std::stoul(r[2]);
        } else if (r[0] == "full_test") {
            full_test = std::stoul(r[2]);
        }
    }
    EXPECT_EQ(full_test, normal_test + abnormal);
}

TEST_F(TinyRun, ForcedRerunIsIdentical) {
    const auto before = read_file(root() / "evaluate/metrics.csv");
    Pipeline p(parse_config(kTinyConfig), root());
    EXPECT_EQ(p.run("train", true), std::vector<std::string>{"train"});
    EXPECT_EQ(p.run("evaluate", true), std::vector<std::string>{"evaluate"});
    EXPECT_EQ(read_file(root() / "evaluate/metrics.csv"), before);
}

TEST_F(TinyRun, AblationArmsComplete) {
    const auto rows = csv_rows(root() / "ablation/ablation.csv");
    std::map<std::string, std::size_t> per_arm;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        ASSERT_EQ(rows[i].size(), 7u);
        ++per_arm[rows[i][0]];
        for (std::size_t k = 4; k < 7; ++k) {
            EXPECT_TRUE(std::isfinite(std::stod(rows[i][k])));
        }
    }
    EXPECT_EQ(per_arm["loss:mse"], 4u);
    EXPECT_EQ(per_arm["loss:smooth_l1"], 4u);
    EXPECT_EQ(per_arm["region:lumbar"], 4u);
    const auto checks = csv_rows(root() / "ablation/region_mask_checks.csv");
    ASSERT_EQ(checks.size(), 2u);
    EXPECT_EQ(checks[1][3], "true");
}

TEST(PipelineErrors, MissingUpstreamNamesProducer) {
    Scratch s("missing_upstream");
    Pipeline p(parse_config(kTinyConfig), s.path);
    try {
        p.run("train");
        FAIL() << "expected DependencyError";
    } catch (const DependencyError& e) {
        const std::string msg = e.what();
        EXPECT_TRUE(msg.find("generate") != std::string::npos || msg.find("split") != std::string::npos) << msg;
    }
}

TEST(PipelineErrors, LockedWorkdir) {
    Scratch s("locked");
    fs::create_directories(s.path);
    std::ofstream(s.path / ".lock") << "";
    Pipeline p(parse_config(kTinyConfig), s.path);
    EXPECT_THROW(p.run("generate"), Error);
    EXPECT_THROW(p.run("deploy"), ConfigError);
}

TEST(PipelineErrors, InvalidRegionBeforeAnyWork) {
    Scratch s("bad_region");
    EXPECT_THROW(parse_config("[train]\nregion = pelvis\n"), ConfigError);
    EXPECT_FALSE(fs::exists(s.path));
}
