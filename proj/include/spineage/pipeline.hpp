#ifndef SPINEAGE_PIPELINE_HPP
#define SPINEAGE_PIPELINE_HPP

#include "clustering.hpp"
#include "embedding.hpp"
#include "errors.hpp"
#include "eval_stats.hpp"
#include "io.hpp"
#include "model.hpp"
#include "report_features.hpp"
#include "rng.hpp"
#include "synthvol.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file pipeline.hpp
 *
 * Stage orchestration for the end-to-end run:
 * generate -> cluster -> split -> train -> evaluate -> biomarkers -> gradcam,
 * plus the ablation stage. Every stage reads its inputs from the working
 * directory, writes its outputs there and records input/output fingerprints
 * in `manifest.tsv`; a stage is skipped when its input fingerprint is
 * unchanged and its outputs are intact.
 */

namespace spineage::pipeline {

namespace fs = std::filesystem;

enum class RegionChoice { Whole, Cervical, Thoracic, Lumbar };

inline constexpr std::array<std::string_view, 4> kRegionChoiceNames{"whole", "cervical", "thoracic", "lumbar"};

inline RegionChoice parse_region_choice(std::string_view s) {
    for (std::size_t i = 0; i < kRegionChoiceNames.size(); ++i) {
        if (kRegionChoiceNames[i] == s) {
            return static_cast<RegionChoice>(i);
        }
    }
    throw ConfigError("unknown region '" + std::string(s) + "' (expected whole, cervical, thoracic or lumbar)");
}

inline std::string_view name(RegionChoice r) { return kRegionChoiceNames[static_cast<std::size_t>(r)]; }

inline Region to_region(RegionChoice r) { return static_cast<Region>(static_cast<int>(r) - 1); }

/// One ablation arm: a single override of data fraction, loss or region.
struct Arm {
    std::string name;
    std::string axis; ///< data | loss | region
    std::string value;
};

inline Arm parse_arm(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        throw ConfigError("ablation arm '" + std::string(text) + "' must look like axis:value");
    }
    Arm a;
    a.axis = trim(text.substr(0, colon));
    a.value = trim(text.substr(colon + 1));
    a.name = a.axis + ":" + a.value;
    if (a.axis == "data") {
        double f = 0.0;
        try {
            f = std::stod(a.value);
        } catch (const std::exception&) {
            throw ConfigError("ablation arm '" + a.name + "': data fraction is not a number");
        }
        if (!(f > 0.0 && f <= 1.0)) {
            throw ConfigError("ablation arm '" + a.name + "': data fraction must be in (0, 1]");
        }
    } else if (a.axis == "loss") {
        parse_loss(a.value);
    } else if (a.axis == "region") {
        parse_region_choice(a.value);
    } else {
        throw ConfigError("ablation arm '" + a.name + "': axis must be data, loss or region");
    }
    return a;
}

struct Config {
    std::uint64_t seed = 42;
    std::string workdir = "spineage_out";

    // data
    std::size_t n_subjects = 1200;
    std::string grid = "compact";
    double rescan_fraction = 0.15;
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;

    // cluster
    std::size_t umap_neighbors = 15;
    double umap_min_dist = 0.0;
    int umap_epochs = 500;
    std::size_t min_samples = 5;
    double normal_threshold = 0.15;

    // train
    std::size_t epochs = 40;
    std::size_t batch_size = 8;
    double lr = 0.01;
    double plateau_factor = 0.3;
    int plateau_patience = 5;
    std::size_t bn_recalibration = 256;
    LossKind loss = LossKind::Mse;
    RegionChoice region = RegionChoice::Whole;
    double data_fraction = 1.0;

    // evaluate / biomarkers
    std::size_t bootstrap_reps = 2000;
    double sag_high = 5.0;
    double sag_low = -5.0;

    // gradcam
    std::size_t gradcam_count = 8;

    // ablation
    std::vector<Arm> arms;

    Config() {
        for (const char* a : {"data:0.01", "data:0.1", "data:1", "loss:smooth_l1", "region:cervical",
                              "region:thoracic", "region:lumbar"}) {
            arms.push_back(parse_arm(a));
        }
    }

    vol::SynthConfig synth() const {
        if (grid == "compact") {
            return vol::SynthConfig::compact();
        }
        if (grid == "desk") {
            return vol::SynthConfig::desk();
        }
        throw ConfigError("data.grid must be compact or desk, got '" + grid + "'");
    }

    NetConfig net() const {
        const auto s = synth();
        return NetConfig::desk(s.grid.z, s.grid.y, s.grid.x);
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.loss = loss;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.lr = lr;
        t.plateau_factor = plateau_factor;
        t.plateau_patience = plateau_patience;
        t.seed = derive_seed(seed, 101);
        t.bn_recalibration = bn_recalibration;
        return t;
    }

    void validate() const {
        if (n_subjects < 10) {
            throw ConfigError("data.n_subjects must be at least 10");
        }
        synth().validate();
        if (!(rescan_fraction >= 0.0 && rescan_fraction <= 1.0)) {
            throw ConfigError("data.rescan_fraction must be in [0, 1]");
        }
        if (!(train_fraction > 0.0 && val_fraction > 0.0 && test_fraction > 0.0) ||
            std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
            throw ConfigError("data split fractions must be positive and sum to 1");
        }
        umap::UmapConfig u;
        u.n_neighbors = umap_neighbors;
        u.min_dist = umap_min_dist;
        u.n_epochs = umap_epochs;
        u.validate();
        if (min_samples < 1 || !(normal_threshold > 0.0 && normal_threshold < 1.0)) {
            throw ConfigError("cluster.min_samples must be >= 1 and cluster.normal_threshold in (0, 1)");
        }
        train_config().validate();
        if (!(data_fraction > 0.0 && data_fraction <= 1.0)) {
            throw ConfigError("train.data_fraction must be in (0, 1]");
        }
        if (!(sag_high > sag_low)) {
            throw ConfigError("biomarkers.sag_high must exceed biomarkers.sag_low");
        }
        std::set<std::string> names;
        for (const auto& a : arms) {
            if (!names.insert(a.name).second) {
                throw ConfigError("ablation arm '" + a.name + "' listed more than once");
            }
        }
    }

    /// Canonical key=value text; stage fingerprints hash the relevant sections of it.
    std::map<std::string, std::string> entries() const {
        std::map<std::string, std::string> e;
        e["seed"] = std::to_string(seed);
        e["data.n_subjects"] = std::to_string(n_subjects);
        e["data.grid"] = grid;
        e["data.rescan_fraction"] = fmt_double(rescan_fraction);
        e["data.train_fraction"] = fmt_double(train_fraction);
        e["data.val_fraction"] = fmt_double(val_fraction);
        e["data.test_fraction"] = fmt_double(test_fraction);
        e["cluster.umap_neighbors"] = std::to_string(umap_neighbors);
        e["cluster.umap_min_dist"] = fmt_double(umap_min_dist);
        e["cluster.umap_epochs"] = std::to_string(umap_epochs);
        e["cluster.min_samples"] = std::to_string(min_samples);
        e["cluster.normal_threshold"] = fmt_double(normal_threshold);
        e["train.epochs"] = std::to_string(epochs);
        e["train.batch_size"] = std::to_string(batch_size);
        e["train.lr"] = fmt_double(lr);
        e["train.plateau_factor"] = fmt_double(plateau_factor);
        e["train.plateau_patience"] = std::to_string(plateau_patience);
        e["train.bn_recalibration"] = std::to_string(bn_recalibration);
        e["train.loss"] = std::string(spineage::name(loss));
        e["train.region"] = std::string(name(region));
        e["train.data_fraction"] = fmt_double(data_fraction);
        e["biomarkers.bootstrap_reps"] = std::to_string(bootstrap_reps);
        e["biomarkers.sag_high"] = fmt_double(sag_high);
        e["biomarkers.sag_low"] = fmt_double(sag_low);
        e["gradcam.count"] = std::to_string(gradcam_count);
        std::string arm_list;
        for (const auto& a : arms) {
            arm_list += (arm_list.empty() ? "" : ",") + a.name;
        }
        e["ablation.arms"] = arm_list;
        return e;
    }

    std::string canonical(std::initializer_list<std::string_view> prefixes) const {
        std::string out;
        for (const auto& [k, v] : entries()) {
            bool keep = k == "seed";
            for (auto p : prefixes) {
                keep = keep || k.rfind(p, 0) == 0;
            }
            if (keep) {
                out += k + "=" + v + "\n";
            }
        }
        return out;
    }
};

/**
 * Parses `key = value` lines grouped under `[section]` headers. `#` and `;`
 * start comments. Unknown keys are errors.
 */
inline Config parse_config(std::string_view text) {
    Config c;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) { throw ConfigError("config line " + std::to_string(lineno) + ": " + msg); };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        if (t.front() == '[') {
            if (t.back() != ']') {
                fail("unterminated section header");
            }
            section = trim(std::string_view(t).substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            fail("expected key = value");
        }
        const std::string key = (section.empty() ? "" : section + ".") + trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        auto as_size = [&]() -> std::size_t {
            try {
                std::size_t pos = 0;
                const long long v = std::stoll(value, &pos);
                if (pos != value.size() || v < 0) {
                    throw std::invalid_argument("");
                }
                return static_cast<std::size_t>(v);
            } catch (const std::exception&) {
                fail("'" + key + "' expects a non-negative integer, got '" + value + "'");
            }
            return 0;
        };
        auto as_double = [&]() -> double {
            try {
                std::size_t pos = 0;
                const double v = std::stod(value, &pos);
                if (pos != value.size()) {
                    throw std::invalid_argument("");
                }
                return v;
            } catch (const std::exception&) {
                fail("'" + key + "' expects a number, got '" + value + "'");
            }
            return 0.0;
        };
        if (key == "seed") {
            c.seed = as_size();
        } else if (key == "workdir") {
            c.workdir = value;
        } else if (key == "data.n_subjects") {
            c.n_subjects = as_size();
        } else if (key == "data.grid") {
            c.grid = value;
        } else if (key == "data.rescan_fraction") {
            c.rescan_fraction = as_double();
        } else if (key == "data.train_fraction") {
            c.train_fraction = as_double();
        } else if (key == "data.val_fraction") {
            c.val_fraction = as_double();
        } else if (key == "data.test_fraction") {
            c.test_fraction = as_double();
        } else if (key == "cluster.umap_neighbors") {
            c.umap_neighbors = as_size();
        } else if (key == "cluster.umap_min_dist") {
            c.umap_min_dist = as_double();
        } else if (key == "cluster.umap_epochs") {
            c.umap_epochs = static_cast<int>(as_size());
        } else if (key == "cluster.min_samples") {
            c.min_samples = as_size();
        } else if (key == "cluster.normal_threshold") {
            c.normal_threshold = as_double();
        } else if (key == "train.epochs") {
            c.epochs = as_size();
        } else if (key == "train.batch_size") {
            c.batch_size = as_size();
        } else if (key == "train.lr") {
            c.lr = as_double();
        } else if (key == "train.plateau_factor") {
            c.plateau_factor = as_double();
        } else if (key == "train.plateau_patience") {
            c.plateau_patience = static_cast<int>(as_size());
        } else if (key == "train.bn_recalibration") {
            c.bn_recalibration = as_size();
        } else if (key == "train.loss") {
            c.loss = parse_loss(value);
        } else if (key == "train.region") {
            c.region = parse_region_choice(value);
        } else if (key == "train.data_fraction") {
            c.data_fraction = as_double();
        } else if (key == "biomarkers.bootstrap_reps") {
            c.bootstrap_reps = as_size();
        } else if (key == "biomarkers.sag_high") {
            c.sag_high = as_double();
        } else if (key == "biomarkers.sag_low") {
            c.sag_low = as_double();
        } else if (key == "gradcam.count") {
            c.gradcam_count = as_size();
        } else if (key == "ablation.arms") {
            c.arms.clear();
            for (const auto& part : split(value, ',')) {
                if (!trim(part).empty()) {
                    c.arms.push_back(parse_arm(part));
                }
            }
        } else {
            fail("unknown key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

inline Config load_config(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("config file " + path.string() + " not found");
    }
    return parse_config(read_file(path));
}

// ---------------------------------------------------------------------------
// Manifest and lock

struct StageRecord {
    std::string input_hash;
    std::string output_hash;
    std::string completed_at;
};

class Manifest {
public:
    explicit Manifest(fs::path path) : path_(std::move(path)) {
        if (!fs::exists(path_)) {
            return;
        }
        std::istringstream in(read_file(path_));
        std::string line;
        while (std::getline(in, line)) {
            const auto f = split(line, '\t');
            if (f.size() == 4 && f[0] != "stage") {
                records_[f[0]] = {f[1], f[2], f[3]};
            }
        }
    }

    const StageRecord* find(const std::string& stage) const {
        const auto it = records_.find(stage);
        return it == records_.end() ? nullptr : &it->second;
    }

    void set(const std::string& stage, StageRecord r) {
        records_[stage] = std::move(r);
        std::string text = "stage\tinput_hash\toutput_hash\tcompleted_at\n";
        for (const auto& [s, rec] : records_) {
            text += s + "\t" + rec.input_hash + "\t" + rec.output_hash + "\t" + rec.completed_at + "\n";
        }
        write_atomic(path_, text);
    }

private:
    fs::path path_;
    std::map<std::string, StageRecord> records_;
};

/// Exclusive per-workdir lock; released on destruction.
class WorkdirLock {
public:
    explicit WorkdirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::FILE* f = std::fopen(path_.string().c_str(), "wx");
        if (!f) {
            throw Error("working directory " + dir.string() + " is locked by another pipeline instance (remove " +
                        path_.string() + " if stale)");
        }
        std::fclose(f);
    }
    WorkdirLock(const WorkdirLock&) = delete;
    WorkdirLock& operator=(const WorkdirLock&) = delete;
    ~WorkdirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

// ---------------------------------------------------------------------------
// Stage context

inline const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> s{"generate", "cluster", "split", "train", "evaluate", "biomarkers", "gradcam"};
    return s;
}

inline bool is_stage(std::string_view s) {
    const auto& o = stage_order();
    return s == "ablation" || std::find(o.begin(), o.end(), s) != o.end();
}

struct SubjectRow {
    std::string id;
    std::uint64_t seed = 0;
    vol::Subject subject;
    double rescan_gap = -1.0; ///< years between scans, < 0 when there is no repeat scan
};

class Pipeline {
public:
    Pipeline(Config config, fs::path root) : cfg_(std::move(config)), root_(std::move(root)) {
        cfg_.validate();
    }

    const Config& config() const { return cfg_; }
    const fs::path& root() const { return root_; }
    fs::path dir(const std::string& stage) const { return root_ / stage; }

    /// Runs the named stage (or "all"); returns the stages actually executed.
    std::vector<std::string> run(const std::string& target, bool force = false) {
        if (target != "all" && !is_stage(target)) {
            throw ConfigError("unknown stage '" + target + "'");
        }
        fs::create_directories(root_);
        WorkdirLock lock(root_);
        Manifest manifest(root_ / "manifest.tsv");
        std::vector<std::string> stages = target == "all" ? stage_order() : std::vector<std::string>{target};
        std::vector<std::string> executed;
        for (const auto& s : stages) {
            if (run_stage(s, manifest, force)) {
                executed.push_back(s);
            }
        }
        return executed;
    }

private:
    // -- fingerprints -------------------------------------------------------

    std::string input_fingerprint(const std::string& stage) const {
        Fnv1a h;
        h.update(stage);
        auto add_file = [&](const fs::path& p) {
            if (!fs::exists(p)) {
                throw DependencyError("stage '" + stage + "' needs " + p.string() + "; run stage '" +
                                      producer_of(p) + "' first");
            }
            h.update(p.filename().string());
            h.update_u64(hash_file(p));
        };
        if (stage == "generate") {
            h.update(cfg_.canonical({"data.n_subjects", "data.grid", "data.rescan_fraction"}));
        } else if (stage == "cluster") {
            h.update(cfg_.canonical({"cluster."}));
            add_file(dir("generate") / "subjects.csv");
            add_file(dir("generate") / "conditions.csv");
        } else if (stage == "split") {
            h.update(cfg_.canonical({"data.train_fraction", "data.val_fraction", "data.test_fraction"}));
            add_file(dir("generate") / "subjects.csv");
            add_file(dir("cluster") / "eligibility.csv");
        } else if (stage == "train") {
            h.update(cfg_.canonical({"train.", "data.grid"}));
            add_file(dir("generate") / "subjects.csv");
            add_file(dir("split") / "split.csv");
        } else if (stage == "evaluate") {
            h.update(cfg_.canonical({"biomarkers.bootstrap_reps", "train.region"}));
            add_file(dir("split") / "split.csv");
            add_file(dir("train") / "model.ckpt");
        } else if (stage == "biomarkers") {
            h.update(cfg_.canonical({"biomarkers."}));
            add_file(dir("evaluate") / "predictions.csv");
            add_file(dir("evaluate") / "icc.csv");
            add_file(dir("generate") / "conditions.csv");
        } else if (stage == "gradcam") {
            h.update(cfg_.canonical({"gradcam.", "train.region"}));
            add_file(dir("train") / "model.ckpt");
            add_file(dir("split") / "split.csv");
        } else if (stage == "ablation") {
            h.update(cfg_.canonical({"train.", "ablation.", "data.grid"}));
            add_file(dir("split") / "split.csv");
        }
        return hex64(h.digest());
    }

    static std::string producer_of(const fs::path& p) {
        return p.parent_path().filename().string();
    }

    std::string output_fingerprint(const std::string& stage) const {
        Fnv1a h;
        const fs::path d = dir(stage);
        if (!fs::exists(d)) {
            return hex64(h.digest());
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(d)) {
            if (e.is_regular_file()) {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            h.update(fs::relative(f, d).string());
            h.update_u64(hash_file(f));
        }
        return hex64(h.digest());
    }

    static std::string now_iso() {
        const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    bool run_stage(const std::string& stage, Manifest& manifest, bool force) {
        const std::string input = input_fingerprint(stage);
        const StageRecord* prev = manifest.find(stage);
        if (!force && prev && prev->input_hash == input && prev->output_hash == output_fingerprint(stage)) {
            log::info("stage " + stage + ": up to date, skipped");
            return false;
        }
        log::info("stage " + stage + ": running");
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fs::remove_all(dir(stage));
            fs::create_directories(dir(stage));
            if (stage == "generate") {
                stage_generate();
            } else if (stage == "cluster") {
                stage_cluster();
            } else if (stage == "split") {
                stage_split();
            } else if (stage == "train") {
                stage_train();
            } else if (stage == "evaluate") {
                stage_evaluate();
            } else if (stage == "biomarkers") {
                stage_biomarkers();
            } else if (stage == "gradcam") {
                stage_gradcam();
            } else if (stage == "ablation") {
                stage_ablation();
            }
        } catch (const DependencyError&) {
            throw;
        } catch (const std::exception& e) {
            throw Error("stage '" + stage + "' failed: " + e.what());
        }
        manifest.set(stage, {input, output_fingerprint(stage), now_iso()});
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log::info("stage " + stage + ": done in " + fmt_double(std::round(secs * 10.0) / 10.0) + " s");
        return true;
    }

    // -- shared readers -----------------------------------------------------

    fs::path volume_path(const std::string& id, bool rescan = false) const {
        return dir("generate") / (rescan ? "rescans" : "volumes") / (id + ".vol");
    }

    std::vector<SubjectRow> read_subjects() const {
        const auto t = read_csv(dir("generate") / "subjects.csv");
        std::vector<SubjectRow> rows;
        const auto c_id = t.column("id"), c_seed = t.column("seed"), c_age = t.column("age"),
                   c_sex = t.column("sex"), c_bracket = t.column("bracket"), c_packs = t.column("packs_per_day"),
                   c_alc = t.column("alcohol_days_per_week"), c_sed = t.column("sedentary_hours"),
                   c_work = t.column("work_level"), c_ex = t.column("exercise_level"),
                   c_gap = t.column("rescan_gap");
        for (const auto& r : t.rows) {
            SubjectRow s;
            s.id = r[c_id];
            s.seed = std::stoull(r[c_seed]);
            s.subject.id = s.id;
            s.subject.age = std::stod(r[c_age]);
            s.subject.sex = r[c_sex] == "female" ? vol::Sex::Female : vol::Sex::Male;
            s.subject.bracket = std::stoi(r[c_bracket]);
            s.subject.covariates.packs_per_day = std::stod(r[c_packs]);
            s.subject.covariates.alcohol_days_per_week = std::stod(r[c_alc]);
            s.subject.covariates.sedentary_hours = std::stod(r[c_sed]);
            s.subject.covariates.work_level = std::stoi(r[c_work]);
            s.subject.covariates.exercise_level = std::stoi(r[c_ex]);
            s.rescan_gap = r[c_gap].empty() ? -1.0 : std::stod(r[c_gap]);
            rows.push_back(std::move(s));
        }
        return rows;
    }

    /// id -> split name ("train", "val", "test", "abnormal").
    std::map<std::string, std::string> read_split() const {
        const auto t = read_csv(dir("split") / "split.csv");
        std::map<std::string, std::string> out;
        const auto c_id = t.column("id"), c_split = t.column("split");
        for (const auto& r : t.rows) {
            out[r[c_id]] = r[c_split];
        }
        return out;
    }

    std::vector<float> load_input(const std::string& id, RegionChoice region, bool rescan = false) const {
        const auto path = volume_path(id, rescan);
        if (!fs::exists(path)) {
            throw DependencyError("missing volume " + path.string() + "; run stage 'generate' first");
        }
        auto v = vol::read_volume(path);
        if (region != RegionChoice::Whole) {
            v = vol::mask_region(v, to_region(region), cfg_.synth().dilation_radius);
        }
        return std::move(v.intensity);
    }

    VolumeSet load_set(const std::vector<const SubjectRow*>& rows, RegionChoice region, bool rescan = false) const {
        VolumeSet s;
        for (const auto* r : rows) {
            s.volumes.push_back(load_input(r->id, region, rescan));
            s.ages.push_back(rescan ? std::min(84.0, r->subject.age + r->rescan_gap) : r->subject.age);
        }
        return s;
    }

    std::vector<const SubjectRow*> rows_in(const std::vector<SubjectRow>& all, const std::map<std::string, std::string>& split,
                                           std::string_view which) const {
        std::vector<const SubjectRow*> out;
        for (const auto& r : all) {
            const auto it = split.find(r.id);
            if (it != split.end() && it->second == which) {
                out.push_back(&r);
            }
        }
        return out;
    }

    /// A seeded, stratified-by-bracket subsample of the training rows.
    std::vector<const SubjectRow*> subsample(std::vector<const SubjectRow*> rows, double fraction,
                                             std::uint64_t seed) const {
        if (fraction >= 1.0) {
            return rows;
        }
        const std::size_t keep = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(fraction * rows.size())));
        Rng rng(seed);
        rng.shuffle(rows.begin(), rows.end());
        rows.resize(std::min(keep, rows.size()));
        std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->id < b->id; });
        return rows;
    }

    // -- stages -------------------------------------------------------------

    void stage_generate() {
        const auto synth = cfg_.synth();
        const fs::path out = dir("generate");
        fs::create_directories(out / "volumes");
        fs::create_directories(out / "rescans");
        Rng rng(derive_seed(cfg_.seed, 1));
        std::ostringstream subjects, conditions;
        subjects << "id,seed,age,sex,bracket,packs_per_day,alcohol_days_per_week,sedentary_hours,work_level,"
                    "exercise_level,rescan_gap\n";
        conditions << condition_csv_header();
        const int width = static_cast<int>(std::to_string(cfg_.n_subjects).size());
        for (std::size_t i = 0; i < cfg_.n_subjects; ++i) {
            char idbuf[32];
            std::snprintf(idbuf, sizeof idbuf, "S%0*zu", width, i);
            const std::string id = idbuf;
            const double age = vol::sample_age(rng);
            const auto sex = rng.bernoulli(0.5) ? vol::Sex::Female : vol::Sex::Male;
            const bool rescan = rng.bernoulli(cfg_.rescan_fraction);
            const double gap = rescan ? rng.uniform(0.5, 2.7) : -1.0;
            const std::uint64_t seed = derive_seed(cfg_.seed, 1000 + i);

            Rng bio_rng(derive_seed(seed, 0));
            const auto bio = vol::sample_biology(bio_rng, age, synth);
            const auto g = vol::render_subject(synth, id, age, sex, bio, derive_seed(seed, 1));
            vol::write_volume(out / "volumes" / (id + ".vol"), vol::preprocess(g, synth).volume);
            if (rescan) {
                const double age2 = std::min(84.0, age + gap);
                const auto g2 = vol::render_subject(synth, id, age2, sex, bio, derive_seed(seed, 2));
                vol::write_volume(out / "rescans" / (id + ".vol"), vol::preprocess(g2, synth).volume);
            }
            const auto& c = bio.covariates;
            subjects << id << ',' << seed << ',' << fmt_double(age) << ',' << vol::name(sex) << ','
                     << vol::bracket_of(age) << ',' << fmt_double(c.packs_per_day) << ','
                     << fmt_double(c.alcohol_days_per_week) << ',' << fmt_double(c.sedentary_hours) << ','
                     << c.work_level << ',' << c.exercise_level << ',' << (rescan ? fmt_double(gap) : "") << '\n';
            for (const auto& rec : g.records) {
                conditions << condition_csv_row(id, rec);
            }
        }
        write_atomic(out / "subjects.csv", subjects.str());
        write_atomic(out / "conditions.csv", conditions.str());
    }

    void stage_cluster() {
        const auto subjects = read_subjects();
        const auto records = read_condition_csv(dir("generate") / "conditions.csv");
        const fs::path out = dir("cluster");
        std::map<int, std::vector<const SubjectRow*>> by_bracket;
        for (const auto& s : subjects) {
            by_bracket[s.subject.bracket].push_back(&s);
        }
        std::ostringstream eligibility, summary;
        eligibility << "id,bracket,cluster,normal\n";
        summary << "bracket,cluster,size,fraction,verdict,top_cells\n";
        std::vector<std::pair<std::string, DenseFeatures>> dense_rows;
        for (const auto& [bracket, members] : by_bracket) {
            std::vector<DenseFeatures> feats;
            for (const auto* s : members) {
                const auto it = records.find(s->id);
                const std::vector<ConditionRecord> empty;
                const auto& recs = it == records.end() ? empty : it->second;
                feats.push_back(aggregate(recs));
                dense_rows.emplace_back(s->id, feats.back());
            }
            const std::size_t n = members.size();
            if (n <= std::max(cfg_.umap_neighbors, cfg_.min_samples)) {
                log::warn("cluster: bracket " + std::to_string(bracket) + " has only " + std::to_string(n) +
                          " subjects; too few to cluster, all marked normal");
                for (const auto* s : members) {
                    eligibility << s->id << ',' << bracket << ",-1,true\n";
                }
                summary << bracket << ",-1," << n << ",1,normal,unclustered\n";
                continue;
            }
            umap::UmapConfig u;
            u.n_neighbors = cfg_.umap_neighbors;
            u.min_dist = cfg_.umap_min_dist;
            u.n_epochs = cfg_.umap_epochs;
            u.seed = derive_seed(cfg_.seed, 200 + static_cast<std::uint64_t>(bracket));
            const auto emb = umap::embed<DenseFeatures>(feats, u);
            auto hc = hdbscan::HdbscanConfig::for_bracket(bracket, n);
            hc.min_samples = cfg_.min_samples;
            auto labeling = hdbscan::cluster(emb.coords, hc);
            labeling = hdbscan::assign_normality(std::move(labeling), n, cfg_.normal_threshold);
            hdbscan::summarize_clusters(labeling, feats);

            std::ostringstream coords;
            coords << "id,x,y,cluster,normal\n";
            for (std::size_t i = 0; i < n; ++i) {
                const bool normal = labeling.is_normal(i);
                coords << members[i]->id << ',' << fmt_double(emb.coords[i][0]) << ',' << fmt_double(emb.coords[i][1])
                       << ',' << labeling.labels[i] << ',' << (normal ? "true" : "false") << '\n';
                eligibility << members[i]->id << ',' << bracket << ',' << labeling.labels[i] << ','
                            << (normal ? "true" : "false") << '\n';
            }
            for (std::size_t c = 0; c < labeling.num_clusters(); ++c) {
                summary << bracket << ',' << c << ',' << labeling.sizes[c] << ',' << fmt_double(labeling.fractions[c])
                        << ','
                        << (labeling.verdicts[c] == hdbscan::ClusterLabeling::Verdict::Normal ? "normal" : "abnormal")
                        << ",\"" << labeling.summaries[c] << "\"\n";
            }
            summary << bracket << ",noise," << labeling.noise_count() << ','
                    << fmt_double(static_cast<double>(labeling.noise_count()) / static_cast<double>(n)) << ",abnormal,\n";
            const std::string stem = "bracket_" + std::to_string(bracket);
            write_atomic(out / (stem + "_embedding.csv"), coords.str());
            write_atomic(out / (stem + ".ppm"), umap::render_scatter(emb, labeling.labels));
        }
        write_atomic(out / "eligibility.csv", eligibility.str());
        write_atomic(out / "cluster_summary.csv", summary.str());
        write_atomic(out / "dense_features.csv", dense_csv(dense_rows));
    }

    /**
     * Normals are split train/val/test within each (bracket, sex) stratum by
     * largest-remainder rounding; abnormals all join the test set.
     */
    void stage_split() {
        const auto subjects = read_subjects();
        const auto elig = read_csv(dir("cluster") / "eligibility.csv");
        std::map<std::string, bool> normal;
        const auto c_id = elig.column("id"), c_normal = elig.column("normal");
        for (const auto& r : elig.rows) {
            normal[r[c_id]] = r[c_normal] == "true";
        }
        std::map<std::pair<int, int>, std::vector<std::string>> strata;
        std::map<std::string, std::string> assignment;
        for (const auto& s : subjects) {
            const auto it = normal.find(s.id);
            if (it == normal.end()) {
                throw DependencyError("subject " + s.id + " missing from eligibility.csv; rerun stage 'cluster'");
            }
            if (it->second) {
                strata[{s.subject.bracket, static_cast<int>(s.subject.sex)}].push_back(s.id);
            } else {
                assignment[s.id] = "abnormal";
            }
        }
        Rng rng(derive_seed(cfg_.seed, 300));
        for (auto& [key, ids] : strata) {
            rng.shuffle(ids.begin(), ids.end());
            const auto counts = stratum_counts(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                assignment[ids[i]] = i < counts[0] ? "train" : (i < counts[0] + counts[1] ? "val" : "test");
            }
        }
        std::ostringstream os;
        os << "id,bracket,sex,split\n";
        std::map<std::string, std::size_t> totals;
        for (const auto& s : subjects) {
            const auto& sp = assignment.at(s.id);
            ++totals[sp];
            os << s.id << ',' << s.subject.bracket << ',' << vol::name(s.subject.sex) << ',' << sp << '\n';
        }
        if (totals["train"] < 2 || totals["val"] < 2 || totals["test"] < 1) {
            throw ValidationError("split: too few normal subjects (train " + std::to_string(totals["train"]) +
                                  ", val " + std::to_string(totals["val"]) + ", test " +
                                  std::to_string(totals["test"]) + "); increase data.n_subjects");
        }
        write_atomic(dir("split") / "split.csv", os.str());
        std::ostringstream counts;
        counts << "split,count\n";
        for (const auto& [k, v] : totals) {
            counts << k << ',' << v << '\n';
        }
        write_atomic(dir("split") / "split_counts.csv", counts.str());
    }

public:
    /// Train/val/test counts for one stratum: val and test rounded from their fractions, train takes the rest.
    std::array<std::size_t, 3> stratum_counts(std::size_t n) const {
        const double fracs[3] = {cfg_.train_fraction, cfg_.val_fraction, cfg_.test_fraction};
        std::array<std::size_t, 3> c{};
        std::array<double, 3> rem{};
        std::size_t used = 0;
        for (int k = 0; k < 3; ++k) {
            const double exact = fracs[k] * static_cast<double>(n);
            c[k] = static_cast<std::size_t>(std::floor(exact));
            rem[k] = exact - static_cast<double>(c[k]);
            used += c[k];
        }
        while (used < n) {
            int best = 0;
            for (int k = 1; k < 3; ++k) {
                if (rem[k] > rem[best]) {
                    best = k;
                }
            }
            ++c[best];
            rem[best] = -1.0;
            ++used;
        }
        return c;
    }

private:
    struct TrainedModel {
        TrainingState<float> state;
        TrainResult result;
    };

    TrainedModel train_model(const std::vector<SubjectRow>& subjects, const std::map<std::string, std::string>& split,
                             LossKind loss, RegionChoice region, double fraction, const std::string& label) const {
        auto tc = cfg_.train_config();
        tc.loss = loss;
        const auto train_rows = subsample(rows_in(subjects, split, "train"), fraction, derive_seed(cfg_.seed, 400));
        const auto val_rows = rows_in(subjects, split, "val");
        const auto train_set = load_set(train_rows, region);
        const auto val_set = load_set(val_rows, region);
        log::info(label + ": training on " + std::to_string(train_set.size()) + " volumes, validating on " +
                  std::to_string(val_set.size()));
        auto state = make_training_state<float>(cfg_.net(), tc, train_set.ages);
        auto result = train(state, train_set, val_set, tc, [&](const EpochLog& e) {
            log::info(label + ": epoch " + std::to_string(e.epoch) + " lr " + fmt_double(e.lr) + " train " +
                      fmt_double(e.train_loss) + " val " + fmt_double(e.val_loss));
        });
        return {std::move(state), std::move(result)};
    }

    void stage_train() {
        const auto subjects = read_subjects();
        const auto split = read_split();
        auto m = train_model(subjects, split, cfg_.loss, cfg_.region, cfg_.data_fraction, "train");
        write_atomic(dir("train") / "training_log.csv", training_log_csv(m.result.log));
        // Best-validation weights (train() restores them) with the final optimizer state.
        save_checkpoint(dir("train") / "model.ckpt", m.state);
        std::ostringstream os;
        os << "best_epoch,best_val_loss,steps,target_mean,target_sd\n"
           << m.result.best_epoch << ',' << fmt_double(m.result.best_val_loss) << ',' << m.result.steps << ','
           << fmt_double(m.state.scaler.mean) << ',' << fmt_double(m.state.scaler.sd) << '\n';
        write_atomic(dir("train") / "train_summary.csv", os.str());
    }

    struct Evaluation {
        BiasCorrection bias;
        std::vector<double> y_test, raw_test, cor_test;
        std::vector<int> b_test;
        std::vector<double> y_full, raw_full, cor_full;
        std::vector<int> b_full;
    };

    Evaluation evaluate_model(SpineAgeNet<float>& net, const TargetScaler& scaler,
                              const std::vector<SubjectRow>& subjects, const std::map<std::string, std::string>& split,
                              RegionChoice region, std::ostringstream* predictions) const {
        Evaluation ev;
        const auto val_rows = rows_in(subjects, split, "val");
        const auto val = load_set(val_rows, region);
        const auto pv = predict(net, val, scaler);
        ev.bias = fit_bias(val.ages, pv);
        for (const char* group : {"test", "abnormal"}) {
            const auto rows = rows_in(subjects, split, group);
            if (rows.empty()) {
                continue;
            }
            const auto set = load_set(rows, region);
            const auto raw = predict(net, set, scaler);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const double cor = ev.bias.apply(raw[i]);
                const double age = rows[i]->subject.age;
                const int br = rows[i]->subject.bracket;
                if (std::string_view(group) == "test") {
                    ev.y_test.push_back(age);
                    ev.raw_test.push_back(raw[i]);
                    ev.cor_test.push_back(cor);
                    ev.b_test.push_back(br);
                }
                ev.y_full.push_back(age);
                ev.raw_full.push_back(raw[i]);
                ev.cor_full.push_back(cor);
                ev.b_full.push_back(br);
                if (predictions) {
                    *predictions << rows[i]->id << ',' << fmt_double(age) << ',' << br << ','
                                 << vol::name(rows[i]->subject.sex) << ','
                                 << (std::string_view(group) == "test" ? "normal" : "abnormal") << ','
                                 << fmt_double(raw[i]) << ',' << fmt_double(cor) << ',' << fmt_double(cor - age)
                                 << '\n';
                }
            }
        }
        return ev;
    }

    static void metric_rows(std::ostringstream& os, const std::string& prefix, const Evaluation& ev) {
        auto row = [&](const char* set, const char* corr, std::span<const double> y, std::span<const double> p,
                       std::span<const int> b) {
            if (y.size() < 2) {
                return;
            }
            const auto m = compute_metrics(y, p, b);
            os << prefix << set << ',' << corr << ',' << y.size() << ',' << fmt_double(m.mae) << ','
               << fmt_double(m.wmae) << ',' << fmt_double(m.r2) << '\n';
        };
        row("normal_test", "raw", ev.y_test, ev.raw_test, ev.b_test);
        row("normal_test", "corrected", ev.y_test, ev.cor_test, ev.b_test);
        row("full_test", "raw", ev.y_full, ev.raw_full, ev.b_full);
        row("full_test", "corrected", ev.y_full, ev.cor_full, ev.b_full);
    }

    void stage_evaluate() {
        const auto subjects = read_subjects();
        const auto split = read_split();
        auto state = load_checkpoint<float>(dir("train") / "model.ckpt");
        std::ostringstream preds;
        preds << "id,age,bracket,sex,group,raw_prediction,corrected_prediction,sag\n";
        const auto ev = evaluate_model(state.net, state.scaler, subjects, split, cfg_.region, &preds);
        const fs::path out = dir("evaluate");
        write_atomic(out / "predictions.csv", preds.str());
        std::ostringstream metrics;
        metrics << "set,correction,n,mae,wmae,r2\n";
        metric_rows(metrics, "", ev);
        write_atomic(out / "metrics.csv", metrics.str());
        write_atomic(out / "bias.csv", "alpha,beta\n" + fmt_double(ev.bias.alpha) + "," + fmt_double(ev.bias.beta) + "\n");

        // Repeat scans of test-set subjects.
        std::vector<const SubjectRow*> rescans;
        for (const auto& s : subjects) {
            const auto it = split.find(s.id);
            if (s.rescan_gap >= 0.0 && it != split.end() && (it->second == "test" || it->second == "abnormal")) {
                rescans.push_back(&s);
            }
        }
        std::ostringstream rp, icc_csv;
        rp << "id,age_first,age_second,corrected_first,corrected_second\n";
        icc_csv << "n,icc,ci_low,ci_high,replicates\n";
        if (rescans.size() >= 3) {
            const auto first = load_set(rescans, cfg_.region, false);
            const auto second = load_set(rescans, cfg_.region, true);
            const auto p1 = apply_bias(ev.bias, predict(state.net, first, state.scaler));
            const auto p2 = apply_bias(ev.bias, predict(state.net, second, state.scaler));
            std::vector<std::array<double, 2>> pairs;
            for (std::size_t i = 0; i < rescans.size(); ++i) {
                pairs.push_back({p1[i], p2[i]});
                rp << rescans[i]->id << ',' << fmt_double(first.ages[i]) << ',' << fmt_double(second.ages[i]) << ','
                   << fmt_double(p1[i]) << ',' << fmt_double(p2[i]) << '\n';
            }
            const auto icc = icc_scan_rescan(pairs, cfg_.bootstrap_reps, derive_seed(cfg_.seed, 500));
            icc_csv << icc.n << ',' << fmt_double(icc.icc) << ',' << fmt_double(icc.ci_low) << ','
                    << fmt_double(icc.ci_high) << ',' << icc.replicates << '\n';
        } else {
            log::warn("evaluate: fewer than 3 repeat scans in the test set; ICC not computed");
        }
        write_atomic(out / "rescan_predictions.csv", rp.str());
        write_atomic(out / "icc.csv", icc_csv.str());
    }

    void stage_biomarkers() {
        const auto subjects = read_subjects();
        const auto records = read_condition_csv(dir("generate") / "conditions.csv");
        const auto preds = read_csv(dir("evaluate") / "predictions.csv");
        std::map<std::string, const SubjectRow*> by_id;
        for (const auto& s : subjects) {
            by_id[s.id] = &s;
        }
        std::vector<SagSubject> study;
        std::vector<double> ages, sags;
        std::vector<int> work;
        const auto c_id = preds.column("id"), c_sag = preds.column("sag");
        for (const auto& r : preds.rows) {
            const auto* s = by_id.at(r[c_id]);
            SagSubject x;
            x.id = s->id;
            x.sag = std::stod(r[c_sag]);
            x.female = s->subject.sex == vol::Sex::Female;
            const auto it = records.find(s->id);
            x.features = it == records.end() ? DenseFeatures{} : aggregate(it->second);
            const auto& c = s->subject.covariates;
            x.packs_per_day = c.packs_per_day;
            x.alcohol_days_per_week = c.alcohol_days_per_week;
            x.sedentary_hours = c.sedentary_hours;
            x.work_level = c.work_level;
            x.exercise_level = c.exercise_level;
            study.push_back(x);
            ages.push_back(s->subject.age);
            sags.push_back(x.sag);
            work.push_back(c.work_level);
        }
        const fs::path out = dir("biomarkers");

        std::vector<std::pair<CovariateGroup, OlsFit>> fits;
        for (auto g : {CovariateGroup::LumbarDegenerative, CovariateGroup::Structural, CovariateGroup::Lifestyle,
                       CovariateGroup::CervicalDegenerative, CovariateGroup::ThoracicDegenerative}) {
            try {
                fits.emplace_back(g, fit_sag_ols(study, g, true));
            } catch (const Error& e) {
                log::warn("biomarkers: " + std::string(name(g)) + " regression skipped: " + e.what());
            }
        }
        write_atomic(out / "regression.csv", regression_csv(fits));

        std::vector<OddsRatioResult> ors;
        auto add_or = [&](const std::string& label, auto&& indicator) {
            std::unique_ptr<bool[]> has(new bool[study.size()]);
            for (std::size_t i = 0; i < study.size(); ++i) {
                has[i] = indicator(study[i]);
            }
            try {
                auto r = odds_ratios(sags, std::span<const bool>(has.get(), study.size()), cfg_.sag_high, cfg_.sag_low);
                r.condition = label;
                ors.push_back(r);
            } catch (const ValidationError& e) {
                log::warn("biomarkers: odds ratio for " + label + " skipped: " + e.what());
            }
        };
        const auto& defs = degenerative_indicators();
        for (std::size_t k = 0; k < defs.size(); ++k) {
            add_or("lumbar_" + defs[k].label, [&](const SagSubject& s) {
                return degenerative_indicator_row(s.features, Region::Lumbar)[k] > 0.0;
            });
        }
        for (std::size_t k = 0; k < kStructuralKinds; ++k) {
            add_or(std::string(name(static_cast<ConditionKind>(kDegenerativeKinds + k))),
                   [&](const SagSubject& s) { return s.features[kDegenerativeCells + k] > 0; });
        }
        write_atomic(out / "odds_ratios.csv", odds_ratio_csv(ors));

        const auto icc = read_csv(dir("evaluate") / "icc.csv");
        std::ostringstream summary;
        if (icc.rows.empty()) {
            summary << "scan-rescan ICC: not computed (fewer than 3 repeat scans)\n";
        } else {
            const auto& r = icc.rows.front();
            summary << "scan-rescan ICC(1,1): " << r[icc.column("icc")] << " (95% bootstrap CI "
                    << r[icc.column("ci_low")] << " to " << r[icc.column("ci_high")] << "; n = " << r[icc.column("n")]
                    << " subjects, " << r[icc.column("replicates")] << " replicates)\n";
        }
        write_atomic(out / "icc_summary.txt", summary.str());
        write_atomic(out / "age_bin_sag_by_work.csv", age_bin_sag_csv(ages, sags, work));
    }

    void stage_gradcam() {
        const auto subjects = read_subjects();
        const auto split = read_split();
        auto state = load_checkpoint<float>(dir("train") / "model.ckpt");
        const auto synth = cfg_.synth();
        const auto rows = rows_in(subjects, split, "test");
        std::ostringstream summary;
        summary << "id,age,blobs,blob_pixels,blob_heat,background_heat\n";
        const std::size_t count = std::min(cfg_.gradcam_count, rows.size());
        for (std::size_t i = 0; i < count; ++i) {
            const auto* r = rows[i];
            auto input = load_input(r->id, cfg_.region);
            const auto map = gradcam(state.net, input);
            write_atomic(dir("gradcam") / (r->id + ".pgm"), gradcam_pgm(map));
            write_atomic(dir("gradcam") / (r->id + ".csv"), gradcam_csv(map));

            // The generator is deterministic, so the blob ground truth can be re-derived from the seed.
            Rng bio_rng(derive_seed(r->seed, 0));
            const auto bio = vol::sample_biology(bio_rng, r->subject.age, synth);
            const auto g = vol::render_subject(synth, r->id, r->subject.age, r->subject.sex, bio, derive_seed(r->seed, 1));
            const auto prepared = vol::preprocess(g, synth);
            double in = 0.0, outside = 0.0;
            std::size_t n_in = 0, n_out = 0;
            for (std::size_t y = 0; y < map.height; ++y) {
                for (std::size_t x = 0; x < map.width; ++x) {
                    const bool blob = prepared.blob_mask[x + map.width * (y + map.height * map.slice)] != 0;
                    (blob ? in : outside) += map.at(y, x);
                    ++(blob ? n_in : n_out);
                }
            }
            summary << r->id << ',' << fmt_double(r->subject.age) << ',' << g.blobs.size() << ',' << n_in << ','
                    << (n_in ? fmt_double(in / static_cast<double>(n_in)) : "") << ','
                    << fmt_double(n_out ? outside / static_cast<double>(n_out) : 0.0) << '\n';
        }
        write_atomic(dir("gradcam") / "gradcam_summary.csv", summary.str());
    }

    void stage_ablation() {
        const auto subjects = read_subjects();
        const auto split = read_split();
        std::ostringstream os;
        os << "arm,set,correction,n,mae,wmae,r2\n";
        std::ostringstream checks;
        checks << "arm,region,volumes_checked,masked_outside_region\n";
        for (const auto& arm : cfg_.arms) {
            LossKind loss = cfg_.loss;
            RegionChoice region = cfg_.region;
            double fraction = cfg_.data_fraction;
            if (arm.axis == "data") {
                fraction = std::stod(arm.value);
            } else if (arm.axis == "loss") {
                loss = parse_loss(arm.value);
            } else {
                region = parse_region_choice(arm.value);
            }
            if (region != RegionChoice::Whole) {
                // Masking contract: the arm's inputs are zero outside the chosen region's dilated labels.
                std::size_t checked = 0;
                bool ok = true;
                for (const auto* r : rows_in(subjects, split, "train")) {
                    auto v = vol::read_volume(volume_path(r->id));
                    const auto masked = vol::mask_region(v, to_region(region), cfg_.synth().dilation_radius);
                    ok = ok && vol::verify_region_masked(masked, to_region(region), cfg_.synth().dilation_radius);
                    if (++checked == 20) {
                        break;
                    }
                }
                checks << arm.name << ',' << name(region) << ',' << checked << ',' << (ok ? "true" : "false") << '\n';
                if (!ok) {
                    throw Error("ablation arm " + arm.name + ": region masking left voxels outside the region");
                }
            }
            auto m = train_model(subjects, split, loss, region, fraction, "ablation " + arm.name);
            const auto ev = evaluate_model(m.state.net, m.state.scaler, subjects, split, region, nullptr);
            metric_rows(os, arm.name + ",", ev);
            std::string safe = arm.name;
            std::replace(safe.begin(), safe.end(), ':', '_');
            write_atomic(dir("ablation") / ("training_log_" + safe + ".csv"), training_log_csv(m.result.log));
        }
        write_atomic(dir("ablation") / "ablation.csv", os.str());
        write_atomic(dir("ablation") / "region_mask_checks.csv", checks.str());
    }

    Config cfg_;
    fs::path root_;
};

/// Working directory: SPINEAGE_WORKDIR when set, otherwise the config's workdir relative to the config file.
inline fs::path resolve_workdir(const Config& c, const fs::path& config_path) {
    if (const char* env = std::getenv("SPINEAGE_WORKDIR"); env && *env) {
        return fs::path(env);
    }
    fs::path w(c.workdir);
    if (w.is_relative()) {
        w = config_path.parent_path() / w;
    }
    return w;
}

} // namespace spineage::pipeline

#endif
