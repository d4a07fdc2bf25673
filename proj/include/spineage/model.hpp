#ifndef SPINEAGE_MODEL_HPP
#define SPINEAGE_MODEL_HPP

#include "autograd.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "rng.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file model.hpp
 *
 * Volumetric age regressor: five conv-bn-relu-maxpool blocks, a 1x1x1 conv
 * top block with global max pooling, and a single linear output. Includes the
 * training loop, a versioned checkpoint format and Grad-CAM.
 */

namespace spineage {

struct NetConfig {
    std::array<std::size_t, 5> widths{32, 64, 128, 256, 256};
    std::size_t top_width = 64;
    std::size_t kernel = 3;
    std::size_t depth = 14; ///< input D (slices)
    std::size_t height = 793; ///< input H
    std::size_t width = 384; ///< input W

    static NetConfig full_scale() { return {}; }

    /// Channel widths divided by 8 on a reduced grid.
    static NetConfig desk(std::size_t depth = 8, std::size_t height = 192, std::size_t width = 96) {
        NetConfig c;
        c.widths = {4, 8, 16, 32, 32};
        c.top_width = 8;
        c.depth = depth;
        c.height = height;
        c.width = width;
        return c;
    }

    std::size_t voxels() const { return depth * height * width; }

    void validate() const {
        for (auto w : widths) {
            if (w == 0) {
                throw ConfigError("net: channel widths must be positive");
            }
        }
        if (top_width == 0 || kernel % 2 == 0 || depth == 0 || height == 0 || width == 0) {
            throw ConfigError("net: invalid top width, kernel or input dims");
        }
    }

    std::uint64_t hash() const {
        Fnv1a h;
        for (auto w : widths) {
            h.update_u64(static_cast<std::uint64_t>(w));
        }
        h.update_u64(static_cast<std::uint64_t>(top_width));
        h.update_u64(static_cast<std::uint64_t>(kernel));
        h.update_u64(static_cast<std::uint64_t>(depth));
        h.update_u64(static_cast<std::uint64_t>(height));
        h.update_u64(static_cast<std::uint64_t>(width));
        return h.digest();
    }
};

struct CensusRow {
    std::string layer;
    std::size_t parameters = 0;
};

template <class T>
class SpineAgeNet {
public:
    using Tensor = ag::Tensor<T>;

    struct Block {
        Tensor weight, bias, gamma, beta;
        ag::BatchNormState<T> bn;
    };

    /// Output of one forward pass plus the block-5 post-activation features.
    struct Trace {
        Tensor output;   ///< [N, 1]
        Tensor block5;   ///< [N, C5, d, h, w], before pooling
    };

    SpineAgeNet() : SpineAgeNet(NetConfig::desk(), 0) {}

    /// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    SpineAgeNet(const NetConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        std::size_t in = 1;
        for (std::size_t i = 0; i < 5; ++i) {
            blocks_[i] = make_block(in, config_.widths[i], config_.kernel, rng);
            in = config_.widths[i];
        }
        top_ = make_block(in, config_.top_width, 1, rng);
        const double bound = 1.0 / std::sqrt(static_cast<double>(config_.top_width));
        fc_weight_ = uniform_tensor({1, config_.top_width}, bound, rng);
        fc_bias_ = uniform_tensor({1}, bound, rng);
    }

    const NetConfig& config() const { return config_; }

    /// Parameters in a fixed order with stable names.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto add_block = [&](const std::string& prefix, const Block& b) {
            out.emplace_back(prefix + ".conv.weight", b.weight);
            out.emplace_back(prefix + ".conv.bias", b.bias);
            out.emplace_back(prefix + ".bn.weight", b.gamma);
            out.emplace_back(prefix + ".bn.bias", b.beta);
        };
        for (std::size_t i = 0; i < 5; ++i) {
            add_block("block" + std::to_string(i + 1), blocks_[i]);
        }
        add_block("top", top_);
        out.emplace_back("fc.weight", fc_weight_);
        out.emplace_back("fc.bias", fc_bias_);
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) {
            out.push_back(t);
        }
        return out;
    }

    /// Batch-norm running statistics by name (not trainable).
    std::vector<std::pair<std::string, ag::BatchNormState<T>*>> named_buffers() {
        std::vector<std::pair<std::string, ag::BatchNormState<T>*>> out;
        for (std::size_t i = 0; i < 5; ++i) {
            out.emplace_back("block" + std::to_string(i + 1) + ".bn", &blocks_[i].bn);
        }
        out.emplace_back("top.bn", &top_.bn);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& [name, t] : named_parameters()) {
            n += t.numel();
        }
        return n;
    }

    /// One row per layer: conv (weight + bias), batch norm (scale + shift), ..., linear.
    std::vector<CensusRow> census() const {
        std::vector<CensusRow> rows;
        auto add_block = [&](const std::string& prefix, const Block& b) {
            rows.push_back({prefix + " conv3d", b.weight.numel() + b.bias.numel()});
            rows.push_back({prefix + " batchnorm3d", b.gamma.numel() + b.beta.numel()});
        };
        for (std::size_t i = 0; i < 5; ++i) {
            add_block("block" + std::to_string(i + 1), blocks_[i]);
        }
        add_block("top", top_);
        rows.push_back({"linear", fc_weight_.numel() + fc_bias_.numel()});
        return rows;
    }

    Trace trace(const Tensor& x, bool training) {
        if (x.rank() != 5 || x.dim(1) != 1 || x.dim(2) != config_.depth || x.dim(3) != config_.height ||
            x.dim(4) != config_.width) {
            throw DimensionError("forward: expected input [N, 1, " + std::to_string(config_.depth) + ", " +
                                 std::to_string(config_.height) + ", " + std::to_string(config_.width) + "], got " +
                                 ag::shape_str(x.shape()));
        }
        Trace t;
        Tensor h = x;
        for (std::size_t i = 0; i < 5; ++i) {
            Block& b = blocks_[i];
            h = ag::relu(ag::batchnorm3d(ag::conv3d(h, b.weight, b.bias), b.gamma, b.beta, b.bn, training));
            if (i == 4) {
                t.block5 = h;
            }
            h = ag::maxpool3d(h);
        }
        h = ag::relu(ag::batchnorm3d(ag::conv3d(h, top_.weight, top_.bias), top_.gamma, top_.beta, top_.bn, training));
        t.output = ag::linear(ag::global_maxpool3d(h), fc_weight_, fc_bias_);
        return t;
    }

    /// [N, 1, D, H, W] -> [N, 1].
    Tensor forward(const Tensor& x, bool training = false) { return trace(x, training).output; }

    void zero_grad() {
        for (auto& [name, t] : named_parameters()) {
            Tensor(t).zero_grad();
        }
    }

    /// Deep copy of parameters and running statistics.
    SpineAgeNet clone() const {
        SpineAgeNet copy(*this);
        copy.rebind_fresh();
        return copy;
    }

    void copy_from(const SpineAgeNet& other) {
        auto dst = named_parameters();
        auto src = other.named_parameters();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
        }
        for (std::size_t i = 0; i < 5; ++i) {
            blocks_[i].bn = other.blocks_[i].bn;
        }
        top_.bn = other.top_.bn;
    }

    Block& block(std::size_t i) { return blocks_.at(i); }
    Block& top() { return top_; }
    Tensor& fc_weight() { return fc_weight_; }
    Tensor& fc_bias() { return fc_bias_; }

private:
    static Tensor uniform_tensor(ag::Shape shape, double bound, Rng& rng) {
        std::vector<T> data(ag::numel(shape));
        for (auto& v : data) {
            v = static_cast<T>(rng.uniform(-bound, bound));
        }
        return Tensor(std::move(shape), std::move(data), true);
    }

    static Block make_block(std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k * k));
        Block b;
        b.weight = uniform_tensor({out, in, k, k, k}, bound, rng);
        b.bias = uniform_tensor({out}, bound, rng);
        b.gamma = Tensor({out}, T(1), true);
        b.beta = Tensor({out}, T(0), true);
        b.bn = ag::BatchNormState<T>(out);
        return b;
    }

    void rebind_fresh() {
        auto fresh = [](Tensor& t) { t = Tensor(t.shape(), t.storage(), true); };
        for (auto& b : blocks_) {
            fresh(b.weight);
            fresh(b.bias);
            fresh(b.gamma);
            fresh(b.beta);
        }
        fresh(top_.weight);
        fresh(top_.bias);
        fresh(top_.gamma);
        fresh(top_.beta);
        fresh(fc_weight_);
        fresh(fc_bias_);
    }

    NetConfig config_;
    std::array<Block, 5> blocks_;
    Block top_;
    Tensor fc_weight_, fc_bias_;
};

// ---------------------------------------------------------------------------
// Data and training

/// Preprocessed volumes (D*H*W each, W fastest) with their target ages.
struct VolumeSet {
    std::vector<std::vector<float>> volumes;
    std::vector<double> ages;

    std::size_t size() const { return volumes.size(); }
};

/// Affine map between ages and the network's training target.
struct TargetScaler {
    double mean = 0.0;
    double sd = 1.0;

    double to_target(double age) const { return (age - mean) / sd; }
    double to_age(double target) const { return target * sd + mean; }

    static TargetScaler fit(std::span<const double> ages) {
        if (ages.empty()) {
            throw ValidationError("target scaler: no ages");
        }
        TargetScaler s;
        s.mean = std::accumulate(ages.begin(), ages.end(), 0.0) / static_cast<double>(ages.size());
        double var = 0.0;
        for (double a : ages) {
            var += (a - s.mean) * (a - s.mean);
        }
        var /= static_cast<double>(ages.size());
        s.sd = var > 0.0 ? std::sqrt(var) : 1.0;
        return s;
    }
};

enum class LossKind { Mse, SmoothL1 };

inline std::string_view name(LossKind k) { return k == LossKind::Mse ? "mse" : "smooth_l1"; }

inline LossKind parse_loss(std::string_view s) {
    if (s == "mse") {
        return LossKind::Mse;
    }
    if (s == "smooth_l1") {
        return LossKind::SmoothL1;
    }
    throw ConfigError("unknown loss '" + std::string(s) + "' (expected mse or smooth_l1)");
}

struct TrainConfig {
    LossKind loss = LossKind::Mse;
    std::size_t epochs = 50;
    std::size_t batch_size = 2;
    double lr = 0.01;
    double plateau_factor = 0.3;
    int plateau_patience = 5;
    std::uint64_t seed = 0;
    /// Training volumes used to re-estimate batch-norm statistics before each validation; 0 disables.
    std::size_t bn_recalibration = 256;

    void validate() const {
        if (epochs == 0 || batch_size == 0 || !(lr > 0.0) || !(plateau_factor > 0.0 && plateau_factor < 1.0) ||
            plateau_patience < 1) {
            throw ConfigError("train: epochs, batch size, lr, plateau factor and patience must be positive");
        }
    }
};

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,val_loss\n";
    for (const auto& e : log) {
        os << e.epoch << ',' << fmt_double(e.lr) << ',' << fmt_double(e.train_loss) << ',' << fmt_double(e.val_loss)
           << '\n';
    }
    return os.str();
}

template <class T>
ag::Tensor<T> make_batch(const VolumeSet& set, std::span<const std::size_t> idx, const NetConfig& c) {
    const std::size_t v = c.voxels();
    std::vector<T> data(idx.size() * v);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& src = set.volumes.at(idx[i]);
        if (src.size() != v) {
            throw DimensionError("batch: volume " + std::to_string(idx[i]) + " has " + std::to_string(src.size()) +
                                 " voxels, expected " + std::to_string(v));
        }
        std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(i * v));
    }
    return ag::Tensor<T>({idx.size(), 1, c.depth, c.height, c.width}, std::move(data));
}

template <class T>
ag::Tensor<T> loss_fn(LossKind kind, const ag::Tensor<T>& pred, const ag::Tensor<T>& target) {
    return kind == LossKind::Mse ? ag::mse_loss(pred, target) : ag::smooth_l1_loss(pred, target);
}

/// Everything needed to resume or reproduce a run.
template <class T>
struct TrainingState {
    SpineAgeNet<T> net;
    ag::AdamState<T> adam;
    ag::PlateauScheduler scheduler;
    Rng rng;
    std::uint64_t epoch = 0;
    TargetScaler scaler;
    std::uint64_t config_hash = 0;
};

/// Mean loss over a set in evaluation mode (targets standardized with `scaler`).
template <class T>
double evaluate_loss(SpineAgeNet<T>& net, const VolumeSet& set, const TargetScaler& scaler, LossKind kind,
                     std::size_t batch = 8) {
    ag::NoGradGuard guard;
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < set.size(); start += batch) {
        idx.clear();
        for (std::size_t i = start; i < std::min(set.size(), start + batch); ++i) {
            idx.push_back(i);
        }
        auto x = make_batch<T>(set, idx, net.config());
        std::vector<T> y;
        for (auto i : idx) {
            y.push_back(static_cast<T>(scaler.to_target(set.ages[i])));
        }
        auto out = net.forward(x, false);
        const auto loss = loss_fn(kind, out, ag::Tensor<T>({idx.size(), 1}, std::move(y)));
        total += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(set.size());
}

/// Predicted ages in evaluation mode.
template <class T>
std::vector<double> predict(SpineAgeNet<T>& net, const VolumeSet& set, const TargetScaler& scaler,
                            std::size_t batch = 8) {
    ag::NoGradGuard guard;
    std::vector<double> out;
    out.reserve(set.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < set.size(); start += batch) {
        idx.clear();
        for (std::size_t i = start; i < std::min(set.size(), start + batch); ++i) {
            idx.push_back(i);
        }
        auto y = net.forward(make_batch<T>(set, idx, net.config()), false);
        for (T v : y.data()) {
            out.push_back(scaler.to_age(static_cast<double>(v)));
        }
    }
    return out;
}

/**
 * Replaces the running batch-norm statistics with the cumulative average of
 * batch statistics over the first `limit` training volumes. Momentum-0.1
 * estimates from two-sample batches are too noisy to evaluate with.
 */
template <class T>
void recalibrate_batchnorm(SpineAgeNet<T>& net, const VolumeSet& set, std::size_t limit, std::size_t batch = 16) {
    ag::NoGradGuard guard;
    auto buffers = net.named_buffers();
    std::vector<T> saved;
    for (auto& [name, bn] : buffers) {
        saved.push_back(bn->momentum);
        std::fill(bn->running_mean.begin(), bn->running_mean.end(), T(0));
        std::fill(bn->running_var.begin(), bn->running_var.end(), T(1));
    }
    const std::size_t n = std::min(limit, set.size());
    std::vector<std::size_t> idx;
    std::size_t k = 0;
    for (std::size_t start = 0; start < n; start += batch, ++k) {
        idx.clear();
        for (std::size_t i = start; i < std::min(n, start + batch); ++i) {
            idx.push_back(i);
        }
        for (auto& [name, bn] : buffers) {
            bn->momentum = static_cast<T>(1.0 / static_cast<double>(k + 1));
        }
        net.forward(make_batch<T>(set, idx, net.config()), true);
    }
    for (std::size_t i = 0; i < buffers.size(); ++i) {
        buffers[i].second->momentum = saved[i];
    }
}

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::uint64_t steps = 0;
};

template <class T>
TrainingState<T> make_training_state(const NetConfig& net, const TrainConfig& cfg, std::span<const double> train_ages) {
    TrainingState<T> s{SpineAgeNet<T>(net, derive_seed(cfg.seed, 0)), {}, {}, Rng(derive_seed(cfg.seed, 1)), 0,
                       TargetScaler::fit(train_ages), 0};
    s.adam.lr = cfg.lr;
    s.scheduler.lr = cfg.lr;
    s.scheduler.factor = cfg.plateau_factor;
    s.scheduler.patience = cfg.plateau_patience;
    Fnv1a h;
    h.update_u64(net.hash());
    h.update_u64(static_cast<std::uint64_t>(cfg.loss));
    h.update_u64(static_cast<std::uint64_t>(cfg.epochs));
    h.update_u64(static_cast<std::uint64_t>(cfg.batch_size));
    h.update(&cfg.lr, sizeof cfg.lr);
    h.update_u64(cfg.seed);
    s.config_hash = h.digest();
    return s;
}

/**
 * Mini-batch Adam with reduce-on-plateau on the validation loss. Training
 * order is reshuffled every epoch from the state's RNG. On return the state
 * holds the final epoch's optimizer state and the network holds the
 * best-validation weights.
 */
template <class T>
TrainResult train(TrainingState<T>& state, const VolumeSet& train_set, const VolumeSet& val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
    cfg.validate();
    if (train_set.size() == 0) {
        throw ValidationError("train: empty training split");
    }
    if (val_set.size() == 0) {
        throw ValidationError("train: empty validation split");
    }
    TrainResult result;
    auto& net = state.net;
    auto params = net.parameters();
    SpineAgeNet<T> best = net.clone();
    std::vector<std::size_t> order(train_set.size());
    std::vector<T> y;
    while (state.epoch < cfg.epochs) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        state.rng.shuffle(order.begin(), order.end());
        double train_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            auto x = make_batch<T>(train_set, idx, net.config());
            y.clear();
            for (auto i : idx) {
                y.push_back(static_cast<T>(state.scaler.to_target(train_set.ages[i])));
            }
            auto out = net.forward(x, true);
            auto loss = loss_fn(cfg.loss, out, ag::Tensor<T>({idx.size(), 1}, y));
            loss.backward();
            ag::adam_step<T>(params, state.adam);
            net.zero_grad();
            ++result.steps;
            train_total += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        }
        ++state.epoch;
        EpochLog e;
        e.epoch = state.epoch;
        e.lr = state.adam.lr;
        e.train_loss = train_total / static_cast<double>(train_set.size());
        if (cfg.bn_recalibration > 0) {
            recalibrate_batchnorm(net, train_set, cfg.bn_recalibration, cfg.batch_size);
        }
        e.val_loss = evaluate_loss(net, val_set, state.scaler, cfg.loss);
        if (e.val_loss < result.best_val_loss) {
            result.best_val_loss = e.val_loss;
            result.best_epoch = e.epoch;
            best.copy_from(net);
        }
        state.scheduler.step(e.val_loss);
        state.adam.lr = state.scheduler.lr;
        result.log.push_back(e);
        if (on_epoch) {
            on_epoch(e);
        }
    }
    net.copy_from(best);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'P', 'A', 'G', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr std::uint32_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 1u : 2u;
}

namespace detail {

template <class T>
void put_values(ByteWriter& w, std::span<const T> v) {
    w.put<std::uint64_t>(v.size());
    w.put_bytes(v.data(), v.size() * sizeof(T));
}

template <class T>
std::vector<T> get_values(ByteReader& r) {
    const auto n = r.get<std::uint64_t>();
    if (n > r.remaining() / sizeof(T)) {
        throw FormatError("checkpoint: truncated input");
    }
    std::vector<T> v(n);
    r.get_bytes(v.data(), n * sizeof(T));
    return v;
}

} // namespace detail

/**
 * Layout (little-endian): magic[8], version u32, dtype u32, config hash u64,
 * epoch u64, net config, target scaler; a block directory of named tensors
 * (name, rank, dims, values) covering parameters then batch-norm running
 * statistics; Adam state; scheduler state; RNG state; FNV-1a of everything
 * before it.
 */
template <class T>
std::string encode_checkpoint(TrainingState<T>& s) {
    ByteWriter w;
    w.put_bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(dtype_code<T>());
    w.put<std::uint64_t>(s.config_hash);
    w.put<std::uint64_t>(s.epoch);
    const NetConfig& c = s.net.config();
    for (auto width : c.widths) {
        w.put<std::uint64_t>(width);
    }
    w.put<std::uint64_t>(c.top_width);
    w.put<std::uint64_t>(c.kernel);
    w.put<std::uint64_t>(c.depth);
    w.put<std::uint64_t>(c.height);
    w.put<std::uint64_t>(c.width);
    w.put<double>(s.scaler.mean);
    w.put<double>(s.scaler.sd);

    const auto params = s.net.named_parameters();
    auto buffers = s.net.named_buffers();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + 2 * buffers.size()));
    for (const auto& [name, t] : params) {
        w.put_string(name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) {
            w.put<std::uint64_t>(d);
        }
        detail::put_values<T>(w, t.data());
    }
    for (const auto& [name, bn] : buffers) {
        for (int which = 0; which < 2; ++which) {
            const auto& v = which == 0 ? bn->running_mean : bn->running_var;
            w.put_string(name + (which == 0 ? ".running_mean" : ".running_var"));
            w.put<std::uint32_t>(1);
            w.put<std::uint64_t>(v.size());
            detail::put_values<T>(w, v);
        }
    }

    w.put<double>(s.adam.lr);
    w.put<double>(s.adam.beta1);
    w.put<double>(s.adam.beta2);
    w.put<double>(s.adam.eps);
    w.put<std::uint64_t>(s.adam.step);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.adam.m.size()));
    for (std::size_t i = 0; i < s.adam.m.size(); ++i) {
        detail::put_values<T>(w, s.adam.m[i]);
        detail::put_values<T>(w, s.adam.v[i]);
    }

    w.put<double>(s.scheduler.lr);
    w.put<double>(s.scheduler.factor);
    w.put<std::int32_t>(s.scheduler.patience);
    w.put<double>(s.scheduler.min_lr);
    w.put<double>(s.scheduler.best);
    w.put<std::int32_t>(s.scheduler.bad_epochs);

    w.put_string(s.rng.state());
    Fnv1a h;
    h.update(w.bytes());
    w.put<std::uint64_t>(h.digest());
    return w.bytes();
}

template <class T>
TrainingState<T> decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() + 8) {
        throw FormatError("checkpoint: truncated input");
    }
    if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
        throw FormatError("checkpoint: bad magic");
    }
    ByteReader r(bytes);
    r.skip(kCheckpointMagic.size());
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    if (r.get<std::uint32_t>() != dtype_code<T>()) {
        throw FormatError("checkpoint: scalar type mismatch");
    }
    {
        if (bytes.size() < 8) {
            throw FormatError("checkpoint: truncated input");
        }
        Fnv1a h;
        h.update(bytes.substr(0, bytes.size() - 8));
        std::uint64_t stored = 0;
        std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
        if (stored != h.digest()) {
            throw FormatError("checkpoint: checksum mismatch (truncated or corrupted)");
        }
    }
    TrainingState<T> s;
    s.config_hash = r.get<std::uint64_t>();
    s.epoch = r.get<std::uint64_t>();
    NetConfig c;
    for (auto& width : c.widths) {
        width = r.get<std::uint64_t>();
    }
    c.top_width = r.get<std::uint64_t>();
    c.kernel = r.get<std::uint64_t>();
    c.depth = r.get<std::uint64_t>();
    c.height = r.get<std::uint64_t>();
    c.width = r.get<std::uint64_t>();
    s.scaler.mean = r.get<double>();
    s.scaler.sd = r.get<double>();
    s.net = SpineAgeNet<T>(c, 0);

    auto params = s.net.named_parameters();
    auto buffers = s.net.named_buffers();
    const auto blocks = r.get<std::uint32_t>();
    if (blocks != params.size() + 2 * buffers.size()) {
        throw FormatError("checkpoint: block count " + std::to_string(blocks) + " does not match the network");
    }
    auto read_block = [&](const std::string& expected, std::span<T> dst, const ag::Shape& shape) {
        const auto got = r.get_string();
        if (got != expected) {
            throw FormatError("checkpoint: expected block '" + expected + "', found '" + got + "'");
        }
        const auto rank = r.get<std::uint32_t>();
        ag::Shape s_shape(rank);
        for (auto& d : s_shape) {
            d = r.get<std::uint64_t>();
        }
        if (s_shape != shape) {
            throw FormatError("checkpoint: block '" + expected + "' has shape " + ag::shape_str(s_shape) +
                              ", expected " + ag::shape_str(shape));
        }
        const auto values = detail::get_values<T>(r);
        if (values.size() != dst.size()) {
            throw FormatError("checkpoint: block '" + expected + "' length mismatch");
        }
        std::copy(values.begin(), values.end(), dst.begin());
    };
    for (auto& [name, t] : params) {
        read_block(name, t.data(), t.shape());
    }
    for (auto& [name, bn] : buffers) {
        read_block(name + ".running_mean", bn->running_mean, {bn->running_mean.size()});
        read_block(name + ".running_var", bn->running_var, {bn->running_var.size()});
    }

    s.adam.lr = r.get<double>();
    s.adam.beta1 = r.get<double>();
    s.adam.beta2 = r.get<double>();
    s.adam.eps = r.get<double>();
    s.adam.step = r.get<std::uint64_t>();
    const auto moments = r.get<std::uint32_t>();
    if (moments != 0 && moments != params.size()) {
        throw FormatError("checkpoint: optimizer state does not match the network");
    }
    s.adam.m.resize(moments);
    s.adam.v.resize(moments);
    for (std::size_t i = 0; i < moments; ++i) {
        s.adam.m[i] = detail::get_values<T>(r);
        s.adam.v[i] = detail::get_values<T>(r);
    }

    s.scheduler.lr = r.get<double>();
    s.scheduler.factor = r.get<double>();
    s.scheduler.patience = r.get<std::int32_t>();
    s.scheduler.min_lr = r.get<double>();
    s.scheduler.best = r.get<double>();
    s.scheduler.bad_epochs = r.get<std::int32_t>();
    s.rng.set_state(r.get_string());
    r.get<std::uint64_t>();
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: trailing bytes");
    }
    return s;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, TrainingState<T>& s) {
    write_atomic(path, encode_checkpoint(s));
}

template <class T>
TrainingState<T> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint<T>(read_file(path));
}

// ---------------------------------------------------------------------------
// Grad-CAM

/// Heatmap over the input's mid-depth slice, row-major [height][width], values in [0, 1].
struct GradCamMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t slice = 0; ///< input depth index the map is drawn on
    int block = 5;
    std::vector<double> heat;

    double at(std::size_t y, std::size_t x) const { return heat[y * width + x]; }
};

inline const double kContrastScale = 288.0;

/// max(ln(288 x), 1) rescaled so that x = 0 maps to 0 and x = 1 maps to 1.
inline double contrast(double x) {
    const double g = x > 0.0 ? std::max(std::log(kContrastScale * x), 1.0) : 1.0;
    return (g - 1.0) / (std::log(kContrastScale) - 1.0);
}

/// Bilinear resize with half-pixel centers (align_corners = false).
inline std::vector<double> bilinear_resize(const std::vector<double>& src, std::size_t sh, std::size_t sw,
                                           std::size_t dh, std::size_t dw) {
    std::vector<double> out(dh * dw);
    const double ry = static_cast<double>(sh) / static_cast<double>(dh);
    const double rx = static_cast<double>(sw) / static_cast<double>(dw);
    for (std::size_t y = 0; y < dh; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * ry - 0.5, 0.0, static_cast<double>(sh - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, sh - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < dw; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * rx - 0.5, 0.0, static_cast<double>(sw - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, sw - 1);
            const double tx = fx - static_cast<double>(x0);
            const double top = src[y0 * sw + x0] * (1 - tx) + src[y0 * sw + x1] * tx;
            const double bot = src[y1 * sw + x0] * (1 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1 - ty) + bot * ty;
        }
    }
    return out;
}

/**
 * Grad-CAM from the block-5 activations for one volume. Channel weights are
 * spatial means of the output gradient; the weighted sum is rectified, taken
 * at the mid-depth slice, min-max normalized, upsampled to the input plane
 * and passed through the contrast map.
 */
template <class T>
GradCamMap gradcam(SpineAgeNet<T>& net, std::span<const float> volume) {
    const NetConfig& c = net.config();
    if (volume.size() != c.voxels()) {
        throw DimensionError("gradcam: volume has " + std::to_string(volume.size()) + " voxels, expected " +
                             std::to_string(c.voxels()));
    }
    std::vector<T> data(volume.begin(), volume.end());
    ag::Tensor<T> x({1, 1, c.depth, c.height, c.width}, std::move(data));
    net.zero_grad();
    auto t = net.trace(x, false);
    ag::sum(t.output).backward();

    const auto& a = t.block5;
    const std::size_t C = a.dim(1), d = a.dim(2), h = a.dim(3), w = a.dim(4);
    const std::size_t plane = h * w, vol = d * plane;
    const auto act = a.data();
    std::vector<T> zeros;
    std::span<const T> grad;
    if (a.has_grad()) {
        grad = std::span<const T>(a.grad());
    } else {
        zeros.assign(a.numel(), T(0));
        grad = zeros;
    }
    const std::size_t mid = d / 2;
    std::vector<double> cam(plane, 0.0);
    for (std::size_t ch = 0; ch < C; ++ch) {
        double weight = 0.0;
        for (std::size_t i = 0; i < vol; ++i) {
            weight += static_cast<double>(grad[ch * vol + i]);
        }
        weight /= static_cast<double>(vol);
        const std::size_t base = ch * vol + mid * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            cam[i] += weight * static_cast<double>(act[base + i]);
        }
    }
    net.zero_grad();

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (auto& v : cam) {
        v = std::max(v, 0.0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    GradCamMap map;
    map.height = c.height;
    map.width = c.width;
    map.slice = c.depth / 2;
    if (!(hi > lo)) {
        log::info("gradcam: no positive evidence at block 5; map is zero");
        map.heat.assign(c.height * c.width, 0.0);
        return map;
    }
    for (auto& v : cam) {
        v = (v - lo) / (hi - lo);
    }
    map.heat = bilinear_resize(cam, h, w, c.height, c.width);
    for (auto& v : map.heat) {
        v = contrast(std::clamp(v, 0.0, 1.0));
    }
    return map;
}

inline std::string gradcam_csv(const GradCamMap& m) {
    std::ostringstream os;
    os << "y,x,heat\n";
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x) {
            os << y << ',' << x << ',' << fmt_double(m.at(y, x)) << '\n';
        }
    }
    return os.str();
}

inline std::string gradcam_pgm(const GradCamMap& m) { return encode_pgm(m.width, m.height, m.heat); }

} // namespace spineage

#endif
