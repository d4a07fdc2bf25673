// Independent reference implementations shared by the unit tests and the acceptance binary.
#ifndef SPINEAGE_TESTS_ORACLES_HPP
#define SPINEAGE_TESTS_ORACLES_HPP

#include "spineage/autograd.hpp"
#include "spineage/clustering.hpp"
#include "spineage/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace oracle {

using spineage::Rng;
namespace ag = spineage::ag;
using TD = ag::Tensor<double>;

inline TD random_tensor(ag::Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> v(ag::numel(shape));
    for (auto& x : v) {
        x = rng.uniform(-scale, scale);
    }
    return TD(std::move(shape), std::move(v), requires_grad);
}

/**
 * Analytic gradients of a scalar function of `inputs` against central
 * differences. Returns max over inputs of ||g_analytic - g_numeric||_inf
 * divided by max(||g_analytic||_inf, ||g_numeric||_inf, 1e-4). The floor
 * keeps identically-zero gradients (a conv bias ahead of a training-mode
 * batch norm) from dividing finite-difference noise by zero.
 */
inline double gradient_error(std::vector<TD>& inputs, const std::function<TD(std::vector<TD>&)>& f, double h = 1e-5) {
    for (auto& t : inputs) {
        t.zero_grad();
    }
    f(inputs).backward();
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.numel(), 0.0));
    }
    ag::NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) {
            continue;
        }
        auto data = inputs[k].data();
        double diff = 0.0, scale = 1e-4;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + h;
            const double fp = f(inputs).item();
            data[i] = keep - h;
            const double fm = f(inputs).item();
            data[i] = keep;
            const double num = (fp - fm) / (2.0 * h);
            diff = std::max(diff, std::abs(num - analytic[k][i]));
            scale = std::max({scale, std::abs(num), std::abs(analytic[k][i])});
        }
        worst = std::max(worst, diff / scale);
    }
    return worst;
}

/// Scalar reduction with fixed random weights so every output element gets a distinct upstream gradient.
inline TD project(const TD& y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor(y.shape(), rng, false);
    return ag::sum(ag::mul(y, w));
}

struct GradCase {
    std::string op;
    std::uint64_t seed;
    double error;
};

/**
 * Every differentiable op over `seeds` random shapes and values.
 * Shapes are small so the whole suite runs in seconds.
 */
inline std::vector<GradCase> gradient_suite(std::size_t seeds = 20) {
    std::vector<GradCase> out;
    auto run = [&](const std::string& op, std::uint64_t seed, std::vector<TD> in,
                   const std::function<TD(std::vector<TD>&)>& f) {
        out.push_back({op, seed, gradient_error(in, f)});
    };
    for (std::uint64_t s = 1; s <= seeds; ++s) {
        Rng rng(spineage::derive_seed(1234, s));
        auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); };
        const ag::Shape flat{dim(1, 3), dim(1, 4), dim(1, 5)};

        run("add", s, {random_tensor(flat, rng), random_tensor(flat, rng)},
            [s](auto& v) { return project(ag::add(v[0], v[1]), s); });
        run("mul", s, {random_tensor(flat, rng), random_tensor(flat, rng)},
            [s](auto& v) { return project(ag::mul(v[0], v[1]), s); });
        const double c = rng.uniform(-2.0, 2.0);
        run("scale", s, {random_tensor(flat, rng)}, [s, c](auto& v) { return project(ag::scale(v[0], c), s); });
        run("sum", s, {random_tensor(flat, rng)}, [](auto& v) { return ag::sum(v[0]); });
        run("reshape", s, {random_tensor(flat, rng)},
            [s](auto& v) { return project(ag::reshape(v[0], ag::Shape{v[0].numel()}), s); });
        run("relu", s, {random_tensor(flat, rng)}, [s](auto& v) { return project(ag::relu(v[0]), s); });

        const std::size_t N = dim(1, 2), Ci = dim(1, 3), Co = dim(1, 3);
        const ag::Shape vol{N, Ci, dim(1, 4), dim(1, 4), dim(1, 5)};
        run("conv3d", s, {random_tensor(vol, rng), random_tensor({Co, Ci, 3, 3, 3}, rng), random_tensor({Co}, rng)},
            [s](auto& v) { return project(ag::conv3d(v[0], v[1], v[2]), s); });

        const ag::Shape bn_shape{dim(2, 3), Ci, dim(1, 3), dim(1, 3), dim(1, 3)};
        run("batchnorm3d_train", s,
            {random_tensor(bn_shape, rng), random_tensor({Ci}, rng), random_tensor({Ci}, rng)}, [s, Ci](auto& v) {
                ag::BatchNormState<double> st(Ci);
                return project(ag::batchnorm3d(v[0], v[1], v[2], st, true), s);
            });
        ag::BatchNormState<double> eval_state(Ci);
        for (std::size_t k = 0; k < Ci; ++k) {
            eval_state.running_mean[k] = rng.uniform(-1.0, 1.0);
            eval_state.running_var[k] = rng.uniform(0.5, 2.0);
        }
        run("batchnorm3d_eval", s,
            {random_tensor(bn_shape, rng), random_tensor({Ci}, rng), random_tensor({Ci}, rng)},
            [s, eval_state](auto& v) {
                auto st = eval_state;
                return project(ag::batchnorm3d(v[0], v[1], v[2], st, false), s);
            });

        const ag::Shape pool_shape{N, Ci, dim(1, 5), dim(2, 5), dim(2, 6)};
        run("maxpool3d", s, {random_tensor(pool_shape, rng)}, [s](auto& v) { return project(ag::maxpool3d(v[0]), s); });
        run("global_maxpool3d", s, {random_tensor(pool_shape, rng)},
            [s](auto& v) { return project(ag::global_maxpool3d(v[0]), s); });

        const std::size_t F = dim(1, 8);
        run("linear", s, {random_tensor({N, F}, rng), random_tensor({1, F}, rng), random_tensor({1}, rng)},
            [s](auto& v) { return project(ag::linear(v[0], v[1], v[2]), s); });

        const ag::Shape loss_shape{dim(1, 4), 1};
        run("mse_loss", s, {random_tensor(loss_shape, rng, true, 3.0), random_tensor(loss_shape, rng, true, 3.0)},
            [](auto& v) { return ag::mse_loss(v[0], v[1]); });
        run("smooth_l1_loss", s,
            {random_tensor(loss_shape, rng, true, 3.0), random_tensor(loss_shape, rng, true, 3.0)},
            [](auto& v) { return ag::smooth_l1_loss(v[0], v[1]); });

        // A whole block: conv -> batch norm -> relu -> pool -> global pool -> linear -> loss.
        const std::size_t C1 = dim(1, 3);
        run("block_chain", s,
            {random_tensor({2, 1, dim(2, 4), dim(2, 4), dim(2, 4)}, rng), random_tensor({C1, 1, 3, 3, 3}, rng),
             random_tensor({C1}, rng), random_tensor({C1}, rng), random_tensor({C1}, rng),
             random_tensor({1, C1}, rng), random_tensor({1}, rng), random_tensor({2, 1}, rng, false)},
            [C1](auto& v) {
                ag::BatchNormState<double> st(C1);
                auto h = ag::relu(ag::batchnorm3d(ag::conv3d(v[0], v[1], v[2]), v[3], v[4], st, true));
                auto y = ag::linear(ag::global_maxpool3d(ag::maxpool3d(h)), v[5], v[6]);
                return ag::mse_loss(y, v[7]);
            });
    }
    return out;
}

/**
 * Naive agglomerative single linkage over a full distance matrix, O(n^3).
 * Returns the merge heights in the order they occur.
 */
inline std::vector<double> single_linkage_heights(std::vector<std::vector<double>> d) {
    const std::size_t n = d.size();
    std::vector<bool> alive(n, true);
    std::vector<double> heights;
    for (std::size_t step = 1; step < n; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (alive[i] && alive[j] && d[i][j] < best) {
                    best = d[i][j];
                    bi = i;
                    bj = j;
                }
            }
        }
        heights.push_back(best);
        for (std::size_t k = 0; k < n; ++k) {
            d[bi][k] = d[k][bi] = std::min(d[bi][k], d[bj][k]);
        }
        alive[bj] = false;
    }
    return heights;
}

/// Mutual reachability matrix with core distances from a full sort of each row.
inline std::vector<std::vector<double>> mutual_reachability_matrix(const std::vector<spineage::hdbscan::Point2>& p,
                                                                   std::size_t min_samples) {
    const std::size_t n = p.size();
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double dx = p[i][0] - p[j][0], dy = p[i][1] - p[j][1];
            d[i][j] = std::sqrt(dx * dx + dy * dy);
        }
    }
    std::vector<double> core(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = d[i];
        row.erase(row.begin() + static_cast<std::ptrdiff_t>(i));
        std::sort(row.begin(), row.end());
        core[i] = row[min_samples - 1];
    }
    auto m = d;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            m[i][j] = i == j ? 0.0 : std::max({core[i], core[j], d[i][j]});
        }
    }
    return m;
}

/// Two Gaussian blobs of `per` points, sd 1, centers `gap` apart; labels 0/1.
inline std::vector<spineage::hdbscan::Point2> two_blobs(std::size_t per, double gap, std::uint64_t seed,
                                                        std::vector<int>* labels = nullptr) {
    Rng rng(seed);
    std::vector<spineage::hdbscan::Point2> pts;
    for (int b = 0; b < 2; ++b) {
        for (std::size_t i = 0; i < per; ++i) {
            pts.push_back({b * gap + rng.normal(), rng.normal()});
            if (labels) {
                labels->push_back(b);
            }
        }
    }
    return pts;
}

/// Fraction of points whose cluster disagrees with the majority cluster of their true group.
inline std::size_t mislabeled(const std::vector<int>& truth, const std::vector<int>& found) {
    std::size_t bad = 0;
    for (int g = 0; g < 2; ++g) {
        std::vector<int> members;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] == g) {
                members.push_back(found[i]);
            }
        }
        std::vector<int> sorted = members;
        std::sort(sorted.begin(), sorted.end());
        int mode = sorted.front(), best = 0;
        for (std::size_t i = 0; i < sorted.size();) {
            std::size_t j = i;
            while (j < sorted.size() && sorted[j] == sorted[i]) {
                ++j;
            }
            if (static_cast<int>(j - i) > best) {
                best = static_cast<int>(j - i);
                mode = sorted[i];
            }
            i = j;
        }
        for (int m : members) {
            bad += (m != mode || m == spineage::hdbscan::kNoise) ? 1 : 0;
        }
    }
    return bad;
}

} // namespace oracle

#endif
