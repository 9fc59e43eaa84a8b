#pragma once

// Small fully connected networks evaluated on batches (one column per sample),
// with exact backpropagation, plus positional encoding and Adam.

#include "hfsplat/binary_io.hpp"
#include "hfsplat/common.hpp"

#include <numbers>
#include <random>

namespace hfsplat {

/// gamma(x) = [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x)],
/// each block holding all three components. Length 3 + 6 n.
inline VecX posenc(const Vec3& x, int n_freq) {
    require(n_freq >= 0, "posenc: n_freq must be >= 0");
    VecX out(3 + 6 * n_freq);
    out.head<3>() = x;
    double f = std::numbers::pi;
    for (int k = 0; k < n_freq; ++k, f *= 2.0)
        for (int a = 0; a < 3; ++a) {
            out[3 + 6 * k + a] = std::sin(f * x[a]);
            out[3 + 6 * k + 3 + a] = std::cos(f * x[a]);
        }
    return out;
}

inline constexpr int posenc_size(int n_freq) { return 3 + 6 * n_freq; }

struct MlpConfig {
    std::vector<int> widths;  // {in, hidden..., out}; in = row_dim + shared_dim
    int shared_dim = 0;       // trailing input entries shared by all rows of a batch
    bool layer_norm = true;
    int skip_layer = -1;      // linear layer that also receives the raw input; -1 disables
    bool zero_init_last = true;
    double slope = 0.01;

    [[nodiscard]] int in_dim() const { return widths.front(); }
    [[nodiscard]] int out_dim() const { return widths.back(); }
    [[nodiscard]] int row_dim() const { return widths.front() - shared_dim; }
    [[nodiscard]] int num_layers() const { return static_cast<int>(widths.size()) - 1; }

    /// `layers` linear layers of `hidden` width with the skip into layer layers/2.
    static MlpConfig standard(int row_dim, int shared_dim, int hidden, int layers, int out_dim) {
        require(layers >= 2, "MlpConfig: at least two layers");
        MlpConfig c;
        c.widths.push_back(row_dim + shared_dim);
        for (int l = 0; l < layers - 1; ++l) c.widths.push_back(hidden);
        c.widths.push_back(out_dim);
        c.shared_dim = shared_dim;
        c.skip_layer = layers / 2;
        return c;
    }
};

struct MlpGrad {
    std::vector<MatX> weight;
    std::vector<VecX> bias;
};

class Mlp {
public:
    Mlp() = default;
    Mlp(MlpConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        require(cfg_.widths.size() >= 2, "Mlp: need at least one layer");
        require(cfg_.shared_dim >= 0 && cfg_.shared_dim <= cfg_.in_dim(), "Mlp: bad shared_dim");
        require(cfg_.skip_layer < cfg_.num_layers(), "Mlp: skip layer out of range");
        std::mt19937_64 rng(seed);
        const int nl = cfg_.num_layers();
        weight_.resize(static_cast<std::size_t>(nl));
        bias_.resize(static_cast<std::size_t>(nl));
        for (int l = 0; l < nl; ++l) {
            const int fan_in = layer_in(l);
            const int fan_out = cfg_.widths[static_cast<std::size_t>(l) + 1];
            MatX& w = weight_[static_cast<std::size_t>(l)];
            w.resize(fan_out, fan_in);
            bias_[static_cast<std::size_t>(l)] = VecX::Zero(fan_out);
            if (l == nl - 1 && cfg_.zero_init_last) {
                w.setZero();
                continue;
            }
            std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
            for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = n(rng);
        }
    }

    [[nodiscard]] const MlpConfig& config() const { return cfg_; }
    [[nodiscard]] std::vector<MatX>& weights() { return weight_; }
    [[nodiscard]] std::vector<VecX>& biases() { return bias_; }
    [[nodiscard]] const std::vector<MatX>& weights() const { return weight_; }
    [[nodiscard]] const std::vector<VecX>& biases() const { return bias_; }

    [[nodiscard]] MlpGrad zero_grad() const {
        MlpGrad g;
        for (const auto& w : weight_) g.weight.push_back(MatX::Zero(w.rows(), w.cols()));
        for (const auto& b : bias_) g.bias.push_back(VecX::Zero(b.size()));
        return g;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weight_.size(); ++l)
            n += static_cast<std::size_t>(weight_[l].size() + bias_[l].size());
        return n;
    }

    struct Cache {
        MatX rows;
        VecX shared;
        std::vector<MatX> input;   // per layer: the row part of its input (hidden or hidden+raw rows)
        std::vector<MatX> normed;  // layer-normalized pre-activations (hidden layers)
        std::vector<VecX> inv_std;
        std::vector<MatX> pre;     // pre-activations (hidden layers, before activation)
    };

    /// rows: row_dim x N, shared: shared_dim. Returns out_dim x N.
    MatX forward(const MatX& rows, const VecX& shared, Cache* cache = nullptr) const {
        if (rows.rows() != cfg_.row_dim() || shared.size() != cfg_.shared_dim)
            throw ContractViolation("Mlp::forward: input has " + std::to_string(rows.rows()) + "+" +
                                    std::to_string(shared.size()) + " entries, expected " +
                                    std::to_string(cfg_.row_dim()) + "+" + std::to_string(cfg_.shared_dim));
        const int nl = cfg_.num_layers();
        const Eigen::Index n = rows.cols();
        if (cache) {
            cache->rows = rows;
            cache->shared = shared;
            cache->input.assign(static_cast<std::size_t>(nl), {});
            cache->normed.assign(static_cast<std::size_t>(nl), {});
            cache->inv_std.assign(static_cast<std::size_t>(nl), {});
            cache->pre.assign(static_cast<std::size_t>(nl), {});
        }
        MatX h;
        for (int l = 0; l < nl; ++l) {
            const auto li = static_cast<std::size_t>(l);
            const MatX& w = weight_[li];
            const int rd = cfg_.row_dim();
            MatX z;
            VecX shared_part = bias_[li];
            if (l == 0) {
                z = w.leftCols(rd) * rows;
                if (cfg_.shared_dim > 0) shared_part += w.rightCols(cfg_.shared_dim) * shared;
                if (cache) cache->input[li] = rows;
            } else if (l == cfg_.skip_layer) {
                const Eigen::Index hd = h.rows();
                z = w.leftCols(hd) * h + w.middleCols(hd, rd) * rows;
                if (cfg_.shared_dim > 0) shared_part += w.rightCols(cfg_.shared_dim) * shared;
                if (cache) cache->input[li] = h;
            } else {
                z = w * h;
                if (cache) cache->input[li] = h;
            }
            z.colwise() += shared_part;
            if (l == nl - 1) return z;
            if (cfg_.layer_norm) {
                const Eigen::RowVectorXd mean = z.colwise().mean();
                z.rowwise() -= mean;
                const Eigen::RowVectorXd var = z.array().square().colwise().mean();
                VecX inv = (var.array() + kLayerNormEps).rsqrt().transpose();
                for (Eigen::Index c = 0; c < n; ++c) z.col(c) *= inv[c];
                if (cache) {
                    cache->normed[li] = z;
                    cache->inv_std[li] = inv;
                }
            }
            if (cache) cache->pre[li] = z;
            h = z.unaryExpr([s = cfg_.slope](double v) { return v > 0 ? v : s * v; });
        }
        return h;
    }

    [[nodiscard]] VecX forward_one(const VecX& input) const {
        MatX rows = input.head(cfg_.row_dim());
        return forward(rows, input.tail(cfg_.shared_dim)).col(0);
    }

    /// Accumulates weight gradients into `grad`; optionally returns input gradients.
    void backward(const Cache& cache, const MatX& grad_out, MlpGrad& grad, MatX* grad_rows = nullptr,
                  VecX* grad_shared = nullptr) const {
        const int nl = cfg_.num_layers();
        const Eigen::Index n = cache.rows.cols();
        require(grad_out.rows() == cfg_.out_dim() && grad_out.cols() == n, "Mlp::backward: gradient shape");
        require(grad.weight.size() == weight_.size(), "Mlp::backward: gradient buffers not initialized");
        const int rd = cfg_.row_dim(), sd = cfg_.shared_dim;
        MatX g_rows = MatX::Zero(rd, n);
        VecX g_shared = VecX::Zero(sd);
        MatX gz = grad_out;
        for (int l = nl - 1; l >= 0; --l) {
            const auto li = static_cast<std::size_t>(l);
            if (l < nl - 1) {
                // through leaky ReLU then layer norm
                const MatX& pre = cache.pre[li];
                gz.array() *= pre.unaryExpr([s = cfg_.slope](double v) { return v > 0 ? 1.0 : s; }).array();
                if (cfg_.layer_norm) {
                    const MatX& y = cache.normed[li];
                    const Eigen::RowVectorXd mg = gz.colwise().mean();
                    const Eigen::RowVectorXd mgy = (gz.array() * y.array()).colwise().mean();
                    MatX gx = gz;
                    gx.rowwise() -= mg;
                    gx -= y * mgy.asDiagonal();
                    for (Eigen::Index c = 0; c < n; ++c) gx.col(c) *= cache.inv_std[li][c];
                    gz = std::move(gx);
                }
            }
            const MatX& w = weight_[li];
            const VecX gz_sum = gz.rowwise().sum();
            grad.bias[li] += gz_sum;
            const MatX& in = cache.input[li];
            const Eigen::Index cin = in.rows();
            grad.weight[li].leftCols(cin).noalias() += gz * in.transpose();
            const bool takes_raw = l == 0 || l == cfg_.skip_layer;
            if (l == cfg_.skip_layer && l != 0) {
                grad.weight[li].middleCols(cin, rd).noalias() += gz * cache.rows.transpose();
                if (grad_rows) g_rows.noalias() += w.middleCols(cin, rd).transpose() * gz;
            }
            if (takes_raw && sd > 0) {
                grad.weight[li].rightCols(sd).noalias() += gz_sum * cache.shared.transpose();
                if (grad_shared) g_shared.noalias() += w.rightCols(sd).transpose() * gz_sum;
            }
            if (l == 0) {
                if (grad_rows) g_rows.noalias() += w.leftCols(rd).transpose() * gz;
            } else {
                gz = w.leftCols(cin).transpose() * gz;
            }
        }
        if (grad_rows) *grad_rows = std::move(g_rows);
        if (grad_shared) *grad_shared = std::move(g_shared);
    }

    void write(BinaryWriter& out) const {
        out.magic("HFSMLP01", 1);
        out.u32(static_cast<std::uint32_t>(cfg_.widths.size()));
        for (int w : cfg_.widths) out.i32(w);
        out.i32(cfg_.shared_dim);
        out.i32(cfg_.layer_norm ? 1 : 0);
        out.i32(cfg_.skip_layer);
        out.i32(cfg_.zero_init_last ? 1 : 0);
        out.f64(cfg_.slope);
        for (std::size_t l = 0; l < weight_.size(); ++l) {
            out.f64s({weight_[l].data(), static_cast<std::size_t>(weight_[l].size())});
            out.f64s({bias_[l].data(), static_cast<std::size_t>(bias_[l].size())});
        }
    }

    static Mlp read(BinaryReader& in) {
        in.expect_magic("HFSMLP01", 1);
        MlpConfig c;
        const std::uint32_t nw = in.u32();
        if (nw < 2 || nw > 64) throw FormatError(in.context() + ": implausible layer count");
        for (std::uint32_t k = 0; k < nw; ++k) c.widths.push_back(in.i32());
        for (int w : c.widths)
            if (w <= 0 || w > (1 << 20)) throw FormatError(in.context() + ": implausible layer width");
        c.shared_dim = in.i32();
        c.layer_norm = in.i32() != 0;
        c.skip_layer = in.i32();
        c.zero_init_last = in.i32() != 0;
        c.slope = in.f64();
        Mlp m(c, 0);
        for (std::size_t l = 0; l < m.weight_.size(); ++l) {
            in.f64s_into(m.weight_[l].data(), static_cast<std::size_t>(m.weight_[l].size()));
            in.f64s_into(m.bias_[l].data(), static_cast<std::size_t>(m.bias_[l].size()));
        }
        return m;
    }

    bool operator==(const Mlp& o) const {
        if (cfg_.widths != o.cfg_.widths || cfg_.shared_dim != o.cfg_.shared_dim ||
            cfg_.skip_layer != o.cfg_.skip_layer || cfg_.layer_norm != o.cfg_.layer_norm)
            return false;
        for (std::size_t l = 0; l < weight_.size(); ++l)
            if (weight_[l] != o.weight_[l] || bias_[l] != o.bias_[l]) return false;
        return true;
    }

    static constexpr double kLayerNormEps = 1e-5;

private:
    [[nodiscard]] int layer_in(int l) const {
        const int base = cfg_.widths[static_cast<std::size_t>(l)];
        if (l == 0) return base;
        return l == cfg_.skip_layer ? base + cfg_.in_dim() : base;
    }

    MlpConfig cfg_;
    std::vector<MatX> weight_;
    std::vector<VecX> bias_;
};

// ---------------------------------------------------------------------------
// Optimization.

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam moments for one flat parameter block.
struct AdamSlot {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

/// Outcome of a step; non-finite gradients leave parameters and moments untouched.
enum class StepStatus { Applied, SkippedNonFinite };

inline StepStatus adam_step(double* params, const double* grads, std::size_t n, AdamSlot& slot, double lr,
                            const AdamConfig& cfg = {}) {
    for (std::size_t k = 0; k < n; ++k)
        if (!std::isfinite(grads[k])) return StepStatus::SkippedNonFinite;
    if (slot.m.size() != n) {
        slot.m.assign(n, 0.0);
        slot.v.assign(n, 0.0);
        slot.step = 0;
    }
    ++slot.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.step));
    for (std::size_t k = 0; k < n; ++k) {
        slot.m[k] = cfg.beta1 * slot.m[k] + (1.0 - cfg.beta1) * grads[k];
        slot.v[k] = cfg.beta2 * slot.v[k] + (1.0 - cfg.beta2) * grads[k] * grads[k];
        const double mh = slot.m[k] / bc1, vh = slot.v[k] / bc2;
        params[k] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    return StepStatus::Applied;
}

/// Log-linear decay from lr_init to lr_final over max_steps, as used for Gaussian positions.
inline double exponential_lr(double lr_init, double lr_final, std::int64_t step, std::int64_t max_steps) {
    if (max_steps <= 0) return lr_init;
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(max_steps), 0.0, 1.0);
    return std::exp(std::log(lr_init) * (1.0 - t) + std::log(lr_final) * t);
}

inline void write_slot(BinaryWriter& out, const AdamSlot& s) {
    out.u64(s.m.size());
    out.u64(static_cast<std::uint64_t>(s.step));
    out.f64s(s.m);
    out.f64s(s.v);
}

inline AdamSlot read_slot(BinaryReader& in) {
    AdamSlot s;
    const std::uint64_t n = in.u64();
    if (n > (1ull << 32)) throw FormatError(in.context() + ": implausible optimizer slot size");
    s.step = static_cast<std::int64_t>(in.u64());
    s.m.resize(n);
    s.v.resize(n);
    in.f64s_into(s.m.data(), n);
    in.f64s_into(s.v.data(), n);
    return s;
}

}  // namespace hfsplat
