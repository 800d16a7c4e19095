#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "memseg/errors.hpp"
#include "memseg/raster.hpp"

namespace memseg {

struct SegmenterConfig {
    int patch_size = 8;
    int embed_dim = 64;
    int layers = 2;
    int heads = 4;
    int classes = 2;  // food classes; the output adds one background channel
    int mlp_ratio = 4;
    std::uint64_t seed = 0;

    int patch_dim() const { return patch_size * patch_size * 3; }
    int class_channels() const { return classes + 1; }
    int hidden_dim() const { return mlp_ratio * embed_dim; }

    void validate() const {
        if (patch_size < 1) throw ValueError("patch_size must be >= 1");
        if (layers < 1) throw ValueError("layers must be >= 1");
        if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
            throw ValueError("embed_dim must be a positive multiple of heads");
        if (classes < 1) throw ValueError("classes must be >= 1");
        if (mlp_ratio < 1) throw ValueError("mlp_ratio must be >= 1");
    }

    bool operator==(const SegmenterConfig& o) const = default;
};

/// One pre-norm encoder block. Attention projections carry no biases.
struct EncoderLayerWeights {
    Eigen::VectorXd ln1_scale, ln1_shift;
    Eigen::MatrixXd w_q, w_k, w_v, w_o;  // D x D
    Eigen::VectorXd ln2_scale, ln2_shift;
    Eigen::MatrixXd w_mlp1;  // (mlp_ratio*D) x D
    Eigen::VectorXd b_mlp1;
    Eigen::MatrixXd w_mlp2;  // D x (mlp_ratio*D)
    Eigen::VectorXd b_mlp2;
};

struct SegmenterWeights {
    SegmenterConfig config;
    Eigen::MatrixXd patch_proj;  // D x (P*P*3)
    Eigen::VectorXd patch_bias;  // D
    int pos_grid_w = 0, pos_grid_h = 0;
    Eigen::MatrixXd pos;  // (pos_grid_w*pos_grid_h) x D, row-major grid order
    std::vector<EncoderLayerWeights> layers;
    Eigen::MatrixXd class_proj;  // (classes+1) x D
    Eigen::VectorXd class_bias;  // classes+1
};

/// Tokens are rows; dim is D for embeddings and classes+1 after decoding.
struct PatchSequence {
    int grid_w = 0, grid_h = 0;
    Eigen::MatrixXd tokens;  // (grid_w*grid_h) x dim
};

// Serialization, gradients and momentum all walk tensors in this order.
// Keep the two visitors in sync.
template <class W, class F>
void for_each_tensor(W& w, F&& f) {
    f(w.patch_proj);
    f(w.patch_bias);
    f(w.pos);
    for (auto& l : w.layers) {
        f(l.ln1_scale);
        f(l.ln1_shift);
        f(l.w_q);
        f(l.w_k);
        f(l.w_v);
        f(l.w_o);
        f(l.ln2_scale);
        f(l.ln2_shift);
        f(l.w_mlp1);
        f(l.b_mlp1);
        f(l.w_mlp2);
        f(l.b_mlp2);
    }
    f(w.class_proj);
    f(w.class_bias);
}

template <class W, class F>
void for_each_tensor(W& a, W& b, W& c, F&& f) {
    f(a.patch_proj, b.patch_proj, c.patch_proj);
    f(a.patch_bias, b.patch_bias, c.patch_bias);
    f(a.pos, b.pos, c.pos);
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        auto &la = a.layers[i], &lb = b.layers[i], &lc = c.layers[i];
        f(la.ln1_scale, lb.ln1_scale, lc.ln1_scale);
        f(la.ln1_shift, lb.ln1_shift, lc.ln1_shift);
        f(la.w_q, lb.w_q, lc.w_q);
        f(la.w_k, lb.w_k, lc.w_k);
        f(la.w_v, lb.w_v, lc.w_v);
        f(la.w_o, lb.w_o, lc.w_o);
        f(la.ln2_scale, lb.ln2_scale, lc.ln2_scale);
        f(la.ln2_shift, lb.ln2_shift, lc.ln2_shift);
        f(la.w_mlp1, lb.w_mlp1, lc.w_mlp1);
        f(la.b_mlp1, lb.b_mlp1, lc.b_mlp1);
        f(la.w_mlp2, lb.w_mlp2, lc.w_mlp2);
        f(la.b_mlp2, lb.b_mlp2, lc.b_mlp2);
    }
    f(a.class_proj, b.class_proj, c.class_proj);
    f(a.class_bias, b.class_bias, c.class_bias);
}

namespace detail {

constexpr double kLayerNormEps = 1e-5;

/// Deterministic scalar source over a seeded engine. Distribution code is
/// hand-rolled so streams are identical across standard libraries.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : gen_(seed) {}

    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        const double u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline void fill_xavier(Eigen::MatrixXd& m, int fan_in, int fan_out, RandomSource& rng) {
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-s, s);
}

/// Allocates every tensor at the dimensions implied by config and grid; all zero.
inline SegmenterWeights make_weight_shell(const SegmenterConfig& cfg, int grid_w, int grid_h) {
    cfg.validate();
    if (grid_w < 1 || grid_h < 1) throw DimensionError("positional grid dims must be >= 1");
    const int d = cfg.embed_dim, hd = cfg.hidden_dim();
    SegmenterWeights w;
    w.config = cfg;
    w.patch_proj = Eigen::MatrixXd::Zero(d, cfg.patch_dim());
    w.patch_bias = Eigen::VectorXd::Zero(d);
    w.pos_grid_w = grid_w;
    w.pos_grid_h = grid_h;
    w.pos = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid_w) * grid_h, d);
    w.layers.resize(cfg.layers);
    for (auto& l : w.layers) {
        l.ln1_scale = Eigen::VectorXd::Zero(d);
        l.ln1_shift = Eigen::VectorXd::Zero(d);
        l.w_q = Eigen::MatrixXd::Zero(d, d);
        l.w_k = Eigen::MatrixXd::Zero(d, d);
        l.w_v = Eigen::MatrixXd::Zero(d, d);
        l.w_o = Eigen::MatrixXd::Zero(d, d);
        l.ln2_scale = Eigen::VectorXd::Zero(d);
        l.ln2_shift = Eigen::VectorXd::Zero(d);
        l.w_mlp1 = Eigen::MatrixXd::Zero(hd, d);
        l.b_mlp1 = Eigen::VectorXd::Zero(hd);
        l.w_mlp2 = Eigen::MatrixXd::Zero(d, hd);
        l.b_mlp2 = Eigen::VectorXd::Zero(d);
    }
    w.class_proj = Eigen::MatrixXd::Zero(cfg.class_channels(), d);
    w.class_bias = Eigen::VectorXd::Zero(cfg.class_channels());
    return w;
}

inline SegmenterWeights zeros_like(const SegmenterWeights& w) {
    return make_weight_shell(w.config, w.pos_grid_w, w.pos_grid_h);
}

/// Row-wise layer norm. Returns normalized rows; optionally exposes the
/// per-row inverse stddev and the pre-scale normalized values for backprop.
inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& scale,
                                  const Eigen::VectorXd& shift, Eigen::MatrixXd* xhat_out,
                                  Eigen::VectorXd* inv_out) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Eigen::MatrixXd y(n, d);
    Eigen::MatrixXd xhat(n, d);
    Eigen::VectorXd inv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().mean();
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv(i) = is;
        xhat.row(i).array() = (x.row(i).array() - mean) * is;
        y.row(i) = xhat.row(i).cwiseProduct(scale.transpose()) + shift.transpose();
    }
    if (xhat_out) *xhat_out = std::move(xhat);
    if (inv_out) *inv_out = std::move(inv);
    return y;
}

inline void softmax_rows(Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        m.row(i).array() = (m.row(i).array() - mx).exp();
        m.row(i) /= m.row(i).sum();
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) +
           x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

struct LayerCache {
    Eigen::MatrixXd z_in;
    Eigen::MatrixXd xhat1;
    Eigen::VectorXd inv1;
    Eigen::MatrixXd ln1;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per head, post-softmax, N x N
    Eigen::MatrixXd concat;             // heads reassembled, before w_o
    Eigen::MatrixXd z_mid;
    Eigen::MatrixXd xhat2;
    Eigen::VectorXd inv2;
    Eigen::MatrixXd ln2;
    Eigen::MatrixXd mlp_pre, mlp_act;
};

/// z <- z + MHSA(LN(z)); z <- z + MLP(LN(z)). Cache is optional.
inline Eigen::MatrixXd encoder_layer_forward(const Eigen::MatrixXd& z,
                                             const EncoderLayerWeights& lw, int heads,
                                             LayerCache* cache) {
    const Eigen::Index n = z.rows(), d = z.cols();
    const Eigen::Index dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Eigen::MatrixXd xhat1, ln1;
    Eigen::VectorXd inv1;
    ln1 = layer_norm(z, lw.ln1_scale, lw.ln1_shift, cache ? &xhat1 : nullptr,
                     cache ? &inv1 : nullptr);
    const Eigen::MatrixXd q = ln1 * lw.w_q.transpose();
    const Eigen::MatrixXd k = ln1 * lw.w_k.transpose();
    const Eigen::MatrixXd v = ln1 * lw.w_v.transpose();

    Eigen::MatrixXd concat(n, d);
    std::vector<Eigen::MatrixXd> attn;
    if (cache) attn.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        const auto qh = q.middleCols(h * dh, dh);
        const auto kh = k.middleCols(h * dh, dh);
        const auto vh = v.middleCols(h * dh, dh);
        Eigen::MatrixXd a = qh * kh.transpose() * inv_scale;
        softmax_rows(a);
        concat.middleCols(h * dh, dh) = a * vh;
        if (cache) attn.push_back(std::move(a));
    }
    const Eigen::MatrixXd z_mid = z + concat * lw.w_o.transpose();

    Eigen::MatrixXd xhat2, ln2;
    Eigen::VectorXd inv2;
    ln2 = layer_norm(z_mid, lw.ln2_scale, lw.ln2_shift, cache ? &xhat2 : nullptr,
                     cache ? &inv2 : nullptr);
    Eigen::MatrixXd pre = ln2 * lw.w_mlp1.transpose();
    pre.rowwise() += lw.b_mlp1.transpose();
    const Eigen::MatrixXd act = pre.unaryExpr([](double x) { return gelu(x); });
    Eigen::MatrixXd out = act * lw.w_mlp2.transpose();
    out.rowwise() += lw.b_mlp2.transpose();
    Eigen::MatrixXd z_out = z_mid + out;

    if (cache) {
        cache->z_in = z;
        cache->xhat1 = std::move(xhat1);
        cache->inv1 = std::move(inv1);
        cache->ln1 = std::move(ln1);
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->attn = std::move(attn);
        cache->concat = std::move(concat);
        cache->z_mid = z_mid;
        cache->xhat2 = std::move(xhat2);
        cache->inv2 = std::move(inv2);
        cache->ln2 = std::move(ln2);
        cache->mlp_pre = std::move(pre);
        cache->mlp_act = act;
    }
    return z_out;
}

}  // namespace detail

/// Row-major grid of flattened P x P x 3 patches, pixel values scaled to [0,1].
inline PatchSequence partition(const Frame& frame, int patch_size) {
    if (patch_size < 1) throw ValueError("patch_size must be >= 1");
    if (frame.width % patch_size != 0 || frame.height % patch_size != 0)
        throw DimensionError("frame dims not divisible by patch size");
    PatchSequence s;
    s.grid_w = frame.width / patch_size;
    s.grid_h = frame.height / patch_size;
    const int pd = patch_size * patch_size * 3;
    s.tokens.resize(static_cast<Eigen::Index>(s.grid_w) * s.grid_h, pd);
    for (int gy = 0; gy < s.grid_h; ++gy) {
        for (int gx = 0; gx < s.grid_w; ++gx) {
            const Eigen::Index row = static_cast<Eigen::Index>(gy) * s.grid_w + gx;
            for (int py = 0; py < patch_size; ++py) {
                for (int px = 0; px < patch_size; ++px) {
                    for (int c = 0; c < 3; ++c) {
                        s.tokens(row, (py * patch_size + px) * 3 + c) =
                            frame.at(gx * patch_size + px, gy * patch_size + py, c) / 255.0;
                    }
                }
            }
        }
    }
    return s;
}

/// E_i = W_p flatten(p_i) + b_p, then Z_0 = E_i + pos at the patch's grid cell.
inline PatchSequence embed(const PatchSequence& patches, const SegmenterWeights& w) {
    if (patches.tokens.cols() != w.patch_proj.cols())
        throw DimensionError("patch dim does not match projection input dim");
    if (patches.grid_w != w.pos_grid_w || patches.grid_h != w.pos_grid_h)
        throw DimensionError("patch grid does not match positional grid");
    PatchSequence z;
    z.grid_w = patches.grid_w;
    z.grid_h = patches.grid_h;
    z.tokens = patches.tokens * w.patch_proj.transpose();
    z.tokens.rowwise() += w.patch_bias.transpose();
    z.tokens += w.pos;
    return z;
}

inline PatchSequence encode(const PatchSequence& z0, const SegmenterWeights& w) {
    if (z0.tokens.cols() != w.config.embed_dim)
        throw DimensionError("token dim does not match embed dim");
    PatchSequence z = z0;
    for (const auto& lw : w.layers) {
        z.tokens = detail::encoder_layer_forward(z.tokens, lw, w.config.heads, nullptr);
        if (!z.tokens.allFinite())
            throw ValueError("non-finite encoder activation (exploded weights)");
    }
    return z;
}

/// Per patch: softmax(W_s z + b_s). Rows sum to 1.
inline PatchSequence decode(const PatchSequence& zl, const SegmenterWeights& w) {
    if (zl.tokens.cols() != w.config.embed_dim)
        throw DimensionError("token dim does not match embed dim");
    PatchSequence out;
    out.grid_w = zl.grid_w;
    out.grid_h = zl.grid_h;
    out.tokens = zl.tokens * w.class_proj.transpose();
    out.tokens.rowwise() += w.class_bias.transpose();
    detail::softmax_rows(out.tokens);
    return out;
}

/// Replicates each patch distribution over its P x P block (cropped to the
/// original dims); argmax ties go to the lowest class index.
inline std::pair<ProbMap, MaskMap> upsample_to_maps(const PatchSequence& dists, int frame_w,
                                                    int frame_h, int patch_size) {
    if (dists.grid_w * patch_size < frame_w || dists.grid_h * patch_size < frame_h)
        throw DimensionError("patch grid does not cover the frame");
    const int channels = static_cast<int>(dists.tokens.cols());
    ProbMap prob;
    prob.width = frame_w;
    prob.height = frame_h;
    prob.classes = channels;
    prob.data.resize(static_cast<std::size_t>(frame_w) * frame_h * channels);
    MaskMap mask;
    mask.width = frame_w;
    mask.height = frame_h;
    mask.data.resize(static_cast<std::size_t>(frame_w) * frame_h);
    for (int y = 0; y < frame_h; ++y) {
        for (int x = 0; x < frame_w; ++x) {
            const Eigen::Index row =
                static_cast<Eigen::Index>(y / patch_size) * dists.grid_w + x / patch_size;
            int best = 0;
            for (int c = 0; c < channels; ++c) {
                const double p = dists.tokens(row, c);
                prob.at(x, y, c) = p;
                if (p > dists.tokens(row, best)) best = c;
            }
            mask.at(x, y) = static_cast<std::uint16_t>(best);
        }
    }
    return {std::move(prob), std::move(mask)};
}

/// Seeded init: projections ~ uniform(-s, s), s = sqrt(6/(fan_in+fan_out));
/// biases 0; layer-norm scale 1 shift 0; positional table ~ normal(0, 0.02).
inline SegmenterWeights init_weights(const SegmenterConfig& cfg, int grid_w = 8,
                                     int grid_h = 8) {
    SegmenterWeights w = detail::make_weight_shell(cfg, grid_w, grid_h);
    detail::RandomSource rng(cfg.seed);
    const int d = cfg.embed_dim, hd = cfg.hidden_dim();
    detail::fill_xavier(w.patch_proj, cfg.patch_dim(), d, rng);
    for (Eigen::Index i = 0; i < w.pos.rows(); ++i)
        for (Eigen::Index j = 0; j < w.pos.cols(); ++j) w.pos(i, j) = 0.02 * rng.normal();
    for (auto& l : w.layers) {
        l.ln1_scale.setOnes();
        l.ln2_scale.setOnes();
        detail::fill_xavier(l.w_q, d, d, rng);
        detail::fill_xavier(l.w_k, d, d, rng);
        detail::fill_xavier(l.w_v, d, d, rng);
        detail::fill_xavier(l.w_o, d, d, rng);
        detail::fill_xavier(l.w_mlp1, d, hd, rng);
        detail::fill_xavier(l.w_mlp2, hd, d, rng);
    }
    detail::fill_xavier(w.class_proj, d, cfg.class_channels(), rng);
    return w;
}

/// Channel-wise bilinear resampling of the positional table onto a new grid,
/// corners aligned. Same grid dims return the table unchanged.
inline SegmenterWeights interpolate_pos(const SegmenterWeights& w, int new_grid_w,
                                        int new_grid_h) {
    if (new_grid_w < 1 || new_grid_h < 1)
        throw DimensionError("positional grid dims must be >= 1");
    if (w.pos_grid_w < 1 || w.pos_grid_h < 1)
        throw DimensionError("stored positional grid is empty");
    SegmenterWeights out = w;
    if (new_grid_w == w.pos_grid_w && new_grid_h == w.pos_grid_h) return out;
    const int d = w.config.embed_dim;
    Eigen::MatrixXd table(static_cast<Eigen::Index>(new_grid_w) * new_grid_h, d);
    for (int y = 0; y < new_grid_h; ++y) {
        const double sy = (new_grid_h == 1)
                              ? 0.0
                              : static_cast<double>(y) * (w.pos_grid_h - 1) / (new_grid_h - 1);
        const int y0 = std::min(static_cast<int>(sy), w.pos_grid_h - 1);
        const int y1 = std::min(y0 + 1, w.pos_grid_h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < new_grid_w; ++x) {
            const double sx = (new_grid_w == 1) ? 0.0
                                                : static_cast<double>(x) * (w.pos_grid_w - 1) /
                                                      (new_grid_w - 1);
            const int x0 = std::min(static_cast<int>(sx), w.pos_grid_w - 1);
            const int x1 = std::min(x0 + 1, w.pos_grid_w - 1);
            const double fx = sx - x0;
            const auto at = [&](int yy, int xx) {
                return w.pos.row(static_cast<Eigen::Index>(yy) * w.pos_grid_w + xx);
            };
            table.row(static_cast<Eigen::Index>(y) * new_grid_w + x) =
                (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        }
    }
    out.pos = std::move(table);
    out.pos_grid_w = new_grid_w;
    out.pos_grid_h = new_grid_h;
    return out;
}

namespace detail {

inline constexpr char kWeightMagic[8] = {'M', 'E', 'M', 'S', 'E', 'G', '1', '\n'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& out, double d) {
    write_u64(out, std::bit_cast<std::uint64_t>(d));
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (in.gcount() != 8)
        throw TruncationError(std::string("weight file ends inside ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& in, const char* what) {
    return std::bit_cast<double>(read_u64(in, what));
}

inline int read_config_int(std::istream& in, const char* what) {
    const std::uint64_t v = read_u64(in, what);
    if (v >= (std::uint64_t{1} << 31))
        throw ValueError(std::string("weight file config field out of range: ") + what);
    return static_cast<int>(v);
}

}  // namespace detail

/// Container: magic "MEMSEG1\n", nine little-endian u64 config words, then
/// every tensor row-major as little-endian binary64, visitor order.
inline void save_weights(const SegmenterWeights& w, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(detail::kWeightMagic, 8);
    detail::write_u64(out, static_cast<std::uint64_t>(w.config.patch_size));
    detail::write_u64(out, static_cast<std::uint64_t>(w.config.embed_dim));
    detail::write_u64(out, static_cast<std::uint64_t>(w.config.layers));
    detail::write_u64(out, static_cast<std::uint64_t>(w.config.heads));
    detail::write_u64(out, static_cast<std::uint64_t>(w.config.classes));
    detail::write_u64(out, static_cast<std::uint64_t>(w.config.mlp_ratio));
    detail::write_u64(out, w.config.seed);
    detail::write_u64(out, static_cast<std::uint64_t>(w.pos_grid_w));
    detail::write_u64(out, static_cast<std::uint64_t>(w.pos_grid_h));
    for_each_tensor(w, [&](const auto& t) {
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) detail::write_f64(out, t(r, c));
    });
    if (!out) throw Error("write failed: " + path.string());
}

inline SegmenterWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || !std::equal(magic, magic + 8, detail::kWeightMagic))
        throw FormatError("not a weight file (bad magic)");
    SegmenterConfig cfg;
    cfg.patch_size = detail::read_config_int(in, "patch_size");
    cfg.embed_dim = detail::read_config_int(in, "embed_dim");
    cfg.layers = detail::read_config_int(in, "layers");
    cfg.heads = detail::read_config_int(in, "heads");
    cfg.classes = detail::read_config_int(in, "classes");
    cfg.mlp_ratio = detail::read_config_int(in, "mlp_ratio");
    cfg.seed = detail::read_u64(in, "seed");
    const int grid_w = detail::read_config_int(in, "pos_grid_w");
    const int grid_h = detail::read_config_int(in, "pos_grid_h");
    cfg.validate();
    SegmenterWeights w = detail::make_weight_shell(cfg, grid_w, grid_h);
    for_each_tensor(w, [&](auto& t) {
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = detail::read_f64(in, "tensor data");
    });
    return w;
}

struct TrainState {
    int iter = 0;
    int max_iter = 1;
    double base_lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    SegmenterWeights velocity;
};

inline TrainState init_train_state(const SegmenterWeights& w, int max_iter) {
    if (max_iter < 1) throw ValueError("max_iter must be >= 1");
    TrainState s;
    s.max_iter = max_iter;
    s.velocity = detail::zeros_like(w);
    return s;
}

/// Polynomial decay: base_lr * (1 - iter/max_iter)^0.9.
inline double lr_schedule(const TrainState& s) {
    if (s.max_iter == 0) throw ValueError("max_iter must be positive");
    if (s.iter < 0 || s.iter > s.max_iter) throw ValueError("iter outside [0, max_iter]");
    return s.base_lr * std::pow(1.0 - static_cast<double>(s.iter) / s.max_iter, 0.9);
}

namespace detail {

struct ForwardCache {
    PatchSequence patches;  // raw flattened patches
    Eigen::MatrixXd z0;
    std::vector<LayerCache> layers;
    Eigen::MatrixXd z_last;
    Eigen::MatrixXd probs;  // N x (classes+1)
};

inline ForwardCache forward_cached(const SegmenterWeights& w, const Frame& frame) {
    const int p = w.config.patch_size;
    const Frame padded =
        pad_replicate(frame, (frame.width + p - 1) / p * p, (frame.height + p - 1) / p * p);
    ForwardCache fc;
    fc.patches = partition(padded, p);
    const PatchSequence z0 = embed(fc.patches, w);
    fc.z0 = z0.tokens;
    fc.layers.resize(w.layers.size());
    Eigen::MatrixXd z = fc.z0;
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
        z = encoder_layer_forward(z, w.layers[i], w.config.heads, &fc.layers[i]);
        if (!z.allFinite())
            throw ValueError("non-finite encoder activation (exploded weights)");
    }
    fc.z_last = std::move(z);
    fc.probs = fc.z_last * w.class_proj.transpose();
    fc.probs.rowwise() += w.class_bias.transpose();
    softmax_rows(fc.probs);
    return fc;
}

/// Majority ground-truth class per patch; ties resolve to the lowest index.
inline Eigen::VectorXi patch_targets(const MaskMap& gt, int patch_size, int grid_w, int grid_h,
                                     int channels) {
    const MaskMap padded = pad_replicate(gt, grid_w * patch_size, grid_h * patch_size);
    Eigen::VectorXi targets(static_cast<Eigen::Index>(grid_w) * grid_h);
    std::vector<int> counts(channels);
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            std::fill(counts.begin(), counts.end(), 0);
            for (int py = 0; py < patch_size; ++py) {
                for (int px = 0; px < patch_size; ++px) {
                    const int cls = padded.at(gx * patch_size + px, gy * patch_size + py);
                    if (cls >= channels)
                        throw ValueError("ground-truth class index " + std::to_string(cls) +
                                         " out of range");
                    ++counts[cls];
                }
            }
            int best = 0;
            for (int c = 1; c < channels; ++c)
                if (counts[c] > counts[best]) best = c;
            targets(static_cast<Eigen::Index>(gy) * grid_w + gx) = best;
        }
    }
    return targets;
}

inline void layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& xhat,
                                const Eigen::VectorXd& inv, const Eigen::VectorXd& scale,
                                Eigen::VectorXd& dscale, Eigen::VectorXd& dshift,
                                Eigen::MatrixXd& dx_accum) {
    const Eigen::Index n = dy.rows();
    dscale += (dy.array() * xhat.array()).colwise().sum().matrix().transpose();
    dshift += dy.colwise().sum().transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::ArrayXd dxhat = dy.row(i).transpose().array() * scale.array();
        const Eigen::ArrayXd xh = xhat.row(i).transpose().array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xh).mean();
        dx_accum.row(i) += (inv(i) * (dxhat - m1 - xh * m2)).matrix().transpose();
    }
}

}  // namespace detail

/// Mean per-patch cross-entropy against majority ground-truth classes.
inline double training_loss(const SegmenterWeights& w, const Frame& frame, const MaskMap& gt) {
    if (gt.width != frame.width || gt.height != frame.height)
        throw DimensionError("ground-truth dims do not match frame");
    const detail::ForwardCache fc = detail::forward_cached(w, frame);
    const Eigen::VectorXi targets = detail::patch_targets(
        gt, w.config.patch_size, fc.patches.grid_w, fc.patches.grid_h, w.config.class_channels());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < fc.probs.rows(); ++i)
        loss -= std::log(fc.probs(i, targets(i)));
    loss /= static_cast<double>(fc.probs.rows());
    if (!std::isfinite(loss)) throw ValueError("non-finite training loss");
    return loss;
}

/// Reverse-mode gradients of training_loss for every tensor. Returns the loss.
inline double training_gradients(const SegmenterWeights& w, const Frame& frame,
                                 const MaskMap& gt, SegmenterWeights& grads) {
    if (gt.width != frame.width || gt.height != frame.height)
        throw DimensionError("ground-truth dims do not match frame");
    const detail::ForwardCache fc = detail::forward_cached(w, frame);
    const Eigen::VectorXi targets = detail::patch_targets(
        gt, w.config.patch_size, fc.patches.grid_w, fc.patches.grid_h, w.config.class_channels());
    const Eigen::Index n = fc.probs.rows();
    const int heads = w.config.heads;
    const Eigen::Index d = w.config.embed_dim;
    const Eigen::Index dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) loss -= std::log(fc.probs(i, targets(i)));
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw ValueError("non-finite training loss");

    grads = detail::zeros_like(w);

    Eigen::MatrixXd dlogits = fc.probs;
    for (Eigen::Index i = 0; i < n; ++i) dlogits(i, targets(i)) -= 1.0;
    dlogits /= static_cast<double>(n);

    grads.class_proj = dlogits.transpose() * fc.z_last;
    grads.class_bias = dlogits.colwise().sum().transpose();
    Eigen::MatrixXd dz = dlogits * w.class_proj;

    for (int li = static_cast<int>(w.layers.size()) - 1; li >= 0; --li) {
        const auto& lw = w.layers[li];
        const auto& c = fc.layers[li];
        auto& gl = grads.layers[li];

        // MLP branch: z_out = z_mid + W2 gelu(W1 LN2(z_mid) + b1) + b2
        Eigen::MatrixXd dmid = dz;
        gl.b_mlp2 += dz.colwise().sum().transpose();
        gl.w_mlp2 += dz.transpose() * c.mlp_act;
        const Eigen::MatrixXd dact = dz * lw.w_mlp2;
        const Eigen::MatrixXd dpre =
            (dact.array() *
             c.mlp_pre.unaryExpr([](double x) { return detail::gelu_grad(x); }).array())
                .matrix();
        gl.b_mlp1 += dpre.colwise().sum().transpose();
        gl.w_mlp1 += dpre.transpose() * c.ln2;
        const Eigen::MatrixXd dln2 = dpre * lw.w_mlp1;
        detail::layer_norm_backward(dln2, c.xhat2, c.inv2, lw.ln2_scale, gl.ln2_scale,
                                    gl.ln2_shift, dmid);

        // attention branch: z_mid = z_in + W_o concat_h(softmax(QK^t/sqrt) V)
        Eigen::MatrixXd dz_in = dmid;
        gl.w_o += dmid.transpose() * c.concat;
        const Eigen::MatrixXd dconcat = dmid * lw.w_o;
        Eigen::MatrixXd dq(n, d), dk(n, d), dv(n, d);
        for (int h = 0; h < heads; ++h) {
            const auto qh = c.q.middleCols(h * dh, dh);
            const auto kh = c.k.middleCols(h * dh, dh);
            const auto vh = c.v.middleCols(h * dh, dh);
            const Eigen::MatrixXd& a = c.attn[h];
            const auto dout = dconcat.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh) = a.transpose() * dout;
            Eigen::MatrixXd da = dout * vh.transpose();
            // softmax rows: ds = a . (da - rowsum(a . da))
            const Eigen::VectorXd dots = (a.array() * da.array()).rowwise().sum().matrix();
            const Eigen::MatrixXd ds =
                (a.array() * (da.array().colwise() - dots.array())).matrix();
            dq.middleCols(h * dh, dh) = ds * kh * inv_scale;
            dk.middleCols(h * dh, dh) = ds.transpose() * qh * inv_scale;
        }
        gl.w_q += dq.transpose() * c.ln1;
        gl.w_k += dk.transpose() * c.ln1;
        gl.w_v += dv.transpose() * c.ln1;
        const Eigen::MatrixXd dln1 = dq * lw.w_q + dk * lw.w_k + dv * lw.w_v;
        detail::layer_norm_backward(dln1, c.xhat1, c.inv1, lw.ln1_scale, gl.ln1_scale,
                                    gl.ln1_shift, dz_in);
        dz = std::move(dz_in);
    }

    grads.pos = dz;
    grads.patch_bias = dz.colwise().sum().transpose();
    grads.patch_proj = dz.transpose() * fc.patches.tokens;
    return loss;
}

/// One SGD step: v <- momentum v - lr (g + weight_decay w); w <- w + v.
inline double train_step(SegmenterWeights& w, TrainState& state, const Frame& frame,
                         const MaskMap& gt) {
    SegmenterWeights grads;
    const double loss = training_gradients(w, frame, gt, grads);
    const double lr = lr_schedule(state);
    const double m = state.momentum, wd = state.weight_decay;
    for_each_tensor(w, state.velocity, grads, [&](auto& wt, auto& vt, auto& gt_) {
        vt = m * vt - lr * (gt_ + wd * wt);
        wt += vt;
    });
    ++state.iter;
    return loss;
}

/// Full forward chain: pad -> partition -> embed -> encode -> decode -> maps.
inline std::pair<ProbMap, MaskMap> segment(const Frame& frame, const SegmenterWeights& w) {
    const int p = w.config.patch_size;
    const Frame padded =
        pad_replicate(frame, (frame.width + p - 1) / p * p, (frame.height + p - 1) / p * p);
    const PatchSequence z0 = embed(partition(padded, p), w);
    const PatchSequence zl = encode(z0, w);
    return upsample_to_maps(decode(zl, w), frame.width, frame.height, p);
}

}  // namespace memseg
