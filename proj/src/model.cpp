// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#include "loffta/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "loffta/augment.hpp"
#include "loffta/error.hpp"
#include "loffta/rng.hpp"

namespace loffta::model {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config and layout
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (in_dim < 1 || grid_h < 1 || grid_w < 1) throw InvalidParameter("model input shape must be >= 1");
    if (num_classes < 1) throw InvalidParameter("model needs >= 1 class");
    if (embed_dim < 1 || depth < 1 || heads < 1 || mlp_ratio < 1) {
        throw InvalidParameter("embed_dim, depth, heads and mlp_ratio must be >= 1");
    }
    if (embed_dim % heads != 0) {
        throw InvalidParameter("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                               std::to_string(heads));
    }
    if (!(ln_eps > 0.0)) throw InvalidParameter("ln_eps must be > 0");
    if (!(init_std >= 0.0)) throw InvalidParameter("init_std must be >= 0");
    if (pos_rows != 0 && pos_rows < seq_len()) throw InvalidParameter("pos_rows smaller than the token sequence");
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"in_dim", c.in_dim},       {"grid_h", c.grid_h},   {"grid_w", c.grid_w},
             {"num_classes", c.num_classes}, {"embed_dim", c.embed_dim}, {"depth", c.depth},
             {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio}, {"ln_eps", c.ln_eps},
             {"init_std", c.init_std},   {"pos_rows", c.pos_rows}};
}

void from_json(const json& j, ModelConfig& c) {
    c.in_dim = j.value("in_dim", c.in_dim);
    c.grid_h = j.value("grid_h", c.grid_h);
    c.grid_w = j.value("grid_w", c.grid_w);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
    c.init_std = j.value("init_std", c.init_std);
    c.pos_rows = j.value("pos_rows", c.pos_rows);
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.in_dim, m = cfg.embed_dim, hid = cfg.hidden_dim(), C = cfg.num_classes;
    auto add = [&](std::string name, std::vector<std::size_t> shape, bool decay) {
        std::size_t size = 1;
        for (auto s : shape) size *= s;
        tensors_.push_back({std::move(name), std::move(shape), total_, size, decay});
        total_ += size;
    };
    add("proj.weight", {d, m}, true);
    add("proj.bias", {m}, false);
    add("proj.ln.gain", {m}, false);
    add("proj.ln.bias", {m}, false);
    add("cls_token", {m}, false);
    add("pos_embed", {cfg.pos_rows_or_default(), m}, false);
    for (uint32_t i = 0; i < cfg.depth; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        add(p + "ln1.gain", {m}, false);
        add(p + "ln1.bias", {m}, false);
        add(p + "attn.qkv.weight", {m, 3 * m}, true);
        add(p + "attn.qkv.bias", {3 * m}, false);
        add(p + "attn.out.weight", {m, m}, true);
        add(p + "attn.out.bias", {m}, false);
        add(p + "ln2.gain", {m}, false);
        add(p + "ln2.bias", {m}, false);
        add(p + "mlp.fc1.weight", {m, hid}, true);
        add(p + "mlp.fc1.bias", {hid}, false);
        add(p + "mlp.fc2.weight", {hid, m}, true);
        add(p + "mlp.fc2.bias", {m}, false);
    }
    add("norm.gain", {m}, false);
    add("norm.bias", {m}, false);
    add("head.weight", {m, C}, true);
    add("head.bias", {C}, false);
}

const ParamTensor& ParamLayout::find(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw InvalidParameter("no parameter named '" + std::string(name) + "'");
}

std::vector<uint8_t> ParamLayout::decay_mask() const {
    std::vector<uint8_t> mask(total_, 0);
    for (const auto& t : tensors_) {
        if (t.decay) std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
                               mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), 1);
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

namespace {

// Row-wise LayerNorm. xhat and rstd are kept for the backward pass.
template <class T>
void layer_norm_forward(const T* x, std::size_t rows, std::size_t m, const T* gain, const T* bias, double eps,
                        T* out, T* xhat, T* rstd) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x + i * m;
        double mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) mean += xi[j];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double c = xi[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(m);
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[i] = static_cast<T>(r);
        T* hi = xhat + i * m;
        T* oi = out + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            hi[j] = static_cast<T>((xi[j] - mean) * r);
            oi[j] = gain[j] * hi[j] + bias[j];
        }
    }
}

// dx (+)= rstd * (g - mean(g) - xhat * mean(g * xhat)), with g = dout * gain.
template <class T>
void layer_norm_backward(const T* dout, const T* xhat, const T* rstd, const T* gain, std::size_t rows,
                         std::size_t m, T* dx, T* dgain, T* dbias, bool accumulate) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* di = dout + i * m;
        const T* hi = xhat + i * m;
        double mg = 0.0, mgh = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double g = static_cast<double>(di[j]) * gain[j];
            mg += g;
            mgh += g * hi[j];
            dgain[j] += di[j] * hi[j];
            dbias[j] += di[j];
        }
        mg /= static_cast<double>(m);
        mgh /= static_cast<double>(m);
        T* xi = dx + i * m;
        const double r = rstd[i];
        for (std::size_t j = 0; j < m; ++j) {
            const double g = static_cast<double>(di[j]) * gain[j];
            const T v = static_cast<T>(r * (g - mg - hi[j] * mgh));
            xi[j] = accumulate ? xi[j] + v : v;
        }
    }
}

// Rational fit on [-4, 4], max abs error about 3e-7; beyond that erf is +-1
// in single precision anyway.
inline float fast_erf(float x) {
    x = std::clamp(x, -4.0f, 4.0f);
    const float x2 = x * x;
    float p = -2.72614225801306e-10f;
    p = p * x2 + 2.77068142495902e-08f;
    p = p * x2 + -2.10102402082508e-06f;
    p = p * x2 + -5.69250639462346e-05f;
    p = p * x2 + -7.34990630326855e-04f;
    p = p * x2 + -2.95459980854025e-03f;
    p = p * x2 + -1.60960333262415e-02f;
    float q = -1.45660718464996e-05f;
    q = q * x2 + -2.13374055278905e-04f;
    q = q * x2 + -1.68282697438203e-03f;
    q = q * x2 + -7.37332916720468e-03f;
    q = q * x2 + -1.42647390514189e-02f;
    return x * p / q;
}

template <class T>
T normal_cdf(T x) {
    const T z = x * static_cast<T>(std::numbers::sqrt2 / 2);
    if constexpr (std::is_same_v<T, float>) {
        return 0.5f * (1.0f + fast_erf(z));
    } else {
        return static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(z));
    }
}

// d/dx [x * Phi(x)] given Phi(x).
template <class T>
T gelu_grad(T x, T cdf) {
    const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

// dst[k * count + j] = src(row0 + j, col0 + k) for k < width, j < count.
template <class T>
void gather_transposed(const Matrix<T>& src, std::size_t row0, std::size_t count, std::size_t col0, std::size_t width,
                       T* dst) {
    for (std::size_t j = 0; j < count; ++j) {
        const T* r = src.row(row0 + j) + col0;
        for (std::size_t k = 0; k < width; ++k) dst[k * count + j] = r[k];
    }
}

double truncated_normal(RngStream& rng, double std) {
    for (;;) {
        const double z = rng.normal();
        if (z >= -2.0 && z <= 2.0) return z * std;
    }
}

}  // namespace

template <class T>
Matrix<T> project(const Matrix<T>& tokens, const ProjectionParams<T>& p, double eps) {
    const std::size_t d = tokens.cols;
    const std::size_t m = p.bias.size();
    if (p.weight.size() != d * m || p.ln_gain.size() != m || p.ln_bias.size() != m) {
        throw ShapeMismatch("projection expects tokens of width " + std::to_string(m ? p.weight.size() / m : 0) +
                            ", got " + std::to_string(d));
    }
    Matrix<T> z(tokens.rows, m);
    kernels::matmul(tokens.data.data(), p.weight.data(), z.data.data(), tokens.rows, d, m);
    kernels::add_row_bias(z.data.data(), p.bias.data(), tokens.rows, m);
    Matrix<T> out(tokens.rows, m), xhat(tokens.rows, m);
    tracked_vector<T> rstd(tokens.rows);
    layer_norm_forward(z.data.data(), tokens.rows, m, p.ln_gain.data(), p.ln_bias.data(), eps, out.data.data(),
                       xhat.data.data(), rstd.data());
    return out;
}

template <class T>
std::vector<T> merge_cls(std::span<const T> offline_cls, std::span<const T> learned_cls) {
    if (offline_cls.size() != learned_cls.size()) {
        throw ShapeMismatch("cls widths differ: " + std::to_string(offline_cls.size()) + " vs " +
                            std::to_string(learned_cls.size()));
    }
    std::vector<T> out(offline_cls.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = offline_cls[i] + learned_cls[i];
    return out;
}

template <class T>
CrossEntropy<T> cross_entropy(const Matrix<T>& logits, std::span<const uint32_t> labels) {
    if (labels.size() != logits.rows) throw ShapeMismatch("label count differs from logit rows");
    const std::size_t B = logits.rows, C = logits.cols;
    CrossEntropy<T> out;
    out.probs = Matrix<T>(B, C);
    out.grad = Matrix<T>(B, C);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] >= C) {
            throw IndexError("label " + std::to_string(labels[b]) + " >= class count " + std::to_string(C));
        }
        const T* z = logits.row(b);
        double mx = z[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(z[c]));
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
        const double lse = mx + std::log(s);
        total += lse - z[labels[b]];
        for (std::size_t c = 0; c < C; ++c) {
            const double p = std::exp(z[c] - lse);
            out.probs(b, c) = static_cast<T>(p);
            out.grad(b, c) = static_cast<T>((p - (c == labels[b] ? 1.0 : 0.0)) / static_cast<double>(B));
        }
    }
    out.loss = B ? total / static_cast<double>(B) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

template <class T>
struct Classifier<T>::Offsets {
    struct Block {
        std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::size_t proj_w, proj_b, proj_g, proj_lb, cls, pos;
    std::vector<Block> blocks;
    std::size_t norm_g, norm_b, head_w, head_b;

    explicit Offsets(const ParamLayout& L, uint32_t depth) {
        auto at = [&](const std::string& n) { return L.find(n).offset; };
        proj_w = at("proj.weight");
        proj_b = at("proj.bias");
        proj_g = at("proj.ln.gain");
        proj_lb = at("proj.ln.bias");
        cls = at("cls_token");
        pos = at("pos_embed");
        for (uint32_t i = 0; i < depth; ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            blocks.push_back({at(p + "ln1.gain"), at(p + "ln1.bias"), at(p + "attn.qkv.weight"),
                              at(p + "attn.qkv.bias"), at(p + "attn.out.weight"), at(p + "attn.out.bias"),
                              at(p + "ln2.gain"), at(p + "ln2.bias"), at(p + "mlp.fc1.weight"),
                              at(p + "mlp.fc1.bias"), at(p + "mlp.fc2.weight"), at(p + "mlp.fc2.bias")});
        }
        norm_g = at("norm.gain");
        norm_b = at("norm.bias");
        head_w = at("head.weight");
        head_b = at("head.bias");
    }
};

template <class T>
struct Workspace<T>::State {
    struct LN {
        Matrix<T> xhat;
        tracked_vector<T> rstd;
    };
    struct Block {
        LN ln1;
        Matrix<T> a;      // ln1 output
        Matrix<T> qkv;    // [N x 3m]
        tracked_vector<T> probs;  // [B, H, n, n]
        Matrix<T> attn;   // concatenated heads [N x m]
        LN ln2;
        Matrix<T> b;      // ln2 output
        Matrix<T> h1;     // fc1 pre-activation [N x 4m]
        Matrix<T> g;      // gelu(h1)
        Matrix<T> cdf;    // Phi(h1), reused by the backward pass
    };
    std::size_t B = 0, n = 0, N = 0;
    Matrix<T> x_in;  // [N x d]
    LN proj_ln;
    Matrix<T> x;     // residual stream [N x m]
    std::vector<Block> blocks;
    LN final_ln;     // CLS rows only [B x m]
    Matrix<T> final_out;
    Matrix<T> logits;

    // Scratch, contents meaningless between calls.
    Matrix<T> z, tmp, cls_rows;
    Matrix<T> d_final, d_cls, dx, d_hid, d_norm_out, d_qkv, d_attn, dz;
    tracked_vector<T> scores, kt, vt, head_acc, dprob, bt;
};

template <class T>
Workspace<T>::Workspace() : state_(std::make_unique<State>()) {}
template <class T>
Workspace<T>::~Workspace() = default;
template <class T>
Workspace<T>::Workspace(Workspace&&) noexcept = default;
template <class T>
Workspace<T>& Workspace<T>::operator=(Workspace&&) noexcept = default;

template <class T>
Classifier<T>::Classifier(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg), params_(layout_.total(), T(0)) {
    init(0);
}

template <class T>
std::span<T> Classifier<T>::param(std::string_view name) {
    const auto& t = layout_.find(name);
    return {params_.data() + t.offset, t.size};
}

template <class T>
std::span<const T> Classifier<T>::param(std::string_view name) const {
    const auto& t = layout_.find(name);
    return {params_.data() + t.offset, t.size};
}

template <class T>
void Classifier<T>::init(uint64_t seed) {
    auto rng = RngStream::derive(seed, {0x1417});
    for (const auto& t : layout_.tensors()) {
        T* p = params_.data() + t.offset;
        const bool gain = t.name.size() >= 4 && t.name.compare(t.name.size() - 4, 4, "gain") == 0;
        const bool random = t.decay || t.name == "cls_token" || t.name == "pos_embed";
        for (std::size_t i = 0; i < t.size; ++i) {
            p[i] = gain ? T(1) : random ? static_cast<T>(truncated_normal(rng, cfg_.init_std)) : T(0);
        }
    }
}

template <class T>
void Classifier<T>::check_batch(std::span<const FeatureRecord> batch) const {
    for (const auto& r : batch) {
        if (r.grid.d != cfg_.in_dim || r.grid.h != cfg_.grid_h || r.grid.w != cfg_.grid_w ||
            r.cls.size() != cfg_.in_dim || r.grid.values.size() != static_cast<std::size_t>(r.grid.h) * r.grid.w * r.grid.d) {
            throw ShapeMismatch("record shape (d=" + std::to_string(r.grid.d) + ", h=" + std::to_string(r.grid.h) +
                                ", w=" + std::to_string(r.grid.w) + ") does not match the model (d=" +
                                std::to_string(cfg_.in_dim) + ", h=" + std::to_string(cfg_.grid_h) +
                                ", w=" + std::to_string(cfg_.grid_w) + ")");
        }
    }
}

template <class T>
void Classifier<T>::run_forward(std::span<const FeatureRecord> batch, State& act, ForwardTrace<T>* trace) const {
    check_batch(batch);
    const Offsets off(layout_, cfg_.depth);
    const std::size_t B = batch.size(), n = cfg_.seq_len(), N = B * n;
    const std::size_t d = cfg_.in_dim, m = cfg_.embed_dim, H = cfg_.heads, dh = cfg_.head_dim(),
                      hid = cfg_.hidden_dim(), C = cfg_.num_classes;
    const T* P = params_.data();
    act.B = B;
    act.n = n;
    act.N = N;

    // Stem: [cls; grid tokens] -> projection -> LayerNorm.
    act.x_in.reshape(N, d);
    for (std::size_t b = 0; b < B; ++b) {
        T* row = act.x_in.row(b * n);
        for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<T>(batch[b].cls[k]);
        const float* g = batch[b].grid.values.data();
        T* dst = act.x_in.row(b * n + 1);
        for (std::size_t k = 0; k < (n - 1) * d; ++k) dst[k] = static_cast<T>(g[k]);
    }
    Matrix<T>& z = act.z;
    z.reshape(N, m);
    kernels::matmul(act.x_in.data.data(), P + off.proj_w, z.data.data(), N, d, m);
    kernels::add_row_bias(z.data.data(), P + off.proj_b, N, m);
    act.x.reshape(N, m);
    act.proj_ln.xhat.reshape(N, m);
    act.proj_ln.rstd.assign(N, T(0));
    layer_norm_forward(z.data.data(), N, m, P + off.proj_g, P + off.proj_lb, cfg_.ln_eps, act.x.data.data(),
                       act.proj_ln.xhat.data.data(), act.proj_ln.rstd.data());
    if (trace) {
        trace->sites.push_back("proj.ln");
        trace->outputs.push_back(act.x);
    }
    for (std::size_t b = 0; b < B; ++b) {
        T* cls_row = act.x.row(b * n);
        for (std::size_t k = 0; k < m; ++k) cls_row[k] += P[off.cls + k];
        for (std::size_t t = 0; t < n; ++t) {
            T* row = act.x.row(b * n + t);
            const T* pe = P + off.pos + t * m;
            for (std::size_t k = 0; k < m; ++k) row[k] += pe[k];
        }
    }

    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    act.blocks.resize(cfg_.depth);
    tracked_vector<T>& scores = act.scores;
    scores.assign(n, T(0));
    tracked_vector<T>& kt = act.kt;
    kt.assign(dh * n, T(0));
    tracked_vector<T>& head_acc = act.head_acc;
    head_acc.assign(dh, T(0));
    Matrix<T>& tmp = act.tmp;
    tmp.reshape(N, m);
    for (uint32_t l = 0; l < cfg_.depth; ++l) {
        const auto& o = off.blocks[l];
        auto& a = act.blocks[l];

        a.ln1.xhat.reshape(N, m);
        a.ln1.rstd.assign(N, T(0));
        a.a.reshape(N, m);
        layer_norm_forward(act.x.data.data(), N, m, P + o.ln1_g, P + o.ln1_b, cfg_.ln_eps, a.a.data.data(),
                           a.ln1.xhat.data.data(), a.ln1.rstd.data());
        if (trace) {
            trace->sites.push_back("blocks." + std::to_string(l) + ".ln1");
            trace->outputs.push_back(a.a);
        }
        a.qkv.reshape(N, 3 * m);
        kernels::matmul(a.a.data.data(), P + o.qkv_w, a.qkv.data.data(), N, m, 3 * m);
        kernels::add_row_bias(a.qkv.data.data(), P + o.qkv_b, N, 3 * m);

        a.probs.assign(B * H * n * n, T(0));
        a.attn.reshape(N, m);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                gather_transposed(a.qkv, b * n, n, m + h * dh, dh, kt.data());
                T* probs = a.probs.data() + ((b * H + h) * n) * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* q = a.qkv.row(b * n + i) + h * dh;
                    std::fill(scores.begin(), scores.end(), T(0));
                    for (std::size_t k = 0; k < dh; ++k) {
                        const T qk = q[k] * scale;
                        const T* kr = kt.data() + k * n;
                        for (std::size_t j = 0; j < n; ++j) scores[j] += qk * kr[j];
                    }
                    const T mx = *std::max_element(scores.begin(), scores.end());
                    T sum = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        scores[j] = std::exp(scores[j] - mx);
                        sum += scores[j];
                    }
                    T* prow = probs + i * n;
                    const T inv = T(1) / sum;
                    // Accumulate in scratch so the row stays in registers.
                    T* __restrict acc = head_acc.data();
                    std::fill(acc, acc + dh, T(0));
                    for (std::size_t j = 0; j < n; ++j) {
                        const T pj = scores[j] * inv;
                        prow[j] = pj;
                        const T* __restrict v = a.qkv.row(b * n + j) + 2 * m + h * dh;
                        for (std::size_t k = 0; k < dh; ++k) acc[k] += pj * v[k];
                    }
                    std::copy(acc, acc + dh, a.attn.row(b * n + i) + h * dh);
                }
            }
        }
        kernels::matmul(a.attn.data.data(), P + o.out_w, tmp.data.data(), N, m, m);
        kernels::add_row_bias(tmp.data.data(), P + o.out_b, N, m);
        for (std::size_t i = 0; i < N * m; ++i) act.x.data[i] += tmp.data[i];

        a.ln2.xhat.reshape(N, m);
        a.ln2.rstd.assign(N, T(0));
        a.b.reshape(N, m);
        layer_norm_forward(act.x.data.data(), N, m, P + o.ln2_g, P + o.ln2_b, cfg_.ln_eps, a.b.data.data(),
                           a.ln2.xhat.data.data(), a.ln2.rstd.data());
        if (trace) {
            trace->sites.push_back("blocks." + std::to_string(l) + ".ln2");
            trace->outputs.push_back(a.b);
        }
        a.h1.reshape(N, hid);
        kernels::matmul(a.b.data.data(), P + o.fc1_w, a.h1.data.data(), N, m, hid);
        kernels::add_row_bias(a.h1.data.data(), P + o.fc1_b, N, hid);
        a.g.reshape(N, hid);
        a.cdf.reshape(N, hid);
        for (std::size_t i = 0; i < N * hid; ++i) {
            a.cdf.data[i] = normal_cdf(a.h1.data[i]);
            a.g.data[i] = a.h1.data[i] * a.cdf.data[i];
        }
        kernels::matmul(a.g.data.data(), P + o.fc2_w, tmp.data.data(), N, hid, m);
        kernels::add_row_bias(tmp.data.data(), P + o.fc2_b, N, m);
        for (std::size_t i = 0; i < N * m; ++i) act.x.data[i] += tmp.data[i];
    }

    // Final norm and head on the CLS position only.
    Matrix<T>& cls_rows = act.cls_rows;
    cls_rows.reshape(B, m);
    for (std::size_t b = 0; b < B; ++b) std::memcpy(cls_rows.row(b), act.x.row(b * n), m * sizeof(T));
    act.final_ln.xhat.reshape(B, m);
    act.final_ln.rstd.assign(B, T(0));
    act.final_out.reshape(B, m);
    layer_norm_forward(cls_rows.data.data(), B, m, P + off.norm_g, P + off.norm_b, cfg_.ln_eps,
                       act.final_out.data.data(), act.final_ln.xhat.data.data(), act.final_ln.rstd.data());
    if (trace) {
        trace->sites.push_back("norm");
        trace->outputs.push_back(act.final_out);
    }
    act.logits.reshape(B, C);
    kernels::matmul(act.final_out.data.data(), P + off.head_w, act.logits.data.data(), B, m, C);
    kernels::add_row_bias(act.logits.data.data(), P + off.head_b, B, C);
}

template <class T>
Matrix<T> Classifier<T>::forward(std::span<const FeatureRecord> batch, ForwardTrace<T>* trace,
                                 Workspace<T>* ws) const {
    Workspace<T> local;
    State& act = *(ws ? ws : &local)->state_;
    run_forward(batch, act, trace);
    return act.logits;
}

template <class T>
LossAndGrad<T> Classifier<T>::loss_and_grad(std::span<const FeatureRecord> batch, std::span<T> grads,
                                            Workspace<T>* ws) const {
    if (grads.size() != params_.size()) throw ShapeMismatch("gradient buffer size differs from parameter count");
    if (batch.empty()) throw InvalidParameter("empty batch");
    Workspace<T> local;
    State& act = *(ws ? ws : &local)->state_;
    run_forward(batch, act, nullptr);

    std::vector<uint32_t> labels(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) labels[b] = batch[b].label;
    auto ce = cross_entropy(act.logits, std::span<const uint32_t>(labels));

    std::fill(grads.begin(), grads.end(), T(0));
    const Offsets off(layout_, cfg_.depth);
    const std::size_t B = act.B, n = act.n, N = act.N;
    const std::size_t d = cfg_.in_dim, m = cfg_.embed_dim, H = cfg_.heads, dh = cfg_.head_dim(),
                      hid = cfg_.hidden_dim(), C = cfg_.num_classes;
    const T* P = params_.data();
    T* G = grads.data();

    // Head.
    kernels::matmul_tn_acc(act.final_out.data.data(), ce.grad.data.data(), G + off.head_w, B, m, C);
    kernels::column_sum_acc(ce.grad.data.data(), G + off.head_b, B, C);
    Matrix<T>& d_final = act.d_final;
    d_final.reshape(B, m);
    kernels::matmul_nt(ce.grad.data.data(), P + off.head_w, d_final.data.data(), B, C, m, false, &act.bt);

    // Final norm feeds back into CLS rows of the residual stream only.
    Matrix<T>& d_cls = act.d_cls;
    d_cls.reshape(B, m);
    layer_norm_backward(d_final.data.data(), act.final_ln.xhat.data.data(), act.final_ln.rstd.data(), P + off.norm_g,
                        B, m, d_cls.data.data(), G + off.norm_g, G + off.norm_b, false);
    Matrix<T>& dx = act.dx;
    dx.reshape(N, m);
    for (std::size_t b = 0; b < B; ++b) std::memcpy(dx.row(b * n), d_cls.row(b), m * sizeof(T));

    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix<T>& d_hid = act.d_hid;
    d_hid.reshape(N, hid);
    Matrix<T>& d_norm_out = act.d_norm_out;
    d_norm_out.reshape(N, m);
    Matrix<T>& d_qkv = act.d_qkv;
    d_qkv.reshape(N, 3 * m);
    tracked_vector<T>& dprob = act.dprob;
    dprob.assign(n, T(0));
    tracked_vector<T>& vt = act.vt;
    vt.assign(dh * n, T(0));
    tracked_vector<T>& head_acc = act.head_acc;
    head_acc.assign(dh, T(0));
    for (std::size_t li = cfg_.depth; li-- > 0;) {
        const auto& o = off.blocks[li];
        const auto& a = act.blocks[li];

        // MLP branch: x += fc2(gelu(fc1(ln2(x)))).
        kernels::matmul_tn_acc(a.g.data.data(), dx.data.data(), G + o.fc2_w, N, hid, m);
        kernels::column_sum_acc(dx.data.data(), G + o.fc2_b, N, m);
        kernels::matmul_nt(dx.data.data(), P + o.fc2_w, d_hid.data.data(), N, m, hid, false, &act.bt);
        for (std::size_t i = 0; i < N * hid; ++i) d_hid.data[i] *= gelu_grad(a.h1.data[i], a.cdf.data[i]);
        kernels::matmul_tn_acc(a.b.data.data(), d_hid.data.data(), G + o.fc1_w, N, m, hid);
        kernels::column_sum_acc(d_hid.data.data(), G + o.fc1_b, N, hid);
        kernels::matmul_nt(d_hid.data.data(), P + o.fc1_w, d_norm_out.data.data(), N, hid, m, false, &act.bt);
        layer_norm_backward(d_norm_out.data.data(), a.ln2.xhat.data.data(), a.ln2.rstd.data(), P + o.ln2_g, N, m,
                            dx.data.data(), G + o.ln2_g, G + o.ln2_b, true);

        // Attention branch: x += out(attn(ln1(x))).
        kernels::matmul_tn_acc(a.attn.data.data(), dx.data.data(), G + o.out_w, N, m, m);
        kernels::column_sum_acc(dx.data.data(), G + o.out_b, N, m);
        Matrix<T>& d_attn = act.d_attn;
    d_attn.reshape(N, m);
        kernels::matmul_nt(dx.data.data(), P + o.out_w, d_attn.data.data(), N, m, m, false, &act.bt);
        d_qkv.zero();
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                gather_transposed(a.qkv, b * n, n, 2 * m + h * dh, dh, vt.data());
                const T* probs = a.probs.data() + ((b * H + h) * n) * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* dout = d_attn.row(b * n + i) + h * dh;
                    const T* prow = probs + i * n;
                    // dP[j] = dout . v_j
                    std::fill(dprob.begin(), dprob.end(), T(0));
                    for (std::size_t k = 0; k < dh; ++k) {
                        const T dk = dout[k];
                        const T* vr = vt.data() + k * n;
                        for (std::size_t j = 0; j < n; ++j) dprob[j] += dk * vr[j];
                    }
                    T dot = 0;
                    for (std::size_t j = 0; j < n; ++j) dot += dprob[j] * prow[j];
                    const T* __restrict q = a.qkv.row(b * n + i) + h * dh;
                    T* __restrict dq = head_acc.data();
                    std::fill(dq, dq + dh, T(0));
                    for (std::size_t j = 0; j < n; ++j) {
                        const T pj = prow[j];
                        const T ds = pj * (dprob[j] - dot) * scale;
                        const T* __restrict kv = a.qkv.row(b * n + j) + m + h * dh;
                        T* __restrict dk = d_qkv.row(b * n + j) + m + h * dh;
                        T* __restrict dv = dk + m;
                        for (std::size_t k = 0; k < dh; ++k) {
                            dq[k] += ds * kv[k];
                            dk[k] += ds * q[k];
                            dv[k] += pj * dout[k];
                        }
                    }
                    T* dq_row = d_qkv.row(b * n + i) + h * dh;
                    for (std::size_t k = 0; k < dh; ++k) dq_row[k] += dq[k];
                }
            }
        }
        kernels::matmul_tn_acc(a.a.data.data(), d_qkv.data.data(), G + o.qkv_w, N, m, 3 * m);
        kernels::column_sum_acc(d_qkv.data.data(), G + o.qkv_b, N, 3 * m);
        kernels::matmul_nt(d_qkv.data.data(), P + o.qkv_w, d_norm_out.data.data(), N, 3 * m, m, false, &act.bt);
        layer_norm_backward(d_norm_out.data.data(), a.ln1.xhat.data.data(), a.ln1.rstd.data(), P + o.ln1_g, N, m,
                            dx.data.data(), G + o.ln1_g, G + o.ln1_b, true);
    }

    // Positional embedding, learned CLS, then the stem.
    for (std::size_t b = 0; b < B; ++b) {
        const T* cls_row = dx.row(b * n);
        for (std::size_t k = 0; k < m; ++k) G[off.cls + k] += cls_row[k];
        for (std::size_t t = 0; t < n; ++t) {
            const T* row = dx.row(b * n + t);
            T* gp = G + off.pos + t * m;
            for (std::size_t k = 0; k < m; ++k) gp[k] += row[k];
        }
    }
    Matrix<T>& dz = act.dz;
    dz.reshape(N, m);
    layer_norm_backward(dx.data.data(), act.proj_ln.xhat.data.data(), act.proj_ln.rstd.data(), P + off.proj_g, N, m,
                        dz.data.data(), G + off.proj_g, G + off.proj_lb, false);
    kernels::matmul_tn_acc(act.x_in.data.data(), dz.data.data(), G + off.proj_w, N, d, m);
    kernels::column_sum_acc(dz.data.data(), G + off.proj_b, N, m);

    return {ce.loss, act.logits};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'L', 'F', 'T', 'A', 'C', 'K', 'P', 'T'};
}

template <class T>
Checkpoint Checkpoint::from_classifier(const Classifier<T>& model, uint64_t step, double metric) {
    Checkpoint c;
    c.config = model.config();
    c.step = step;
    c.metric = metric;
    c.params.assign(model.params().begin(), model.params().end());
    return c;
}

template <class T>
Classifier<T> Checkpoint::to_classifier() const {
    Classifier<T> model(config);
    if (params.size() != model.params().size()) {
        throw ShapeMismatch("checkpoint holds " + std::to_string(params.size()) + " parameters, config implies " +
                            std::to_string(model.params().size()));
    }
    std::copy(params.begin(), params.end(), model.params().begin());
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const ParamLayout layout(ckpt.config);
    if (layout.total() != ckpt.params.size()) throw ShapeMismatch("checkpoint parameters do not match its config");
    json header{{"format_version", 1},       {"config", ckpt.config}, {"step", ckpt.step},
                {"metric", ckpt.metric},     {"dtype", "f32"},        {"byte_order", "little"},
                {"param_count", layout.total()}};
    json tensors = json::array();
    for (const auto& t : layout.tensors()) {
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}, {"size", t.size}});
    }
    header["tensors"] = std::move(tensors);
    const std::string text = header.dump();

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw StorageError("cannot write checkpoint " + tmp.string());
        os.write(kCkptMagic, sizeof(kCkptMagic));
        uint64_t len = text.size();
        unsigned char lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>(len >> (8 * i));
        os.write(reinterpret_cast<const char*>(lenb), 8);
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        std::vector<unsigned char> blob(ckpt.params.size() * 4);
        for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
            const uint32_t bits = std::bit_cast<uint32_t>(ckpt.params[i]);
            for (int k = 0; k < 4; ++k) blob[4 * i + k] = static_cast<unsigned char>(bits >> (8 * k));
        }
        os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
        if (!os) throw StorageError("write failed for checkpoint " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw StorageError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw StorageError("cannot open checkpoint " + path.string());
    char magic[8];
    unsigned char lenb[8];
    is.read(magic, 8);
    is.read(reinterpret_cast<char*>(lenb), 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0) throw StorageError(path.string() + ": not a checkpoint file");
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(lenb[i]) << (8 * i);
    if (len > (1u << 26)) throw StorageError(path.string() + ": implausible header length");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw StorageError(path.string() + ": truncated header");
    Checkpoint c;
    try {
        const json header = json::parse(text);
        header.at("config").get_to(c.config);
        c.step = header.at("step").get<uint64_t>();
        c.metric = header.value("metric", 0.0);
    } catch (const json::exception& e) {
        throw StorageError(path.string() + ": malformed header: " + e.what());
    }
    const ParamLayout layout(c.config);
    std::vector<unsigned char> blob(layout.total() * 4);
    is.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (static_cast<std::size_t>(is.gcount()) != blob.size()) throw StorageError(path.string() + ": truncated parameters");
    c.params.resize(layout.total());
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) bits |= static_cast<uint32_t>(blob[4 * i + k]) << (8 * k);
        c.params[i] = std::bit_cast<float>(bits);
    }
    return c;
}

std::size_t load_matching(Classifier<float>& target, const Checkpoint& source) {
    const ParamLayout src_layout(source.config);
    std::size_t taken = 0;
    for (const auto& t : target.layout().tensors()) {
        const ParamTensor* s = nullptr;
        for (const auto& cand : src_layout.tensors()) {
            if (cand.name == t.name) s = &cand;
        }
        if (!s) continue;
        auto dst = target.param(t.name);
        if (s->shape == t.shape) {
            std::copy_n(source.params.begin() + static_cast<std::ptrdiff_t>(s->offset), t.size, dst.begin());
            ++taken;
            continue;
        }
        const auto& sc = source.config;
        const auto& tc = target.config();
        if (t.name == "pos_embed" && sc.embed_dim == tc.embed_dim) {
            // Row 0 is the CLS position; rows 1.. form the token grid.
            const std::size_t m = tc.embed_dim;
            const float* src = source.params.data() + s->offset;
            std::copy_n(src, m, dst.begin());
            FeatureGrid grid(sc.grid_h, sc.grid_w, static_cast<uint32_t>(m),
                             std::span<const float>(src + m, static_cast<std::size_t>(sc.grid_h) * sc.grid_w * m));
            FeatureGrid resampled(tc.grid_h, tc.grid_w, static_cast<uint32_t>(m));
            for (uint32_t r = 0; r < tc.grid_h; ++r) {
                double sy = std::clamp((r + 0.5) * sc.grid_h / tc.grid_h - 0.5, 0.0, sc.grid_h - 1.0);
                const auto y0 = static_cast<uint32_t>(sy);
                const uint32_t y1 = std::min(y0 + 1, sc.grid_h - 1);
                const double fy = sy - y0;
                for (uint32_t c = 0; c < tc.grid_w; ++c) {
                    double sx = std::clamp((c + 0.5) * sc.grid_w / tc.grid_w - 0.5, 0.0, sc.grid_w - 1.0);
                    const auto x0 = static_cast<uint32_t>(sx);
                    const uint32_t x1 = std::min(x0 + 1, sc.grid_w - 1);
                    const double fx = sx - x0;
                    for (uint32_t k = 0; k < m; ++k) {
                        const double top = (1 - fx) * grid.at(y0, x0, k) + fx * grid.at(y0, x1, k);
                        const double bot = (1 - fx) * grid.at(y1, x0, k) + fx * grid.at(y1, x1, k);
                        resampled.at(r, c, k) = static_cast<float>((1 - fy) * top + fy * bot);
                    }
                }
            }
            std::copy(resampled.values.begin(), resampled.values.end(), dst.begin() + static_cast<std::ptrdiff_t>(m));
            ++taken;
        }
    }
    return taken;
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

template class Workspace<float>;
template class Workspace<double>;
template class Classifier<float>;
template class Classifier<double>;
template Matrix<float> project(const Matrix<float>&, const ProjectionParams<float>&, double);
template Matrix<double> project(const Matrix<double>&, const ProjectionParams<double>&, double);
template std::vector<float> merge_cls(std::span<const float>, std::span<const float>);
template std::vector<double> merge_cls(std::span<const double>, std::span<const double>);
template CrossEntropy<float> cross_entropy(const Matrix<float>&, std::span<const uint32_t>);
template CrossEntropy<double> cross_entropy(const Matrix<double>&, std::span<const uint32_t>);
template Checkpoint Checkpoint::from_classifier(const Classifier<float>&, uint64_t, double);
template Checkpoint Checkpoint::from_classifier(const Classifier<double>&, uint64_t, double);
template Classifier<float> Checkpoint::to_classifier() const;
template Classifier<double> Checkpoint::to_classifier() const;

}  // namespace loffta::model
