// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scalar reference forward pass of the token classifier, written directly
// from the architecture description with plain loops, templated on the
// scalar type so it can also run in long double.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "loffta/grid.hpp"
#include "loffta/model.hpp"

namespace loffta::oracle {

template <class S>
using VecT = std::vector<S>;

template <class S>
VecT<S> layer_norm(const VecT<S>& x, const S* gain, const S* bias, double eps) {
    const S n = S(x.size());
    S mean = 0;
    for (S v : x) mean += v;
    mean /= n;
    S var = 0;
    for (S v : x) var += (v - mean) * (v - mean);
    var /= n;
    VecT<S> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + S(eps)) * gain[i] + bias[i];
    return y;
}

// y = x W + b with W stored row-major [in, out].
template <class S>
VecT<S> affine(const VecT<S>& x, const S* W, const S* b, std::size_t out) {
    VecT<S> y(b, b + out);
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * W[i * out + j];
    return y;
}

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x / std::sqrt(S(2))));
}

// Logits for one record, parameters given as a flat vector in layout order.
template <class S>
VecT<S> classifier_forward(const model::ModelConfig& cfg, std::span<const S> params, const FeatureRecord& rec) {
    const model::ParamLayout layout(cfg);
    const std::size_t m = cfg.embed_dim, d = cfg.in_dim, n = cfg.seq_len(), H = cfg.heads, dh = m / H,
                      hid = cfg.hidden_dim(), C = cfg.num_classes;
    auto P = [&](const std::string& name) { return params.data() + layout.find(name).offset; };

    // Token 0 is the cached CLS, then grid cells row-major.
    std::vector<VecT<S>> tok(n, VecT<S>(d));
    for (std::size_t k = 0; k < d; ++k) tok[0][k] = rec.cls[k];
    for (std::size_t t = 1; t < n; ++t)
        for (std::size_t k = 0; k < d; ++k) tok[t][k] = rec.grid.values[(t - 1) * d + k];

    std::vector<VecT<S>> x(n);
    for (std::size_t t = 0; t < n; ++t)
        x[t] = layer_norm(affine(tok[t], P("proj.weight"), P("proj.bias"), m), P("proj.ln.gain"), P("proj.ln.bias"),
                          cfg.ln_eps);
    const S* cls = P("cls_token");
    const S* pos = P("pos_embed");
    for (std::size_t k = 0; k < m; ++k) x[0][k] += cls[k];
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < m; ++k) x[t][k] += pos[t * m + k];

    for (uint32_t l = 0; l < cfg.depth; ++l) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        std::vector<VecT<S>> q(n), kk(n), v(n);
        for (std::size_t t = 0; t < n; ++t) {
            const auto a = layer_norm(x[t], P(b + "ln1.gain"), P(b + "ln1.bias"), cfg.ln_eps);
            const auto qkv = affine(a, P(b + "attn.qkv.weight"), P(b + "attn.qkv.bias"), 3 * m);
            q[t].assign(qkv.begin(), qkv.begin() + m);
            kk[t].assign(qkv.begin() + m, qkv.begin() + 2 * m);
            v[t].assign(qkv.begin() + 2 * m, qkv.end());
        }
        std::vector<VecT<S>> attn(n, VecT<S>(m, S(0)));
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                VecT<S> s(n);
                S mx = S(-1e300);
                for (std::size_t j = 0; j < n; ++j) {
                    S dot = 0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * kk[j][h * dh + e];
                    s[j] = dot / std::sqrt(S(dh));
                    mx = std::max(mx, s[j]);
                }
                S z = 0;
                for (S& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t e = 0; e < dh; ++e) attn[i][h * dh + e] += s[j] / z * v[j][h * dh + e];
            }
        for (std::size_t t = 0; t < n; ++t) {
            const auto o = affine(attn[t], P(b + "attn.out.weight"), P(b + "attn.out.bias"), m);
            for (std::size_t k = 0; k < m; ++k) x[t][k] += o[k];
            auto h1 = affine(layer_norm(x[t], P(b + "ln2.gain"), P(b + "ln2.bias"), cfg.ln_eps),
                             P(b + "mlp.fc1.weight"), P(b + "mlp.fc1.bias"), hid);
            for (S& e : h1) e = gelu(e);
            const auto h2 = affine(h1, P(b + "mlp.fc2.weight"), P(b + "mlp.fc2.bias"), m);
            for (std::size_t k = 0; k < m; ++k) x[t][k] += h2[k];
        }
    }
    return affine(layer_norm(x[0], P("norm.gain"), P("norm.bias"), cfg.ln_eps), P("head.weight"), P("head.bias"), C);
}

template <class S>
S mean_cross_entropy(const model::ModelConfig& cfg, std::span<const S> params, std::span<const FeatureRecord> batch) {
    S total = 0;
    for (const auto& rec : batch) {
        const auto z = classifier_forward<S>(cfg, params, rec);
        S mx = S(-1e300);
        for (S v : z) mx = std::max(mx, v);
        S s = 0;
        for (S v : z) s += std::exp(v - mx);
        total += std::log(s) + mx - z[rec.label];
    }
    return total / S(batch.size());
}

inline std::vector<double> logits(const model::Classifier<double>& net, const FeatureRecord& rec) {
    return classifier_forward<double>(net.config(), net.params(), rec);
}

// Central differences of the mean loss, evaluated in long double and
// combined at steps h and h/2 to cancel the leading truncation term.
inline std::vector<double> numeric_gradient(const model::ModelConfig& cfg, std::span<const double> params,
                                            std::span<const FeatureRecord> batch, double h = 1e-3) {
    std::vector<long double> p(params.begin(), params.end());
    auto F = [&](std::size_t i, long double x) {
        const long double keep = p[i];
        p[i] = x;
        const long double v = mean_cross_entropy<long double>(cfg, p, batch);
        p[i] = keep;
        return v;
    };
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const long double s = p[i], H = h;
        const long double d1 = (F(i, s + H) - F(i, s - H)) / (2 * H);
        const long double d2 = (F(i, s + H / 2) - F(i, s - H / 2)) / H;
        g[i] = double((4 * d2 - d1) / 3);
    }
    return g;
}

// The smallest configuration used for exhaustive gradient checks.
inline model::ModelConfig tiny_config() {
    model::ModelConfig c;
    c.in_dim = 3;
    c.grid_h = 2;
    c.grid_w = 2;
    c.num_classes = 2;
    c.embed_dim = 8;
    c.depth = 1;
    c.heads = 2;
    c.mlp_ratio = 4;
    return c;
}

}  // namespace loffta::oracle
