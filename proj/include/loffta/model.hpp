// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "loffta/grid.hpp"
#include "loffta/tensor.hpp"

// Classifier trained on cached tokens: a linear projection + LayerNorm stem,
// the cached CLS summed with a learned CLS, a pre-norm transformer encoder
// and a linear head on the CLS position. No dropout anywhere.
namespace loffta::model {

struct ModelConfig {
    // Input shape, normally taken from the cache manifest.
    uint32_t in_dim = 0;
    uint32_t grid_h = 0;
    uint32_t grid_w = 0;
    uint32_t num_classes = 0;

    // Encoder shape; defaults follow DeiT-S.
    uint32_t embed_dim = 384;
    uint32_t depth = 12;
    uint32_t heads = 6;
    uint32_t mlp_ratio = 4;
    double ln_eps = 1e-6;
    double init_std = 0.02;
    /// Rows of pos_embed; 0 means h*w + 1. Extra rows are never used.
    uint32_t pos_rows = 0;

    uint32_t seq_len() const noexcept { return grid_h * grid_w + 1; }
    uint32_t pos_rows_or_default() const noexcept { return pos_rows ? pos_rows : seq_len(); }
    uint32_t head_dim() const noexcept { return embed_dim / heads; }
    uint32_t hidden_dim() const noexcept { return embed_dim * mlp_ratio; }
    /// Throws InvalidParameter.
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Missing fields keep their current values.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParamTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    /// Weight decay applies to matrix weights only.
    bool decay = false;
};

/// Fixed parameter order, which is also the checkpoint blob order:
///   proj.weight [d, m], proj.bias, proj.ln.gain, proj.ln.bias, cls_token,
///   pos_embed [rows, m], then per block i: blocks.i.{ln1.gain, ln1.bias,
///   attn.qkv.weight [m, 3m], attn.qkv.bias, attn.out.weight [m, m],
///   attn.out.bias, ln2.gain, ln2.bias, mlp.fc1.weight [m, 4m], mlp.fc1.bias,
///   mlp.fc2.weight [4m, m], mlp.fc2.bias}, norm.gain, norm.bias,
///   head.weight [m, C], head.bias.
class ParamLayout {
public:
    explicit ParamLayout(const ModelConfig& cfg);

    const std::vector<ParamTensor>& tensors() const noexcept { return tensors_; }
    std::size_t total() const noexcept { return total_; }
    /// Throws InvalidParameter for unknown names.
    const ParamTensor& find(std::string_view name) const;
    /// 1 for decayed elements, 0 otherwise; length total().
    std::vector<uint8_t> decay_mask() const;

private:
    std::vector<ParamTensor> tensors_;
    std::size_t total_ = 0;
};

/// Views of the projection stem parameters.
template <class T>
struct ProjectionParams {
    std::span<const T> weight;  // in_dim x out_dim
    std::span<const T> bias;
    std::span<const T> ln_gain;
    std::span<const T> ln_bias;
};

/// Per token: LN(x W + b) with population variance and the given epsilon.
template <class T>
Matrix<T> project(const Matrix<T>& tokens, const ProjectionParams<T>& p, double eps = 1e-6);

/// Elementwise sum of the projected cached CLS and the learned CLS.
template <class T>
std::vector<T> merge_cls(std::span<const T> offline_cls, std::span<const T> learned_cls);

template <class T>
struct CrossEntropy {
    double loss = 0.0;
    Matrix<T> probs;
    /// (softmax - onehot) / batch
    Matrix<T> grad;
};

/// Mean cross-entropy over rows. Throws IndexError for labels >= C.
template <class T>
CrossEntropy<T> cross_entropy(const Matrix<T>& logits, std::span<const uint32_t> labels);

/// LayerNorm outputs captured during forward, one matrix per site in
/// network order: stem, then ln1/ln2 per block, then the final norm (CLS rows).
template <class T>
struct ForwardTrace {
    std::vector<std::string> sites;
    std::vector<Matrix<T>> outputs;
};

template <class T>
struct LossAndGrad {
    double loss = 0.0;
    Matrix<T> logits;
};

template <class T>
class Classifier;

/// Reusable activation and scratch buffers for forward/backward. Passing the
/// same workspace to successive calls avoids reallocating every step. One
/// workspace per concurrent caller.
template <class T>
class Workspace {
public:
    Workspace();
    ~Workspace();
    Workspace(Workspace&&) noexcept;
    Workspace& operator=(Workspace&&) noexcept;

private:
    friend class Classifier<T>;
    struct State;
    std::unique_ptr<State> state_;
};

template <class T>
class Classifier {
public:
    explicit Classifier(const ModelConfig& cfg);

    const ModelConfig& config() const noexcept { return cfg_; }
    const ParamLayout& layout() const noexcept { return layout_; }
    std::span<T> params() noexcept { return params_; }
    std::span<const T> params() const noexcept { return params_; }
    std::span<T> param(std::string_view name);
    std::span<const T> param(std::string_view name) const;

    /// Truncated-normal (std init_std, cut at 2 std) matrices, cls and pos_embed;
    /// zero biases and LN biases; unit LN gains.
    void init(uint64_t seed);

    /// Logits [batch x C]. Records must match (in_dim, grid_h, grid_w).
    Matrix<T> forward(std::span<const FeatureRecord> batch, ForwardTrace<T>* trace = nullptr,
                      Workspace<T>* ws = nullptr) const;

    /// Mean cross-entropy against record labels and exact gradients of every
    /// parameter, written (not accumulated) into `grads` of length params().size().
    LossAndGrad<T> loss_and_grad(std::span<const FeatureRecord> batch, std::span<T> grads,
                                 Workspace<T>* ws = nullptr) const;

private:
    struct Offsets;
    using State = typename Workspace<T>::State;
    void check_batch(std::span<const FeatureRecord> batch) const;
    void run_forward(std::span<const FeatureRecord> batch, State& act, ForwardTrace<T>* trace) const;

    ModelConfig cfg_;
    ParamLayout layout_;
    tracked_vector<T> params_;
};

/// Saved parameters: `LFTACKPT` magic, u64 little-endian JSON header length,
/// JSON header {format_version, config, step, metric, tensors[{name, shape,
/// offset, size}], dtype "f32", byte_order "little"}, then the f32 blob in
/// ParamLayout order.
struct Checkpoint {
    ModelConfig config;
    uint64_t step = 0;
    double metric = 0.0;
    std::vector<float> params;

    template <class T>
    static Checkpoint from_classifier(const Classifier<T>& model, uint64_t step, double metric);
    template <class T>
    Classifier<T> to_classifier() const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws StorageError / CorruptShard-style Error on malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies tensors from `source` into `target` where names and shapes match.
/// A pos_embed over a different grid is bilinearly resampled to the target grid.
/// Returns the number of tensors taken from the source.
std::size_t load_matching(Classifier<float>& target, const Checkpoint& source);

}  // namespace loffta::model
