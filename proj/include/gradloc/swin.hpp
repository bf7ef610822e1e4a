#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "gradloc/nn.hpp"
#include "gradloc/tensor.hpp"

namespace gradloc {

// Architecture hyperparameters. Stages double channels and halve the token
// grid; blocks alternate W-MSA / SW-MSA in pairs within a stage.
struct SwinConfig {
    int image_size = 32;
    int patch_size = 2;
    int embed_dim = 24;
    std::array<int, 4> depths{2, 2, 6, 2};
    std::array<int, 4> heads{2, 4, 8, 8};
    int window = 4;
    double mlp_ratio = 4.0;
    int num_classes = 10;

    void validate() const;
    int total_blocks() const { return depths[0] + depths[1] + depths[2] + depths[3]; }
    int stage_channels(int s) const { return embed_dim << s; }
    int stage_grid(int s) const { return (image_size / patch_size) >> s; }
    // Window clamped to the grid; shift 0 when one window covers the grid.
    int effective_window(int s) const { return std::min(window, stage_grid(s)); }
    int shift_size(int s) const {
        const int w = effective_window(s);
        return w >= stage_grid(s) ? 0 : w / 2;
    }

    static SwinConfig preset(const std::string& name);
};

struct BlockSpec {
    int index = 0;              // position in the flattened block list
    int stage = 0;              // 0..3
    bool shifted = false;       // SW-MSA on odd positions within a stage
    bool has_merge_after = false;  // patch merging attached after this block
};

std::vector<BlockSpec> build_specs(const SwinConfig& cfg);

struct BlockParams {
    LayerNorm ln1, ln2;
    Linear qkv;       // C -> 3C
    Linear proj;      // C -> C
    Tensor rel_bias;  // [(2w-1)^2, heads], learned, zero-initialized
    Linear fc1, fc2;  // MLP with mlp_ratio expansion

    void collect(const std::string& prefix, ParamMap& out) const;
};

struct MergeParams {
    LayerNorm norm;  // over 4C
    Linear reduce;   // 4C -> 2C, no bias

    void collect(const std::string& prefix, ParamMap& out) const;
};

struct EmbedParams {
    Linear proj;     // 3*p*p -> C
    LayerNorm norm;  // over C

    void collect(const std::string& prefix, ParamMap& out) const;
};

struct HeadParams {
    LayerNorm norm;
    Linear fc;  // C_last -> num_classes

    void collect(const std::string& prefix, ParamMap& out) const;
};

struct SwinModel {
    SwinConfig cfg;
    DType dtype = DType::F32;
    EmbedParams embed;
    std::vector<BlockSpec> specs;
    std::vector<BlockParams> blocks;
    std::array<MergeParams, 3> merges;  // after stages 0..2
    HeadParams head;

    // Per-stage constants: flattened index map into the bias table (already
    // expanded over heads) and the additive attention mask for the shifted
    // path (undefined when shift is 0).
    std::array<std::shared_ptr<const std::vector<std::int64_t>>, 4> bias_map;
    std::array<Tensor, 4> attn_mask;  // [nW, T, T]

    ParamMap parameters() const;              // full canonical listing
    ParamMap embed_parameters() const;
    ParamMap block_parameters(int index) const;  // includes the attached merge
    ParamMap head_parameters() const;
};

SwinModel build_model(const SwinConfig& cfg, Rng& rng, DType dtype = DType::F32);

// [B,3,H,W] image -> [B,h,w,C] token grid through the linear embedding.
Tensor patch_embed(const SwinModel& m, const Tensor& image);

// Multi-head windowed attention on a pre-normalized grid, including relative
// position bias, cyclic shift and the cross-region mask for SW-MSA.
Tensor window_msa(const SwinModel& m, const Tensor& normed, const BlockSpec& spec);

// Full pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x)).
Tensor block_forward(const SwinModel& m, const Tensor& grid, const BlockSpec& spec);

Tensor merge_forward(const SwinModel& m, const Tensor& grid, int stage);

Tensor head_forward(const SwinModel& m, const Tensor& grid);

// Runs blocks [first, last] inclusive plus their attached merges.
Tensor forward_blocks(const SwinModel& m, Tensor grid, int first, int last);

Tensor forward_e2e(const SwinModel& m, const Tensor& image);

}  // namespace gradloc
