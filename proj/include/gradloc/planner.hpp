#pragma once

#include <string>
#include <vector>

#include "gradloc/swin.hpp"

namespace gradloc {

// Analytic per-block activation cost: tokens(stage) * channels(stage) * kappa.
// Attention and MLP activations scale proportionally to tokens * channels, so
// one multiplier preserves the relative ordering between stages. Patch-merging
// activations ride along with the pair that owns the merge.
struct CostModel {
    double unit_bytes = 4.0;   // bytes per activation element
    double kappa = 1.0;        // activation elements per block, in tokens*channels units
    bool include_aux = false;  // add a per-module auxiliary-block estimate when planning

    double per_block_cost(const SwinConfig& cfg, int stage) const {
        const double tokens = static_cast<double>(cfg.stage_grid(stage)) * cfg.stage_grid(stage);
        return tokens * cfg.stage_channels(stage) * kappa;
    }
};

struct SplitPlan {
    int k = 1;
    std::vector<int> blocks_per_module;  // even entries, sums to total blocks
    std::vector<int> boundaries;         // 0-based index of each module's last block
    std::vector<double> module_costs;    // cost units per module

    void validate(const SwinConfig& cfg) const;
};

// One cost per W-MSA/SW-MSA pair, in block-list order.
std::vector<double> pair_costs(const SwinConfig& cfg, const CostModel& model);

// Contiguous partition of the pairs into k groups minimizing the maximum
// group cost; ties resolve to the lexicographically smallest
// blocks_per_module sequence.
SplitPlan plan_split(const SwinConfig& cfg, int k, const CostModel& model);

// Deterministic table (or CSV) with per-module blocks, stages, cost units
// normalized to one stage-0 block, and estimated activation bytes.
std::string partition_report(const SplitPlan& plan, const SwinConfig& cfg, const CostModel& model,
                             int batch, bool csv = false);

}  // namespace gradloc
