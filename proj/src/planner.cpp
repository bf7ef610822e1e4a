#include "gradloc/planner.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace gradloc {

void SplitPlan::validate(const SwinConfig& cfg) const {
    if (k <= 0 || static_cast<int>(blocks_per_module.size()) != k || static_cast<int>(boundaries.size()) != k)
        throw ConfigError("split plan: inconsistent module count");
    int total = 0;
    for (int b : blocks_per_module) {
        if (b < 2 || b % 2 != 0) throw ConfigError("split plan: module block counts must be even and >= 2");
        total += b;
    }
    if (total != cfg.total_blocks()) throw ConfigError("split plan: block counts do not cover the network");
    const auto specs = build_specs(cfg);
    int cum = 0;
    for (int i = 0; i < k; ++i) {
        cum += blocks_per_module[static_cast<std::size_t>(i)];
        if (boundaries[static_cast<std::size_t>(i)] != cum - 1)
            throw ConfigError("split plan: boundaries disagree with block counts");
        if (!specs[static_cast<std::size_t>(cum - 1)].shifted)
            throw ConfigError("split plan: module boundary not after an SW-MSA block");
    }
}

namespace {

struct PairInfo {
    int stage;     // stage the pair lives in
    double cost;   // 2 * per_block_cost(stage)
};

std::vector<PairInfo> make_pairs(const SwinConfig& cfg, const CostModel& model) {
    cfg.validate();
    std::vector<PairInfo> pairs;
    for (int s = 0; s < 4; ++s)
        for (int p = 0; p < cfg.depths[static_cast<std::size_t>(s)] / 2; ++p)
            pairs.push_back({s, 2.0 * model.per_block_cost(cfg, s)});
    return pairs;
}

// Rough auxiliary-block activation estimate for a module ending after pair
// `last`: the reduced feature map at the module output plus the decoder's
// reconstruction target at the module input.
double aux_units(const SwinConfig& cfg, const std::vector<PairInfo>& pairs, int first, int last) {
    const int out_stage = last + 1 < static_cast<int>(pairs.size())
                              ? pairs[static_cast<std::size_t>(last + 1)].stage
                              : 3;
    const int in_stage = pairs[static_cast<std::size_t>(first)].stage;
    const double out_tokens = static_cast<double>(cfg.stage_grid(out_stage)) * cfg.stage_grid(out_stage);
    const double c_aux = std::max(cfg.stage_channels(out_stage) / 2.0, 16.0);
    const double target = static_cast<double>(cfg.stage_grid(in_stage)) * cfg.stage_grid(in_stage) *
                          cfg.stage_channels(in_stage);
    return out_tokens * c_aux + target;
}

}  // namespace

std::vector<double> pair_costs(const SwinConfig& cfg, const CostModel& model) {
    std::vector<double> costs;
    for (const auto& p : make_pairs(cfg, model)) costs.push_back(p.cost);
    return costs;
}

SplitPlan plan_split(const SwinConfig& cfg, int k, const CostModel& model) {
    const auto pairs = make_pairs(cfg, model);
    const int n = static_cast<int>(pairs.size());
    if (k < 1 || k > n)
        throw ParameterError("plan_split: k must lie in [1, " + std::to_string(n) + "], got " +
                             std::to_string(k));

    // Prefix sums over pair costs.
    std::vector<double> prefix(static_cast<std::size_t>(n) + 1, 0.0);
    for (int i = 0; i < n; ++i) prefix[static_cast<std::size_t>(i + 1)] = prefix[static_cast<std::size_t>(i)] + pairs[static_cast<std::size_t>(i)].cost;
    auto group_cost = [&](int first, int last, bool is_last_module) {
        double c = prefix[static_cast<std::size_t>(last + 1)] - prefix[static_cast<std::size_t>(first)];
        if (model.include_aux && !is_last_module) c += aux_units(cfg, pairs, first, last);
        return c;
    };

    // Exhaustive enumeration of compositions in lexicographic order; the
    // first strict improvement wins, so ties resolve to the smallest
    // blocks_per_module sequence.
    std::vector<int> sizes(static_cast<std::size_t>(k), 0), best;
    double best_max = -1.0;
    std::vector<double> best_costs;
    std::vector<double> costs(static_cast<std::size_t>(k), 0.0);

    auto recurse = [&](auto&& self, int module, int start, double running_max) -> void {
        if (module == k - 1) {
            sizes[static_cast<std::size_t>(module)] = n - start;
            costs[static_cast<std::size_t>(module)] = group_cost(start, n - 1, true);
            const double mx = std::max(running_max, costs[static_cast<std::size_t>(module)]);
            if (best_max < 0 || mx < best_max) {
                best_max = mx;
                best = sizes;
                best_costs = costs;
            }
            return;
        }
        const int remaining_modules = k - module - 1;
        for (int len = 1; start + len + remaining_modules <= n; ++len) {
            sizes[static_cast<std::size_t>(module)] = len;
            costs[static_cast<std::size_t>(module)] = group_cost(start, start + len - 1, false);
            self(self, module + 1, start + len, std::max(running_max, costs[static_cast<std::size_t>(module)]));
        }
    };
    recurse(recurse, 0, 0, 0.0);

    SplitPlan plan;
    plan.k = k;
    int cum = 0;
    for (int i = 0; i < k; ++i) {
        plan.blocks_per_module.push_back(2 * best[static_cast<std::size_t>(i)]);
        cum += 2 * best[static_cast<std::size_t>(i)];
        plan.boundaries.push_back(cum - 1);
        plan.module_costs.push_back(best_costs[static_cast<std::size_t>(i)]);
    }
    plan.validate(cfg);
    return plan;
}

std::string partition_report(const SplitPlan& plan, const SwinConfig& cfg, const CostModel& model,
                             int batch, bool csv) {
    plan.validate(cfg);
    const auto specs = build_specs(cfg);
    const double unit0 = model.per_block_cost(cfg, 0);

    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    if (csv)
        os << "module,blocks,stages,cost_units,est_bytes\n";
    else
        os << std::setw(7) << "module" << std::setw(8) << "blocks" << std::setw(9) << "stages"
           << std::setw(12) << "cost_units" << std::setw(16) << "est_bytes" << "\n";

    int first = 0;
    for (int i = 0; i < plan.k; ++i) {
        const int last = plan.boundaries[static_cast<std::size_t>(i)];
        const int s0 = specs[static_cast<std::size_t>(first)].stage;
        const int s1 = specs[static_cast<std::size_t>(last)].stage;
        const std::string stages = s0 == s1 ? std::to_string(s0) : std::to_string(s0) + "-" + std::to_string(s1);
        const double units = plan.module_costs[static_cast<std::size_t>(i)] / unit0;
        const double bytes = plan.module_costs[static_cast<std::size_t>(i)] * model.unit_bytes * batch;
        if (csv)
            os << (i + 1) << "," << plan.blocks_per_module[static_cast<std::size_t>(i)] << "," << stages << ","
               << units << "," << std::setprecision(0) << bytes << std::setprecision(2) << "\n";
        else
            os << std::setw(7) << (i + 1) << std::setw(8) << plan.blocks_per_module[static_cast<std::size_t>(i)]
               << std::setw(9) << stages << std::setw(12) << units << std::setw(16) << std::setprecision(0)
               << bytes << std::setprecision(2) << "\n";
        first = last + 1;
    }
    return os.str();
}

}  // namespace gradloc
