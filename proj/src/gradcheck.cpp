#include "gradloc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gradloc {

GradCheckResult check_gradients(const std::string& name, const LossFn& fn, std::vector<Tensor> leaves,
                                double h, double tol) {
    for (auto& leaf : leaves) {
        if (leaf.dtype() != DType::F64) throw ContractError("gradcheck requires f64 leaves");
        if (!leaf.requires_grad()) throw ContractError("gradcheck leaves must require grad");
        leaf.clear_grad();
    }

    Tensor loss = fn(leaves);
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        Tensor g = leaf.grad();
        analytic.push_back(g.defined() ? g.to_doubles()
                                       : std::vector<double>(static_cast<std::size_t>(leaf.numel()), 0.0));
        leaf.clear_grad();
    }

    double max_abs_diff = 0.0;
    double scale = 0.0;
    {
        NoGradGuard ng;
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            auto vals = leaves[li].data<double>();
            for (std::size_t i = 0; i < vals.size(); ++i) {
                const double saved = vals[i];
                vals[i] = saved + h;
                const double f1 = fn(leaves).item();
                vals[i] = saved - h;
                const double f2 = fn(leaves).item();
                vals[i] = saved;
                const double fd = (f1 - f2) / (2.0 * h);
                const double an = analytic[li][i];
                max_abs_diff = std::max(max_abs_diff, std::abs(an - fd));
                scale = std::max({scale, std::abs(an), std::abs(fd)});
            }
        }
    }

    GradCheckResult r;
    r.name = name;
    r.max_rel_err = max_abs_diff / std::max(scale, 1e-6);
    r.pass = r.max_rel_err <= tol;
    return r;
}

}  // namespace gradloc
