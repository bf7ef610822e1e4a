#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gradloc/tensor.hpp"

namespace gradloc {

// Central finite differences against the tape. fn must rebuild the scalar
// loss from the leaves on every call; the check perturbs leaf values in
// place under NoGradGuard, so the forward path is evaluated independently of
// any recorded graph.
struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

GradCheckResult check_gradients(const std::string& name, const LossFn& fn, std::vector<Tensor> leaves,
                                double h = 1e-5, double tol = 1e-4);

}  // namespace gradloc
