#pragma once
// Central-difference gradient oracle. Runs in 64-bit: finite differences are
// not trustworthy at f32.

#include <functional>
#include <string>

#include "flowgate/params.hpp"

namespace flowgate {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    int64_t checked_scalars = 0;
};

// closure must be a deterministic scalar-valued function of the store.
// Returns max over trainable scalars of |analytic - central| / max(1, |central|).
GradCheckReport grad_check(ParamStore& ps,
                           const std::function<Tensor(ParamStore&)>& closure, double eps);

}  // namespace flowgate
