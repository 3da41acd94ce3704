#include "flowgate/gradcheck.hpp"

#include <cmath>
#include <map>

namespace flowgate {

GradCheckReport grad_check(ParamStore& ps, const std::function<Tensor(ParamStore&)>& closure,
                           double eps) {
    if (ps.dtype != DType::F64)
        throw std::runtime_error("grad_check: store must be f64");
    if (!(eps > 0)) throw std::runtime_error("grad_check: eps must be positive");

    ps.zero_grads();
    Tensor loss = closure(ps);
    double base = loss.item();
    if (!std::isfinite(base))
        throw std::runtime_error("grad_check: non-finite loss at baseline");
    backward(loss);

    std::map<std::string, std::vector<double>> analytic;
    for (const auto& [name, e] : ps.entries) {
        if (e.frozen) continue;
        std::vector<double> g = e.t.grad_as_double();
        if (g.empty()) g.assign(static_cast<size_t>(e.t.numel()), 0.0);
        analytic[name] = std::move(g);
    }
    ps.zero_grads();

    GradCheckReport rep;
    NoGradGuard ng;
    for (auto& [name, e] : ps.entries) {
        if (e.frozen) continue;
        int64_t n = e.t.numel();
        for (int64_t i = 0; i < n; ++i) {
            double old = e.t.at(i);
            e.t.set(i, old + eps);
            double lp = closure(ps).item();
            e.t.set(i, old - eps);
            double lm = closure(ps).item();
            e.t.set(i, old);
            if (!std::isfinite(lp) || !std::isfinite(lm))
                throw std::runtime_error("grad_check: non-finite loss while perturbing '" + name +
                                         "'[" + std::to_string(i) + "]");
            double fd = (lp - lm) / (2.0 * eps);
            double a = analytic[name][static_cast<size_t>(i)];
            double rel = std::fabs(a - fd) / std::max(1.0, std::fabs(fd));
            rep.checked_scalars++;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = name;
                rep.worst_index = i;
                rep.analytic = a;
                rep.numeric = fd;
            }
        }
    }
    return rep;
}

}  // namespace flowgate
