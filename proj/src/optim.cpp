#include "flowgate/optim.hpp"

#include <cmath>

namespace flowgate {

void AdamW::step(ParamStore& ps, const std::vector<std::vector<std::string>>& groups,
                 int step_index) {
    double lr = cfg_.lr;
    if (cfg_.warmup_steps > 0 && step_index < cfg_.warmup_steps)
        lr *= static_cast<double>(step_index) / cfg_.warmup_steps;
    last_lr_ = lr;
    last_norms_.assign(groups.size(), 0.0);

    double bc1 = 1.0 - std::pow(cfg_.beta1, step_index);
    double bc2 = 1.0 - std::pow(cfg_.beta2, step_index);

    for (size_t gi = 0; gi < groups.size(); ++gi) {
        // group gradient norm, fixed name order
        double sq = 0.0;
        for (const std::string& name : groups[gi]) {
            const auto& e = ps.entries.at(name);
            if (e.frozen) continue;
            std::vector<double> g = e.t.grad_as_double();
            for (double x : g) sq += x * x;
        }
        double norm = std::sqrt(sq);
        last_norms_[gi] = norm;
        double gscale = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

        for (const std::string& name : groups[gi]) {
            auto& e = ps.entries.at(name);
            if (e.frozen) continue;
            int64_t n = e.t.numel();
            State& st = state_[name];
            if (st.m.empty()) {
                st.m.assign(static_cast<size_t>(n), 0.0);
                st.v.assign(static_cast<size_t>(n), 0.0);
            }
            std::vector<double> g = e.t.grad_as_double();
            if (g.empty()) g.assign(static_cast<size_t>(n), 0.0);
            for (int64_t i = 0; i < n; ++i) {
                double gi_ = g[static_cast<size_t>(i)] * gscale;
                double m = st.m[static_cast<size_t>(i)] =
                    cfg_.beta1 * st.m[static_cast<size_t>(i)] + (1.0 - cfg_.beta1) * gi_;
                double v = st.v[static_cast<size_t>(i)] =
                    cfg_.beta2 * st.v[static_cast<size_t>(i)] + (1.0 - cfg_.beta2) * gi_ * gi_;
                double mhat = m / bc1;
                double vhat = v / bc2;
                double theta = e.t.at(i);
                theta -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta);
                e.t.set(i, theta);
            }
        }
    }
}

}  // namespace flowgate
