#pragma once
// Adam with decoupled weight decay, linear warmup then constant rate, and
// per-group gradient-norm clipping. Groups are clipped independently so
// heads that share no parameters also share no optimizer coupling.

#include <map>
#include <string>
#include <vector>

#include "flowgate/params.hpp"

namespace flowgate {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 3e-2;
    double clip_norm = 1.0;
    int warmup_steps = 100;
};

class AdamW {
  public:
    explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

    // step_index is 1-based. Each group is a list of parameter names; its
    // gradient norm is clipped to clip_norm before the update. Frozen
    // parameters are never touched.
    void step(ParamStore& ps, const std::vector<std::vector<std::string>>& groups,
              int step_index);

    double last_lr() const { return last_lr_; }
    // Pre-clip gradient norm of each group from the most recent step.
    const std::vector<double>& last_group_norms() const { return last_norms_; }

  private:
    struct State {
        std::vector<double> m, v;
    };
    OptimConfig cfg_;
    std::map<std::string, State> state_;
    double last_lr_ = 0.0;
    std::vector<double> last_norms_;
};

}  // namespace flowgate
