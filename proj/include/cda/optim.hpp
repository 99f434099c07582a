#pragma once

#include <string>
#include <unordered_map>

#include "cda/model.hpp"

namespace cda {

struct OptimizerSpec {
    enum class Kind { sgd_momentum, lars };
    enum class Schedule { constant, cosine };

    Kind kind = Kind::sgd_momentum;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double trust = 0.001;  // lars trust coefficient
    double eps = 1e-9;     // lars denominator floor
    Schedule schedule = Schedule::constant;

    void validate() const;
};

// Learning-rate factor at `step` of `total_steps` under the schedule.
double schedule_scale(OptimizerSpec::Schedule schedule, size_t step, size_t total_steps);

// sgd_momentum: v <- m v + g + wd w;  w <- w - lr v
// lars: layer rate = trust ||w|| / (||g|| + wd ||w|| + eps), falling back
// to 1 when ||w|| = 0 so zero-initialized tensors can move; then the same
// momentum update scaled by lr * layer rate.
class Optimizer {
public:
    explicit Optimizer(OptimizerSpec spec);

    void step(ParameterStore& store, const std::unordered_map<std::string, Tensor>& grads,
              double lr_scale = 1.0);

    const OptimizerSpec& spec() const { return spec_; }
    std::unordered_map<std::string, Tensor>& state() { return velocity_; }
    const std::unordered_map<std::string, Tensor>& state() const { return velocity_; }

private:
    OptimizerSpec spec_;
    std::unordered_map<std::string, Tensor> velocity_;
};

} // namespace cda
