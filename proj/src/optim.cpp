#include "cda/optim.hpp"

#include <cmath>

#include "cda/errors.hpp"

namespace cda {

void OptimizerSpec::validate() const {
    if (lr <= 0.0) throw ConfigError("optimizer: learning rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight decay must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer: momentum must be in [0, 1)");
    if (kind == Kind::lars && trust <= 0.0) throw ConfigError("optimizer: lars trust must be > 0");
}

double schedule_scale(OptimizerSpec::Schedule schedule, size_t step, size_t total_steps) {
    if (schedule == OptimizerSpec::Schedule::constant || total_steps == 0) return 1.0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

Optimizer::Optimizer(OptimizerSpec spec) : spec_(spec) { spec_.validate(); }

void Optimizer::step(ParameterStore& store, const std::unordered_map<std::string, Tensor>& grads,
                     double lr_scale) {
    for (const std::string& name : store.names) {
        auto git = grads.find(name);
        if (git == grads.end()) {
            throw NumericError("optimizer: missing gradient for parameter " + name);
        }
        Tensor& w = store.param(name);
        const Tensor& g = git->second;
        if (!w.same_shape(g)) {
            throw NumericError("optimizer: gradient shape " + shape_str(g.shape()) +
                               " does not match parameter " + name + " " + shape_str(w.shape()));
        }
        auto vit = velocity_.find(name);
        if (vit == velocity_.end()) vit = velocity_.emplace(name, Tensor::zeros(w.shape())).first;
        Tensor& v = vit->second;

        double rate = spec_.lr * lr_scale;
        if (spec_.kind == OptimizerSpec::Kind::lars) {
            double wn = 0.0, gn = 0.0;
            for (size_t i = 0; i < w.size(); ++i) wn += w[i] * w[i];
            for (size_t i = 0; i < g.size(); ++i) gn += g[i] * g[i];
            wn = std::sqrt(wn);
            gn = std::sqrt(gn);
            const double local =
                wn > 0.0 ? spec_.trust * wn / (gn + spec_.weight_decay * wn + spec_.eps) : 1.0;
            rate *= local;
        }
        for (size_t i = 0; i < w.size(); ++i) {
            v[i] = spec_.momentum * v[i] + g[i] + spec_.weight_decay * w[i];
            w[i] -= rate * v[i];
        }
    }
}

} // namespace cda
