#include "cda/grad_check.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cda {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& point, long coord) {
    Graph g;
    Value x = g.constant(point);
    Value loss = f(g, x);
    const double v = loss.val().scalar_value();
    if (!std::isfinite(v)) {
        throw std::runtime_error("finite_difference_check: non-finite value at coordinate " +
                                 std::to_string(coord));
    }
    return v;
}

} // namespace

double finite_difference_check(const ScalarFn& f, const Tensor& point, double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");

    Graph g;
    Value x = g.input(point);
    Value loss = f(g, x);
    if (loss.val().size() != 1) {
        throw std::invalid_argument("finite_difference_check: builder must return a scalar");
    }
    GradMap grads = g.backward(loss);

    Tensor analytic(point.shape());
    if (auto it = grads.find(x.id); it != grads.end()) analytic = it->second;
    if (!analytic.all_finite()) {
        throw std::runtime_error("finite_difference_check: non-finite analytic gradient");
    }

    double max_err = 0.0;
    Tensor probe = point;
    for (size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + step;
        const double up = eval_scalar(f, probe, static_cast<long>(i));
        probe[i] = point[i] - step;
        const double down = eval_scalar(f, probe, static_cast<long>(i));
        probe[i] = point[i];
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max(1.0, std::abs(analytic[i]));
        max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

} // namespace cda
