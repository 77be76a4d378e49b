#include "cdsr/optim.hpp"

#include "cdsr/errors.hpp"

#include <cmath>

namespace cdsr {

AdamWState AdamWState::zeros_like(const ParamStore& params) {
    AdamWState s;
    for (const auto& [name, t] : params) {
        s.m.add(name, Tensor(t.shape()));
        s.v.add(name, Tensor(t.shape()));
    }
    return s;
}

void adamw_step(ParamStore& params, const ParamStore& grads, AdamWState& state, const AdamWConfig& cfg) {
    for (const auto& [name, t] : params) {
        if (!grads.contains(name)) throw ShapeError("adamw_step: no gradient for " + name);
        const Tensor& g = grads.get(name);
        if (g.shape() != t.shape()) throw ShapeError("adamw_step: gradient shape mismatch for " + name);
        if (!g.all_finite()) throw NonFiniteError("adamw_step: non-finite gradient for " + name);
        if (!state.m.contains(name) || state.m.get(name).shape() != t.shape()) {
            throw ShapeError("adamw_step: optimizer moments do not match parameter " + name);
        }
    }
    const std::int64_t step = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& [name, theta] : params) {
        const Tensor& g = grads.get(name);
        Tensor& m = state.m.get_mut(name);
        Tensor& v = state.v.get_mut(name);
        float* pt = theta.data();
        float* pm = m.data();
        float* pv = v.data();
        const float* pg = g.data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = pg[i];
            const double mi = cfg.beta1 * pm[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * pv[i] + (1.0 - cfg.beta2) * gi * gi;
            pm[i] = static_cast<float>(mi);
            pv[i] = static_cast<float>(vi);
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps) + cfg.weight_decay * pt[i];
            pt[i] = static_cast<float>(pt[i] - cfg.lr * update);
        }
    }
    state.step = step;
}

} // namespace cdsr
