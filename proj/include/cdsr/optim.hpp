#pragma once

#include "cdsr/param_store.hpp"

#include <cstdint>

namespace cdsr {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double eps = 1e-8;
};

/// First/second moments, shaped like the parameters, plus the number of
/// updates applied so far.
struct AdamWState {
    ParamStore m;
    ParamStore v;
    std::int64_t step = 0;

    static AdamWState zeros_like(const ParamStore& params);
};

/// m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2;
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
/// Throws NonFiniteError naming the first parameter with a non-finite
/// gradient; nothing is modified in that case.
void adamw_step(ParamStore& params, const ParamStore& grads, AdamWState& state, const AdamWConfig& cfg);

} // namespace cdsr
