#include "cdsr/nn.hpp"

#include "cdsr/errors.hpp"
#include "cdsr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cdsr::nn {

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int padding) {
    return ag::conv2d(ag::Var::constant(x), ag::Var::constant(weight),
                      bias ? ag::Var::constant(*bias) : ag::Var(), stride, padding)
        .value();
}

Tensor softmax_rows(const Tensor& m) {
    if (!m.all_finite()) throw ArgumentError("softmax_rows: non-finite input");
    return ag::softmax_rows(ag::Var::constant(m)).value();
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta) {
    return ag::group_norm(ag::Var::constant(x), groups, ag::Var::constant(gamma), ag::Var::constant(beta)).value();
}

int norm_groups_for(int channels, int preferred) {
    int g = std::min(preferred, channels);
    while (g > 1 && channels % g != 0) --g;
    return std::max(g, 1);
}

void add_conv_specs(ParamSpecs& specs, const std::string& prefix, int in, int out, int kernel) {
    specs.emplace_back(prefix + ".weight", Shape{out, in, kernel, kernel});
    specs.emplace_back(prefix + ".bias", Shape{out});
}

ag::Var conv(ParamBinding& p, const std::string& prefix, const ag::Var& x, int stride, int padding) {
    return ag::conv2d(x, p(prefix + ".weight"), p(prefix + ".bias"), stride, padding);
}

void add_norm_specs(ParamSpecs& specs, const std::string& prefix, int channels) {
    specs.emplace_back(prefix + ".gamma", Shape{channels});
    specs.emplace_back(prefix + ".beta", Shape{channels});
}

ag::Var norm(ParamBinding& p, const std::string& prefix, const ag::Var& x, int groups) {
    return ag::group_norm(x, groups, p(prefix + ".gamma"), p(prefix + ".beta"));
}

void add_linear_specs(ParamSpecs& specs, const std::string& prefix, int in, int out, bool bias) {
    specs.emplace_back(prefix + ".weight", Shape{out, in});
    if (bias) specs.emplace_back(prefix + ".bias", Shape{out});
}

ag::Var dense(ParamBinding& p, const std::string& prefix, const ag::Var& x) {
    const std::string b = prefix + ".bias";
    return ag::linear(x, p(prefix + ".weight"), p.contains(b) ? p(b) : ag::Var());
}

void AttentionBlockConfig::validate() const {
    if (query_channels <= 0 || context_dim <= 0 || inner_dim <= 0 || layer_index < 0) {
        throw ArgumentError("AttentionBlockConfig: dimensions must be positive");
    }
}

void add_cross_attention_specs(ParamSpecs& specs, const std::string& prefix, const AttentionBlockConfig& cfg) {
    cfg.validate();
    specs.emplace_back(prefix + ".q.weight", Shape{cfg.inner_dim, cfg.query_channels, 1, 1});
    add_linear_specs(specs, prefix + ".k", cfg.context_dim, cfg.inner_dim, false);
    add_linear_specs(specs, prefix + ".v", cfg.context_dim, cfg.inner_dim, false);
    add_linear_specs(specs, prefix + ".out", cfg.inner_dim, cfg.query_channels, true);
}

std::vector<std::string> cross_attention_zero_init(const std::string& prefix) {
    return {prefix + ".out.weight", prefix + ".out.bias"};
}

ag::Var cross_attention(ParamBinding& p, const std::string& prefix, const ag::Var& z, const ag::Var& context,
                        const AttentionBlockConfig& cfg, Tensor* weights) {
    cfg.validate();
    if (z.value().rank() != 4 || z.dim(1) != cfg.query_channels) {
        throw ShapeError("cross_attention: features " + shape_str(z.shape()) + " do not have " +
                         std::to_string(cfg.query_channels) + " channels");
    }
    if (context.value().rank() != 3 || context.dim(0) != z.dim(0) || context.dim(2) != cfg.context_dim) {
        throw ShapeError("cross_attention: context " + shape_str(context.shape()) + " must be [" +
                         std::to_string(z.dim(0)) + ", L, " + std::to_string(cfg.context_dim) + "]");
    }
    const int H = z.dim(2), W = z.dim(3);
    ag::Var q = ag::to_tokens(ag::conv2d(z, p(prefix + ".q.weight"), ag::Var(), 1, 0));
    ag::Var k = dense(p, prefix + ".k", context);
    ag::Var v = dense(p, prefix + ".v", context);
    ag::Var scores = ag::scale(ag::matmul(q, k, true), 1.0f / std::sqrt(static_cast<float>(cfg.inner_dim)));
    ag::Var attn = ag::softmax_rows(scores);
    if (weights) *weights = attn.value();
    ag::Var mixed = ag::matmul(attn, v, false);
    ag::Var projected = dense(p, prefix + ".out", mixed);
    return ag::add(z, ag::from_tokens(projected, H, W));
}

GradCheckResult grad_check(const ScalarFn& f, ParamStore& params, const std::vector<std::string>& names,
                           const GradCheckOptions& options) {
    if (names.empty()) throw ArgumentError("grad_check: no parameters selected");
    ParamBinding binding(params, true);
    ag::Var loss = f(binding);
    if (!std::isfinite(loss.scalar())) throw NonFiniteError("grad_check: f is not finite at the base point");
    ag::backward(loss);
    const ParamStore grads = binding.gradients();

    std::vector<std::size_t> offsets{0};
    for (const auto& n : names) offsets.push_back(offsets.back() + params.get(n).size());
    const std::size_t total = offsets.back();
    std::vector<std::size_t> coords(total);
    std::iota(coords.begin(), coords.end(), 0);
    Rng rng = Rng::derive(options.seed, {0x67726164ull});
    std::shuffle(coords.begin(), coords.end(), rng.engine());
    coords.resize(std::min<std::size_t>(total, static_cast<std::size_t>(options.samples)));

    auto eval = [&]() {
        ParamBinding fixed(params, false);
        const double v = f(fixed).scalar();
        if (!std::isfinite(v)) throw NonFiniteError("grad_check: f is not finite in the step neighbourhood");
        return v;
    };

    GradCheckResult result;
    for (std::size_t flat : coords) {
        const auto which = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) -
                                                    offsets.begin() - 1);
        const std::string& name = names[which];
        const std::size_t idx = flat - offsets[which];
        float& slot = params.get_mut(name)[idx];
        const float saved = slot;
        slot = saved + options.step;
        const double up = eval();
        slot = saved - options.step;
        const double down = eval();
        slot = saved;
        // Divide by the step actually realised in float arithmetic.
        const double h2 = static_cast<double>(saved + options.step) - static_cast<double>(saved - options.step);
        const double numeric = (up - down) / h2;
        const double analytic = grads.get(name)[idx];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        const double rel = std::abs(numeric - analytic) / denom;
        ++result.coordinates;
        if (rel >= result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_name = name;
            result.worst_index = idx;
            result.worst_numeric = numeric;
            result.worst_analytic = analytic;
        }
    }
    return result;
}

DirectionalCheckResult gradient_direction_check(const ScalarFn& f, ParamStore& params,
                                                const std::vector<std::string>& names, float step) {
    if (names.empty()) throw ArgumentError("gradient_direction_check: no parameters selected");
    ParamBinding binding(params, true);
    ag::Var loss = f(binding);
    if (!std::isfinite(loss.scalar())) throw NonFiniteError("gradient_direction_check: f is not finite");
    ag::backward(loss);
    const ParamStore grads = binding.gradients();
    double norm2 = 0.0;
    for (const auto& n : names)
        for (float g : grads.get(n).values()) norm2 += static_cast<double>(g) * g;
    DirectionalCheckResult r;
    r.analytic = std::sqrt(norm2);
    if (r.analytic == 0.0) return r;

    const ParamStore saved = params;
    auto eval = [&](double h) {
        for (const auto& n : names) {
            Tensor& t = params.get_mut(n);
            const Tensor& g = grads.get(n);
            const Tensor& base = saved.get(n);
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(base[i] + h * g[i] / r.analytic);
        }
        ParamBinding fixed(params, false);
        const double v = f(fixed).scalar();
        if (!std::isfinite(v)) throw NonFiniteError("gradient_direction_check: f is not finite near the base point");
        return v;
    };
    const double up = eval(step);
    const double down = eval(-step);
    params = saved;
    r.numeric = (up - down) / (2.0 * step);
    r.rel_error = std::abs(r.numeric - r.analytic) / r.analytic;
    return r;
}

} // namespace cdsr::nn
