#pragma once

#include "cdsr/autograd.hpp"
#include "cdsr/param_store.hpp"
#include "cdsr/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace cdsr::nn {

using ParamSpecs = std::vector<std::pair<std::string, Shape>>;

// Graph-free conveniences over the autograd ops.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int padding);
Tensor softmax_rows(const Tensor& m);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta);

/// 8 groups, or fewer when the channel count is smaller / not divisible.
int norm_groups_for(int channels, int preferred = 8);

/// `<prefix>.weight` [out,in,k,k] and `<prefix>.bias` [out].
void add_conv_specs(ParamSpecs& specs, const std::string& prefix, int in, int out, int kernel);
ag::Var conv(ParamBinding& p, const std::string& prefix, const ag::Var& x, int stride, int padding);

void add_norm_specs(ParamSpecs& specs, const std::string& prefix, int channels);
ag::Var norm(ParamBinding& p, const std::string& prefix, const ag::Var& x, int groups);

void add_linear_specs(ParamSpecs& specs, const std::string& prefix, int in, int out, bool bias = true);
ag::Var dense(ParamBinding& p, const std::string& prefix, const ag::Var& x);

struct AttentionBlockConfig {
    int query_channels = 0;
    int context_dim = 0;
    int inner_dim = 0;
    int layer_index = 0;

    void validate() const;
};

/// Parameters of one cross-attention block: q (1x1 conv, no bias), k and v
/// (linear, no bias), out (linear with bias). The out projection is listed
/// by `cross_attention_zero_init` so a fresh block is a residual no-op.
void add_cross_attention_specs(ParamSpecs& specs, const std::string& prefix, const AttentionBlockConfig& cfg);
std::vector<std::string> cross_attention_zero_init(const std::string& prefix);

/// z + out( softmax(Q K^T / sqrt(d)) V ) with Q from a 1x1 conv of z
/// (spatial positions become query tokens) and K, V linear maps of the
/// context tokens [N, L, context_dim]. When `weights` is non-null it
/// receives the softmax matrix [N, H*W, L].
ag::Var cross_attention(ParamBinding& p, const std::string& prefix, const ag::Var& z, const ag::Var& context,
                        const AttentionBlockConfig& cfg, Tensor* weights = nullptr);

struct GradCheckOptions {
    float step = 1e-3f;
    /// Coordinates sampled (without replacement) across the checked names.
    int samples = 50;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_name;
    std::size_t worst_index = 0;
    double worst_numeric = 0.0;
    double worst_analytic = 0.0;
};

using ScalarFn = std::function<ag::Var(ParamBinding&)>;

/// Compares autograd gradients of `f` against central differences
/// (f(p+h) - f(p-h)) / 2h on sampled coordinates of `names`. Relative error
/// is |g_fd - g| / max(|g_fd|, |g|, 1e-8). `params` is restored on return.
GradCheckResult grad_check(const ScalarFn& f, ParamStore& params, const std::vector<std::string>& names,
                           const GradCheckOptions& options = {});

struct DirectionalCheckResult {
    double numeric = 0.0;   // central difference along the unit gradient
    double analytic = 0.0;  // gradient norm
    double rel_error = 0.0;
};

/// Central difference of `f` along the normalised autograd gradient of
/// `names`, compared with the gradient norm. A whole-group signal, so it
/// stays well above float32 rounding where single coordinates do not.
DirectionalCheckResult gradient_direction_check(const ScalarFn& f, ParamStore& params,
                                                const std::vector<std::string>& names, float step = 1e-3f);

} // namespace cdsr::nn
