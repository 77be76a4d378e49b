#include "cdsr/autograd.hpp"

#include "cdsr/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

namespace cdsr::ag {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;

using NodePtr = std::shared_ptr<Node>;

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    for (const Var& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (Var& in : inputs) {
            if (in.defined()) node->inputs.push_back(in.node());
        }
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

void require_rank(const Var& x, int rank, const char* op) {
    require(x.defined() && x.value().rank() == rank,
            std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
}

// Column matrix [C*k*k, Ho*Wo] for one image.
void im2col(const float* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, float* cols) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * Ho * Wo;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* dst = row + static_cast<std::size_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wo, 0.0f);
                        continue;
                    }
                    const float* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const float* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, float* dx) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * Ho * Wo;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const float* src = row + static_cast<std::size_t>(oy) * Wo;
                    float* dst = dx + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename F>
Var unary(const Var& x, F&& f, std::function<float(float, float)> df) {
    const Tensor& in = x.value();
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [xn, df](Node& self) {
        if (!xn->requires_grad) return;
        Tensor& gx = xn->grad_buffer();
        const Tensor& xv = xn->value;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
    });
}

} // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
    return grad;
}

Var Var::constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

float Var::item() const {
    require(defined() && value().size() == 1, "item(): not a scalar");
    return value()[0];
}

double Var::scalar() const {
    require(defined() && value().size() == 1, "scalar(): not a scalar");
    return std::isnan(node_->scalar) ? static_cast<double>(value()[0]) : node_->scalar;
}

void backward(const Var& root) {
    require(root.defined() && root.value().size() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int padding) {
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d weight");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), k = w.dim(2);
    require(w.dim(1) == C && w.dim(3) == k,
            "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    require(!bias.defined() || (bias.value().rank() == 1 && bias.dim(0) == O),
            "conv2d: bias shape mismatch for weight " + shape_str(w.shape()));
    require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
    const int Ho = (H + 2 * padding - k) / stride + 1;
    const int Wo = (W + 2 * padding - k) / stride + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: input " + shape_str(x.shape()) + " smaller than kernel");

    const int CKK = C * k * k;
    const int HWo = Ho * Wo;
    const bool direct = (k == 1 && stride == 1 && padding == 0);
    Tensor out({N, O, Ho, Wo});
    std::vector<float> cols(direct ? 0 : static_cast<std::size_t>(CKK) * HWo);
    CMap Wm(w.value().data(), O, CKK);
    for (int n = 0; n < N; ++n) {
        const float* xn = x.value().data() + static_cast<std::size_t>(n) * C * H * W;
        const float* colp = xn;
        if (!direct) {
            im2col(xn, C, H, W, k, stride, padding, Ho, Wo, cols.data());
            colp = cols.data();
        }
        Map Y(out.data() + static_cast<std::size_t>(n) * O * HWo, O, HWo);
        Y.noalias() = Wm * CMap(colp, CKK, HWo);
        if (bias.defined()) {
            for (int o = 0; o < O; ++o) Y.row(o).array() += bias.value()[o];
        }
    }

    NodePtr xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr;
    return make_result(std::move(out), {x, w, bias},
                       [=](Node& self) {
                           std::vector<float> colbuf(direct ? 0 : static_cast<std::size_t>(CKK) * HWo);
                           std::vector<float> dcols(direct ? 0 : static_cast<std::size_t>(CKK) * HWo);
                           CMap Wv(wn->value.data(), O, CKK);
                           for (int n = 0; n < N; ++n) {
                               CMap dY(self.grad.data() + static_cast<std::size_t>(n) * O * HWo, O, HWo);
                               const float* xv = xn->value.data() + static_cast<std::size_t>(n) * C * H * W;
                               if (wn->requires_grad) {
                                   const float* colp = xv;
                                   if (!direct) {
                                       im2col(xv, C, H, W, k, stride, padding, Ho, Wo, colbuf.data());
                                       colp = colbuf.data();
                                   }
                                   Map dW(wn->grad_buffer().data(), O, CKK);
                                   dW.noalias() += dY * CMap(colp, CKK, HWo).transpose();
                               }
                               if (bn && bn->requires_grad) {
                                   Tensor& db = bn->grad_buffer();
                                   for (int o = 0; o < O; ++o) db[o] += dY.row(o).sum();
                               }
                               if (xn->requires_grad) {
                                   float* dx = xn->grad_buffer().data() + static_cast<std::size_t>(n) * C * H * W;
                                   if (direct) {
                                       Map dX(dx, C, HWo);
                                       dX.noalias() += Wv.transpose() * dY;
                                   } else {
                                       Map dC(dcols.data(), CKK, HWo);
                                       dC.noalias() = Wv.transpose() * dY;
                                       col2im_add(dcols.data(), C, H, W, k, stride, padding, Ho, Wo, dx);
                                   }
                               }
                           }
                       });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require(x.defined() && x.value().rank() >= 2, "linear: input must have rank >= 2");
    require_rank(w, 2, "linear weight");
    const int K = x.dim(-1), O = w.dim(0);
    require(w.dim(1) == K, "linear: weight " + shape_str(w.shape()) + " incompatible with input " +
                               shape_str(x.shape()));
    require(!bias.defined() || (bias.value().rank() == 1 && bias.dim(0) == O), "linear: bias shape mismatch");
    const int M = static_cast<int>(x.value().size() / K);
    Shape os = x.shape();
    os.back() = O;
    Tensor out(os);
    Map Y(out.data(), M, O);
    Y.noalias() = CMap(x.value().data(), M, K) * CMap(w.value().data(), O, K).transpose();
    if (bias.defined()) {
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.value().data(), O);
    }
    NodePtr xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr;
    return make_result(std::move(out), {x, w, bias}, [=](Node& self) {
        CMap dY(self.grad.data(), M, O);
        if (xn->requires_grad) {
            Map(xn->grad_buffer().data(), M, K).noalias() += dY * CMap(wn->value.data(), O, K);
        }
        if (wn->requires_grad) {
            Map(wn->grad_buffer().data(), O, K).noalias() += dY.transpose() * CMap(xn->value.data(), M, K);
        }
        if (bn && bn->requires_grad) {
            Eigen::Map<Eigen::RowVectorXf>(bn->grad_buffer().data(), O) += dY.colwise().sum();
        }
    });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps) {
    require_rank(x, 4, "group_norm");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require(groups >= 1 && C % groups == 0,
            "group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
    require(gamma.defined() && beta.defined() && gamma.value().size() == static_cast<std::size_t>(C) &&
                beta.value().size() == static_cast<std::size_t>(C),
            "group_norm: affine parameters must have " + std::to_string(C) + " entries");
    const int cpg = C / groups;
    const std::size_t gsize = static_cast<std::size_t>(cpg) * HW;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    std::vector<float> mean(static_cast<std::size_t>(N) * groups), rstd(mean.size());
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* p = xv.data() + (static_cast<std::size_t>(n) * C + g * cpg) * HW;
            double s = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) s += p[i];
            const double m = s / gsize;
            double v = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) v += (p[i] - m) * (p[i] - m);
            v /= gsize;
            const std::size_t gi = static_cast<std::size_t>(n) * groups + g;
            mean[gi] = static_cast<float>(m);
            rstd[gi] = static_cast<float>(1.0 / std::sqrt(v + eps));
            float* q = out.data() + (static_cast<std::size_t>(n) * C + g * cpg) * HW;
            for (int c = 0; c < cpg; ++c) {
                const float ga = gamma.value()[g * cpg + c], be = beta.value()[g * cpg + c];
                for (int i = 0; i < HW; ++i) {
                    const std::size_t j = static_cast<std::size_t>(c) * HW + i;
                    q[j] = (p[j] - mean[gi]) * rstd[gi] * ga + be;
                }
            }
        }
    }
    NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_result(std::move(out), {x, gamma, beta}, [=](Node& self) {
        for (int n = 0; n < N; ++n) {
            for (int g = 0; g < groups; ++g) {
                const std::size_t gi = static_cast<std::size_t>(n) * groups + g;
                const std::size_t base = (static_cast<std::size_t>(n) * C + g * cpg) * HW;
                const float* p = xn->value.data() + base;
                const float* dy = self.grad.data() + base;
                const float m = mean[gi], r = rstd[gi];
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int c = 0; c < cpg; ++c) {
                    const int ch = g * cpg + c;
                    const float ga = gn->value[ch];
                    double dga = 0.0, dbe = 0.0;
                    for (int i = 0; i < HW; ++i) {
                        const std::size_t j = static_cast<std::size_t>(c) * HW + i;
                        const float xh = (p[j] - m) * r;
                        dga += static_cast<double>(dy[j]) * xh;
                        dbe += dy[j];
                        sum_dxh += static_cast<double>(dy[j]) * ga;
                        sum_dxh_xh += static_cast<double>(dy[j]) * ga * xh;
                    }
                    if (gn->requires_grad) gn->grad_buffer()[ch] += static_cast<float>(dga);
                    if (bn->requires_grad) bn->grad_buffer()[ch] += static_cast<float>(dbe);
                }
                if (!xn->requires_grad) continue;
                float* dx = xn->grad_buffer().data() + base;
                const double inv = 1.0 / static_cast<double>(gsize);
                for (int c = 0; c < cpg; ++c) {
                    const float ga = gn->value[g * cpg + c];
                    for (int i = 0; i < HW; ++i) {
                        const std::size_t j = static_cast<std::size_t>(c) * HW + i;
                        const double xh = (p[j] - m) * r;
                        const double dxh = static_cast<double>(dy[j]) * ga;
                        dx[j] += static_cast<float>(r * (dxh - inv * sum_dxh - xh * inv * sum_dxh_xh));
                    }
                }
            }
        }
    });
}

Var silu(const Var& x) {
    return unary(
        x, [](float v) { return v / (1.0f + std::exp(-v)); },
        [](float v, float) {
            const float s = 1.0f / (1.0f + std::exp(-v));
            return s * (1.0f + v * (1.0f - s));
        });
}

Var leaky_relu(const Var& x, float slope) {
    return unary(
        x, [slope](float v) { return v > 0.0f ? v : slope * v; },
        [slope](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

Var sigmoid(const Var& x) {
    return unary(
        x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](float, float y) { return y * (1.0f - y); });
}

Var add(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    NodePtr an = a.node(), bn = b.node();
    Var r = make_result(std::move(out), {a, b}, [an, bn](Node& self) {
        for (const NodePtr& n : {an, bn}) {
            if (!n->requires_grad) continue;
            Tensor& g = n->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
    if (r.value().size() == 1) r.node()->scalar = a.scalar() + b.scalar();
    return r;
}

Var scale(const Var& x, float s) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * s;
    NodePtr xn = x.node();
    Var r = make_result(std::move(out), {x}, [xn, s](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
    if (r.value().size() == 1) r.node()->scalar = x.scalar() * s;
    return r;
}

Var add_channel(const Var& x, const Var& v) {
    require_rank(x, 4, "add_channel");
    require_rank(v, 2, "add_channel vector");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require(v.dim(0) == N && v.dim(1) == C,
            "add_channel: " + shape_str(v.shape()) + " does not broadcast onto " + shape_str(x.shape()));
    Tensor out(x.shape());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            const float add = v.value()[static_cast<std::size_t>(n) * C + c];
            for (int i = 0; i < HW; ++i) out[base + i] = x.value()[base + i] + add;
        }
    }
    NodePtr xn = x.node(), vn = v.node();
    return make_result(std::move(out), {x, v}, [=](Node& self) {
        if (xn->requires_grad) {
            Tensor& g = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            Tensor& g = vn->grad_buffer();
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i) s += self.grad[base + i];
                    g[static_cast<std::size_t>(n) * C + c] += static_cast<float>(s);
                }
            }
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    require(b.dim(0) == N && b.dim(2) == H && b.dim(3) == W,
            "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    Tensor out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
        std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, out.data() + (n * (Ca + Cb) + Ca) * HW);
    }
    NodePtr an = a.node(), bn = b.node();
    return make_result(std::move(out), {a, b}, [=](Node& self) {
        for (int n = 0; n < N; ++n) {
            const float* g = self.grad.data() + n * (Ca + Cb) * HW;
            if (an->requires_grad) {
                float* d = an->grad_buffer().data() + n * Ca * HW;
                for (std::size_t i = 0; i < Ca * HW; ++i) d[i] += g[i];
            }
            if (bn->requires_grad) {
                float* d = bn->grad_buffer().data() + n * Cb * HW;
                for (std::size_t i = 0; i < Cb * HW; ++i) d[i] += g[Ca * HW + i];
            }
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    require_rank(x, 4, "upsample_nearest2x");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx) out.at(n, c, y, xx) = x.value().at(n, c, y / 2, xx / 2);
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx) g.at(n, c, y / 2, xx / 2) += self.grad.at(n, c, y, xx);
    });
}

Var pad_replicate(const Var& x, int pad) {
    require_rank(x, 4, "pad_replicate");
    require(pad >= 0, "pad_replicate: negative padding");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    auto src = [=](int i, int n) { return std::clamp(i - pad, 0, n - 1); };
    Tensor out({N, C, Hp, Wp});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < Hp; ++y)
                for (int xx = 0; xx < Wp; ++xx) out.at(n, c, y, xx) = x.value().at(n, c, src(y, H), src(xx, W));
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Hp; ++y)
                    for (int xx = 0; xx < Wp; ++xx) g.at(n, c, src(y, H), src(xx, W)) += self.grad.at(n, c, y, xx);
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [xn](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var to_tokens(const Var& x) {
    require_rank(x, 4, "to_tokens");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out({N, HW, C});
    for (int n = 0; n < N; ++n) {
        Map(out.data() + static_cast<std::size_t>(n) * HW * C, HW, C) =
            CMap(x.value().data() + static_cast<std::size_t>(n) * C * HW, C, HW).transpose();
    }
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (int n = 0; n < N; ++n) {
            Map(g.data() + static_cast<std::size_t>(n) * C * HW, C, HW) +=
                CMap(self.grad.data() + static_cast<std::size_t>(n) * HW * C, HW, C).transpose();
        }
    });
}

Var from_tokens(const Var& x, int height, int width) {
    require_rank(x, 3, "from_tokens");
    const int N = x.dim(0), HW = x.dim(1), C = x.dim(2);
    require(HW == height * width, "from_tokens: " + std::to_string(HW) + " tokens cannot form " +
                                      std::to_string(height) + "x" + std::to_string(width));
    Tensor out({N, C, height, width});
    for (int n = 0; n < N; ++n) {
        Map(out.data() + static_cast<std::size_t>(n) * C * HW, C, HW) =
            CMap(x.value().data() + static_cast<std::size_t>(n) * HW * C, HW, C).transpose();
    }
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (int n = 0; n < N; ++n) {
            Map(g.data() + static_cast<std::size_t>(n) * HW * C, HW, C) +=
                CMap(self.grad.data() + static_cast<std::size_t>(n) * C * HW, C, HW).transpose();
        }
    });
}

Var matmul(const Var& a, const Var& b, bool transpose_b) {
    require_rank(a, 3, "matmul");
    require_rank(b, 3, "matmul");
    const int N = a.dim(0), M = a.dim(1), K = a.dim(2);
    const int P = transpose_b ? b.dim(1) : b.dim(2);
    const int Kb = transpose_b ? b.dim(2) : b.dim(1);
    require(b.dim(0) == N && Kb == K,
            "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + (transpose_b ? "^T" : ""));
    const int Br = transpose_b ? P : K, Bc = transpose_b ? K : P;
    Tensor out({N, M, P});
    for (int n = 0; n < N; ++n) {
        CMap A(a.value().data() + static_cast<std::size_t>(n) * M * K, M, K);
        CMap B(b.value().data() + static_cast<std::size_t>(n) * Br * Bc, Br, Bc);
        Map C(out.data() + static_cast<std::size_t>(n) * M * P, M, P);
        if (transpose_b) {
            C.noalias() = A * B.transpose();
        } else {
            C.noalias() = A * B;
        }
    }
    NodePtr an = a.node(), bn = b.node();
    return make_result(std::move(out), {a, b}, [=](Node& self) {
        for (int n = 0; n < N; ++n) {
            CMap dC(self.grad.data() + static_cast<std::size_t>(n) * M * P, M, P);
            CMap A(an->value.data() + static_cast<std::size_t>(n) * M * K, M, K);
            CMap B(bn->value.data() + static_cast<std::size_t>(n) * Br * Bc, Br, Bc);
            if (an->requires_grad) {
                Map dA(an->grad_buffer().data() + static_cast<std::size_t>(n) * M * K, M, K);
                if (transpose_b) {
                    dA.noalias() += dC * B;
                } else {
                    dA.noalias() += dC * B.transpose();
                }
            }
            if (bn->requires_grad) {
                Map dB(bn->grad_buffer().data() + static_cast<std::size_t>(n) * Br * Bc, Br, Bc);
                if (transpose_b) {
                    dB.noalias() += dC.transpose() * A;
                } else {
                    dB.noalias() += A.transpose() * dC;
                }
            }
        }
    });
}

Var softmax_rows(const Var& x) {
    require(x.defined() && x.value().rank() >= 1, "softmax_rows: undefined input");
    const int L = x.dim(-1);
    const std::size_t rows = x.value().size() / L;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const float* p = x.value().data() + r * L;
        float* q = out.data() + r * L;
        const float mx = *std::max_element(p, p + L);
        double s = 0.0;
        for (int i = 0; i < L; ++i) {
            q[i] = std::exp(p[i] - mx);
            s += q[i];
        }
        const float inv = static_cast<float>(1.0 / s);
        for (int i = 0; i < L; ++i) q[i] *= inv;
    }
    NodePtr xn = x.node();
    return make_result(std::move(out), {x}, [=](Node& self) {
        Tensor& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.value.data() + r * L;
            const float* dy = self.grad.data() + r * L;
            double dot = 0.0;
            for (int i = 0; i < L; ++i) dot += static_cast<double>(dy[i]) * y[i];
            for (int i = 0; i < L; ++i) g[r * L + i] += y[i] * (dy[i] - static_cast<float>(dot));
        }
    });
}

Var mse(const Var& a, const Var& b) {
    require(a.defined() && b.defined() && a.shape() == b.shape(),
            "mse: shape mismatch " + (a.defined() ? shape_str(a.shape()) : std::string("?")) + " vs " +
                (b.defined() ? shape_str(b.shape()) : std::string("?")));
    const std::size_t n = a.value().size();
    require(n > 0, "mse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.value()[i]) - b.value()[i];
        s += d * d;
    }
    Tensor out({1}, static_cast<float>(s / n));
    NodePtr an = a.node(), bn = b.node();
    Var r = make_result(std::move(out), {a, b}, [=](Node& self) {
        const float k = 2.0f * self.grad[0] / static_cast<float>(n);
        if (an->requires_grad) {
            Tensor& g = an->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += k * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
            Tensor& g = bn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] -= k * (an->value[i] - bn->value[i]);
        }
    });
    r.node()->scalar = s / static_cast<double>(n);
    return r;
}

} // namespace cdsr::ag
