#include "upcycle/gdn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "upcycle/numerics.hpp"

namespace upcycle {

void GdnConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_k == 0 || d_v == 0) {
        throw std::invalid_argument("gdn config: d_model, n_heads, d_k and d_v must be positive");
    }
    if (d_k % n_heads != 0 || d_v % n_heads != 0) {
        throw std::invalid_argument("gdn config: d_k and d_v must be divisible by n_heads");
    }
    if (conv_width < 1) throw std::invalid_argument("gdn config: conv_width must be positive");
    if (chunk < 1) throw std::invalid_argument("gdn config: chunk must be positive");
    if (!(eps > 0)) throw std::invalid_argument("gdn config: eps must be positive");
}

GdnConfig default_gdn_config(std::size_t d_model, std::size_t n_heads) {
    GdnConfig c;
    c.d_model = d_model;
    c.d_k = d_model * 3 / 4;
    c.d_v = 2 * c.d_k;
    if (n_heads == 0) {
        n_heads = 1;
        for (std::size_t h = std::max<std::size_t>(1, c.d_k / 256); h >= 1; --h) {
            if (c.d_k % h == 0) {
                n_heads = h;
                break;
            }
        }
    }
    c.n_heads = n_heads;
    c.validate();
    return c;
}

GdnBlockWeights gdn_skeleton(const GdnConfig& c) {
    c.validate();
    const std::size_t d = c.d_model, H = c.n_heads, W = c.conv_width;
    GdnBlockWeights w;
    w.wq = Tensor({c.d_k, d});
    w.wk = Tensor({c.d_k, d});
    w.wv = Tensor({c.d_v, d});
    w.wg = Tensor({c.d_v, d});
    w.wo = Tensor({d, c.d_v});
    w.w_alpha = Tensor({H, d});
    w.w_beta = Tensor({H, d});
    w.a_log = Tensor({H});
    w.dt_bias = Tensor({H});
    w.conv_q = Tensor({c.d_k, W});
    w.conv_k = Tensor({c.d_k, W});
    w.conv_v = Tensor({c.d_v, W});
    w.o_norm = Tensor({c.head_v()});
    return w;
}

namespace {

template <typename W, typename Fn>
void visit_gdn(W& w, const std::string& p, Fn&& fn) {
    fn(p + "wq", w.wq);
    fn(p + "wk", w.wk);
    fn(p + "wv", w.wv);
    fn(p + "wg", w.wg);
    fn(p + "wo", w.wo);
    fn(p + "w_alpha", w.w_alpha);
    fn(p + "w_beta", w.w_beta);
    fn(p + "a_log", w.a_log);
    fn(p + "dt_bias", w.dt_bias);
    fn(p + "conv_q", w.conv_q);
    fn(p + "conv_k", w.conv_k);
    fn(p + "conv_v", w.conv_v);
    fn(p + "o_norm", w.o_norm);
}

void check_kernel_inputs(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g, const Tensor& beta,
                         const Tensor& state) {
    const std::size_t T = q.rows();
    if (state.rank() != 3) throw std::invalid_argument("gated delta: state must be H x dk x dv");
    const std::size_t H = state.dim(0), dk = state.dim(1), dv = state.dim(2);
    if (q.cols() != H * dk || k.cols() != H * dk || v.cols() != H * dv || g.cols() != H || beta.cols() != H ||
        k.rows() != T || v.rows() != T || g.rows() != T || beta.rows() != T) {
        throw std::invalid_argument("gated delta: input shapes disagree with the state");
    }
}

// The sequential recurrence; optionally records S before each step.
Tensor delta_scan(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g, const Tensor& beta,
                  Tensor& state, Tensor* states) {
    check_kernel_inputs(q, k, v, g, beta, state);
    const std::size_t T = q.rows(), H = state.dim(0), dk = state.dim(1), dv = state.dim(2);
    Tensor o({T, H * dv});
    if (states) *states = Tensor({T, H * dk * dv});
    std::vector<double> vp(dv);
    for (std::size_t t = 0; t < T; ++t) {
        if (states) std::copy_n(state.data(), H * dk * dv, states->row(t).begin());
        for (std::size_t h = 0; h < H; ++h) {
            double* S = state.data() + h * dk * dv;
            const double* kt = k.row(t).data() + h * dk;
            const double* qt = q.row(t).data() + h * dk;
            const double* vt = v.row(t).data() + h * dv;
            const double a = std::exp(g(t, h)), b = beta(t, h);
            for (std::size_t i = 0; i < dk * dv; ++i) S[i] *= a;
            std::copy_n(vt, dv, vp.begin());
            for (std::size_t i = 0; i < dk; ++i) {
                const double ki = kt[i];
                const double* Si = S + i * dv;
                for (std::size_t j = 0; j < dv; ++j) vp[j] -= Si[j] * ki;
            }
            for (std::size_t i = 0; i < dk; ++i) {
                const double c = b * kt[i];
                double* Si = S + i * dv;
                for (std::size_t j = 0; j < dv; ++j) Si[j] += c * vp[j];
            }
            double* ot = o.row(t).data() + h * dv;
            for (std::size_t i = 0; i < dk; ++i) {
                const double qi = qt[i];
                const double* Si = S + i * dv;
                for (std::size_t j = 0; j < dv; ++j) ot[j] += Si[j] * qi;
            }
        }
    }
    return o;
}

struct ScanGrads {
    Tensor dq, dk, dv, dg, dbeta;
};

ScanGrads delta_scan_backward(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g,
                              const Tensor& beta, const Tensor& states, const Tensor& dout, std::size_t H,
                              std::size_t dk, std::size_t dv) {
    const std::size_t T = q.rows(), n = dk * dv;
    ScanGrads r{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape()), Tensor(g.shape()), Tensor(beta.shape())};
    std::vector<double> dS(H * n, 0.0), St(n), Stl(n), vp(dv), dvp(dv), dSv(dk);
    for (std::size_t t = T; t-- > 0;) {
        for (std::size_t h = 0; h < H; ++h) {
            const double* Sprev = states.row(t).data() + h * n;
            const double* kt = k.row(t).data() + h * dk;
            const double* qt = q.row(t).data() + h * dk;
            const double* vt = v.row(t).data() + h * dv;
            const double* dot_ = dout.row(t).data() + h * dv;
            double* D = dS.data() + h * n;
            const double a = std::exp(g(t, h)), b = beta(t, h);

            for (std::size_t i = 0; i < n; ++i) Stl[i] = a * Sprev[i];
            std::copy_n(vt, dv, vp.begin());
            for (std::size_t i = 0; i < dk; ++i)
                for (std::size_t j = 0; j < dv; ++j) vp[j] -= Stl[i * dv + j] * kt[i];
            for (std::size_t i = 0; i < dk; ++i)
                for (std::size_t j = 0; j < dv; ++j) St[i * dv + j] = Stl[i * dv + j] + b * kt[i] * vp[j];

            // o = S^T q
            double* dq = r.dq.row(t).data() + h * dk;
            for (std::size_t i = 0; i < dk; ++i) {
                double acc = 0;
                for (std::size_t j = 0; j < dv; ++j) {
                    D[i * dv + j] += qt[i] * dot_[j];
                    acc += St[i * dv + j] * dot_[j];
                }
                dq[i] = acc;
            }
            // S = S~ + b k v'^T
            double dbeta = 0;
            std::fill(dvp.begin(), dvp.end(), 0.0);
            for (std::size_t i = 0; i < dk; ++i) {
                double acc = 0;
                for (std::size_t j = 0; j < dv; ++j) {
                    acc += D[i * dv + j] * vp[j];
                    dvp[j] += D[i * dv + j] * kt[i];
                }
                dSv[i] = acc;
                dbeta += kt[i] * acc;
            }
            for (double& e : dvp) e *= b;
            double* dk_ = r.dk.row(t).data() + h * dk;
            double* dv_ = r.dv.row(t).data() + h * dv;
            for (std::size_t j = 0; j < dv; ++j) dv_[j] = dvp[j];
            // v' = v - S~^T k
            for (std::size_t i = 0; i < dk; ++i) {
                double acc = 0;
                for (std::size_t j = 0; j < dv; ++j) acc += Stl[i * dv + j] * dvp[j];
                dk_[i] = b * dSv[i] - acc;
            }
            double da = 0;
            for (std::size_t i = 0; i < dk; ++i) {
                for (std::size_t j = 0; j < dv; ++j) {
                    double& e = D[i * dv + j];
                    e -= kt[i] * dvp[j];
                    da += e * Sprev[i * dv + j];
                    e *= a;
                }
            }
            r.dg(t, h) = da * a;
            r.dbeta(t, h) = dbeta;
        }
    }
    return r;
}

// y = x / sqrt(|x|^2 + eps) over each head slice.
Tensor l2norm_heads(const Tensor& x, std::size_t head, double eps) {
    Tensor y = x;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t h = 0; h < x.cols() / head; ++h) {
            auto s = y.row(t).subspan(h * head, head);
            const double inv = 1.0 / std::sqrt(dot(s, s) + eps);
            for (double& e : s) e *= inv;
        }
    }
    return y;
}

Tensor l2norm_heads_backward(const Tensor& x, const Tensor& dy, std::size_t head, double eps) {
    Tensor dx(x.shape());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        for (std::size_t h = 0; h < x.cols() / head; ++h) {
            const auto xs = x.row(t).subspan(h * head, head);
            const auto gs = dy.row(t).subspan(h * head, head);
            auto out = dx.row(t).subspan(h * head, head);
            const double inv = 1.0 / std::sqrt(dot(xs, xs) + eps);
            const double proj = dot(xs, gs) * inv * inv * inv;
            for (std::size_t i = 0; i < head; ++i) out[i] = gs[i] * inv - xs[i] * proj;
        }
    }
    return dx;
}

Tensor next_tail(const Tensor& history, const Tensor& pre) {
    const std::size_t keep = history.rows(), c = pre.cols(), T = pre.rows();
    Tensor tail({keep, c});
    for (std::size_t r = 0; r < keep; ++r) {
        // row r of the tail is absolute row (T + r) of [history; pre]
        const std::size_t src = T + r;
        const auto row = src < keep ? history.row(src) : pre.row(src - keep);
        std::copy_n(row.begin(), c, tail.row(r).begin());
    }
    return tail;
}

}  // namespace

void for_each_param(GdnBlockWeights& w, const std::string& prefix, const ParamVisitor& fn) {
    visit_gdn(w, prefix, fn);
}

void for_each_param(const GdnBlockWeights& w, const std::string& prefix, const ConstParamVisitor& fn) {
    visit_gdn(w, prefix, fn);
}

GdnParamCount gdn_param_count(const GdnConfig& c) {
    c.validate();
    const std::size_t d = c.d_model;
    GdnParamCount n;
    n.projections = 2 * c.d_k * d + 2 * c.d_v * d + d * c.d_v;
    n.gates = 2 * c.n_heads * d;
    n.decay = 2 * c.n_heads;
    n.conv = c.conv_width * (2 * c.d_k + c.d_v);
    n.norm = c.head_v();
    return n;
}

GdnState gdn_initial_state(const GdnConfig& c) {
    c.validate();
    GdnState s;
    s.s = Tensor({c.n_heads, c.head_k(), c.head_v()});
    s.tail_q = Tensor({c.conv_width - 1, c.d_k});
    s.tail_k = Tensor({c.conv_width - 1, c.d_k});
    s.tail_v = Tensor({c.conv_width - 1, c.d_v});
    return s;
}

Tensor gated_delta_sequential(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g,
                              const Tensor& beta, Tensor& state) {
    return delta_scan(q, k, v, g, beta, state, nullptr);
}

Tensor gated_delta_chunked(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g,
                           const Tensor& beta, Tensor& state, std::size_t chunk) {
    check_kernel_inputs(q, k, v, g, beta, state);
    if (chunk == 0) throw std::invalid_argument("gated delta: chunk must be positive");
    const std::size_t T = q.rows(), H = state.dim(0), dk = state.dim(1), dv = state.dim(2);
    Tensor o({T, H * dv});
    std::vector<double> G(chunk), L(chunk * chunk), qk(chunk * chunk), U(chunk * dv), Wm(chunk * dk),
        delta(chunk * dv);
    for (std::size_t h = 0; h < H; ++h) {
        double* S = state.data() + h * dk * dv;
        for (std::size_t t0 = 0; t0 < T; t0 += chunk) {
            const std::size_t c = std::min(chunk, T - t0);
            auto K = [&](std::size_t i) { return k.row(t0 + i).data() + h * dk; };
            auto Q = [&](std::size_t i) { return q.row(t0 + i).data() + h * dk; };
            auto V = [&](std::size_t i) { return v.row(t0 + i).data() + h * dv; };
            double acc = 0;
            for (std::size_t i = 0; i < c; ++i) G[i] = (acc += g(t0 + i, h));

            for (std::size_t i = 0; i < c; ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    double kk = 0, qkv = 0;
                    const double *ki = K(i), *kj = K(j), *qi = Q(i);
                    for (std::size_t e = 0; e < dk; ++e) {
                        kk += ki[e] * kj[e];
                        qkv += qi[e] * kj[e];
                    }
                    const double decay = std::exp(G[i] - G[j]);
                    L[i * chunk + j] = beta(t0 + i, h) * kk * decay;
                    qk[i * chunk + j] = qkv * decay;
                }
            }
            // (I + L) U = beta V,  (I + L) W = beta exp(G) K
            for (std::size_t i = 0; i < c; ++i) {
                const double b = beta(t0 + i, h), eg = std::exp(G[i]);
                double* ui = U.data() + i * dv;
                double* wi = Wm.data() + i * dk;
                for (std::size_t e = 0; e < dv; ++e) ui[e] = b * V(i)[e];
                for (std::size_t e = 0; e < dk; ++e) wi[e] = b * eg * K(i)[e];
                for (std::size_t j = 0; j < i; ++j) {
                    const double l = L[i * chunk + j];
                    if (l == 0.0) continue;
                    const double* uj = U.data() + j * dv;
                    const double* wj = Wm.data() + j * dk;
                    for (std::size_t e = 0; e < dv; ++e) ui[e] -= l * uj[e];
                    for (std::size_t e = 0; e < dk; ++e) wi[e] -= l * wj[e];
                }
            }
            // delta = U - W S0
            for (std::size_t i = 0; i < c; ++i) {
                double* di = delta.data() + i * dv;
                std::copy_n(U.data() + i * dv, dv, di);
                const double* wi = Wm.data() + i * dk;
                for (std::size_t r = 0; r < dk; ++r) {
                    const double wr = wi[r];
                    const double* Sr = S + r * dv;
                    for (std::size_t e = 0; e < dv; ++e) di[e] -= wr * Sr[e];
                }
            }
            // o_i = exp(G_i) S0^T q_i + sum_{j<=i} exp(G_i - G_j)(q_i . k_j) delta_j
            for (std::size_t i = 0; i < c; ++i) {
                double* oi = o.row(t0 + i).data() + h * dv;
                const double eg = std::exp(G[i]);
                const double* qi = Q(i);
                for (std::size_t r = 0; r < dk; ++r) {
                    const double s = eg * qi[r];
                    const double* Sr = S + r * dv;
                    for (std::size_t e = 0; e < dv; ++e) oi[e] += s * Sr[e];
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double s = qk[i * chunk + j];
                    const double* dj = delta.data() + j * dv;
                    for (std::size_t e = 0; e < dv; ++e) oi[e] += s * dj[e];
                }
            }
            // S_end = exp(G_c) S0 + sum_j exp(G_c - G_j) k_j delta_j^T
            const double last = G[c - 1], el = std::exp(last);
            for (std::size_t e = 0; e < dk * dv; ++e) S[e] *= el;
            for (std::size_t j = 0; j < c; ++j) {
                const double s = std::exp(last - G[j]);
                const double* kj = K(j);
                const double* dj = delta.data() + j * dv;
                for (std::size_t r = 0; r < dk; ++r) {
                    const double f = s * kj[r];
                    double* Sr = S + r * dv;
                    for (std::size_t e = 0; e < dv; ++e) Sr[e] += f * dj[e];
                }
            }
        }
    }
    return o;
}

Tensor gdn_forward(const GdnBlockWeights& w, const GdnConfig& c, const Tensor& x, GdnState* state, GdnMode mode,
                   GdnTape* tape) {
    if (x.cols() != c.d_model) throw std::invalid_argument("gdn_forward: input width does not match d_model");
    const std::size_t T = x.rows(), H = c.n_heads, hk = c.head_k(), hv = c.head_v();
    GdnState local;
    if (!state) {
        local = gdn_initial_state(c);
        state = &local;
    }
    if (tape) tape->initial = *state;

    Tensor pre_q = linear(x, w.wq), pre_k = linear(x, w.wk), pre_v = linear(x, w.wv);
    Tensor conv_q = causal_conv1d(pre_q, w.conv_q, &state->tail_q);
    Tensor conv_k = causal_conv1d(pre_k, w.conv_k, &state->tail_k);
    Tensor conv_v = causal_conv1d(pre_v, w.conv_v, &state->tail_v);
    Tensor act_q = silu(conv_q), act_k = silu(conv_k);
    Tensor v = silu(conv_v);
    Tensor q = l2norm_heads(act_q, hk, c.eps);
    scale_inplace(q, 1.0 / std::sqrt(static_cast<double>(hk)));
    Tensor k = l2norm_heads(act_k, hk, c.eps);

    Tensor z_alpha = linear(x, w.w_alpha);
    Tensor g(z_alpha.shape()), beta = sigmoid(linear(x, w.w_beta));
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            g(t, h) = -std::exp(w.a_log[h]) * softplus(z_alpha(t, h) + w.dt_bias[h]);
        }
    }

    Tensor states;
    Tensor o = (tape || mode == GdnMode::sequential)
                   ? delta_scan(q, k, v, g, beta, state->s, tape ? &states : nullptr)
                   : gated_delta_chunked(q, k, v, g, beta, state->s, c.chunk);

    Tensor gate_pre = linear(x, w.wg);
    Tensor y = rmsnorm(o.reshaped({T * H, hv}), w.o_norm, c.eps).reshaped({T, c.d_v});
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= silu(gate_pre[i]);
    Tensor out = linear(y, w.wo);

    state->tail_q = next_tail(state->tail_q, pre_q);
    state->tail_k = next_tail(state->tail_k, pre_k);
    state->tail_v = next_tail(state->tail_v, pre_v);

    if (tape) {
        tape->x = x;
        tape->pre_q = std::move(pre_q);
        tape->pre_k = std::move(pre_k);
        tape->pre_v = std::move(pre_v);
        tape->conv_q = std::move(conv_q);
        tape->conv_k = std::move(conv_k);
        tape->conv_v = std::move(conv_v);
        tape->act_q = std::move(act_q);
        tape->act_k = std::move(act_k);
        tape->q = std::move(q);
        tape->k = std::move(k);
        tape->v = std::move(v);
        tape->z_alpha = std::move(z_alpha);
        tape->g = std::move(g);
        tape->beta = std::move(beta);
        tape->states = std::move(states);
        tape->o = std::move(o);
        tape->gate_pre = std::move(gate_pre);
    }
    return out;
}

Tensor gdn_backward(const GdnBlockWeights& w, const GdnConfig& c, const GdnTape& tp, const Tensor& dout,
                    GdnBlockWeights& gr) {
    const std::size_t T = tp.x.rows(), H = c.n_heads, hk = c.head_k(), hv = c.head_v();
    const Tensor o_flat = tp.o.reshaped({T * H, hv});
    const Tensor normed = rmsnorm(o_flat, w.o_norm, c.eps).reshaped({T, c.d_v});
    Tensor y = normed;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= silu(tp.gate_pre[i]);

    const Tensor dy = linear_backward(y, w.wo, dout, gr.wo);
    Tensor dnormed(dy.shape()), dgate(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) {
        dnormed[i] = dy[i] * silu(tp.gate_pre[i]);
        dgate[i] = dy[i] * normed[i] * silu_grad(tp.gate_pre[i]);
    }
    Tensor dx = linear_backward(tp.x, w.wg, dgate, gr.wg);
    const Tensor d_o =
        rmsnorm_backward(o_flat, w.o_norm, c.eps, dnormed.reshaped({T * H, hv}), gr.o_norm).reshaped({T, c.d_v});

    const auto sg = delta_scan_backward(tp.q, tp.k, tp.v, tp.g, tp.beta, tp.states, d_o, H, hk, hv);

    Tensor dza(tp.z_alpha.shape()), dzb(tp.beta.shape());
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            const double dg = sg.dg(t, h);
            const double ea = std::exp(w.a_log[h]);
            dza(t, h) = -dg * ea * sigmoid(tp.z_alpha(t, h) + w.dt_bias[h]);
            gr.dt_bias[h] += dza(t, h);
            gr.a_log[h] += dg * tp.g(t, h);
            const double b = tp.beta(t, h);
            dzb(t, h) = sg.dbeta(t, h) * b * (1.0 - b);
        }
    }
    add_inplace(dx, linear_backward(tp.x, w.w_alpha, dza, gr.w_alpha));
    add_inplace(dx, linear_backward(tp.x, w.w_beta, dzb, gr.w_beta));

    Tensor dq = sg.dq;
    scale_inplace(dq, 1.0 / std::sqrt(static_cast<double>(hk)));
    Tensor dact_q = l2norm_heads_backward(tp.act_q, dq, hk, c.eps);
    Tensor dact_k = l2norm_heads_backward(tp.act_k, sg.dk, hk, c.eps);
    Tensor dconv_v = sg.dv;
    for (std::size_t i = 0; i < dact_q.size(); ++i) dact_q[i] *= silu_grad(tp.conv_q[i]);
    for (std::size_t i = 0; i < dact_k.size(); ++i) dact_k[i] *= silu_grad(tp.conv_k[i]);
    for (std::size_t i = 0; i < dconv_v.size(); ++i) dconv_v[i] *= silu_grad(tp.conv_v[i]);

    const Tensor dpre_q = causal_conv1d_backward(tp.pre_q, w.conv_q, dact_q, gr.conv_q, &tp.initial.tail_q);
    const Tensor dpre_k = causal_conv1d_backward(tp.pre_k, w.conv_k, dact_k, gr.conv_k, &tp.initial.tail_k);
    const Tensor dpre_v = causal_conv1d_backward(tp.pre_v, w.conv_v, dconv_v, gr.conv_v, &tp.initial.tail_v);
    add_inplace(dx, linear_backward(tp.x, w.wq, dpre_q, gr.wq));
    add_inplace(dx, linear_backward(tp.x, w.wk, dpre_k, gr.wk));
    add_inplace(dx, linear_backward(tp.x, w.wv, dpre_v, gr.wv));
    return dx;
}

GdnBlockWeights init_gdn_from_teacher(const AttentionWeights& t, const TransformerConfig& tc, const GdnConfig& c,
                                      std::uint64_t seed) {
    const std::size_t d = tc.d_model;
    if (c.d_model != d) throw std::invalid_argument("init_gdn_from_teacher: d_model differs from the teacher");
    const std::size_t q_rows = t.wq.rows();
    if (c.d_k > q_rows) {
        throw std::invalid_argument("init_gdn_from_teacher: d_k " + std::to_string(c.d_k) +
                                    " exceeds the teacher's " + std::to_string(q_rows) + " query rows");
    }
    GdnBlockWeights w = gdn_skeleton(c);
    Rng rng(seed);
    auto fill_uniform = [&](Tensor& m, double bound) {
        for (double& v : m.values()) v = rng.uniform(-bound, bound);
    };
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
    fill_uniform(w.wv, inv_d);
    fill_uniform(w.wg, inv_d);
    fill_uniform(w.wo, 1.0 / std::sqrt(static_cast<double>(c.d_v)));
    fill_uniform(w.w_alpha, inv_d);
    fill_uniform(w.w_beta, inv_d);
    fill_uniform(w.conv_q, 1.0 / std::sqrt(static_cast<double>(c.conv_width)));
    fill_uniform(w.conv_k, 1.0 / std::sqrt(static_cast<double>(c.conv_width)));
    fill_uniform(w.conv_v, 1.0 / std::sqrt(static_cast<double>(c.conv_width)));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        w.a_log[h] = std::log(rng.uniform(1.0, 16.0));
        w.dt_bias[h] = inverse_softplus(rng.uniform(1e-3, 1e-1));
    }
    w.o_norm.fill(1.0);

    const std::size_t group = tc.group();
    const Tensor k_exp = repeat_kv(t.wk, tc.head_dim, group);
    const Tensor v_exp = repeat_kv(t.wv, tc.head_dim, group);
    if (c.d_k > k_exp.rows()) throw std::invalid_argument("init_gdn_from_teacher: d_k exceeds the expanded key rows");
    std::copy_n(t.wq.data(), c.d_k * d, w.wq.data());
    std::copy_n(k_exp.data(), c.d_k * d, w.wk.data());
    const std::size_t nv = std::min({d, c.d_v, v_exp.rows()});
    std::copy_n(v_exp.data(), nv * d, w.wv.data());
    const std::size_t no = std::min({d, c.d_v, t.wo.cols()});
    for (std::size_t r = 0; r < d; ++r) std::copy_n(t.wo.row(r).begin(), no, w.wo.row(r).begin());
    return w;
}

}  // namespace upcycle
