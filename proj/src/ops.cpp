#include "raddpo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace raddpo::ad {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// C[M,N] += or = A[M,K] * B[K,N]
void gemm_nn(const double* a, const double* b, double* c, size_t M, size_t K, size_t N,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + M * N, 0.0);
    for (size_t m = 0; m < M; ++m) {
        const double* arow = a + m * K;
        double* crow = c + m * N;
        for (size_t k = 0; k < K; ++k) {
            const double av = arow[k];
            const double* brow = b + k * N;
            for (size_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

// C[M,N] += or = A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, size_t M, size_t K, size_t N,
             bool accumulate) {
    for (size_t m = 0; m < M; ++m) {
        const double* arow = a + m * K;
        double* crow = c + m * N;
        for (size_t n = 0; n < N; ++n) {
            const double* brow = b + n * K;
            double dot = 0.0;
            for (size_t k = 0; k < K; ++k) dot += arow[k] * brow[k];
            crow[n] = accumulate ? crow[n] + dot : dot;
        }
    }
}

// C[M,N] += or = A[K,M]^T * B[K,N]
void gemm_tn(const double* a, const double* b, double* c, size_t M, size_t K, size_t N,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + M * N, 0.0);
    for (size_t k = 0; k < K; ++k) {
        const double* arow = a + k * M;
        const double* brow = b + k * N;
        for (size_t m = 0; m < M; ++m) {
            const double av = arow[m];
            double* crow = c + m * N;
            for (size_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

// Accumulate src into the tape slot of t (no-op for detached parents).
void deposit(Tape& tape, const Tensor& t, const double* src, size_t n) {
    double* g = tape.acc(t.node(), n);
    if (!g) return;
    for (size_t i = 0; i < n; ++i) g[i] += src[i];
}

bool any_tracked(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->tracked()) return true;
    return false;
}

} // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    if (tape && any_tracked({&a, &b})) {
        out.set_node(tape->add_node({a.node(), b.node()}, out.shape(),
                                    [a, b, n](const double* g, Tape& tp) {
                                        deposit(tp, a, g, n);
                                        deposit(tp, b, g, n);
                                    }));
    }
    return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    if (tape && any_tracked({&a, &b})) {
        out.set_node(tape->add_node({a.node(), b.node()}, out.shape(),
                                    [a, b, n](const double* g, Tape& tp) {
                                        deposit(tp, a, g, n);
                                        if (double* gb = tp.acc(b.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) gb[i] -= g[i];
                                        }
                                    }));
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    if (tape && any_tracked({&a, &b})) {
        out.set_node(tape->add_node({a.node(), b.node()}, out.shape(),
                                    [a, b, n](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) ga[i] += g[i] * b.at(i);
                                        }
                                        if (double* gb = tp.acc(b.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) gb[i] += g[i] * a.at(i);
                                        }
                                    }));
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
    if (tape && a.tracked()) {
        out.set_node(tape->add_node({a.node()}, out.shape(),
                                    [a, c, n](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
                                        }
                                    }));
    }
    return out;
}

Tensor relu(Tape* tape, const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    if (tape && a.tracked()) {
        out.set_node(tape->add_node({a.node()}, out.shape(),
                                    [a, n](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) {
                                                if (a.at(i) > 0.0) ga[i] += g[i];
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor exp(Tape* tape, const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = std::exp(a.at(i));
    if (tape && a.tracked()) {
        out.set_node(tape->add_node({a.node()}, out.shape(),
                                    [a, out, n](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) ga[i] += g[i] * out.at(i);
                                        }
                                    }));
    }
    return out;
}

Tensor log(Tape* tape, const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = std::log(a.at(i));
    if (tape && a.tracked()) {
        out.set_node(tape->add_node({a.node()}, out.shape(),
                                    [a, n](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) ga[i] += g[i] / a.at(i);
                                        }
                                    }));
    }
    return out;
}

Tensor sub_from_scalar(Tape* tape, const Tensor& s, const Tensor& v) {
    if (!s.is_scalar()) throw std::invalid_argument("sub_from_scalar: s must be scalar");
    Tensor out(v.shape());
    const size_t n = v.size();
    const double sv = s.scalar_value();
    for (size_t i = 0; i < n; ++i) out.at(i) = sv - v.at(i);
    if (tape && any_tracked({&s, &v})) {
        out.set_node(tape->add_node({s.node(), v.node()}, out.shape(),
                                    [s, v, n](const double* g, Tape& tp) {
                                        if (double* gs = tp.acc(s.node(), 1)) {
                                            for (size_t i = 0; i < n; ++i) gs[0] += g[i];
                                        }
                                        if (double* gv = tp.acc(v.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) gv[i] -= g[i];
                                        }
                                    }));
    }
    return out;
}

Tensor mul_constvec(Tape* tape, const Tensor& v, const std::vector<double>& w) {
    if (v.size() != w.size()) throw std::invalid_argument("mul_constvec: length mismatch");
    Tensor out(v.shape());
    const size_t n = v.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = v.at(i) * w[i];
    if (tape && v.tracked()) {
        out.set_node(tape->add_node({v.node()}, out.shape(),
                                    [v, w, n](const double* g, Tape& tp) {
                                        if (double* gv = tp.acc(v.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) gv[i] += g[i] * w[i];
                                        }
                                    }));
    }
    return out;
}

Tensor sum(Tape* tape, const Tensor& a) {
    double s = 0.0;
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) s += a.at(i);
    Tensor out = Tensor::scalar(s);
    if (tape && a.tracked()) {
        out.set_node(tape->add_node({a.node()}, out.shape(),
                                    [a, n](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) ga[i] += g[0];
                                        }
                                    }));
    }
    return out;
}

Tensor mean(Tape* tape, const Tensor& a) {
    return scale(tape, sum(tape, a), 1.0 / static_cast<double>(a.size()));
}

Tensor logsumexp(Tape* tape, const Tensor& v) {
    const size_t n = v.size();
    double m = kNegInf;
    for (size_t i = 0; i < n; ++i) m = std::max(m, v.at(i));
    double se = 0.0;
    for (size_t i = 0; i < n; ++i) se += std::exp(v.at(i) - m);
    Tensor out = Tensor::scalar(m + std::log(se));
    if (tape && v.tracked()) {
        const double lse = out.scalar_value();
        out.set_node(tape->add_node({v.node()}, out.shape(),
                                    [v, lse, n](const double* g, Tape& tp) {
                                        if (double* gv = tp.acc(v.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) {
                                                gv[i] += g[0] * std::exp(v.at(i) - lse);
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
    Tensor out(x.shape());
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) out.at(i) = 1.0 / (1.0 + std::exp(-x.at(i)));
    if (tape && x.tracked()) {
        out.set_node(tape->add_node({x.node()}, out.shape(),
                                    [x, out, n](const double* g, Tape& tp) {
                                        if (double* gx = tp.acc(x.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) {
                                                const double s = out.at(i);
                                                gx[i] += g[i] * s * (1.0 - s);
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor softplus(Tape* tape, const Tensor& x) {
    Tensor out(x.shape());
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) {
        const double v = x.at(i);
        out.at(i) = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    }
    if (tape && x.tracked()) {
        out.set_node(tape->add_node({x.node()}, out.shape(),
                                    [x, n](const double* g, Tape& tp) {
                                        if (double* gx = tp.acc(x.node(), n)) {
                                            for (size_t i = 0; i < n; ++i) {
                                                gx[i] += g[i] / (1.0 + std::exp(-x.at(i)));
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes");
    }
    const size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out({M, N});
    gemm_nn(a.data(), b.data(), out.data(), M, K, N, false);
    if (tape && any_tracked({&a, &b})) {
        out.set_node(tape->add_node({a.node(), b.node()}, out.shape(),
                                    [a, b, M, K, N](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), M * K)) {
                                            gemm_nt(g, b.data(), ga, M, N, K, true);
                                        }
                                        if (double* gb = tp.acc(b.node(), K * N)) {
                                            gemm_tn(a.data(), g, gb, K, M, N, true);
                                        }
                                    }));
    }
    return out;
}

Tensor bmm_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
        throw std::invalid_argument("bmm_nt: incompatible shapes");
    }
    const size_t H = a.dim(0), T = a.dim(1), K = a.dim(2), S = b.dim(1);
    Tensor out({H, T, S});
    for (size_t h = 0; h < H; ++h) {
        gemm_nt(a.data() + h * T * K, b.data() + h * S * K, out.data() + h * T * S, T, K, S, false);
    }
    if (tape && any_tracked({&a, &b})) {
        out.set_node(tape->add_node(
            {a.node(), b.node()}, out.shape(), [a, b, H, T, K, S](const double* g, Tape& tp) {
                // dA[h] = G[h] * B[h]; dB[h] = G[h]^T * A[h]
                if (double* ga = tp.acc(a.node(), H * T * K)) {
                    for (size_t h = 0; h < H; ++h) {
                        gemm_nn(g + h * T * S, b.data() + h * S * K, ga + h * T * K, T, S, K, true);
                    }
                }
                if (double* gb = tp.acc(b.node(), H * S * K)) {
                    for (size_t h = 0; h < H; ++h) {
                        gemm_tn(g + h * T * S, a.data() + h * T * K, gb + h * S * K, S, T, K, true);
                    }
                }
            }));
    }
    return out;
}

Tensor bmm_nn(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw std::invalid_argument("bmm_nn: incompatible shapes");
    }
    const size_t H = a.dim(0), T = a.dim(1), S = a.dim(2), K = b.dim(2);
    Tensor out({H, T, K});
    for (size_t h = 0; h < H; ++h) {
        gemm_nn(a.data() + h * T * S, b.data() + h * S * K, out.data() + h * T * K, T, S, K, false);
    }
    if (tape && any_tracked({&a, &b})) {
        out.set_node(tape->add_node(
            {a.node(), b.node()}, out.shape(), [a, b, H, T, S, K](const double* g, Tape& tp) {
                // dA[h] = G[h] * B[h]^T; dB[h] = A[h]^T * G[h]
                if (double* ga = tp.acc(a.node(), H * T * S)) {
                    for (size_t h = 0; h < H; ++h) {
                        gemm_nt(g + h * T * K, b.data() + h * S * K, ga + h * T * S, T, K, S, true);
                    }
                }
                if (double* gb = tp.acc(b.node(), H * S * K)) {
                    for (size_t h = 0; h < H; ++h) {
                        gemm_tn(a.data() + h * T * S, g + h * T * K, gb + h * S * K, S, T, K, true);
                    }
                }
            }));
    }
    return out;
}

Tensor rows(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw std::invalid_argument("rows: table must be 2-D");
    const size_t V = table.dim(0), d = table.dim(1), n = ids.size();
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= V) {
            throw std::invalid_argument("rows: id out of range");
        }
    }
    Tensor out({n, d});
    for (size_t i = 0; i < n; ++i) {
        const double* src = table.data() + static_cast<size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    if (tape && table.tracked()) {
        out.set_node(tape->add_node({table.node()}, out.shape(),
                                    [table, ids, n, d, V](const double* g, Tape& tp) {
                                        if (double* gt = tp.acc(table.node(), V * d)) {
                                            for (size_t i = 0; i < n; ++i) {
                                                double* dst = gt + static_cast<size_t>(ids[i]) * d;
                                                const double* src = g + i * d;
                                                for (size_t j = 0; j < d; ++j) dst[j] += src[j];
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor select(Tape* tape, const Tensor& a, const std::vector<size_t>& idx) {
    const size_t n = idx.size();
    for (size_t i : idx) {
        if (i >= a.size()) throw std::invalid_argument("select: index out of range");
    }
    Tensor out({n});
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(idx[i]);
    if (tape && a.tracked()) {
        const size_t asz = a.size();
        out.set_node(tape->add_node({a.node()}, out.shape(),
                                    [a, idx, n, asz](const double* g, Tape& tp) {
                                        if (double* ga = tp.acc(a.node(), asz)) {
                                            for (size_t i = 0; i < n; ++i) ga[idx[i]] += g[i];
                                        }
                                    }));
    }
    return out;
}

Tensor stack(Tape* tape, const std::vector<Tensor>& scalars) {
    const size_t n = scalars.size();
    if (n == 0) throw std::invalid_argument("stack: empty input");
    Tensor out({n});
    bool tracked = false;
    std::vector<int> parents(n);
    for (size_t i = 0; i < n; ++i) {
        out.at(i) = scalars[i].scalar_value();
        parents[i] = scalars[i].node();
        tracked = tracked || scalars[i].tracked();
    }
    if (tape && tracked) {
        out.set_node(tape->add_node(std::move(parents), out.shape(),
                                    [scalars, n](const double* g, Tape& tp) {
                                        for (size_t i = 0; i < n; ++i) {
                                            if (double* gi = tp.acc(scalars[i].node(), 1)) {
                                                gi[0] += g[i];
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor split_heads(Tape* tape, const Tensor& x, size_t n_heads) {
    if (x.ndim() != 2 || x.dim(1) % n_heads != 0) {
        throw std::invalid_argument("split_heads: bad shape");
    }
    const size_t T = x.dim(0), d = x.dim(1), hd = d / n_heads;
    Tensor out({n_heads, T, hd});
    for (size_t h = 0; h < n_heads; ++h) {
        for (size_t t = 0; t < T; ++t) {
            const double* src = x.data() + t * d + h * hd;
            std::copy(src, src + hd, out.data() + (h * T + t) * hd);
        }
    }
    if (tape && x.tracked()) {
        out.set_node(tape->add_node({x.node()}, out.shape(),
                                    [x, n_heads, T, d, hd](const double* g, Tape& tp) {
                                        if (double* gx = tp.acc(x.node(), T * d)) {
                                            for (size_t h = 0; h < n_heads; ++h) {
                                                for (size_t t = 0; t < T; ++t) {
                                                    const double* src = g + (h * T + t) * hd;
                                                    double* dst = gx + t * d + h * hd;
                                                    for (size_t j = 0; j < hd; ++j) dst[j] += src[j];
                                                }
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor merge_heads(Tape* tape, const Tensor& x) {
    if (x.ndim() != 3) throw std::invalid_argument("merge_heads: need [H,T,hd]");
    const size_t H = x.dim(0), T = x.dim(1), hd = x.dim(2), d = H * hd;
    Tensor out({T, d});
    for (size_t h = 0; h < H; ++h) {
        for (size_t t = 0; t < T; ++t) {
            const double* src = x.data() + (h * T + t) * hd;
            std::copy(src, src + hd, out.data() + t * d + h * hd);
        }
    }
    if (tape && x.tracked()) {
        out.set_node(tape->add_node({x.node()}, out.shape(),
                                    [x, H, T, hd, d](const double* g, Tape& tp) {
                                        if (double* gx = tp.acc(x.node(), H * T * hd)) {
                                            for (size_t h = 0; h < H; ++h) {
                                                for (size_t t = 0; t < T; ++t) {
                                                    const double* src = g + t * d + h * hd;
                                                    double* dst = gx + (h * T + t) * hd;
                                                    for (size_t j = 0; j < hd; ++j) dst[j] += src[j];
                                                }
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor rmsnorm_rows(Tape* tape, const Tensor& x, double eps) {
    if (x.ndim() != 2) throw std::invalid_argument("rmsnorm_rows: need [T,d]");
    const size_t T = x.dim(0), d = x.dim(1);
    Tensor out(x.shape());
    std::vector<double> inv_rms(T);
    for (size_t t = 0; t < T; ++t) {
        const double* xr = x.data() + t * d;
        double ms = 0.0;
        for (size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms = ms / static_cast<double>(d) + eps;
        const double s = 1.0 / std::sqrt(ms);
        inv_rms[t] = s;
        double* yr = out.data() + t * d;
        for (size_t j = 0; j < d; ++j) yr[j] = xr[j] * s;
    }
    if (tape && x.tracked()) {
        out.set_node(tape->add_node(
            {x.node()}, out.shape(), [x, inv_rms, T, d](const double* g, Tape& tp) {
                if (double* gx = tp.acc(x.node(), T * d)) {
                    for (size_t t = 0; t < T; ++t) {
                        const double* xr = x.data() + t * d;
                        const double* gr = g + t * d;
                        const double s = inv_rms[t];
                        double dot = 0.0;
                        for (size_t j = 0; j < d; ++j) dot += gr[j] * xr[j];
                        const double corr = s * s * s * dot / static_cast<double>(d);
                        double* dst = gx + t * d;
                        for (size_t j = 0; j < d; ++j) dst[j] += s * gr[j] - corr * xr[j];
                    }
                }
            }));
    }
    return out;
}

Tensor log_softmax_rows(Tape* tape, const Tensor& x) {
    if (x.ndim() != 2) throw std::invalid_argument("log_softmax_rows: need [T,V]");
    const size_t T = x.dim(0), V = x.dim(1);
    Tensor out(x.shape());
    for (size_t t = 0; t < T; ++t) {
        const double* xr = x.data() + t * V;
        double m = kNegInf;
        for (size_t j = 0; j < V; ++j) m = std::max(m, xr[j]);
        double se = 0.0;
        for (size_t j = 0; j < V; ++j) se += std::exp(xr[j] - m);
        const double lse = m + std::log(se);
        double* yr = out.data() + t * V;
        for (size_t j = 0; j < V; ++j) yr[j] = xr[j] - lse;
    }
    if (tape && x.tracked()) {
        out.set_node(tape->add_node({x.node()}, out.shape(),
                                    [x, out, T, V](const double* g, Tape& tp) {
                                        if (double* gx = tp.acc(x.node(), T * V)) {
                                            for (size_t t = 0; t < T; ++t) {
                                                const double* gr = g + t * V;
                                                const double* yr = out.data() + t * V;
                                                double gsum = 0.0;
                                                for (size_t j = 0; j < V; ++j) gsum += gr[j];
                                                double* dst = gx + t * V;
                                                for (size_t j = 0; j < V; ++j) {
                                                    dst[j] += gr[j] - std::exp(yr[j]) * gsum;
                                                }
                                            }
                                        }
                                    }));
    }
    return out;
}

Tensor masked_softmax_rows(Tape* tape, const Tensor& s, const std::vector<double>& mask) {
    if (s.ndim() != 3) throw std::invalid_argument("masked_softmax_rows: need [H,T,S]");
    const size_t H = s.dim(0), T = s.dim(1), S = s.dim(2);
    if (mask.size() != T * S) throw std::invalid_argument("masked_softmax_rows: mask size");
    Tensor out(s.shape());
    for (size_t h = 0; h < H; ++h) {
        for (size_t t = 0; t < T; ++t) {
            const double* xr = s.data() + (h * T + t) * S;
            const double* mr = mask.data() + t * S;
            double m = kNegInf;
            for (size_t j = 0; j < S; ++j) m = std::max(m, xr[j] + mr[j]);
            double se = 0.0;
            double* yr = out.data() + (h * T + t) * S;
            for (size_t j = 0; j < S; ++j) {
                const double e = std::exp(xr[j] + mr[j] - m);
                yr[j] = e;
                se += e;
            }
            const double inv = 1.0 / se;
            for (size_t j = 0; j < S; ++j) yr[j] *= inv;
        }
    }
    if (tape && s.tracked()) {
        out.set_node(tape->add_node(
            {s.node()}, out.shape(), [s, out, H, T, S](const double* g, Tape& tp) {
                if (double* gs = tp.acc(s.node(), H * T * S)) {
                    for (size_t r = 0; r < H * T; ++r) {
                        const double* gr = g + r * S;
                        const double* pr = out.data() + r * S;
                        double dot = 0.0;
                        for (size_t j = 0; j < S; ++j) dot += gr[j] * pr[j];
                        double* dst = gs + r * S;
                        for (size_t j = 0; j < S; ++j) dst[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }));
    }
    return out;
}

} // namespace raddpo::ad
