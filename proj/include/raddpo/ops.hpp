#pragma once

#include <vector>

#include "raddpo/tape.hpp"
#include "raddpo/tensor.hpp"

// Differentiable primitives. Every op takes an optional tape: with a tape the
// result participates in backward; with nullptr the op is a pure forward
// computation (inference mode). Shape mismatches throw std::invalid_argument.
namespace raddpo::ad {

// ---- elementwise ----
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor relu(Tape* tape, const Tensor& a);
Tensor exp(Tape* tape, const Tensor& a);
Tensor log(Tape* tape, const Tensor& a);

// out_j = s - v_j, s scalar
Tensor sub_from_scalar(Tape* tape, const Tensor& s, const Tensor& v);
// out_j = v_j * w_j with constant weights
Tensor mul_constvec(Tape* tape, const Tensor& v, const std::vector<double>& w);

// ---- reductions ----
Tensor sum(Tape* tape, const Tensor& a);
Tensor mean(Tape* tape, const Tensor& a);
Tensor logsumexp(Tape* tape, const Tensor& v); // stable, vector -> scalar

// ---- scalar nonlinearities ----
Tensor sigmoid(Tape* tape, const Tensor& x);
Tensor softplus(Tape* tape, const Tensor& x); // log(1 + e^x), stable

// ---- linear algebra ----
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b); // [M,K]x[K,N]
// Batched over the leading dim: a[H,T,K] x b[H,S,K]^T -> [H,T,S]
Tensor bmm_nt(Tape* tape, const Tensor& a, const Tensor& b);
// a[H,T,S] x b[H,S,K] -> [H,T,K]
Tensor bmm_nn(Tape* tape, const Tensor& a, const Tensor& b);

// ---- gathers / layout ----
// rows(table[V,d], ids) -> [n,d]; backward scatter-adds into the table.
Tensor rows(Tape* tape, const Tensor& table, const std::vector<int>& ids);
// select(a, flat indices) -> [n]
Tensor select(Tape* tape, const Tensor& a, const std::vector<size_t>& idx);
// stack scalars -> [n]
Tensor stack(Tape* tape, const std::vector<Tensor>& scalars);
// [T,d] -> [H,T,d/H] and back
Tensor split_heads(Tape* tape, const Tensor& x, size_t n_heads);
Tensor merge_heads(Tape* tape, const Tensor& x);

// ---- normalization / softmax ----
// Row-wise x / sqrt(mean(x^2) + eps) over the last dim of [T,d].
Tensor rmsnorm_rows(Tape* tape, const Tensor& x, double eps = 1e-6);
// Row-wise log-softmax over the last dim of [T,V].
Tensor log_softmax_rows(Tape* tape, const Tensor& x);
// Softmax over the last dim of s[H,T,S] with an additive mask[T*S]
// (0 for visible, -inf for masked); the mask is shared across heads.
Tensor masked_softmax_rows(Tape* tape, const Tensor& s, const std::vector<double>& mask);

// ---- gradient control ----
// Value-identical (bitwise) tensor through which backward deposits nothing.
inline Tensor stop_gradient(const Tensor& t) { return t.detached(); }

} // namespace raddpo::ad
