#pragma once

#include <span>
#include <vector>

#include "gwmoe/autograd.hpp"
#include "gwmoe/tensor.hpp"

/// Differentiable tensor operations. Each records its backward rule on the
/// active tape when any operand requires grad. Gradients accumulate (+=).
namespace gwmoe::ops {

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
/// a[m,n] + bias[n], bias repeated over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);

/// Max-subtracted softmax along `axis` (negative counts from the end).
Tensor softmax(const Tensor& x, int axis = -1);

/// Elementwise natural log; inputs must be > 0.
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Rows of table[V,d] selected by ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Per-row normalization of x[m,n] with learned gain and bias of length n.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean negative log-likelihood of targets under softmax(logits) -> scalar.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Multi-head scaled dot-product attention over packed sequences.
/// q, k, v are [batch*seq_len, d]; heads split d evenly.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads, bool causal);

/// x[rows(idx)] -> [idx.size(), d]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx);

/// Row i of x[m,d] multiplied by w[i], w of shape [m].
Tensor scale_rows(const Tensor& x, const Tensor& w);

/// Zero [rows,d] tensor with parts[p] row j added into row index[p][j].
/// Accumulation runs in part order, then row order.
Tensor scatter_add_rows(std::size_t rows, std::span<const Tensor> parts,
                        std::span<const std::vector<std::size_t>> index);

/// [batch*seq_len, d] -> [batch, d] mean over each sequence.
Tensor mean_pool(const Tensor& x, std::size_t seq_len);

}  // namespace gwmoe::ops
