#pragma once

#include <span>
#include <vector>

#include "vcdm/nn/tensor.hpp"

// Differentiable primitives. Tensors are row-major; "rows" means the product
// of all leading dimensions and "cols" the last dimension unless stated.
namespace vcdm::nn {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);

// b has shape (cols); broadcast over every row of a.
Var add_bias(const Var& a, const Var& b);
// Multiplies slab i of a (a[i, ...]) by the constant s[i].
Var scale_rows(const Var& a, std::span<const double> s);
// a has shape (N, C, ...); b has shape (N, C). Adds b[n, c] to every element
// of channel c in sample n.
Var add_channel(const Var& a, const Var& b);

// (M, K) x (K, N); a may have extra leading dims that are flattened into M.
Var matmul(const Var& a, const Var& b);
// x: (..., in), weight: (in, out), bias: (out) or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

Var silu(const Var& a);
Var gelu(const Var& a);

// Normalises over the last dimension.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// x: (N, C, H, W); statistics per (sample, group).
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

// Scaled dot-product self attention over (B, T, D) inputs split into heads.
// mask, when non-empty, has B*T entries; masked-out keys receive no weight.
Var attention(const Var& q, const Var& k, const Var& v, int heads, std::span<const bool> key_mask = {});

Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, int start, int length);
Var reshape(const Var& x, Shape shape);

// x: (N, Cin, H, W); weight: (Cout, Cin, k, k); stride 1, zero padding pad.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad);
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
// (N, C, H, W) <-> (N, H*W, C)
Var to_tokens(const Var& x);
Var from_tokens(const Var& x, int height, int width);

// Rows of table (V, D) selected by ids -> (ids.size(), D).
Var gather_rows(const Var& table, std::span<const int> ids);

Var sum(const Var& x);
Var mean(const Var& x);
// sum_i w[i] * sum_j x[i, j]^2 with x viewed as (w.size(), rest).
Var weighted_sum_sq(const Var& x, std::span<const double> weights);

}  // namespace vcdm::nn
