#pragma once

#include <span>
#include <vector>

#include "distillfss/autograd.hpp"

namespace distillfss::ops {

// 2-D convolution over a C x H x W map with weights O x C x k x k and bias O.
// Odd square kernels only; borders use replicate padding of k/2, so a
// spatially constant input always yields a spatially constant output.
// Output size is ceil(H / stride) x ceil(W / stride).
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride = 1);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var add(const Var& a, const Var& b);
Var add_constant(const Var& x, const Tensor& c);
Var scale(const Var& x, double s);

// Stacks C_i x H x W maps along the channel axis.
Var concat_channels(std::span<const Var> xs);
// Stacks R_i x C matrices along the row axis.
Var concat_rows(std::span<const Var> xs);
// Elementwise mean of equally shaped values.
Var mean_of(std::span<const Var> xs);

// Bilinear resize of a C x H x W map (half-pixel centers, edge clamped).
Var upsample_bilinear(const Var& x, int out_h, int out_w);

Var reshape(const Var& x, Shape shape);
// C x H x W -> (H*W) x C, row-major over (y, x).
Var map_to_tokens(const Var& x);

Var matmul(const Var& a, const Var& b);     // (n x k)(k x m)
Var matmul_nt(const Var& a, const Var& b);  // (n x k)(m x k)^T
Var softmax_rows(const Var& x);

Var sum_scalars(std::span<const Var> xs);
Var mean_all(const Var& x);

// Nearest-neighbour resize of a plain tensor (no gradient).
Tensor resize_nearest(const Tensor& x, int out_h, int out_w);

}  // namespace distillfss::ops
