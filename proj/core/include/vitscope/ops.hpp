#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitscope/tape.hpp"
#include "vitscope/tensor.hpp"

/// Differentiable primitives. Every op validates shapes and finiteness of its
/// inputs, computes the result eagerly, and records a gradient rule on the
/// tape when any input requires a gradient.
///
/// Broadcasting is limited to one form: in add() and mul() the second operand
/// may match a trailing suffix of the first operand's shape, in which case it
/// is repeated over the leading dimensions.
namespace vitscope::ops {

/// Matrix product on 2-d operands, or batched over a shared leading
/// dimension on 3-d operands. The transpose flags apply to the last two axes.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b,
              bool transpose_a = false, bool transpose_b = false);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);

Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);

/// Normalizes over the last axis to zero mean and unit variance, no affine.
Tensor layer_norm(Tape& tape, const Tensor& x, double eps = 1e-12);

/// Softmax along `axis`; negative values count from the end.
Tensor softmax(Tape& tape, const Tensor& x, int axis = -1);

/// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(Tape& tape, const Tensor& x);

/// Mean negative log-likelihood of `labels` under row-wise softmax of a
/// (batch, classes) logit matrix.
Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const int> labels);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor permute(Tape& tape, const Tensor& x, std::vector<std::size_t> order);
Tensor slice(Tape& tape, const Tensor& x, std::size_t axis, std::size_t begin,
             std::size_t end);
Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis);

namespace kernels {

/// C (m x n) = op(A) op(B) [+ C when accumulate]. A is stored m x k, or k x m
/// when transpose_a; B is stored k x n, or n x k when transpose_b.
void gemm(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n,
          std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);

}  // namespace kernels

}  // namespace vitscope::ops
