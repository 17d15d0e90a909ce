#pragma once

#include "clu/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace clu {

inline constexpr double kLayerNormEps = 1e-5;

// a[m x k] * b[k x n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x[n x k] * w[d x k]^T (+ bias[d]); the h = Wx layer in row-vector form.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w);
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);

// Batched product over the leading axis: a[g x m x k] * b[g x k x n], or
// b[g x n x k] transposed when transpose_b is set.
template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

// a[n x d] + b[m x d] with b repeated down the rows; n must be a multiple of m.
template <typename T>
BasicTensor<T> add_tiled(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

// Normalizes over the last axis, then applies gamma and beta.
template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

// out[i] = x[index[i]]; backward scatters.
template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, Shape out_shape, std::vector<std::size_t> index);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// [batch*seq x d] -> [batch*heads x seq x d/heads] and back.
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads);
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads);

// [batch*seq x d] -> [batch x d], mean over each run of `seq` rows.
template <typename T>
BasicTensor<T> mean_pool(const BasicTensor<T>& x, std::size_t seq);

// Concatenates equally sized tensors as the rows of a [rows x n] matrix.
template <typename T>
BasicTensor<T> stack_rows(std::span<const BasicTensor<T>> rows);

// Columns `cols` of a [n x c] matrix.
template <typename T>
BasicTensor<T> select_columns(const BasicTensor<T>& x, std::span<const std::size_t> cols);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels);

// Global mean of the squared difference.
template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace clu
