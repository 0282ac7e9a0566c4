#pragma once

// Differentiable operations. Image-like tensors are (channels, rows, cols);
// matrices are (rows, cols). No batch dimension: batching is done by looping.

#include <cstdint>
#include <optional>
#include <vector>

#include "vos/autograd.hpp"

namespace vos::ops {

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var one_minus(const Var& a);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);

// Shape
Var reshape(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts, int axis);  // axis 0 or 1 (2-D), 0 for any rank
Var slice0(const Var& a, int begin, int end);         // rows/channels [begin, end)
Var transpose(const Var& a);                          // 2-D
Var pad_bottom_right(const Var& a, int rows, int cols);
Var crop_top_left(const Var& a, int rows, int cols);

// Dense
Var matmul(const Var& a, const Var& b);  // (n,k) x (k,m)
/// x:(n,in) w:(in,out) b:(out) -> (n,out)
Var linear(const Var& x, const Var& w, const Var& b);
/// Row-wise layer normalization of x:(n,d).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Image
/// x:(C,H,W) w:(O,C,k,k) b:(O)
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var avg_pool(const Var& x, int factor);
/// Bilinear resize with half-pixel centres (align_corners = false).
Var resize_bilinear(const Var& x, int rows, int cols);

// Attention
enum class Affinity { kDot, kNegL2 };

/// Softmax-normalized affinity between query columns q:(d,n) and memory columns
/// k:(d,m), returned as weights (m,n) whose columns sum to one. Logits are
/// scaled by 1/sqrt(d).
Var affinity_softmax(const Var& q, const Var& k, Affinity kind);

/// Multi-head scaled dot-product attention on already-projected rows:
/// q:(n,d) k:(m,d) v:(m,dv). `allowed`, when present, is an n*m row-major
/// permission matrix; a row with no permitted entry falls back to attending
/// over every position.
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              const std::vector<std::uint8_t>* allowed = nullptr);

/// Raw attention probabilities for one head (for tests and audits).
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads, int head,
                         const std::vector<std::uint8_t>* allowed = nullptr);

/// Mask-weighted column mean: v:(C,N), w:(N) -> (C). Caller guarantees sum(w) > 0.
Var weighted_mean(const Var& v, const Var& w);

// Segmentation heads
/// Per-object logits (K,H,W) -> aggregated probabilities (K+1,H,W), channel 0 background.
Var soft_aggregate_logits(const Var& logits);
/// Same aggregation on probabilities already in [0,1].
Var soft_aggregate_probs(const Var& probs);

/// 0.5 * mean cross-entropy + 0.5 * mean soft-dice over object channels.
/// probs:(K+1,H,W); labels: channel index per pixel (0 = background).
Var segmentation_loss(const Var& probs, const std::vector<int>& labels);

}  // namespace vos::ops
