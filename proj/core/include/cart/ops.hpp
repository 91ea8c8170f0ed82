#pragma once

#include <vector>

#include "cart/tensor.hpp"
#include "cart/types.hpp"

namespace cart::ad {

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

// Shape
Tensor reshape(const Tensor& x, const Shape& s);
Tensor transpose2d(const Tensor& x);                       // [M,N] -> [N,M]
Tensor slice_cols(const Tensor& x, int start, int len);    // [M,N] -> [M,len]
Tensor concat_cols(const std::vector<Tensor>& parts);      // [M,Ni] -> [M,sum Ni]

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);                       // [M,K]x[K,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);      // [N,D]x[D,K]+[K]

// Convolution on channel-interleaved [H,W,C] tensors; weights [kh,kw,Cin,Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);                        // [H,W,C] -> [2H,2W,C]
Tensor resize_bilinear(const Tensor& x, int oh, int ow);           // corner-aligned, like image resize

// Normalization / reductions (accumulation in 64-bit)
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);  // last dim
Tensor softmax_lastdim(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Gather / losses
Tensor embedding_rows(const Tensor& table, const std::vector<int>& indices);  // [V,D] -> [N,D]
Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets);  // mean over rows

// Identity on values; gradient is rerouted to grad_path (copy-through
// estimator used by the quantizer).
Tensor straight_through(const Tensor& value, const Tensor& grad_path);

// Block-causal attention mask over a token-map sequence: position i attends
// to position j iff map(j) <= map(i). Because maps are contiguous the allowed
// set per query is a prefix, stored as one length per map block.
struct BlockCausalMask {
  std::vector<int> block_offsets;  // start position of each map
  std::vector<int> block_sizes;    // positions per map
  std::vector<int> prefix_len;     // allowed key prefix per map

  int total() const { return block_offsets.empty() ? 0 : block_offsets.back() + block_sizes.back(); }
  bool allowed(int query_pos, int key_pos) const;
};

BlockCausalMask build_block_causal_mask(const SequenceLayout& layout);

// Per-head scaled dot-product attention with the block-causal mask.
// q, k, v: [L, dh]; returns [L, dh].
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const BlockCausalMask& mask);

}  // namespace cart::ad
