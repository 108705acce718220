// Shared network blocks: the Restormer block (multi-Dconv transposed attention plus
// gated-Dconv feed-forward) and a pre-norm Transformer encoder layer.

#pragma once

#include <torch/torch.h>

namespace regfuse {

// Channel-wise LayerNorm on N x C x H x W (normalises over C at every pixel).
struct LayerNorm2dImpl : torch::nn::Module {
    explicit LayerNorm2dImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

    torch::Tensor weight;
    torch::Tensor bias;
};
TORCH_MODULE(LayerNorm2d);

// Attention across channels: the C x C attention map is built from L2-normalised
// query/key rows over the spatial axis, scaled by a learned per-head temperature.
struct TransposedAttentionImpl : torch::nn::Module {
    TransposedAttentionImpl(int64_t channels, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t heads;
    torch::Tensor temperature;
    torch::nn::Conv2d qkv{nullptr};
    torch::nn::Conv2d qkv_dw{nullptr};
    torch::nn::Conv2d project_out{nullptr};
};
TORCH_MODULE(TransposedAttention);

struct GatedFeedForwardImpl : torch::nn::Module {
    GatedFeedForwardImpl(int64_t channels, double expansion);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv2d project_in{nullptr};
    torch::nn::Conv2d dwconv{nullptr};
    torch::nn::Conv2d project_out{nullptr};
};
TORCH_MODULE(GatedFeedForward);

struct RestormerBlockImpl : torch::nn::Module {
    RestormerBlockImpl(int64_t channels, int64_t heads, double ffn_expansion);
    torch::Tensor forward(const torch::Tensor& x);

    LayerNorm2d norm1{nullptr};
    TransposedAttention attn{nullptr};
    LayerNorm2d norm2{nullptr};
    GatedFeedForward ffn{nullptr};
};
TORCH_MODULE(RestormerBlock);

// Pre-norm Transformer layer on N x T x D token sequences.
//
// With frozen = true every parameter is read through detach(), so the layer acts as a
// weight-tied replica that passes gradients to its input but never to its own weights.
struct TransformerLayerImpl : torch::nn::Module {
    TransformerLayerImpl(int64_t width, int64_t heads, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x, bool frozen = false);

    int64_t heads;
    torch::nn::LayerNorm norm1{nullptr};
    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(TransformerLayer);

// Applies a Linear layer, optionally through detached parameters.
torch::Tensor apply_linear(const torch::nn::Linear& layer, const torch::Tensor& x, bool frozen);

}  // namespace regfuse
