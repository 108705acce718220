// Shared feature encoder with a modality feature representation head (MFRH),
// cross-injection of heads between the two images, the two Transfer blocks, and the
// frozen modality probe used to drive the transferred tokens toward modality-free.

#pragma once

#include <vector>

#include <torch/torch.h>

#include "regfuse/config.hpp"
#include "regfuse/layers.hpp"

namespace regfuse {

// Patch tokens (N x P x W') plus the head token (N x W'), laid out on a grid_h x grid_w grid.
struct TokenSequence {
    torch::Tensor tokens;
    torch::Tensor head;
    int64_t grid_h = 0;
    int64_t grid_w = 0;

    int64_t patches() const { return tokens.size(1); }
    int64_t width() const { return tokens.size(2); }
};

struct EncoderOutput {
    torch::Tensor shallow;  // N x C x H x W, first Restormer layer
    TokenSequence tokens;
};

// P x W' tokens -> N x W' x grid_h x grid_w feature map, and back.
torch::Tensor tokens_to_map(const torch::Tensor& tokens, int64_t grid_h, int64_t grid_w);
torch::Tensor map_to_tokens(const torch::Tensor& map);

struct EncoderImpl : torch::nn::Module {
    explicit EncoderImpl(const ModelConfig& config);

    // img: N x 1 x H x W with H, W divisible by 2^(K-1).
    EncoderOutput forward(const torch::Tensor& img);

    // Runs transferred tokens through a weight-tied, gradient-blocked replica of the last
    // Transformer layer, with the (detached) MFRH token prepended; returns that head token.
    torch::Tensor probe_head(const torch::Tensor& tokens);

    ModelConfig config;
    int64_t downsample = 1;
    torch::nn::Conv2d embed{nullptr};
    RestormerBlock shallow_block{nullptr};
    torch::nn::Conv2d down1{nullptr};
    torch::nn::Conv2d down2{nullptr};
    RestormerBlock deep_block{nullptr};
    torch::Tensor mfrh;           // 1 x 1 x W'
    torch::Tensor pos_embedding;  // 1 x W' x g x g on the reference image grid
    std::vector<TransformerLayer> layers;
};
TORCH_MODULE(Encoder);

// W' -> hidden -> 2 classifier on head tokens; returns logits. frozen reads detached weights.
struct ModalityClassifierImpl : torch::nn::Module {
    ModalityClassifierImpl(int64_t width, int64_t hidden);
    torch::Tensor forward(const torch::Tensor& head, bool frozen = false);

    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(ModalityClassifier);

// Two Transformer layers; TransferA and TransferB are separate instances.
struct TransferBlockImpl : torch::nn::Module {
    TransferBlockImpl(int64_t width, int64_t heads, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& tokens);

    TransformerLayer first{nullptr};
    TransformerLayer second{nullptr};
};
TORCH_MODULE(TransferBlock);

// Broadcast cross-injection: A's patch tokens get B's head added, and vice versa.
std::pair<torch::Tensor, torch::Tensor> inject_heads(const TokenSequence& a, const TokenSequence& b);

// Modality labels: A (non-MRI) is class index 1, B (MRI) is class index 0.
torch::Tensor target_a(int64_t n, const torch::TensorOptions& opts);
torch::Tensor target_b(int64_t n, const torch::TensorOptions& opts);
torch::Tensor target_uniform(int64_t n, const torch::TensorOptions& opts);

// -sum t log(max(p, eps)) per row, averaged over the batch.
torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& target, double eps = 1e-12);

// Same quantity from logits via log-softmax.
torch::Tensor cross_entropy_logits(const torch::Tensor& logits, const torch::Tensor& target);

// CE(y_A, [0,1]) + CE(y_B, [1,0]) on probabilities.
torch::Tensor modality_ce_loss(const torch::Tensor& probs_a, const torch::Tensor& probs_b);

// CE(y*_A, [.5,.5]) + CE(y*_B, [.5,.5]) on probabilities; minimum 2 ln 2.
torch::Tensor discrepancy_probe_loss(const torch::Tensor& probs_a, const torch::Tensor& probs_b);

}  // namespace regfuse
