// Bidirectional stepwise feature alignment: K levels of paired forward/reverse
// registration layers, each predicting a displacement at its own grid, followed by the
// additive assembly of the A-to-B field.

#pragma once

#include <vector>

#include <torch/torch.h>

#include "regfuse/config.hpp"
#include "regfuse/deformation.hpp"

namespace regfuse {

// Per-level working set. Index i-1 holds level i (coarsest first).
struct PyramidState {
    int levels = 0;
    std::vector<torch::Tensor> features_a;  // F_A^i
    std::vector<torch::Tensor> features_b;  // F_B^i
    std::vector<torch::Tensor> hidden_a;    // D_A^i
    std::vector<torch::Tensor> hidden_b;    // D_B^i
    std::vector<DeformationField> fields_a;  // phi_A^i (empty when FRL is disabled)
    std::vector<DeformationField> fields_b;  // phi_B^i (empty when RRL is disabled)
    int64_t full_h = 0;
    int64_t full_w = 0;
};

struct RegLayerOutput {
    DeformationField field;
    torch::Tensor hidden;
};

// concat(F_cat, D_prev) -> 2 x (3x3 conv + leaky ReLU) -> {2-channel field head, W' hidden head}.
// The field head is zero-initialised, so a fresh layer predicts no displacement.
struct RegLayerImpl : torch::nn::Module {
    RegLayerImpl(int64_t width, int64_t hidden);
    RegLayerOutput forward(const torch::Tensor& fcat, const torch::Tensor& hidden_prev, int level);

    torch::nn::Conv2d conv1{nullptr};
    torch::nn::Conv2d conv2{nullptr};
    torch::nn::Conv2d field_head{nullptr};
    torch::nn::Conv2d hidden_head{nullptr};
};
TORCH_MODULE(RegLayer);

struct BsfaImpl : torch::nn::Module {
    explicit BsfaImpl(const ModelConfig& config);

    // fa, fb: N x W' x g x g token maps at the coarsest grid; the finest level is g * 2^(K-1).
    PyramidState forward(const torch::Tensor& fa, const torch::Tensor& fb);

    ModelConfig config;
    std::vector<RegLayer> forward_layers;  // FRL_1..K
    std::vector<RegLayer> reverse_layers;  // RRL_1..K
};
TORCH_MODULE(Bsfa);

// accumulate_pyramid(phi_A) - accumulate_pyramid(phi_B) at full resolution.
// A disabled direction contributes zero; with both disabled the field is zero.
DeformationField final_field(const PyramidState& state);

// (1 - ssim(label, warped)) + mean |label - warped| with warped = warp(moving, phi_ab).
torch::Tensor consistency_loss(const torch::Tensor& moving, const torch::Tensor& label, const DeformationField& phi_ab);

}  // namespace regfuse
