// Multi-scale fusion of the aligned token maps (a stack of J fusion blocks), the
// reconstruction head producing the fused image, and the three fusion losses.

#pragma once

#include <vector>

#include <torch/torch.h>

#include "regfuse/config.hpp"
#include "regfuse/deformation.hpp"
#include "regfuse/layers.hpp"

namespace regfuse {

// concat(warped A stream, B stream, G_prev) -> 1x1 conv -> Restormer block -> x2 upsample.
// The last block (i == J) skips the upsample so G^J lands at full resolution.
struct FusionBlockImpl : torch::nn::Module {
    FusionBlockImpl(const ModelConfig& config, int index);

    // ar, br: W' x g x g token maps on the H / 2^(J-1) grid; g_prev on the level-i grid
    // (H / 2^(J-i)), or undefined for i = 1 (treated as zeros).
    torch::Tensor forward(const torch::Tensor& ar, const torch::Tensor& br, const DeformationField& phi_ab,
                          const torch::Tensor& g_prev);

    int index;
    int blocks;
    int64_t fusion_channels;
    torch::nn::Conv2d reduce{nullptr};
    RestormerBlock encoder{nullptr};
};
TORCH_MODULE(FusionBlock);

// The A-side input of block i: the token map upsampled by 2^(i-1) and warped by the
// final field brought down to that grid (displacements divided by 2^(J-i)).
torch::Tensor fusion_a_stream(const torch::Tensor& ar, const DeformationField& phi_ab, int index, int blocks);

struct FusionStackImpl : torch::nn::Module {
    explicit FusionStackImpl(const ModelConfig& config);

    // Returns G^J (N x C_f x H x W).
    torch::Tensor forward(const torch::Tensor& ar, const torch::Tensor& br, const DeformationField& phi_ab);

    std::vector<FusionBlock> blocks;
};
TORCH_MODULE(FusionStack);

// concat(G^J, F_B^s, warp(F_A^s, phi)) -> 1x1 conv -> Restormer -> 1x1 conv -> sigmoid.
struct ReconstructionImpl : torch::nn::Module {
    explicit ReconstructionImpl(const ModelConfig& config);
    torch::Tensor forward(const torch::Tensor& g, const torch::Tensor& shallow_a, const torch::Tensor& shallow_b,
                          const DeformationField& phi_ab);

    torch::nn::Conv2d reduce{nullptr};
    RestormerBlock block{nullptr};
    torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(Reconstruction);

struct FusionLosses {
    torch::Tensor structure;  // (1 - ssim(F, A~)) + mu (1 - ssim(F, B))
    torch::Tensor intensity;  // mean |F - max(A~, B)|
    torch::Tensor gradient;   // mean |grad F - max(grad A~, grad B)|
};

FusionLosses fusion_losses(const torch::Tensor& fused, const torch::Tensor& warped_a, const torch::Tensor& img_b,
                           double mu);

}  // namespace regfuse
