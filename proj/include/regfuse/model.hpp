// The joint registration + fusion network and its seven loss terms.

#pragma once

#include <torch/torch.h>

#include "regfuse/bsfa.hpp"
#include "regfuse/config.hpp"
#include "regfuse/mdffr.hpp"
#include "regfuse/mmff.hpp"

namespace regfuse {

struct ForwardResult {
    EncoderOutput enc_a;
    EncoderOutput enc_b;
    torch::Tensor logits_a;  // modality classifier on the head tokens
    torch::Tensor logits_b;
    torch::Tensor probe_logits_a;  // frozen probe on the transferred tokens (undefined if disabled)
    torch::Tensor probe_logits_b;
    torch::Tensor transferred_a;  // N x P x W'
    torch::Tensor transferred_b;
    PyramidState pyramid;
    DeformationField phi_ab;   // full resolution, A -> B
    torch::Tensor registered;  // warp(I_A, phi_ab)
    torch::Tensor fused;       // N x 1 x H x W in (0,1)
};

struct RegFusionNetImpl : torch::nn::Module {
    explicit RegFusionNetImpl(const ModelConfig& config);

    // img_a: moving non-MRI image, img_b: MRI reference; both N x 1 x H x W.
    ForwardResult forward(const torch::Tensor& img_a, const torch::Tensor& img_b);

    ModelConfig config;
    Encoder encoder{nullptr};
    ModalityClassifier classifier{nullptr};
    TransferBlock transfer_a{nullptr};
    TransferBlock transfer_b{nullptr};
    Bsfa bsfa{nullptr};
    FusionStack fusion{nullptr};
    Reconstruction reconstruction{nullptr};
};
TORCH_MODULE(RegFusionNet);

struct LossParts {
    torch::Tensor ce1;        // modality CE on the heads
    torch::Tensor ce2;        // discrepancy probe CE against [.5, .5]
    torch::Tensor consis;     // registration consistency against the aligned label
    torch::Tensor smooth;     // per-level field smoothness
    torch::Tensor structure;  // SSIM structure loss with weight mu
    torch::Tensor grad;       // Sobel gradient loss
    torch::Tensor inten;      // max-intensity loss
};

LossParts compute_losses(const ForwardResult& out, const torch::Tensor& img_a, const torch::Tensor& img_b,
                         const torch::Tensor& label_a, double mu, const ModelConfig& config);

// Number of scalar parameters.
int64_t parameter_count(torch::nn::Module& module);

}  // namespace regfuse
