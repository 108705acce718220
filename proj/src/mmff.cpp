#include "regfuse/mmff.hpp"

#include <stdexcept>

#include "regfuse/imaging.hpp"

namespace regfuse {

torch::Tensor fusion_a_stream(const torch::Tensor& ar, const DeformationField& phi_ab, int index, int blocks) {
    auto up = resample(ar, static_cast<double>(int64_t{1} << (index - 1)));
    auto field = scale_field(phi_ab, 1.0 / static_cast<double>(int64_t{1} << (blocks - index)));
    if (field.height() != up.size(2) || field.width() != up.size(3)) {
        throw std::invalid_argument("fusion block " + std::to_string(index) + ": field and feature grids differ");
    }
    return warp(up, field);
}

FusionBlockImpl::FusionBlockImpl(const ModelConfig& config, int index_)
    : index(index_), blocks(config.fusion_blocks), fusion_channels(config.fusion_channels) {
    reduce = register_module(
        "reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * config.token_width + fusion_channels,
                                                             fusion_channels, 1)));
    encoder = register_module("encoder",
                              RestormerBlock(fusion_channels, config.restormer_heads, config.ffn_expansion));
}

torch::Tensor FusionBlockImpl::forward(const torch::Tensor& ar, const torch::Tensor& br,
                                       const DeformationField& phi_ab, const torch::Tensor& g_prev) {
    auto a_stream = fusion_a_stream(ar, phi_ab, index, blocks);
    auto b_stream = resample(br, static_cast<double>(int64_t{1} << (index - 1)));
    auto g = g_prev.defined()
                 ? g_prev
                 : torch::zeros({ar.size(0), fusion_channels, a_stream.size(2), a_stream.size(3)}, ar.options());
    if (g.size(2) != a_stream.size(2) || g.size(3) != a_stream.size(3)) {
        throw std::invalid_argument("fusion block " + std::to_string(index) + ": G grid mismatch");
    }
    auto out = encoder(reduce(torch::cat({a_stream, b_stream, g}, 1)));
    return index == blocks ? out : resample(out, 2.0);
}

FusionStackImpl::FusionStackImpl(const ModelConfig& config) {
    for (int i = 1; i <= config.fusion_blocks; ++i) {
        blocks.push_back(register_module("block" + std::to_string(i), FusionBlock(config, i)));
    }
}

torch::Tensor FusionStackImpl::forward(const torch::Tensor& ar, const torch::Tensor& br,
                                       const DeformationField& phi_ab) {
    torch::Tensor g;
    for (auto& block : blocks) g = block(ar, br, phi_ab, g);
    return g;
}

ReconstructionImpl::ReconstructionImpl(const ModelConfig& config) {
    const int64_t c = config.shallow_channels;
    reduce = register_module(
        "reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.fusion_channels + 2 * c, c, 1)));
    block = register_module("block", RestormerBlock(c, config.restormer_heads, config.ffn_expansion));
    out = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 1, 1)));
}

torch::Tensor ReconstructionImpl::forward(const torch::Tensor& g, const torch::Tensor& shallow_a,
                                          const torch::Tensor& shallow_b, const DeformationField& phi_ab) {
    auto corrected = warp(shallow_a, phi_ab);
    return torch::sigmoid(out(block(reduce(torch::cat({g, shallow_b, corrected}, 1)))));
}

FusionLosses fusion_losses(const torch::Tensor& fused, const torch::Tensor& warped_a, const torch::Tensor& img_b,
                           double mu) {
    if (fused.sizes() != warped_a.sizes() || fused.sizes() != img_b.sizes()) {
        throw std::invalid_argument("fusion_losses: dimension mismatch");
    }
    if (!(mu > 0)) throw std::invalid_argument("fusion_losses: mu must be positive");
    FusionLosses l;
    l.structure = ssim_loss(fused, warped_a) + mu * ssim_loss(fused, img_b);
    l.intensity = (fused - torch::max(warped_a, img_b)).abs().mean();
    l.gradient =
        (gradient_magnitude(fused) - torch::max(gradient_magnitude(warped_a), gradient_magnitude(img_b))).abs().mean();
    return l;
}

}  // namespace regfuse
