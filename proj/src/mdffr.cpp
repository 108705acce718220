#include "regfuse/mdffr.hpp"

#include <stdexcept>

namespace F = torch::nn::functional;

namespace regfuse {

torch::Tensor tokens_to_map(const torch::Tensor& tokens, int64_t grid_h, int64_t grid_w) {
    TORCH_CHECK(tokens.dim() == 3 && tokens.size(1) == grid_h * grid_w, "token count does not match the grid");
    return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), grid_h, grid_w});
}

torch::Tensor map_to_tokens(const torch::Tensor& map) { return map.flatten(2).transpose(1, 2); }

EncoderImpl::EncoderImpl(const ModelConfig& cfg) : config(cfg) {
    validate(config);
    const int64_t c = config.shallow_channels;
    const int64_t width = config.token_width;
    downsample = int64_t{1} << (config.levels - 1);
    const int64_t s1 = int64_t{1} << ((config.levels - 1) / 2);
    const int64_t s2 = downsample / s1;

    embed = register_module("embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, c, 3).padding(1)));
    shallow_block = register_module("shallow_block", RestormerBlock(c, config.restormer_heads, config.ffn_expansion));
    down1 = register_module("down1", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 2 * c, s1).stride(s1)));
    down2 = register_module("down2", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * c, width, s2).stride(s2)));
    deep_block = register_module("deep_block", RestormerBlock(width, config.restormer_heads, config.ffn_expansion));

    mfrh = register_parameter("mfrh", torch::randn({1, 1, width}) * 0.02);
    const int64_t g = config.image_size / downsample;
    pos_embedding = register_parameter("pos_embedding", torch::randn({1, width, g, g}) * 0.02,
                                       config.positional_embedding);
    for (int i = 0; i < 2; ++i) {
        layers.push_back(register_module("layer" + std::to_string(i),
                                         TransformerLayer(width, config.transformer_heads, config.transformer_mlp_ratio)));
    }
}

EncoderOutput EncoderImpl::forward(const torch::Tensor& img) {
    if (img.dim() != 4 || img.size(1) != 1) throw std::invalid_argument("encode: expected N x 1 x H x W");
    if (img.size(2) % downsample != 0 || img.size(3) % downsample != 0) {
        throw std::invalid_argument("encode: image dims must be divisible by " + std::to_string(downsample));
    }
    auto shallow = shallow_block(embed(img));
    auto deep = deep_block(down2(down1(shallow)));
    const int64_t gh = deep.size(2);
    const int64_t gw = deep.size(3);
    if (config.positional_embedding) {
        auto pos = pos_embedding;
        if (pos.size(2) != gh || pos.size(3) != gw) {
            pos = F::interpolate(pos, F::InterpolateFuncOptions()
                                          .size(std::vector<int64_t>{gh, gw})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
        }
        deep = deep + pos;
    }
    const int64_t n = img.size(0);
    auto x = torch::cat({mfrh.expand({n, 1, mfrh.size(2)}), map_to_tokens(deep)}, 1);
    for (auto& layer : layers) x = layer(x);
    using torch::indexing::Slice;
    return {shallow, TokenSequence{x.index({Slice(), Slice(1)}), x.select(1, 0), gh, gw}};
}

torch::Tensor EncoderImpl::probe_head(const torch::Tensor& tokens) {
    const int64_t n = tokens.size(0);
    auto head = mfrh.detach().expand({n, 1, mfrh.size(2)});
    auto x = layers.back()->forward(torch::cat({head, tokens}, 1), /*frozen=*/true);
    return x.select(1, 0);
}

ModalityClassifierImpl::ModalityClassifierImpl(int64_t width, int64_t hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(width, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, 2));
}

torch::Tensor ModalityClassifierImpl::forward(const torch::Tensor& head, bool frozen) {
    return apply_linear(fc2, F::gelu(apply_linear(fc1, head, frozen)), frozen);
}

TransferBlockImpl::TransferBlockImpl(int64_t width, int64_t heads, int64_t mlp_ratio) {
    first = register_module("first", TransformerLayer(width, heads, mlp_ratio));
    second = register_module("second", TransformerLayer(width, heads, mlp_ratio));
}

torch::Tensor TransferBlockImpl::forward(const torch::Tensor& tokens) { return second(first(tokens)); }

std::pair<torch::Tensor, torch::Tensor> inject_heads(const TokenSequence& a, const TokenSequence& b) {
    if (a.tokens.sizes() != b.tokens.sizes() || a.head.sizes() != b.head.sizes()) {
        throw std::invalid_argument("inject_heads: token shapes differ");
    }
    return {a.tokens + b.head.unsqueeze(1), b.tokens + a.head.unsqueeze(1)};
}

torch::Tensor target_a(int64_t n, const torch::TensorOptions& opts) {
    return torch::tensor({0.0, 1.0}, opts).expand({n, 2});
}
torch::Tensor target_b(int64_t n, const torch::TensorOptions& opts) {
    return torch::tensor({1.0, 0.0}, opts).expand({n, 2});
}
torch::Tensor target_uniform(int64_t n, const torch::TensorOptions& opts) {
    return torch::full({n, 2}, 0.5, opts);
}

torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& target, double eps) {
    if (!torch::isfinite(probs).all().item<bool>()) throw std::invalid_argument("cross_entropy: non-finite input");
    return -(target * torch::log(probs.clamp_min(eps))).sum(-1).mean();
}

torch::Tensor cross_entropy_logits(const torch::Tensor& logits, const torch::Tensor& target) {
    if (!torch::isfinite(logits).all().item<bool>()) throw std::invalid_argument("cross_entropy: non-finite logits");
    return -(target * torch::log_softmax(logits, -1)).sum(-1).mean();
}

torch::Tensor modality_ce_loss(const torch::Tensor& probs_a, const torch::Tensor& probs_b) {
    auto opts = probs_a.options().requires_grad(false);
    return cross_entropy(probs_a, target_a(probs_a.size(0), opts)) +
           cross_entropy(probs_b, target_b(probs_b.size(0), opts));
}

torch::Tensor discrepancy_probe_loss(const torch::Tensor& probs_a, const torch::Tensor& probs_b) {
    auto opts = probs_a.options().requires_grad(false);
    return cross_entropy(probs_a, target_uniform(probs_a.size(0), opts)) +
           cross_entropy(probs_b, target_uniform(probs_b.size(0), opts));
}

}  // namespace regfuse
