#include "regfuse/layers.hpp"

#include <cmath>

namespace F = torch::nn::functional;

namespace regfuse {

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t groups = 1, bool bias = false) {
    return torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in, out, k).padding(k / 2).groups(groups).bias(bias));
}

torch::Tensor maybe_detach(const torch::Tensor& t, bool frozen) { return frozen ? t.detach() : t; }

}  // namespace

torch::Tensor apply_linear(const torch::nn::Linear& layer, const torch::Tensor& x, bool frozen) {
    return torch::linear(x, maybe_detach(layer->weight, frozen), maybe_detach(layer->bias, frozen));
}

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels) {
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
    auto mu = x.mean(1, true);
    auto var = (x - mu).pow(2).mean(1, true);
    auto y = (x - mu) / torch::sqrt(var + 1e-5);
    return y * weight.view({1, -1, 1, 1}) + bias.view({1, -1, 1, 1});
}

TransposedAttentionImpl::TransposedAttentionImpl(int64_t channels, int64_t heads_) : heads(heads_) {
    TORCH_CHECK(channels % heads == 0, "channels must be divisible by the head count");
    temperature = register_parameter("temperature", torch::ones({heads, 1, 1}));
    qkv = register_module("qkv", conv(channels, 3 * channels, 1));
    qkv_dw = register_module("qkv_dw", conv(3 * channels, 3 * channels, 3, 3 * channels));
    project_out = register_module("project_out", conv(channels, channels, 1));
}

torch::Tensor TransposedAttentionImpl::forward(const torch::Tensor& x) {
    const int64_t n = x.size(0);
    const int64_t c = x.size(1);
    const int64_t h = x.size(2);
    const int64_t w = x.size(3);
    auto parts = qkv_dw(qkv(x)).chunk(3, 1);
    auto shape = std::vector<int64_t>{n, heads, c / heads, h * w};
    auto q = F::normalize(parts[0].reshape(shape), F::NormalizeFuncOptions().dim(-1));
    auto k = F::normalize(parts[1].reshape(shape), F::NormalizeFuncOptions().dim(-1));
    auto v = parts[2].reshape(shape);
    auto attn = torch::matmul(q, k.transpose(-2, -1)) * temperature;
    auto out = torch::matmul(attn.softmax(-1), v);
    return project_out(out.reshape({n, c, h, w}));
}

GatedFeedForwardImpl::GatedFeedForwardImpl(int64_t channels, double expansion) {
    const auto hidden = static_cast<int64_t>(static_cast<double>(channels) * expansion);
    project_in = register_module("project_in", conv(channels, 2 * hidden, 1));
    dwconv = register_module("dwconv", conv(2 * hidden, 2 * hidden, 3, 2 * hidden));
    project_out = register_module("project_out", conv(hidden, channels, 1));
}

torch::Tensor GatedFeedForwardImpl::forward(const torch::Tensor& x) {
    auto parts = dwconv(project_in(x)).chunk(2, 1);
    return project_out(F::gelu(parts[0]) * parts[1]);
}

RestormerBlockImpl::RestormerBlockImpl(int64_t channels, int64_t heads, double ffn_expansion) {
    norm1 = register_module("norm1", LayerNorm2d(channels));
    attn = register_module("attn", TransposedAttention(channels, heads));
    norm2 = register_module("norm2", LayerNorm2d(channels));
    ffn = register_module("ffn", GatedFeedForward(channels, ffn_expansion));
}

torch::Tensor RestormerBlockImpl::forward(const torch::Tensor& x) {
    auto y = x + attn(norm1(x));
    return y + ffn(norm2(y));
}

TransformerLayerImpl::TransformerLayerImpl(int64_t width, int64_t heads_, int64_t mlp_ratio) : heads(heads_) {
    TORCH_CHECK(width % heads == 0, "token width must be divisible by the head count");
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
    qkv = register_module("qkv", torch::nn::Linear(width, 3 * width));
    proj = register_module("proj", torch::nn::Linear(width, width));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
    fc1 = register_module("fc1", torch::nn::Linear(width, mlp_ratio * width));
    fc2 = register_module("fc2", torch::nn::Linear(mlp_ratio * width, width));
}

torch::Tensor TransformerLayerImpl::forward(const torch::Tensor& x, bool frozen) {
    const int64_t n = x.size(0);
    const int64_t t = x.size(1);
    const int64_t d = x.size(2);
    const int64_t hd = d / heads;
    auto norm = [&](const torch::nn::LayerNorm& ln, const torch::Tensor& v) {
        return torch::layer_norm(v, {d}, maybe_detach(ln->weight, frozen), maybe_detach(ln->bias, frozen),
                                 ln->options.eps());
    };

    auto qkv_out = apply_linear(qkv, norm(norm1, x), frozen).reshape({n, t, 3, heads, hd}).permute({2, 0, 3, 1, 4});
    auto q = qkv_out[0];
    auto k = qkv_out[1];
    auto v = qkv_out[2];
    auto attn = (torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd))).softmax(-1);
    auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({n, t, d});
    auto y = x + apply_linear(proj, mixed, frozen);
    auto hidden = F::gelu(apply_linear(fc1, norm(norm2, y), frozen));
    return y + apply_linear(fc2, hidden, frozen);
}

}  // namespace regfuse
