#include "regfuse/bsfa.hpp"

#include <stdexcept>

#include "regfuse/imaging.hpp"

namespace F = torch::nn::functional;

namespace regfuse {

namespace {

torch::nn::Conv2d conv3(int64_t in, int64_t out) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

}  // namespace

RegLayerImpl::RegLayerImpl(int64_t width, int64_t hidden) {
    conv1 = register_module("conv1", conv3(3 * width, hidden));
    conv2 = register_module("conv2", conv3(hidden, hidden));
    field_head = register_module("field_head", conv3(hidden, 2));
    hidden_head = register_module("hidden_head", conv3(hidden, width));
    torch::NoGradGuard guard;
    field_head->weight.zero_();
    field_head->bias.zero_();
}

RegLayerOutput RegLayerImpl::forward(const torch::Tensor& fcat, const torch::Tensor& hidden_prev, int level) {
    if (fcat.size(2) != hidden_prev.size(2) || fcat.size(3) != hidden_prev.size(3)) {
        throw std::invalid_argument("reg_layer: feature and hidden-state grids differ");
    }
    auto act = F::LeakyReLUFuncOptions().negative_slope(0.2);
    auto x = F::leaky_relu(conv1(torch::cat({fcat, hidden_prev}, 1)), act);
    x = F::leaky_relu(conv2(x), act);
    return {DeformationField{field_head(x), level}, hidden_head(x)};
}

BsfaImpl::BsfaImpl(const ModelConfig& cfg) : config(cfg) {
    for (int i = 1; i <= config.levels; ++i) {
        forward_layers.push_back(
            register_module("frl" + std::to_string(i), RegLayer(config.token_width, config.reg_hidden)));
        reverse_layers.push_back(
            register_module("rrl" + std::to_string(i), RegLayer(config.token_width, config.reg_hidden)));
    }
}

PyramidState BsfaImpl::forward(const torch::Tensor& fa, const torch::Tensor& fb) {
    if (config.levels < 1) throw std::invalid_argument("run_bsfa: K must be >= 1");
    if (fa.sizes() != fb.sizes()) throw std::invalid_argument("run_bsfa: token maps differ in shape");
    const int k = config.levels;
    PyramidState s;
    s.levels = k;
    s.full_h = fa.size(2) << (k - 1);
    s.full_w = fa.size(3) << (k - 1);

    const bool use_a = config.registration && config.forward_registration;
    const bool use_b = config.registration && config.reverse_registration;
    auto cur_a = fa;
    auto cur_b = fb;
    auto d_a = fa;
    auto d_b = fb;
    for (int i = 1; i <= k; ++i) {
        s.features_a.push_back(cur_a);
        s.features_b.push_back(cur_b);
        auto fcat = torch::cat({cur_a, cur_b}, 1);
        if (use_a) {
            auto out = forward_layers[i - 1](fcat, d_a, i);
            s.fields_a.push_back(out.field);
            d_a = out.hidden;
        }
        if (use_b) {
            auto out = reverse_layers[i - 1](fcat, d_b, i);
            s.fields_b.push_back(out.field);
            d_b = out.hidden;
        }
        s.hidden_a.push_back(d_a);
        s.hidden_b.push_back(d_b);
        if (i == k) break;
        cur_a = resample(use_a ? warp(cur_a, s.fields_a.back()) : cur_a, 2.0);
        cur_b = resample(use_b ? warp(cur_b, s.fields_b.back()) : cur_b, 2.0);
        d_a = resample(d_a, 2.0);
        d_b = resample(d_b, 2.0);
    }
    return s;
}

DeformationField final_field(const PyramidState& state) {
    if (state.fields_a.empty() && state.fields_b.empty()) {
        if (state.features_a.empty()) throw std::invalid_argument("final_field: empty pyramid state");
        const auto& ref = state.features_a.front();
        return DeformationField::zeros(ref.size(0), state.full_h, state.full_w, state.levels,
                                       ref.options().requires_grad(false));
    }
    if (state.fields_b.empty()) return accumulate_pyramid(state.fields_a);
    auto phi_b = accumulate_pyramid(state.fields_b);
    if (state.fields_a.empty()) return DeformationField{-phi_b.disp, phi_b.level};
    return subtract_fields(accumulate_pyramid(state.fields_a), phi_b);
}

torch::Tensor consistency_loss(const torch::Tensor& moving, const torch::Tensor& label, const DeformationField& phi_ab) {
    if (moving.sizes() != label.sizes()) throw std::invalid_argument("consistency_loss: dimension mismatch");
    auto warped = warp(moving, phi_ab);
    return ssim_loss(label, warped) + (label - warped).abs().mean();
}

}  // namespace regfuse
