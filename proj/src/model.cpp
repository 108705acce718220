#include "regfuse/model.hpp"

#include <stdexcept>

#include "regfuse/imaging.hpp"

namespace regfuse {

RegFusionNetImpl::RegFusionNetImpl(const ModelConfig& cfg) : config(cfg) {
    validate(config);
    const int64_t width = config.token_width;
    encoder = register_module("encoder", Encoder(config));
    classifier = register_module("classifier", ModalityClassifier(width, config.classifier_hidden));
    transfer_a = register_module("transfer_a",
                                 TransferBlock(width, config.transformer_heads, config.transformer_mlp_ratio));
    transfer_b = register_module("transfer_b",
                                 TransferBlock(width, config.transformer_heads, config.transformer_mlp_ratio));
    bsfa = register_module("bsfa", Bsfa(config));
    fusion = register_module("fusion", FusionStack(config));
    reconstruction = register_module("reconstruction", Reconstruction(config));
}

ForwardResult RegFusionNetImpl::forward(const torch::Tensor& img_a, const torch::Tensor& img_b) {
    if (img_a.sizes() != img_b.sizes()) throw std::invalid_argument("forward: image pair dims differ");
    const int64_t multiple = config.size_multiple();
    if (img_a.size(2) % multiple != 0 || img_a.size(3) % multiple != 0) {
        throw std::invalid_argument("forward: image dims must be divisible by " + std::to_string(multiple));
    }
    ForwardResult r;
    r.enc_a = encoder(img_a);
    r.enc_b = encoder(img_b);
    const auto& ta = r.enc_a.tokens;
    const auto& tb = r.enc_b.tokens;

    auto head_a = config.detach_classifier_input ? ta.head.detach() : ta.head;
    auto head_b = config.detach_classifier_input ? tb.head.detach() : tb.head;
    r.logits_a = classifier(head_a);
    r.logits_b = classifier(head_b);

    torch::Tensor mixed_a = ta.tokens;
    torch::Tensor mixed_b = tb.tokens;
    if (config.inject_heads) std::tie(mixed_a, mixed_b) = inject_heads(ta, tb);
    r.transferred_a = transfer_a(mixed_a);
    r.transferred_b = transfer_b(mixed_b);

    if (config.probe_loss) {
        auto probe_in_a = config.probe_updates_encoder ? r.transferred_a : transfer_a(mixed_a.detach());
        auto probe_in_b = config.probe_updates_encoder ? r.transferred_b : transfer_b(mixed_b.detach());
        r.probe_logits_a = classifier->forward(encoder->probe_head(probe_in_a), /*frozen=*/true);
        r.probe_logits_b = classifier->forward(encoder->probe_head(probe_in_b), /*frozen=*/true);
    }

    r.pyramid = bsfa(tokens_to_map(r.transferred_a, ta.grid_h, ta.grid_w),
                     tokens_to_map(r.transferred_b, tb.grid_h, tb.grid_w));
    r.phi_ab = final_field(r.pyramid);
    r.registered = warp(img_a, r.phi_ab);

    auto ar = tokens_to_map(ta.tokens, ta.grid_h, ta.grid_w);
    auto br = tokens_to_map(tb.tokens, tb.grid_h, tb.grid_w);
    if (config.levels != config.fusion_blocks) {
        const double f = std::ldexp(1.0, config.levels - config.fusion_blocks);
        ar = resample(ar, f);
        br = resample(br, f);
    }
    auto g = fusion(ar, br, r.phi_ab);
    r.fused = reconstruction(g, r.enc_a.shallow, r.enc_b.shallow, r.phi_ab);
    return r;
}

LossParts compute_losses(const ForwardResult& out, const torch::Tensor& img_a, const torch::Tensor& img_b,
                         const torch::Tensor& label_a, double mu, const ModelConfig& config) {
    const int64_t n = img_a.size(0);
    auto opts = out.logits_a.options().requires_grad(false);
    LossParts p;
    p.ce1 = cross_entropy_logits(out.logits_a, target_a(n, opts)) + cross_entropy_logits(out.logits_b, target_b(n, opts));
    if (out.probe_logits_a.defined()) {
        p.ce2 = cross_entropy_logits(out.probe_logits_a, target_uniform(n, opts)) +
                cross_entropy_logits(out.probe_logits_b, target_uniform(n, opts));
    } else {
        p.ce2 = torch::zeros({}, opts);
    }
    p.consis = consistency_loss(img_a, label_a, out.phi_ab);
    p.smooth = smoothness_loss(out.pyramid.fields_a, out.pyramid.fields_b, config.levels).to(opts.dtype());
    auto f = fusion_losses(out.fused, out.registered, img_b, mu);
    p.structure = f.structure;
    p.grad = f.gradient;
    p.inten = f.intensity;
    return p;
}

int64_t parameter_count(torch::nn::Module& module) {
    int64_t total = 0;
    for (const auto& p : module.parameters()) total += p.numel();
    return total;
}

}  // namespace regfuse
