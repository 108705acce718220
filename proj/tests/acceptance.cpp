// Acceptance gate: runs every criterion and prints one PASS/FAIL line per criterion.
// Usage: regfuse_acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "metric_oracle.hpp"
#include "regfuse/cli.hpp"
#include "regfuse/metrics.hpp"
#include "regfuse/training.hpp"
#include "support.hpp"

using namespace regfuse;
using regfuse::test::rel_err;
using regfuse::test::slurp;
using regfuse::test::TempDir;
using regfuse::test::tiny_model;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

torch::Tensor max_abs(const torch::Tensor& t) { return t.abs().max(); }

// --- 1. field algebra ---------------------------------------------------------------------

void field_algebra(Outcome& o) {
    const auto t0 = Clock::now();
    auto x = regfuse::test::random_image(48, 40, 3, torch::kFloat32);
    o.require(torch::equal(warp(x, DeformationField::zeros(1, 48, 40)), x), "identity warp bit-exact (f32)");
    auto xd = regfuse::test::random_image(48, 40, 4, torch::kFloat64);
    o.require(torch::equal(warp(xd, DeformationField::zeros(1, 48, 40, 0, torch::kFloat64)), xd),
              "identity warp bit-exact (f64)");

    double worst = 0;
    const std::vector<std::pair<int, int>> shifts = {{1, 0}, {0, 2}, {-3, 1}, {2, -2}, {-1, -4}};
    for (auto [ax, ay] : shifts) {
        for (auto [bx, by] : shifts) {
            auto f1 = DeformationField::constant(1, 48, 40, ax, ay, 0, torch::kFloat64);
            auto f2 = DeformationField::constant(1, 48, 40, bx, by, 0, torch::kFloat64);
            auto f12 = DeformationField::constant(1, 48, 40, ax + bx, ay + by, 0, torch::kFloat64);
            auto two_step = warp(warp(xd, f1), f2);
            auto one_step = warp(xd, f12);
            const int m = 9;
            auto diff = (two_step - one_step).slice(2, m, 48 - m).slice(3, m, 40 - m);
            worst = std::max(worst, max_abs(diff).item<double>());
        }
    }
    o.require(worst <= 1e-6, "integer translation composability");
    o.detail << "composition max|diff|=" << worst << " ";

    for (int k : {1, 3, 5}) {
        std::vector<DeformationField> fields;
        double ex = 0, ey = 0;
        const int64_t full = 64;
        for (int i = 1; i <= k; ++i) {
            const int64_t g = full >> (k - i);
            const double dx = 0.25 * i - 0.5, dy = 1.5 - 0.75 * i;
            fields.push_back(DeformationField::constant(1, g, g, dx, dy, i, torch::kFloat64));
            ex += dx * std::ldexp(1.0, k - i);
            ey += dy * std::ldexp(1.0, k - i);
        }
        auto acc = accumulate_pyramid(fields);
        auto expected = DeformationField::constant(1, full, full, ex, ey, 0, torch::kFloat64);
        o.require(torch::equal(acc.disp, expected.disp), "accumulate_pyramid exact for K=" + std::to_string(k));
    }

    auto c = DeformationField::constant(1, 16, 16, 1.25, -0.5, 0, torch::kFloat64);
    for (double f : {2.0, 4.0, 0.5}) {
        auto back = scale_field(scale_field(c, f), 1.0 / f);
        o.require(torch::equal(back.disp, c.disp), "scale_field round trip exact");
    }
    const double secs = seconds_since(t0);
    o.require(secs < 10, "runtime < 10 s");
    o.detail << "time=" << std::fixed << std::setprecision(2) << secs << "s";
}

// --- 2. gradients ---------------------------------------------------------------------------

struct GradSetup {
    RegFusionNet net{nullptr};
    torch::Tensor a, b, label;
};

GradSetup grad_setup() {
    torch::manual_seed(17);
    auto cfg = tiny_model(2, 32);
    GradSetup s;
    s.net = RegFusionNet(cfg);
    s.net->to(torch::kFloat64);
    // Non-zero field heads so the warp and smoothness paths carry signal.
    {
        torch::NoGradGuard ng;
        auto gen = at::make_generator<at::CPUGeneratorImpl>(99);
        for (auto* layers : {&s.net->bsfa->forward_layers, &s.net->bsfa->reverse_layers}) {
            for (auto& layer : *layers) {
                layer->field_head->weight.normal_(0.0, 0.02, gen);
                layer->field_head->bias.normal_(0.0, 0.3, gen);
            }
        }
    }
    s.a = regfuse::test::smooth_image(32, 32, 5, 6).contiguous();
    s.b = regfuse::test::smooth_image(32, 32, 6, 5).contiguous();
    s.label = regfuse::test::smooth_image(32, 32, 7, 6).contiguous();
    s.a = torch::cat({s.a, regfuse::test::smooth_image(32, 32, 8, 4)}, 0);
    s.b = torch::cat({s.b, regfuse::test::smooth_image(32, 32, 9, 4)}, 0);
    s.label = torch::cat({s.label, regfuse::test::smooth_image(32, 32, 10, 4)}, 0);
    return s;
}

using TermFn = std::function<torch::Tensor(const LossParts&)>;

void gradients(Outcome& o) {
    const auto t0 = Clock::now();
    auto s = grad_setup();
    const double mu = 0.7;
    auto eval_parts = [&]() {
        auto out = s.net->forward(s.a, s.b);
        return compute_losses(out, s.a, s.b, s.label, mu, s.net->config);
    };

    const std::vector<std::pair<std::string, TermFn>> terms = {
        {"ce1", [](const LossParts& p) { return p.ce1; }},
        {"ce2", [](const LossParts& p) { return p.ce2; }},
        {"consis", [](const LossParts& p) { return p.consis; }},
        {"smooth", [](const LossParts& p) { return p.smooth; }},
        {"struct", [](const LossParts& p) { return p.structure; }},
        {"grad", [](const LossParts& p) { return p.grad; }},
        {"inten", [](const LossParts& p) { return p.inten; }},
    };

    auto named = s.net->named_parameters();
    for (const auto& [name, term] : terms) {
        // The probe loss is only differentiated through the Transfer blocks; the replica
        // weights it reads are constants, so the check perturbs only the trainable path.
        std::vector<torch::Tensor> params;
        for (const auto& item : named) {
            const bool transfer = item.key().rfind("transfer_", 0) == 0;
            if (name != "ce2" || transfer) params.push_back(item.value());
        }
        s.net->zero_grad();
        term(eval_parts()).backward();

        auto gen = at::make_generator<at::CPUGeneratorImpl>(1234);
        std::vector<torch::Tensor> dirs;
        double analytic = 0;
        for (auto& p : params) {
            auto d = torch::randn(p.sizes(), gen, torch::kFloat64);
            dirs.push_back(d);
            if (p.grad().defined()) analytic += (p.grad() * d).sum().item<double>();
        }
        auto value = [&]() {
            torch::NoGradGuard ng;
            return term(eval_parts()).item<double>();
        };
        const double h = 1e-6;
        auto shift = [&](double by) {
            torch::NoGradGuard ng;
            for (size_t i = 0; i < params.size(); ++i) params[i].add_(dirs[i], by);
        };
        shift(h);
        const double up = value();
        shift(-2 * h);
        const double down = value();
        shift(h);
        const double numeric = (up - down) / (2 * h);
        const double err = rel_err(analytic, numeric);
        o.require(err <= 1e-3 && std::abs(analytic) > 1e-9, name + " finite difference");
        o.detail << name << " rel=" << std::scientific << std::setprecision(1) << err << " ";
    }

    // The probe loss alone must leave every replica source weight untouched.
    s.net->zero_grad();
    eval_parts().ce2.backward();
    bool zero = true;
    bool transfer_moved = false;
    for (const auto& item : named) {
        const auto& g = item.value().grad();
        const bool frozen_src = item.key().rfind("encoder.", 0) == 0 || item.key().rfind("classifier.", 0) == 0;
        if (frozen_src && g.defined() && g.abs().max().item<double>() != 0.0) zero = false;
        if (item.key().rfind("transfer_", 0) == 0 && g.defined() && g.abs().max().item<double>() > 0) {
            transfer_moved = true;
        }
    }
    o.require(zero, "probe replica gradients exactly zero");
    o.require(transfer_moved, "probe loss reaches the Transfer blocks");
    const double secs = seconds_since(t0);
    o.require(secs < 120, "runtime < 2 min");
    o.detail << "time=" << std::fixed << std::setprecision(1) << secs << "s";
}

// --- 3 + 4. default configuration: shapes and zero-init identity ---------------------------

struct DefaultRun {
    ForwardResult out;
    torch::Tensor a, b, label;
};

DefaultRun& default_run() {
    static std::optional<DefaultRun> cache;
    if (!cache) {
        torch::manual_seed(3);
        ModelConfig cfg;
        RegFusionNet net(cfg);
        net->eval();
        torch::NoGradGuard ng;
        DefaultRun r;
        auto pair = make_synthetic_pair(77, 256);
        r.b = luminance(pair.mri).unsqueeze(0).to(torch::kFloat32);
        r.label = luminance(pair.other).unsqueeze(0).to(torch::kFloat32);
        auto field = synthesize_deformation(SyntheticDeformationSpec{5, 6, 8, 3, 11}, 256, 256);
        field.disp = field.disp.to(torch::kFloat32);
        r.a = warp(r.label, field);
        r.out = net->forward(r.a, r.b);
        cache = std::move(r);
    }
    return *cache;
}

void shape_contract(Outcome& o) {
    const auto t0 = Clock::now();
    const auto& r = default_run();
    const auto& pyr = r.out.pyramid;
    o.require(pyr.levels == 5, "5 levels");
    const int64_t grids[] = {16, 32, 64, 128, 256};
    o.require(pyr.fields_a.size() == 5 && pyr.fields_b.size() == 5, "5 fields per direction");
    for (size_t i = 0; i < std::min<size_t>(5, pyr.fields_a.size()); ++i) {
        o.require(pyr.fields_a[i].disp.sizes() == torch::IntArrayRef({1, 2, grids[i], grids[i]}),
                  "phi_A level " + std::to_string(i + 1) + " grid");
        o.require(pyr.fields_b[i].disp.sizes() == torch::IntArrayRef({1, 2, grids[i], grids[i]}),
                  "phi_B level " + std::to_string(i + 1) + " grid");
    }
    o.require(r.out.phi_ab.disp.sizes() == torch::IntArrayRef({1, 2, 256, 256}), "phi_AB 2x256x256");
    o.require(r.out.fused.sizes() == torch::IntArrayRef({1, 1, 256, 256}), "fused 256x256");
    const double lo = r.out.fused.min().item<double>();
    const double hi = r.out.fused.max().item<double>();
    o.require(lo > 0.0 && hi < 1.0, "fused strictly inside (0,1)");
    o.detail << "fused range=[" << lo << ", " << hi << "] time=" << std::fixed << std::setprecision(1)
             << seconds_since(t0) << "s";
}

void zero_init_identity(Outcome& o) {
    const auto& r = default_run();
    o.require(torch::equal(r.out.phi_ab.disp, torch::zeros_like(r.out.phi_ab.disp)), "phi_AB identically zero");
    for (const auto& f : r.out.pyramid.fields_a) o.require(torch::equal(f.disp, torch::zeros_like(f.disp)), "phi_A zero");
    for (const auto& f : r.out.pyramid.fields_b) o.require(torch::equal(f.disp, torch::zeros_like(f.disp)), "phi_B zero");
    torch::NoGradGuard ng;
    o.require(torch::equal(r.out.registered, r.a), "registered image equals the moving input");
    const double consis = consistency_loss(r.a, r.label, r.out.phi_ab).item<double>();
    const double baseline =
        ((1.0 - ssim(r.label, r.a)) + (r.label - r.a).abs().mean()).item<double>();
    o.require(consis == baseline, "L_consis equals the unwarped baseline exactly");
    o.detail << std::setprecision(10) << "L_consis=" << consis << " baseline=" << baseline;
}

// --- 5. modality probe ----------------------------------------------------------------------

// Toy batch: synthetic head phantoms (MRI side, class 0) and their contrast inverse (class 1).
std::pair<torch::Tensor, torch::Tensor> toy_batch(uint64_t seed, int n) {
    std::vector<torch::Tensor> plain, inverted;
    for (int i = 0; i < n; ++i) {
        auto img = luminance(make_synthetic_pair(mix_seed(seed, i), 64).mri).unsqueeze(0).to(torch::kFloat32);
        plain.push_back(img);
        inverted.push_back(1.0 - img);
    }
    return {torch::cat(plain, 0), torch::cat(inverted, 0)};
}

void modality_probe(Outcome& o) {
    const auto t0 = Clock::now();
    torch::manual_seed(5);
    auto cfg = tiny_model(4, 64);
    RegFusionNet net(cfg);
    auto enc_params = net->encoder->parameters();
    auto cls_params = net->classifier->parameters();
    enc_params.insert(enc_params.end(), cls_params.begin(), cls_params.end());
    torch::optim::Adam opt1(enc_params, torch::optim::AdamOptions(1e-3));

    auto held_out = toy_batch(0xfeed, 16);
    auto accuracy = [&]() {
        torch::NoGradGuard ng;
        auto pa = net->classifier(net->encoder(held_out.second).tokens.head).argmax(1);
        auto pb = net->classifier(net->encoder(held_out.first).tokens.head).argmax(1);
        return ((pa == 1).sum().item<double>() + (pb == 0).sum().item<double>()) / (2.0 * pa.size(0));
    };

    double acc = 0;
    int steps = 0;
    while (steps < 200) {
        auto [img_b, img_a] = toy_batch(1000 + steps, 4);
        auto la = net->classifier(net->encoder(img_a).tokens.head);
        auto lb = net->classifier(net->encoder(img_b).tokens.head);
        auto loss = cross_entropy_logits(la, target_a(4, la.options())) + cross_entropy_logits(lb, target_b(4, lb.options()));
        opt1.zero_grad();
        loss.backward();
        opt1.step();
        ++steps;
        if (steps % 10 == 0) {
            acc = accuracy();
            if (acc >= 0.95) break;
        }
    }
    o.require(acc >= 0.95, "classifier accuracy >= 95% within 200 steps");
    o.detail << "accuracy=" << acc << " after " << steps << " steps; ";

    auto transfer_params = net->transfer_a->parameters();
    auto tb = net->transfer_b->parameters();
    transfer_params.insert(transfer_params.end(), tb.begin(), tb.end());
    torch::optim::Adam opt2(transfer_params, torch::optim::AdamOptions(1e-3));
    auto probe_probs = [&](const torch::Tensor& img_a, const torch::Tensor& img_b) {
        TokenSequence ta, tb2;
        {
            torch::NoGradGuard ng;
            ta = net->encoder(img_a).tokens;
            tb2 = net->encoder(img_b).tokens;
        }
        auto [ma, mb] = inject_heads(ta, tb2);
        auto ya = net->classifier->forward(net->encoder->probe_head(net->transfer_a(ma)), true);
        auto yb = net->classifier->forward(net->encoder->probe_head(net->transfer_b(mb)), true);
        return std::make_pair(ya, yb);
    };
    auto deviation = [&]() {
        torch::NoGradGuard ng;
        auto [ya, yb] = probe_probs(held_out.second, held_out.first);
        auto pa = torch::softmax(ya, 1).select(1, 1);
        auto pb = torch::softmax(yb, 1).select(1, 1);
        return 0.5 * ((pa - 0.5).abs().mean() + (pb - 0.5).abs().mean()).item<double>();
    };
    const double before = deviation();
    double dev = before;
    int probe_steps = 0;
    while (probe_steps < 100 || (probe_steps < 300 && dev > 0.1)) {
        auto [img_b, img_a] = toy_batch(5000 + probe_steps, 4);
        auto [ya, yb] = probe_probs(img_a, img_b);
        auto loss = cross_entropy_logits(ya, target_uniform(4, ya.options())) +
                    cross_entropy_logits(yb, target_uniform(4, yb.options()));
        opt2.zero_grad();
        loss.backward();
        opt2.step();
        ++probe_steps;
        if (probe_steps % 10 == 0) dev = deviation();
    }
    o.require(dev <= 0.1, "mean |y* - 0.5| <= 0.1 on held-out toys");
    o.require(std::abs(accuracy() - acc) < 1e-12, "probe optimisation leaves the classifier unchanged");
    const double secs = seconds_since(t0);
    o.require(secs < 300, "runtime < 5 min");
    o.detail << "|y*-0.5| " << before << " -> " << dev << " after " << probe_steps << " steps; time=" << std::fixed
             << std::setprecision(1) << secs << "s";
}

// --- 6 + 10. tiny overfit and ablations ---------------------------------------------------

struct OverfitResult {
    double consis_start = 0, consis_end = 0;
    double epe_zero = 0, epe_end = 0;
    double max_disp = 0;
    double seconds = 0;
    bool finite = true;
};

RunConfig overfit_config(int64_t steps) {
    RunConfig cfg;
    cfg.model = tiny_model(3, 64);
    cfg.train.epochs = static_cast<int>(steps);
    cfg.train.batch_size = 4;
    cfg.train.lr_init = 1e-3;
    cfg.train.lr_final = 1e-4;
    cfg.train.seed = 2024;
    cfg.train.resample_deformations = false;
    cfg.train.augment = false;
    cfg.train.checkpoint_every = 1000000;
    cfg.train.deformation = SyntheticDeformationSpec{0, 4, 4, 1.5, 31};
    return cfg;
}

OverfitResult overfit(const std::function<void(ModelConfig&)>& tweak, int64_t steps) {
    const auto t0 = Clock::now();
    torch::manual_seed(11);
    auto cfg = overfit_config(steps);
    tweak(cfg.model);
    std::vector<RegisteredPair> pairs;
    for (int i = 0; i < 4; ++i) pairs.push_back(make_synthetic_pair(500 + i, 64, "SYN-MRI", "SYN-MRI/" + std::to_string(i)));
    Trainer trainer(cfg, pairs);
    const auto samples = trainer.epoch_samples(0);
    auto batch = collate(samples, torch::kFloat32);
    OverfitResult r;
    for (const auto& s : samples) r.max_disp = std::max(r.max_disp, s.applied.disp.pow(2).sum(1).sqrt().max().item<double>());

    auto measure = [&](double& consis, double& epe) {
        torch::NoGradGuard ng;
        trainer.net()->eval();
        auto out = trainer.net()->forward(batch.moving, batch.reference);
        consis = consistency_loss(batch.moving, batch.label, out.phi_ab).item<double>();
        epe = 0;
        for (size_t i = 0; i < samples.size(); ++i) {
            DeformationField pred{out.phi_ab.disp.narrow(0, static_cast<int64_t>(i), 1).to(torch::kFloat64), 0};
            epe += endpoint_error(pred, batch.gt_fields[i]);
        }
        epe /= static_cast<double>(samples.size());
        trainer.net()->train();
    };
    double epe_start = 0;
    measure(r.consis_start, epe_start);
    r.epe_zero = 0;
    for (const auto& g : batch.gt_fields) r.epe_zero += endpoint_error(DeformationField{torch::zeros_like(g.disp), 0}, g);
    r.epe_zero /= static_cast<double>(batch.gt_fields.size());
    try {
        trainer.run({});
    } catch (const NonFiniteLoss&) {
        r.finite = false;
    }
    measure(r.consis_end, r.epe_end);
    r.seconds = seconds_since(t0);
    return r;
}

constexpr int64_t kOverfitSteps = 500;

OverfitResult& full_overfit() {
    static std::optional<OverfitResult> cache;
    if (!cache) cache = overfit([](ModelConfig&) {}, kOverfitSteps);
    return *cache;
}

void tiny_overfit(Outcome& o) {
    const auto& r = full_overfit();
    o.require(r.finite, "losses stay finite");
    o.require(r.max_disp <= 8.0, "applied deformation <= 8 px");
    const double drop = 1.0 - r.consis_end / r.consis_start;
    const double gain = 1.0 - r.epe_end / r.epe_zero;
    o.require(drop >= 0.5, "L_consis drops >= 50%");
    o.require(gain >= 0.3, "EPE improves >= 30% over the zero field");
    o.require(r.seconds < 900, "runtime < 15 min");
    o.detail << std::setprecision(4) << "max|d|=" << r.max_disp << "px L_consis " << r.consis_start << " -> "
             << r.consis_end << " (-" << 100 * drop << "%), EPE zero=" << r.epe_zero << " trained=" << r.epe_end
             << " (-" << 100 * gain << "%), time=" << std::fixed << std::setprecision(1) << r.seconds << "s";
}

void ablations(Outcome& o) {
    const auto& full = full_overfit();
    auto wo_f = overfit([](ModelConfig& m) { m.forward_registration = false; }, kOverfitSteps);
    auto wo_r = overfit([](ModelConfig& m) { m.reverse_registration = false; }, kOverfitSteps);
    // The remaining variants are checked for plumbing only.
    const int64_t short_steps = 40;
    auto wo_bsfa = overfit([](ModelConfig& m) { m.registration = false; }, short_steps);
    auto setting_a = overfit([](ModelConfig& m) { m.inject_heads = false; m.probe_loss = false; }, short_steps);
    auto setting_b = overfit([](ModelConfig& m) { m.inject_heads = false; }, short_steps);

    for (auto* r : {&wo_f, &wo_r, &wo_bsfa, &setting_a, &setting_b}) o.require(r->finite, "variant losses finite");
    o.require(wo_bsfa.epe_end == wo_bsfa.epe_zero, "w/o BSFA predicts the zero field");
    o.require(full.epe_end <= wo_f.epe_end, "full EPE <= w/o F");
    o.require(full.epe_end <= wo_r.epe_end, "full EPE <= w/o R");
    o.detail << std::setprecision(4) << "EPE full=" << full.epe_end << " w/o F=" << wo_f.epe_end << " w/o R="
             << wo_r.epe_end << " w/o BSFA=" << wo_bsfa.epe_end << " A=" << setting_a.epe_end << " B="
             << setting_b.epe_end << " (" << short_steps << " steps)";
}

// --- 7. metrics -----------------------------------------------------------------------------

void metric_suite(Outcome& o) {
    double worst = 0;
    for (uint64_t seed : {21, 40, 63}) {
        const auto fx = regfuse::test::metric_fixture(seed);
        const auto a = oracle::from_tensor(fx.a);
        const auto b = oracle::from_tensor(fx.b);
        const auto f = oracle::from_tensor(fx.f);
        const std::pair<double, double> pairs[] = {
            {q_abf(fx.a, fx.b, fx.f), oracle::q_abf(a, b, f)},
            {q_cv(fx.a, fx.b, fx.f) / std::max(1.0, std::abs(oracle::q_cv(a, b, f))),
             oracle::q_cv(a, b, f) / std::max(1.0, std::abs(oracle::q_cv(a, b, f)))},
            {q_vif(fx.a, fx.b, fx.f), oracle::q_vif(a, b, f)},
            {q_s(fx.a, fx.b, fx.f), oracle::q_s(a, b, f)},
            {q_ssim(fx.a, fx.b, fx.f), oracle::q_ssim(a, b, f)},
        };
        for (const auto& [mine, ref] : pairs) worst = std::max(worst, std::abs(mine - ref));
    }
    o.require(worst <= 1e-6, "oracle agreement to 1e-6");
    const auto x = regfuse::test::metric_fixture().a;
    const double qa = q_abf(x, x, x);
    o.require(std::abs(qa - 1.0) <= 1e-6, "q_abf(A,A,A) = 1");
    o.require(std::abs(q_ssim(x, x, x) - 1.0) <= 1e-12, "q_ssim(x,x,x) = 1");

    const auto fx = regfuse::test::metric_fixture(12);
    const auto clean = (0.5 * (fx.a + fx.b)).contiguous();
    const double cv0 = q_cv(fx.a, fx.b, clean);
    const double ss0 = q_ssim(fx.a, fx.b, clean);
    int worse = 0;
    for (uint64_t draw = 0; draw < 20; ++draw) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(1000 + draw);
        auto noisy = (clean + 0.05 * torch::randn(clean.sizes(), gen, torch::kFloat64)).clamp(0, 1);
        worse += q_cv(fx.a, fx.b, noisy) > cv0 && q_ssim(fx.a, fx.b, noisy) < ss0;
    }
    o.require(worse == 20, "noise monotonicity on 20 draws");
    o.detail << "max oracle diff=" << std::scientific << std::setprecision(2) << worst << " q_abf(A,A,A)=" << std::fixed
             << std::setprecision(9) << qa << " noise worse " << worse << "/20";
}

// --- 8. determinism -------------------------------------------------------------------------

int cli_call(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) std::cerr << "regfuse " << args.front() << " failed: " << err.str();
    return code;
}

std::map<int64_t, double> step_totals(const fs::path& csv) {
    std::map<int64_t, double> out;
    std::istringstream is(slurp(csv));
    std::string line;
    int total_col = -1;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (total_col < 0) {
            for (size_t i = 0; i < cells.size(); ++i) {
                if (cells[i] == "total") total_col = static_cast<int>(i);
            }
            continue;
        }
        out[std::stoll(cells[0])] = std::stod(cells[static_cast<size_t>(total_col)]);
    }
    return out;
}

void determinism(Outcome& o) {
    TempDir dir("accept-det");
    const auto data = dir / "data";
    const auto cfg = dir / "cfg.json";
    o.require(cli_call({"synth", "--out", data.string(), "--count", "7", "--size", "32", "--seed", "9"}) == 0, "synth");
    o.require(cli_call({"init-config", "--out", cfg.string(), "--set", "model.levels=2", "--set", "model.fusion_blocks=2",
                        "--set", "model.token_width=32", "--set", "model.shallow_channels=8", "--set",
                        "model.restormer_heads=2", "--set", "model.transformer_heads=4", "--set",
                        "model.classifier_hidden=16", "--set", "model.reg_hidden=16", "--set", "model.fusion_channels=16",
                        "--set", "model.image_size=32", "--set", "train.batch_size=2", "--set", "train.epochs=3", "--set",
                        "train.seed=13", "--set", "train.deformation.translation_px=2", "--set",
                        "train.deformation.elastic_px=1"}) == 0,
              "init-config");
    auto prepare = [&](const std::string& name) {
        return cli_call({"prepare", "--root", data.string(), "--modality", "SYN-MRI", "--out", (dir / name).string(),
                         "--size", "32", "--test-count", "2", "--seed", "3", "--config", cfg.string()});
    };
    o.require(prepare("prep1") == 0 && prepare("prep2") == 0, "prepare runs");
    bool same = slurp(dir / "prep1/manifest.txt") == slurp(dir / "prep2/manifest.txt") &&
                slurp(dir / "prep1/ingest_report.txt") == slurp(dir / "prep2/ingest_report.txt");
    size_t fields = 0;
    for (const auto& e : fs::directory_iterator(dir / "prep1/fields")) {
        same = same && slurp(e.path()) == slurp(dir / "prep2/fields" / e.path().filename());
        ++fields;
    }
    o.require(same && fields == 2, "prepare byte-reproducible");

    const auto manifest = (dir / "prep1/manifest.txt").string();
    auto train = [&](const std::string& out, int64_t max_steps, const std::string& resume) {
        std::vector<std::string> args = {"train", "--config", cfg.string(), "--manifest", manifest, "--out",
                                         (dir / out).string(), "--set", "train.max_steps=" + std::to_string(max_steps)};
        if (!resume.empty()) {
            args.push_back("--resume");
            args.push_back(resume);
        }
        return cli_call(args);
    };
    o.require(train("straight", 6, "") == 0, "straight run");
    const auto reference = step_totals(dir / "straight/step_log.csv");
    double worst = 0;
    // 5 training pairs, batch 2: 3 batches per epoch, so stop 1 is mid-epoch and stop 3 an epoch boundary.
    for (int64_t stop : {1, 3}) {
        const std::string first = "first" + std::to_string(stop);
        const std::string second = "second" + std::to_string(stop);
        o.require(train(first, stop, "") == 0, "first leg");
        o.require(train(second, 6, (dir / first / "last.rfck").string()) == 0, "resumed leg");
        const auto resumed = step_totals(dir / second / "step_log.csv");
        o.require(resumed.count(stop) == 1 && reference.count(stop) == 1, "next step logged");
        for (const auto& [step, total] : resumed) {
            if (reference.count(step)) worst = std::max(worst, std::abs(total - reference.at(step)));
        }
    }
    o.require(worst <= 1e-6, "resumed losses match to 1e-6");
    o.detail << "prepare identical=" << (same ? "yes" : "no") << " resumed max|dloss|=" << std::scientific
             << std::setprecision(2) << worst;
}

// --- 9. mu and lr ---------------------------------------------------------------------------

void schedules(Outcome& o) {
    const std::vector<double> lb = {0.12, 0.31, 0.07, 0.205, 0.0};
    const std::vector<double> la = {0.2, 0.25, 0.1, 0.4, 0.05};
    long double nb = 0, da = 0;
    for (double v : lb) nb += v;
    for (double v : la) da += v;
    const double expected = static_cast<double>(nb / da);
    const double mu = update_mu(lb, la, 1.0);
    o.require(std::abs(mu - expected) <= 1e-12, "mu ratio to 1e-12");
    o.require(update_mu({0.4}, {0.0}, 0.9) == 0.9, "zero denominator keeps mu");

    TrainConfig c;
    bool exact = true;
    for (int64_t total : {1, 7, 1000, 3000 * 5}) {
        exact = exact && lr_at(0, total, c) == 5e-5 && lr_at(total, total, c) == 5e-7;
    }
    o.require(exact, "lr endpoints exact");
    o.detail << std::setprecision(17) << "mu=" << mu << " expected=" << expected;
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
        {"field algebra", field_algebra},
        {"loss gradients", gradients},
        {"shape contract", shape_contract},
        {"zero-init identity", zero_init_identity},
        {"modality probe", modality_probe},
        {"tiny overfit", tiny_overfit},
        {"metric suite", metric_suite},
        {"determinism", determinism},
        {"mu and lr schedules", schedules},
        {"ablation plumbing", ablations},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!wanted.empty() && !wanted.count(id)) continue;
        Outcome o;
        try {
            criteria[i].second(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "[exception: " << e.what() << "]";
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << id << "  " << criteria[i].first
                  << ": " << o.detail.str() << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
