#include "regfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace regfuse {

namespace {

namespace F = torch::nn::functional;

// Values at or below this count as zero in the local-quality-index conventions.
constexpr double kZero = 1e-12;

torch::Tensor gray(const torch::Tensor& t, const char* what) {
    auto x = t.detach().to(torch::kCPU, torch::kFloat64);
    while (x.dim() > 2 && x.size(0) == 1) x = x.squeeze(0);
    if (x.dim() != 2) throw std::invalid_argument(std::string(what) + ": expected a single-channel image");
    return x.contiguous();
}

void same_dims(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const char* what) {
    if (a.sizes() != b.sizes() || a.sizes() != f.sizes()) {
        throw std::invalid_argument(std::string(what) + ": image dims differ");
    }
}

torch::Tensor as4d(const torch::Tensor& x) { return x.view({1, 1, x.size(0), x.size(1)}); }

torch::Tensor gaussian_window(int n, double sigma) {
    auto coords = torch::arange(n, torch::kFloat64) - (n - 1) / 2.0;
    auto g = torch::exp(-(coords * coords) / (2 * sigma * sigma));
    auto w = torch::outer(g, g);
    return (w / w.sum()).view({1, 1, n, n});
}

torch::Tensor filter_valid(const torch::Tensor& x, const torch::Tensor& win) {
    return F::conv2d(as4d(x), win).squeeze(0).squeeze(0);
}

// Orientation atan(gy / gx) in [-pi/2, pi/2]; vertical gradients map to +-pi/2, flat to 0.
torch::Tensor orientation(const torch::Tensor& gx, const torch::Tensor& gy) {
    const double half_pi = std::numbers::pi / 2;
    auto vertical = torch::where(gy > 0, torch::full_like(gy, half_pi),
                                 torch::where(gy < 0, torch::full_like(gy, -half_pi), torch::zeros_like(gy)));
    return torch::where(gx != 0, torch::atan(gy / gx), vertical);
}

torch::Tensor edge_preservation(const torch::Tensor& g_src, const torch::Tensor& a_src, const torch::Tensor& g_f,
                                const torch::Tensor& a_f, const MetricParams& p) {
    auto strength = torch::where(g_src > g_f, g_f / g_src,
                                 torch::where(g_src == g_f, torch::ones_like(g_src), g_src / g_f));
    auto orient = 1.0 - torch::abs(a_src - a_f) / (std::numbers::pi / 2);
    const double gamma_g = 1.0 + std::exp(p.abf_kappa_g * (1.0 - p.abf_sigma_g));
    const double gamma_a = 1.0 + std::exp(p.abf_kappa_a * (1.0 - p.abf_sigma_a));
    auto qg = gamma_g / (1.0 + torch::exp(p.abf_kappa_g * (strength - p.abf_sigma_g)));
    auto qa = gamma_a / (1.0 + torch::exp(p.abf_kappa_a * (orient - p.abf_sigma_a)));
    return qg * qa;
}

double mannos_sakrison(double r) { return 2.6 * (0.0192 + 0.114 * r) * std::exp(-std::pow(0.114 * r, 1.1)); }

torch::Tensor csf_filter(int64_t h, int64_t w, double cycles_per_index) {
    auto s = torch::empty({h, w}, torch::kFloat64);
    auto acc = s.accessor<double, 2>();
    for (int64_t y = 0; y < h; ++y) {
        const double ky = 2 * y < h ? static_cast<double>(y) : static_cast<double>(y - h);
        for (int64_t x = 0; x < w; ++x) {
            const double kx = 2 * x < w ? static_cast<double>(x) : static_cast<double>(x - w);
            acc[y][x] = mannos_sakrison(cycles_per_index * std::sqrt(kx * kx + ky * ky));
        }
    }
    return s;
}

// Sum (or mean) of `x` over non-overlapping region tiles; partial edge tiles included.
torch::Tensor region_reduce(const torch::Tensor& x, int region, bool mean) {
    const int64_t h = x.size(0);
    const int64_t w = x.size(1);
    const int64_t rh = (h + region - 1) / region;
    const int64_t rw = (w + region - 1) / region;
    auto out = torch::empty({rh, rw}, torch::kFloat64);
    for (int64_t i = 0; i < rh; ++i) {
        for (int64_t j = 0; j < rw; ++j) {
            auto tile = x.narrow(0, i * region, std::min<int64_t>(region, h - i * region))
                            .narrow(1, j * region, std::min<int64_t>(region, w - j * region));
            out[i][j] = mean ? tile.mean() : tile.sum();
        }
    }
    return out;
}

torch::Tensor local_quality(const torch::Tensor& mx, const torch::Tensor& mf, const torch::Tensor& vx,
                            const torch::Tensor& vf, const torch::Tensor& cxf) {
    auto den1 = vx + vf;
    auto den2 = mx * mx + mf * mf;
    auto full = 4 * cxf * mx * mf / (den1 * den2);
    auto mean_only = 2 * mx * mf / den2;
    auto one = torch::ones_like(mx);
    return torch::where((den1 > kZero) & (den2 > kZero), full, torch::where(den2 > kZero, mean_only, one));
}

}  // namespace

nlohmann::ordered_json to_json(const MetricParams& p) {
    return nlohmann::ordered_json{
        {"abf_kappa_g", p.abf_kappa_g},
        {"abf_sigma_g", p.abf_sigma_g},
        {"abf_kappa_a", p.abf_kappa_a},
        {"abf_sigma_a", p.abf_sigma_a},
        {"abf_weight_exponent", p.abf_weight_exponent},
        {"cv_region", p.cv_region},
        {"cv_cycles_per_index", p.cv_cycles_per_index},
        {"cv_alpha", p.cv_alpha},
        {"cv_range", p.cv_range},
        {"vif_scales", p.vif_scales},
        {"vif_noise_var", p.vif_noise_var},
        {"vif_range", p.vif_range},
        {"qs_window", p.qs_window},
        {"ssim_window", p.ssim.window},
        {"ssim_sigma", p.ssim.sigma},
        {"ssim_k1", p.ssim.k1},
        {"ssim_k2", p.ssim.k2},
    };
}

double q_abf(const torch::Tensor& a_in, const torch::Tensor& b_in, const torch::Tensor& f_in, const MetricParams& p) {
    torch::NoGradGuard guard;
    auto a = gray(a_in, "q_abf");
    auto b = gray(b_in, "q_abf");
    auto f = gray(f_in, "q_abf");
    same_dims(a, b, f, "q_abf");
    auto grads = [](const torch::Tensor& x) {
        torch::Tensor gy;
        auto gx = sobel_components(as4d(x), &gy).squeeze(0).squeeze(0);
        gy = gy.squeeze(0).squeeze(0);
        return std::make_pair(torch::sqrt(gx * gx + gy * gy), orientation(gx, gy));
    };
    const auto [ga, oa] = grads(a);
    const auto [gb, ob] = grads(b);
    const auto [gf, of] = grads(f);
    auto wa = torch::pow(ga, p.abf_weight_exponent);
    auto wb = torch::pow(gb, p.abf_weight_exponent);
    const double den = (wa + wb).sum().item<double>();
    if (den == 0.0) return 0.0;
    auto num = edge_preservation(ga, oa, gf, of, p) * wa + edge_preservation(gb, ob, gf, of, p) * wb;
    return num.sum().item<double>() / den;
}

double q_cv(const torch::Tensor& a_in, const torch::Tensor& b_in, const torch::Tensor& f_in, const MetricParams& p) {
    torch::NoGradGuard guard;
    auto a = gray(a_in, "q_cv") * p.cv_range;
    auto b = gray(b_in, "q_cv") * p.cv_range;
    auto f = gray(f_in, "q_cv") * p.cv_range;
    same_dims(a, b, f, "q_cv");
    auto saliency = [&](const torch::Tensor& x) {
        auto g = gradient_magnitude(as4d(x)).squeeze(0).squeeze(0);
        return region_reduce(torch::pow(g, p.cv_alpha), p.cv_region, false);
    };
    const auto csf = csf_filter(a.size(0), a.size(1), p.cv_cycles_per_index);
    auto distortion = [&](const torch::Tensor& x) {
        auto filtered = torch::real(torch::fft::ifft2(torch::fft::fft2(x - f) * csf));
        return region_reduce(filtered * filtered, p.cv_region, true);
    };
    auto la = saliency(a);
    auto lb = saliency(b);
    if ((la + lb).sum().item<double>() == 0.0) {
        la = torch::ones_like(la);
        lb = torch::ones_like(lb);
    }
    auto num = la * distortion(a) + lb * distortion(b);
    return num.sum().item<double>() / (la + lb).sum().item<double>();
}

double vif_single(const torch::Tensor& ref_in, const torch::Tensor& dist_in, const MetricParams& p) {
    torch::NoGradGuard guard;
    auto x = gray(ref_in, "vif") * p.vif_range;
    auto y = gray(dist_in, "vif") * p.vif_range;
    if (x.sizes() != y.sizes()) throw std::invalid_argument("vif: image dims differ");
    const double eps = 1e-10;
    double num = 0.0;
    double den = 0.0;
    for (int scale = 1; scale <= p.vif_scales; ++scale) {
        const int n = (1 << (p.vif_scales - scale + 1)) + 1;
        const auto win = gaussian_window(n, n / 5.0);
        auto fits = [n](const torch::Tensor& t) { return t.size(0) >= n && t.size(1) >= n; };
        if (scale > 1) {
            if (!fits(x)) break;
            using torch::indexing::Slice;
            x = filter_valid(x, win).index({Slice(0, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)});
            y = filter_valid(y, win).index({Slice(0, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)});
        }
        if (!fits(x)) break;
        auto mx = filter_valid(x, win);
        auto my = filter_valid(y, win);
        auto vx = torch::clamp_min(filter_valid(x * x, win) - mx * mx, 0.0);
        auto vy = torch::clamp_min(filter_valid(y * y, win) - my * my, 0.0);
        auto cxy = filter_valid(x * y, win) - mx * my;

        auto g = cxy / (vx + eps);
        auto sv = vy - g * cxy;
        auto flat_x = vx < eps;
        g = torch::where(flat_x, torch::zeros_like(g), g);
        sv = torch::where(flat_x, vy, sv);
        vx = torch::where(flat_x, torch::zeros_like(vx), vx);
        auto flat_y = vy < eps;
        g = torch::where(flat_y, torch::zeros_like(g), g);
        sv = torch::where(flat_y, torch::zeros_like(sv), sv);
        auto negative = g < 0;
        sv = torch::where(negative, vy, sv);
        g = torch::where(negative, torch::zeros_like(g), g);
        sv = torch::clamp_min(sv, eps);

        num += torch::log10(1 + g * g * vx / (sv + p.vif_noise_var)).sum().item<double>();
        den += torch::log10(1 + vx / p.vif_noise_var).sum().item<double>();
    }
    return den > 0.0 ? num / den : 0.0;
}

double q_vif(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const MetricParams& p) {
    same_dims(gray(a, "q_vif"), gray(b, "q_vif"), gray(f, "q_vif"), "q_vif");
    return vif_single(a, f, p) + vif_single(b, f, p);
}

double q_s(const torch::Tensor& a_in, const torch::Tensor& b_in, const torch::Tensor& f_in, const MetricParams& p) {
    torch::NoGradGuard guard;
    auto a = gray(a_in, "q_s");
    auto b = gray(b_in, "q_s");
    auto f = gray(f_in, "q_s");
    same_dims(a, b, f, "q_s");
    const int k = p.qs_window;
    if (a.size(0) < k || a.size(1) < k) throw std::invalid_argument("q_s: image smaller than the window");
    auto mean = [k](const torch::Tensor& x) { return F::avg_pool2d(as4d(x), F::AvgPool2dFuncOptions(k).stride(1)); };
    auto ma = mean(a);
    auto mb = mean(b);
    auto mf = mean(f);
    auto va = torch::clamp_min(mean(a * a) - ma * ma, 0.0);
    auto vb = torch::clamp_min(mean(b * b) - mb * mb, 0.0);
    auto vf = torch::clamp_min(mean(f * f) - mf * mf, 0.0);
    auto caf = mean(a * f) - ma * mf;
    auto cbf = mean(b * f) - mb * mf;
    auto qa = local_quality(ma, mf, va, vf, caf);
    auto qb = local_quality(mb, mf, vb, vf, cbf);
    auto sal = va + vb;
    auto lambda = torch::where(sal > kZero, va / sal, torch::full_like(sal, 0.5));
    return (lambda * qa + (1 - lambda) * qb).mean().item<double>();
}

double q_ssim(const torch::Tensor& a_in, const torch::Tensor& b_in, const torch::Tensor& f_in, const MetricParams& p) {
    torch::NoGradGuard guard;
    auto a = gray(a_in, "q_ssim");
    auto b = gray(b_in, "q_ssim");
    auto f = gray(f_in, "q_ssim");
    same_dims(a, b, f, "q_ssim");
    const double sfa = ssim_per_sample(as4d(f), as4d(a), p.ssim)[0].item<double>();
    const double sfb = ssim_per_sample(as4d(f), as4d(b), p.ssim)[0].item<double>();
    return 0.5 * (sfa + sfb);
}

double endpoint_error(const torch::Tensor& predicted, const torch::Tensor& truth) {
    if (predicted.sizes() != truth.sizes()) throw std::invalid_argument("endpoint_error: field dims differ");
    if (predicted.dim() < 3 || predicted.size(-3) != 2) {
        throw std::invalid_argument("endpoint_error: expected ... x 2 x H x W fields");
    }
    torch::NoGradGuard guard;
    auto d = (predicted.detach() - truth.detach()).to(torch::kFloat64);
    return torch::sqrt((d * d).sum(-3)).mean().item<double>();
}

MetricValues evaluate_all(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f,
                          const MetricParams& p) {
    MetricValues v;
    v.q_abf = q_abf(a, b, f, p);
    v.q_cv = q_cv(a, b, f, p);
    v.q_ssim = q_ssim(a, b, f, p);
    v.q_vif = q_vif(a, b, f, p);
    v.q_s = q_s(a, b, f, p);
    return v;
}

const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols = {"q_abf", "q_cv", "q_ssim", "q_vif", "q_s", "epe"};
    return cols;
}

namespace {

std::vector<double> column(const MetricRow& r) {
    return {r.values.q_abf, r.values.q_cv, r.values.q_ssim, r.values.q_vif, r.values.q_s, r.epe};
}

MetricRow from_column(const std::vector<double>& c, const std::string& id, const std::string& source) {
    MetricRow r;
    r.id = id;
    r.source = source;
    r.values = {c[0], c[1], c[2], c[3], c[4]};
    r.epe = c[5];
    return r;
}

template <typename Reduce>
MetricRow summarise(const std::vector<MetricRow>& rows, const std::string& source, const std::string& id,
                    Reduce reduce) {
    const size_t ncol = metric_columns().size();
    std::vector<std::vector<double>> cols(ncol);
    for (const auto& r : rows) {
        if (r.source != source) continue;
        const auto c = column(r);
        for (size_t i = 0; i < ncol; ++i) {
            if (std::isfinite(c[i])) cols[i].push_back(c[i]);
        }
    }
    std::vector<double> out(ncol, std::numeric_limits<double>::quiet_NaN());
    for (size_t i = 0; i < ncol; ++i) {
        if (!cols[i].empty()) out[i] = reduce(cols[i]);
    }
    return from_column(out, id, source);
}

double mean_of(std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double median_of(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_row(std::ostream& os, const MetricRow& r) {
    os << r.id << ',' << r.source;
    for (double v : column(r)) {
        os << ',';
        if (std::isfinite(v)) {
            os << v;
        } else {
            os << "nan";
        }
    }
    os << "\n";
}

}  // namespace

MetricRow MetricReport::mean(const std::string& source) const { return summarise(rows, source, "mean", mean_of); }

MetricRow MetricReport::median(const std::string& source) const {
    return summarise(rows, source, "median", median_of);
}

void MetricReport::write_csv(const std::filesystem::path& path, const std::vector<std::string>& comments) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << std::setprecision(10);
    for (const auto& c : comments) os << "# " << c << "\n";
    os << "# metric-params " << to_json(params).dump() << "\n";
    os << "id,source";
    for (const auto& c : metric_columns()) os << ',' << c;
    os << "\n";
    std::vector<std::string> sources;
    for (const auto& r : rows) {
        write_row(os, r);
        if (std::find(sources.begin(), sources.end(), r.source) == sources.end()) sources.push_back(r.source);
    }
    for (const auto& s : sources) {
        write_row(os, mean(s));
        write_row(os, median(s));
    }
}

}  // namespace regfuse
