// Fusion-quality metrics (Q_AB/F, Q_CV, Q_VIF, Q_S, Q_SSIM) and the displacement
// endpoint error. Inputs are single-channel images with values in [0,1], given as
// H x W, 1 x H x W or 1 x 1 x H x W tensors. A is the (registered) source, B the MRI
// and F the fused image. Every metric is a deterministic pure function.

#pragma once

#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "regfuse/deformation.hpp"
#include "regfuse/imaging.hpp"

namespace regfuse {

struct MetricParams {
    // Q_AB/F: sigmoid constants of the edge strength / orientation preservation terms.
    // The Gamma constants are derived so a perfectly preserved edge scores exactly 1.
    double abf_kappa_g = -15.0;
    double abf_sigma_g = 0.5;
    double abf_kappa_a = -22.0;
    double abf_sigma_a = 0.8;
    double abf_weight_exponent = 1.0;

    // Q_CV: region size, CSF frequency scale (cycles/degree per frequency index) and
    // saliency exponent; intensities are scaled to [0, cv_range].
    int cv_region = 16;
    double cv_cycles_per_index = 0.25;
    double cv_alpha = 1.0;
    double cv_range = 255.0;

    // Q_VIF: pixel-domain multiscale VIF with channel noise variance on a [0, vif_range] scale.
    int vif_scales = 4;
    double vif_noise_var = 2.0;
    double vif_range = 255.0;

    // Q_S: sliding window size of the local quality index.
    int qs_window = 8;

    SsimParams ssim;
};

nlohmann::ordered_json to_json(const MetricParams& p);

double q_abf(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const MetricParams& p = {});
double q_cv(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const MetricParams& p = {});
double q_vif(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const MetricParams& p = {});
double q_s(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const MetricParams& p = {});
double q_ssim(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f, const MetricParams& p = {});

// Single-reference pixel-domain VIF, vifp(reference, distorted).
double vif_single(const torch::Tensor& reference, const torch::Tensor& distorted, const MetricParams& p = {});

// Mean Euclidean norm of the per-pixel displacement difference (pixels).
double endpoint_error(const torch::Tensor& predicted, const torch::Tensor& truth);

struct MetricValues {
    double q_abf = 0, q_cv = 0, q_ssim = 0, q_vif = 0, q_s = 0;
};

MetricValues evaluate_all(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& f,
                          const MetricParams& p = {});

struct MetricRow {
    std::string id;
    std::string source;  // which image played A: "registered" or "label"
    MetricValues values;
    double epe = 0;  // NaN when no ground-truth field is available
};

// Per-image rows plus per-set summaries.
struct MetricReport {
    std::vector<MetricRow> rows;
    MetricParams params;

    // Mean / median of each metric over the rows with the given source label.
    MetricRow mean(const std::string& source) const;
    MetricRow median(const std::string& source) const;

    // CSV: '#' comment lines (config hash, params), header, one row per image, then
    // mean and median rows per source variant.
    void write_csv(const std::filesystem::path& path, const std::vector<std::string>& comments) const;
};

// Column names of the metric part of the CSV, in order.
const std::vector<std::string>& metric_columns();

}  // namespace regfuse
