// Image containers, resampling, Sobel gradients, SSIM and PNG I/O.
//
// Tensors follow the libtorch convention N x C x H x W. Images hold values in [0,1];
// feature maps are unconstrained. All functions here are pure.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

namespace regfuse {

// A single raster, C x H x W with C in {1, 3}, float32, values in [0,1].
// Three-channel rasters are treated as the functional modality (PET/SPECT colour maps).
struct Image {
    torch::Tensor pixels;

    int64_t channels() const { return pixels.size(0); }
    int64_t height() const { return pixels.size(1); }
    int64_t width() const { return pixels.size(2); }
    bool functional() const { return channels() == 3; }

    // 1 x C x H x W view for batch-oriented ops.
    torch::Tensor batched() const { return pixels.unsqueeze(0); }
};

// Validates shape/range and wraps a C x H x W tensor.
Image make_image(torch::Tensor pixels);

// Bilinear resampling by a power-of-two factor (align_corners = false).
// factor > 1 upsamples, factor < 1 downsamples; the output size must be integral.
torch::Tensor resample(const torch::Tensor& x, double factor);

// sqrt with a zero (rather than infinite) derivative at 0, for norms of
// quantities that are exactly zero at initialisation.
torch::Tensor safe_sqrt(const torch::Tensor& x);

// Per-pixel Sobel magnitude sqrt(gx^2 + gy^2) with the unnormalised 3x3 kernel
// and replicate-padded borders. Input N x 1 x H x W.
// sobel_components returns gx and writes gy (same layout as the input).
torch::Tensor sobel_components(const torch::Tensor& img, torch::Tensor* gy_out);
torch::Tensor gradient_magnitude(const torch::Tensor& img);

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 1.0;
};

// Per-sample mean local SSIM over the valid window region. Returns a length-N tensor.
torch::Tensor ssim_per_sample(const torch::Tensor& a, const torch::Tensor& b,
                              const SsimParams& params = {});

// Batch mean of ssim_per_sample.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params = {});

// Convenience scalar form on two single-channel images.
double ssim(const Image& a, const Image& b);

// 1 - ssim, the structural loss used throughout training.
torch::Tensor ssim_loss(const torch::Tensor& a, const torch::Tensor& b);

// Pads H and W up to the next multiple of `multiple` by edge replication.
Image pad_to_multiple(const Image& img, int64_t multiple);

// ITU-R BT.601 luma/chroma split for functional-modality display handling.
torch::Tensor rgb_to_ycbcr(const torch::Tensor& rgb);
torch::Tensor ycbcr_to_rgb(const torch::Tensor& ycbcr);

// PNG I/O. 8- and 16-bit grey/grey+alpha/RGB/RGBA are accepted; alpha is dropped.
Image load_png(const std::filesystem::path& path);

// Writes an 8-bit PNG. Optional text chunks (key/value) are embedded as tEXt.
void save_png(const std::filesystem::path& path, const Image& img,
              const std::vector<std::pair<std::string, std::string>>& text = {});

// Reads back tEXt chunks written by save_png.
std::vector<std::pair<std::string, std::string>> read_png_text(const std::filesystem::path& path);

}  // namespace regfuse
