#include "regfuse/imaging.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <stdexcept>

namespace F = torch::nn::functional;

namespace regfuse {

namespace {

bool is_power_of_two_factor(double factor) {
    if (!(factor > 0.0)) return false;
    const double l = std::log2(factor);
    return std::abs(l - std::round(l)) < 1e-12;
}

int64_t scaled_dim(int64_t dim, double factor) {
    const double out = static_cast<double>(dim) * factor;
    const auto rounded = static_cast<int64_t>(std::llround(out));
    if (rounded < 1 || std::abs(out - static_cast<double>(rounded)) > 1e-9) {
        throw std::invalid_argument("resample: dimension " + std::to_string(dim) + " times factor " +
                                    std::to_string(factor) + " is not integral");
    }
    return rounded;
}

torch::Tensor gaussian_window_1d(int size, double sigma, const torch::TensorOptions& opts) {
    auto coords = torch::arange(size, opts.dtype(torch::kFloat64)) - static_cast<double>(size / 2);
    auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
    return (g / g.sum()).to(opts);
}

// Depthwise separable "valid" filtering with a 1-D kernel along both axes.
torch::Tensor separable_valid(const torch::Tensor& x, const torch::Tensor& k1d) {
    const int64_t c = x.size(1);
    const int64_t n = k1d.size(0);
    auto kx = k1d.view({1, 1, 1, n}).expand({c, 1, 1, n}).contiguous();
    auto ky = k1d.view({1, 1, n, 1}).expand({c, 1, n, 1}).contiguous();
    auto y = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(c));
    return F::conv2d(y, ky, F::Conv2dFuncOptions().groups(c));
}

}  // namespace

Image make_image(torch::Tensor pixels) {
    if (pixels.dim() != 3 || (pixels.size(0) != 1 && pixels.size(0) != 3)) {
        throw std::invalid_argument("image must be C x H x W with C in {1,3}");
    }
    pixels = pixels.to(torch::kFloat32).contiguous();
    if (pixels.numel() > 0) {
        const auto lo = pixels.min().item<float>();
        const auto hi = pixels.max().item<float>();
        if (!(lo >= 0.0f && hi <= 1.0f)) {
            throw std::invalid_argument("image values must lie in [0,1]");
        }
    }
    return Image{std::move(pixels)};
}

torch::Tensor resample(const torch::Tensor& x, double factor) {
    TORCH_CHECK(x.dim() == 4, "resample expects N x C x H x W");
    if (!is_power_of_two_factor(factor)) {
        throw std::invalid_argument("resample: factor must be a power of two");
    }
    const int64_t h = scaled_dim(x.size(2), factor);
    const int64_t w = scaled_dim(x.size(3), factor);
    if (h == x.size(2) && w == x.size(3)) return x;
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{h, w})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

torch::Tensor safe_sqrt(const torch::Tensor& x) {
    auto positive = x > 0;
    auto guarded = torch::where(positive, x, torch::ones_like(x));
    return torch::where(positive, torch::sqrt(guarded), torch::zeros_like(x));
}

torch::Tensor sobel_components(const torch::Tensor& img, torch::Tensor* gy_out) {
    TORCH_CHECK(img.dim() == 4 && img.size(1) == 1, "sobel expects N x 1 x H x W");
    auto opts = img.options().requires_grad(false);
    auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, opts).view({1, 1, 3, 3});
    auto ky = kx.transpose(2, 3).contiguous();
    auto padded = F::pad(img, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
    if (gy_out != nullptr) *gy_out = F::conv2d(padded, ky);
    return F::conv2d(padded, kx);
}

torch::Tensor gradient_magnitude(const torch::Tensor& img) {
    torch::Tensor gy;
    auto gx = sobel_components(img, &gy);
    return safe_sqrt(gx * gx + gy * gy);
}

torch::Tensor ssim_per_sample(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& p) {
    if (a.sizes() != b.sizes()) throw std::invalid_argument("ssim: dimension mismatch");
    TORCH_CHECK(a.dim() == 4, "ssim expects N x C x H x W");
    if (a.size(2) < p.window || a.size(3) < p.window) {
        throw std::invalid_argument("ssim: image smaller than the Gaussian window");
    }
    auto win = gaussian_window_1d(p.window, p.sigma, a.options().requires_grad(false));
    const double c1 = std::pow(p.k1 * p.data_range, 2);
    const double c2 = std::pow(p.k2 * p.data_range, 2);

    auto mu_a = separable_valid(a, win);
    auto mu_b = separable_valid(b, win);
    auto mu_aa = mu_a * mu_a;
    auto mu_bb = mu_b * mu_b;
    auto mu_ab = mu_a * mu_b;
    auto var_a = separable_valid(a * a, win) - mu_aa;
    auto var_b = separable_valid(b * b, win) - mu_bb;
    auto cov = separable_valid(a * b, win) - mu_ab;

    auto map = ((2.0 * mu_ab + c1) * (2.0 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2));
    return map.flatten(1).mean(1);
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params) {
    return ssim_per_sample(a, b, params).mean();
}

double ssim(const Image& a, const Image& b) {
    if (a.channels() != 1 || b.channels() != 1) throw std::invalid_argument("ssim: single-channel images only");
    return ssim(a.batched().to(torch::kFloat64), b.batched().to(torch::kFloat64)).item<double>();
}

torch::Tensor ssim_loss(const torch::Tensor& a, const torch::Tensor& b) { return 1.0 - ssim(a, b); }

Image pad_to_multiple(const Image& img, int64_t multiple) {
    const int64_t h = img.height();
    const int64_t w = img.width();
    const int64_t ph = (multiple - h % multiple) % multiple;
    const int64_t pw = (multiple - w % multiple) % multiple;
    if (ph == 0 && pw == 0) return img;
    auto padded = F::pad(img.batched(), F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
    return Image{padded.squeeze(0).contiguous()};
}

torch::Tensor rgb_to_ycbcr(const torch::Tensor& rgb) {
    TORCH_CHECK(rgb.size(-3) == 3, "rgb_to_ycbcr expects 3 channels");
    auto r = rgb.select(-3, 0);
    auto g = rgb.select(-3, 1);
    auto b = rgb.select(-3, 2);
    auto y = 0.299 * r + 0.587 * g + 0.114 * b;
    auto cb = (b - y) / 1.772 + 0.5;
    auto cr = (r - y) / 1.402 + 0.5;
    return torch::stack({y, cb, cr}, -3);
}

torch::Tensor ycbcr_to_rgb(const torch::Tensor& ycbcr) {
    TORCH_CHECK(ycbcr.size(-3) == 3, "ycbcr_to_rgb expects 3 channels");
    auto y = ycbcr.select(-3, 0);
    auto cb = ycbcr.select(-3, 1) - 0.5;
    auto cr = ycbcr.select(-3, 2) - 0.5;
    auto r = y + 1.402 * cr;
    auto g = y - (0.299 * 1.402 / 0.587) * cr - (0.114 * 1.772 / 0.587) * cb;
    auto b = y + 1.772 * cb;
    return torch::stack({r, g, b}, -3).clamp(0.0, 1.0);
}

// --- PNG ---------------------------------------------------------------------------------

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngRaw {
    uint32_t width = 0;
    uint32_t height = 0;
    int channels = 0;
    int bit_depth = 0;
    std::vector<uint8_t> bytes;  // row-major, interleaved, big-endian for 16-bit
    std::vector<std::pair<std::string, std::string>> text;
};

// Returns an empty string on success, an error description otherwise.
// Only trivially destructible locals live between setjmp and the libpng calls.
std::string read_png_raw(std::FILE* fp, PngRaw& out, bool pixels) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) return "png_create_read_struct failed";
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        return "png_create_info_struct failed";
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return "corrupt PNG";
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    const size_t rowbytes = png_get_rowbytes(png, info);
    if (pixels) {
        out.bytes.resize(rowbytes * out.height);
        std::vector<png_bytep> rows(out.height);
        for (uint32_t y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * rowbytes;
        png_read_image(png, rows.data());
        png_read_end(png, info);
    }
    png_textp text = nullptr;
    int ntext = 0;
    png_get_text(png, info, &text, &ntext);
    for (int i = 0; i < ntext; ++i) out.text.emplace_back(text[i].key, text[i].text ? text[i].text : "");
    png_destroy_read_struct(&png, &info, nullptr);
    return {};
}

std::string write_png_raw(std::FILE* fp, uint32_t width, uint32_t height, int channels,
                          const std::vector<uint8_t>& bytes,
                          const std::vector<std::pair<std::string, std::string>>& kv) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) return "png_create_write_struct failed";
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        return "png_create_info_struct failed";
    }
    std::vector<png_text> text(kv.size());
    std::vector<png_bytep> rows(height);
    for (size_t i = 0; i < kv.size(); ++i) {
        text[i].compression = PNG_TEXT_COMPRESSION_NONE;
        text[i].key = const_cast<char*>(kv[i].first.c_str());
        text[i].text = const_cast<char*>(kv[i].second.c_str());
        text[i].text_length = kv[i].second.size();
    }
    for (uint32_t y = 0; y < height; ++y) {
        rows[y] = const_cast<png_bytep>(bytes.data()) + static_cast<size_t>(y) * width * channels;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return "PNG write failed";
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (!text.empty()) png_set_text(png, info, text.data(), static_cast<int>(text.size()));
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return {};
}

FilePtr open_or_throw(const std::filesystem::path& path, const char* mode) {
    FilePtr fp(std::fopen(path.c_str(), mode));
    if (!fp) throw std::runtime_error("cannot open " + path.string());
    return fp;
}

}  // namespace

Image load_png(const std::filesystem::path& path) {
    auto fp = open_or_throw(path, "rb");
    PngRaw raw;
    if (auto err = read_png_raw(fp.get(), raw, true); !err.empty()) {
        throw std::runtime_error(path.string() + ": " + err);
    }
    const int64_t h = raw.height;
    const int64_t w = raw.width;
    const int c = raw.channels;
    auto hwc = torch::empty({h, w, c}, torch::kFloat32);
    auto* dst = hwc.data_ptr<float>();
    const int64_t n = h * w * c;
    if (raw.bit_depth == 16) {
        for (int64_t i = 0; i < n; ++i) {
            const uint16_t v = static_cast<uint16_t>(raw.bytes[2 * i] << 8 | raw.bytes[2 * i + 1]);
            dst[i] = static_cast<float>(v) / 65535.0f;
        }
    } else {
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(raw.bytes[i]) / 255.0f;
    }
    auto chw = hwc.permute({2, 0, 1}).contiguous();
    if (c == 2) chw = chw.slice(0, 0, 1).contiguous();
    return Image{chw};
}

void save_png(const std::filesystem::path& path, const Image& img,
              const std::vector<std::pair<std::string, std::string>>& text) {
    const int c = static_cast<int>(img.channels());
    const auto h = static_cast<uint32_t>(img.height());
    const auto w = static_cast<uint32_t>(img.width());
    auto hwc = (img.pixels.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    std::vector<uint8_t> bytes(hwc.data_ptr<uint8_t>(), hwc.data_ptr<uint8_t>() + hwc.numel());
    auto fp = open_or_throw(path, "wb");
    if (auto err = write_png_raw(fp.get(), w, h, c, bytes, text); !err.empty()) {
        throw std::runtime_error(path.string() + ": " + err);
    }
}

std::vector<std::pair<std::string, std::string>> read_png_text(const std::filesystem::path& path) {
    auto fp = open_or_throw(path, "rb");
    PngRaw raw;
    if (auto err = read_png_raw(fp.get(), raw, true); !err.empty()) {
        throw std::runtime_error(path.string() + ": " + err);
    }
    return raw.text;
}

}  // namespace regfuse
