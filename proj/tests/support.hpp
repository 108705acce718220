// Helpers shared by the unit and acceptance tests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>

#include <torch/torch.h>

#include "regfuse/config.hpp"

namespace regfuse::test {

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("regfuse-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

// Small network for CPU tests: K = J = levels, W' = 32, C = 8.
inline ModelConfig tiny_model(int levels = 2, int image_size = 32) {
    ModelConfig m;
    m.levels = levels;
    m.fusion_blocks = levels;
    m.token_width = 32;
    m.shallow_channels = 8;
    m.restormer_heads = 2;
    m.transformer_heads = 4;
    m.ffn_expansion = 2.0;
    m.classifier_hidden = 16;
    m.reg_hidden = 16;
    m.fusion_channels = 16;
    m.image_size = image_size;
    return m;
}

// Uniform [lo, hi) image, 1 x 1 x h x w, from a private generator.
inline torch::Tensor random_image(int64_t h, int64_t w, uint64_t seed, torch::Dtype dtype = torch::kFloat32,
                                  double lo = 0.0, double hi = 1.0) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::empty({1, 1, h, w}, torch::kFloat64).uniform_(lo, hi, gen).to(dtype);
}

// Smooth random image: a coarse uniform grid upsampled bilinearly.
inline torch::Tensor smooth_image(int64_t h, int64_t w, uint64_t seed, int64_t grid = 6,
                                  torch::Dtype dtype = torch::kFloat64) {
    auto coarse = random_image(grid, grid, seed, torch::kFloat64, 0.1, 0.9);
    auto up = torch::nn::functional::interpolate(
        coarse, torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{h, w})
                    .mode(torch::kBilinear)
                    .align_corners(true));
    return up.to(dtype);
}

// Central-difference derivative of f along `direction` at parameter `p`.
inline double directional_fd(torch::Tensor p, const torch::Tensor& direction, const std::function<double()>& f,
                             double h = 1e-6) {
    torch::NoGradGuard guard;
    p.add_(direction, h);
    const double up = f();
    p.add_(direction, -2 * h);
    const double down = f();
    p.add_(direction, h);
    return (up - down) / (2 * h);
}

// Fixed 32x32 triple for the metric checks: two structured sources and a blend of them.
struct MetricFixture {
    torch::Tensor a, b, f;
};

inline MetricFixture metric_fixture(uint64_t seed = 21, int64_t size = 32) {
    auto a = (0.7 * smooth_image(size, size, seed, 5) + 0.3 * random_image(size, size, seed + 1, torch::kFloat64)).clamp(0, 1);
    auto b = (0.8 * smooth_image(size, size, seed + 2, 4) + 0.2 * random_image(size, size, seed + 3, torch::kFloat64)).clamp(0, 1);
    auto f = (0.5 * (a + b) + 0.05 * random_image(size, size, seed + 4, torch::kFloat64, -1, 1)).clamp(0, 1);
    return {a, b, f};
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace regfuse::test
