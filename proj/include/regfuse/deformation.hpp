// Displacement fields: backward warping, pyramid accumulation, smoothness
// regularisation, synthetic deformation generation and a flat binary file format.

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace regfuse {

// N x 2 x h x w displacement in pixels of the field's own grid.
// Channel 0 is x (positive rightward), channel 1 is y (positive downward).
struct DeformationField {
    torch::Tensor disp;
    int level = 0;

    int64_t height() const { return disp.size(2); }
    int64_t width() const { return disp.size(3); }

    static DeformationField zeros(int64_t n, int64_t h, int64_t w, int level = 0,
                                  const torch::TensorOptions& opts = torch::kFloat32);
    static DeformationField constant(int64_t n, int64_t h, int64_t w, double dx, double dy,
                                     int level = 0, const torch::TensorOptions& opts = torch::kFloat32);
};

// Throws if the field is non-finite or exceeds the |d| < max(h, w) sanity bound.
void validate(const DeformationField& field);

// output(p) = bilinear_sample(src, p + field(p)), sample coordinates clamped to the
// pixel-centre rectangle [0, w-1] x [0, h-1]. A zero field reproduces src bit-exactly.
torch::Tensor warp(const torch::Tensor& src, const DeformationField& field);

// Spatially resamples by `factor` (power of two) and multiplies the displacements by it.
DeformationField scale_field(const DeformationField& field, double factor);

// Sum over levels i = 1..K of scale_field(fields[i-1], 2^(K-i)); fields[i-1] must sit on
// the (H / 2^(K-i), W / 2^(K-i)) grid. Returns the full-resolution field.
DeformationField accumulate_pyramid(const std::vector<DeformationField>& fields);

DeformationField subtract_fields(const DeformationField& a, const DeformationField& b);

// Sum_i 10^(i-K) (|grad phi_A^i| + |grad phi_B^i|): forward-difference Jacobian, per-pixel
// Frobenius norm averaged over pixels. Either list may be empty (a disabled direction).
torch::Tensor smoothness_loss(const std::vector<DeformationField>& fields_a,
                              const std::vector<DeformationField>& fields_b, int levels);

// Mean Euclidean norm of the per-pixel displacement difference.
double endpoint_error(const DeformationField& predicted, const DeformationField& truth);

struct SyntheticDeformationSpec {
    double rotation_deg = 10.0;    // rotation drawn uniformly from [-r, r] about the centre
    double translation_px = 10.0;  // each axis drawn uniformly from [-t, t]
    int elastic_grid = 8;          // control grid is elastic_grid x elastic_grid
    double elastic_px = 10.0;      // control displacements drawn uniformly from [-a, a]
    uint64_t seed = 0;
};

void validate(const SyntheticDeformationSpec& spec);

// Rigid (rotation + translation) plus elastic displacement, 1 x 2 x H x W, float64.
// Deterministic in spec.seed. Rotation by theta maps p to R(theta)(p - c) + c + t,
// so the rigid displacement is R(theta)(p - c) - (p - c) + t.
DeformationField synthesize_deformation(const SyntheticDeformationSpec& spec, int64_t h, int64_t w);

// Same construction with the random draws supplied explicitly (used by the synthesizer
// and by tests that need a closed-form field).
DeformationField rigid_field(double rotation_deg, double tx, double ty, int64_t h, int64_t w);

// Fixed-point inverse: returns g with warp(warp(x, f), g) ~ x, i.e. g(q) = -f(q + g(q)).
DeformationField invert_field(const DeformationField& field, int iterations = 30);

// Binary container: "RFDF" magic, u32 version, u32 h, u32 w, i32 level, u64 tag,
// then 2*h*w little-endian float64 (x plane then y plane, row-major). Batch size 1.
void save_field(const std::filesystem::path& path, const DeformationField& field, uint64_t tag = 0);
DeformationField load_field(const std::filesystem::path& path, uint64_t* tag = nullptr);

}  // namespace regfuse
