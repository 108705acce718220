#include "regfuse/deformation.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "regfuse/imaging.hpp"

namespace F = torch::nn::functional;

namespace regfuse {

DeformationField DeformationField::zeros(int64_t n, int64_t h, int64_t w, int level,
                                         const torch::TensorOptions& opts) {
    return {torch::zeros({n, 2, h, w}, opts), level};
}

DeformationField DeformationField::constant(int64_t n, int64_t h, int64_t w, double dx, double dy, int level,
                                            const torch::TensorOptions& opts) {
    auto d = torch::empty({n, 2, h, w}, opts);
    d.select(1, 0).fill_(dx);
    d.select(1, 1).fill_(dy);
    return {d, level};
}

namespace {

void check_field_shape(const DeformationField& f) {
    if (f.disp.dim() != 4 || f.disp.size(1) != 2) {
        throw std::invalid_argument("deformation field must be N x 2 x h x w");
    }
}

void check_same_dims(const DeformationField& a, const DeformationField& b, const char* what) {
    check_field_shape(a);
    check_field_shape(b);
    if (a.disp.sizes() != b.disp.sizes()) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}

// Forward differences along the last two axes, zero at the far boundary.
torch::Tensor jacobian_norm(const torch::Tensor& disp) {
    auto dx = torch::zeros_like(disp);
    auto dy = torch::zeros_like(disp);
    const int64_t h = disp.size(2);
    const int64_t w = disp.size(3);
    using torch::indexing::Slice;
    if (w > 1) {
        dx = F::pad(disp.index({Slice(), Slice(), Slice(), Slice(1, w)}) -
                        disp.index({Slice(), Slice(), Slice(), Slice(0, w - 1)}),
                    F::PadFuncOptions({0, 1, 0, 0}));
    }
    if (h > 1) {
        dy = F::pad(disp.index({Slice(), Slice(), Slice(1, h), Slice()}) -
                        disp.index({Slice(), Slice(), Slice(0, h - 1), Slice()}),
                    F::PadFuncOptions({0, 0, 0, 1}));
    }
    auto sq = (dx * dx + dy * dy).sum(1);
    return safe_sqrt(sq).mean();
}

double uniform_pm1(std::mt19937_64& rng) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return 2.0 * u - 1.0;
}

void put_u32(std::ostream& os, uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::ostream& os, uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
uint64_t get_le(std::istream& is, int bytes) {
    uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw std::runtime_error("field file truncated");
        v |= static_cast<uint64_t>(static_cast<uint8_t>(c)) << (8 * i);
    }
    return v;
}

constexpr char kFieldMagic[4] = {'R', 'F', 'D', 'F'};
constexpr uint32_t kFieldVersion = 1;

}  // namespace

void validate(const DeformationField& field) {
    check_field_shape(field);
    if (!torch::isfinite(field.disp).all().item<bool>()) throw std::invalid_argument("field has non-finite values");
    const double bound = static_cast<double>(std::max(field.height(), field.width()));
    const double mag = field.disp.abs().max().item<double>();
    if (mag >= bound) throw std::invalid_argument("field displacement exceeds the grid size");
}

torch::Tensor warp(const torch::Tensor& src, const DeformationField& field) {
    check_field_shape(field);
    TORCH_CHECK(src.dim() == 4, "warp expects N x C x H x W");
    if (src.size(0) != field.disp.size(0) || src.size(2) != field.height() || src.size(3) != field.width()) {
        throw std::invalid_argument("warp: field dims differ from source dims");
    }
    const int64_t n = src.size(0);
    const int64_t c = src.size(1);
    const int64_t h = src.size(2);
    const int64_t w = src.size(3);
    auto opts = src.options().requires_grad(false);
    auto disp = field.disp.to(src.scalar_type());

    auto bx = torch::arange(w, opts).view({1, 1, w});
    auto by = torch::arange(h, opts).view({1, h, 1});
    auto sx = (bx + disp.select(1, 0)).clamp(0.0, static_cast<double>(w - 1));
    auto sy = (by + disp.select(1, 1)).clamp(0.0, static_cast<double>(h - 1));

    auto x0f = sx.detach().floor();
    auto y0f = sy.detach().floor();
    auto fx = sx - x0f;
    auto fy = sy - y0f;
    auto x0 = x0f.to(torch::kLong);
    auto y0 = y0f.to(torch::kLong);
    auto x1 = (x0 + 1).clamp_max(w - 1);
    auto y1 = (y0 + 1).clamp_max(h - 1);

    auto flat = src.reshape({n, c, h * w});
    auto sample = [&](const torch::Tensor& yy, const torch::Tensor& xx) {
        auto idx = (yy * w + xx).view({n, 1, h * w}).expand({n, c, h * w});
        return flat.gather(2, idx).view({n, c, h, w});
    };
    auto wx = fx.unsqueeze(1);
    auto wy = fy.unsqueeze(1);
    auto top = (1.0 - wx) * sample(y0, x0) + wx * sample(y0, x1);
    auto bottom = (1.0 - wx) * sample(y1, x0) + wx * sample(y1, x1);
    return (1.0 - wy) * top + wy * bottom;
}

DeformationField scale_field(const DeformationField& field, double factor) {
    check_field_shape(field);
    const int shift = static_cast<int>(std::lround(std::log2(factor)));
    return {resample(field.disp, factor) * factor, field.level + shift};
}

DeformationField accumulate_pyramid(const std::vector<DeformationField>& fields) {
    if (fields.empty()) throw std::invalid_argument("accumulate_pyramid: no levels");
    const int k = static_cast<int>(fields.size());
    const auto& finest = fields.back();
    check_field_shape(finest);
    const int64_t h = finest.height();
    const int64_t w = finest.width();
    torch::Tensor total;
    for (int i = 1; i <= k; ++i) {
        const auto& f = fields[i - 1];
        check_field_shape(f);
        const int64_t div = int64_t{1} << (k - i);
        if (f.height() * div != h || f.width() * div != w) {
            throw std::invalid_argument("accumulate_pyramid: level " + std::to_string(i) + " has wrong dims");
        }
        auto up = scale_field(f, static_cast<double>(div)).disp;
        total = total.defined() ? total + up : up;
    }
    return {total, finest.level};
}

DeformationField subtract_fields(const DeformationField& a, const DeformationField& b) {
    check_same_dims(a, b, "subtract_fields");
    return {a.disp - b.disp, a.level};
}

torch::Tensor smoothness_loss(const std::vector<DeformationField>& fields_a,
                              const std::vector<DeformationField>& fields_b, int levels) {
    torch::Tensor total;
    auto add = [&](const std::vector<DeformationField>& fields) {
        if (fields.empty()) return;
        if (static_cast<int>(fields.size()) != levels) {
            throw std::invalid_argument("smoothness_loss: expected one field per level");
        }
        for (int i = 1; i <= levels; ++i) {
            auto term = jacobian_norm(fields[i - 1].disp) * std::pow(10.0, i - levels);
            total = total.defined() ? total + term : term;
        }
    };
    add(fields_a);
    add(fields_b);
    if (!total.defined()) return torch::zeros({});
    return total;
}

double endpoint_error(const DeformationField& predicted, const DeformationField& truth) {
    check_same_dims(predicted, truth, "endpoint_error");
    auto d = (predicted.disp.to(torch::kFloat64) - truth.disp.to(torch::kFloat64));
    return torch::sqrt((d * d).sum(1)).mean().item<double>();
}

void validate(const SyntheticDeformationSpec& spec) {
    if (spec.rotation_deg < 0 || spec.translation_px < 0 || spec.elastic_px < 0) {
        throw std::invalid_argument("synthetic deformation amplitudes must be non-negative");
    }
    if (spec.elastic_grid < 2) throw std::invalid_argument("elastic control grid must be at least 2x2");
}

DeformationField rigid_field(double rotation_deg, double tx, double ty, int64_t h, int64_t w) {
    auto opts = torch::TensorOptions(torch::kFloat64);
    const double theta = rotation_deg * std::numbers::pi / 180.0;
    const double cx = 0.5 * static_cast<double>(w - 1);
    const double cy = 0.5 * static_cast<double>(h - 1);
    auto x = (torch::arange(w, opts) - cx).view({1, w}).expand({h, w});
    auto y = (torch::arange(h, opts) - cy).view({h, 1}).expand({h, w});
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    auto dx = (c * x - s * y) - x + tx;
    auto dy = (s * x + c * y) - y + ty;
    return {torch::stack({dx, dy}, 0).unsqueeze(0).contiguous(), 0};
}

DeformationField synthesize_deformation(const SyntheticDeformationSpec& spec, int64_t h, int64_t w) {
    validate(spec);
    std::mt19937_64 rng(spec.seed);
    const double rot = spec.rotation_deg * uniform_pm1(rng);
    const double tx = spec.translation_px * uniform_pm1(rng);
    const double ty = spec.translation_px * uniform_pm1(rng);
    auto field = rigid_field(rot, tx, ty, h, w);

    const int g = spec.elastic_grid;
    auto grid = torch::empty({1, 2, g, g}, torch::kFloat64);
    auto* p = grid.data_ptr<double>();
    for (int64_t i = 0; i < grid.numel(); ++i) p[i] = spec.elastic_px * uniform_pm1(rng);
    if (spec.elastic_px > 0.0) {
        auto elastic = F::interpolate(grid, F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{h, w})
                                                .mode(torch::kBilinear)
                                                .align_corners(false));
        field.disp = field.disp + elastic;
    }
    return field;
}

DeformationField invert_field(const DeformationField& field, int iterations) {
    check_field_shape(field);
    DeformationField inv{-field.disp, field.level};
    for (int i = 0; i < iterations; ++i) inv.disp = -warp(field.disp, inv);
    return inv;
}

void save_field(const std::filesystem::path& path, const DeformationField& field, uint64_t tag) {
    check_field_shape(field);
    if (field.disp.size(0) != 1) throw std::invalid_argument("save_field: batch size must be 1");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kFieldMagic, 4);
    put_u32(os, kFieldVersion);
    put_u32(os, static_cast<uint32_t>(field.height()));
    put_u32(os, static_cast<uint32_t>(field.width()));
    put_u32(os, static_cast<uint32_t>(field.level));
    put_u64(os, tag);
    auto d = field.disp.detach().to(torch::kFloat64).contiguous();
    const auto* v = d.data_ptr<double>();
    for (int64_t i = 0; i < d.numel(); ++i) put_u64(os, std::bit_cast<uint64_t>(v[i]));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

DeformationField load_field(const std::filesystem::path& path, uint64_t* tag) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string_view(magic, 4) != std::string_view(kFieldMagic, 4)) {
        throw std::runtime_error(path.string() + ": not a deformation field file");
    }
    if (get_le(is, 4) != kFieldVersion) throw std::runtime_error(path.string() + ": unsupported version");
    const auto h = static_cast<int64_t>(get_le(is, 4));
    const auto w = static_cast<int64_t>(get_le(is, 4));
    const auto level = static_cast<int32_t>(static_cast<uint32_t>(get_le(is, 4)));
    const uint64_t t = get_le(is, 8);
    if (tag) *tag = t;
    auto d = torch::empty({1, 2, h, w}, torch::kFloat64);
    auto* v = d.data_ptr<double>();
    for (int64_t i = 0; i < d.numel(); ++i) v[i] = std::bit_cast<double>(get_le(is, 8));
    return {d, level};
}

}  // namespace regfuse
