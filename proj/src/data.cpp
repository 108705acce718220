#include "regfuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace regfuse {

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

bool all_digits(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

// Numeric names sort numerically, everything else lexicographically after them.
bool index_less(const std::string& a, const std::string& b) {
    const bool da = all_digits(a);
    const bool db = all_digits(b);
    if (da && db) return a.size() != b.size() ? a.size() < b.size() : a < b;
    if (da != db) return da;
    return a < b;
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return index_less(a.filename(), b.filename()); });
    return out;
}

torch::Tensor flip_x(const torch::Tensor& t) { return t.flip({3}); }
torch::Tensor flip_y(const torch::Tensor& t) { return t.flip({2}); }

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b) {
    auto splitmix = [](uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    };
    return splitmix(splitmix(a) ^ (b + 0x632be59bd9b4e019ull));
}

torch::Tensor luminance(const Image& img) {
    if (img.channels() == 1) return img.pixels;
    return rgb_to_ycbcr(img.pixels).slice(0, 0, 1).contiguous();
}

std::vector<RegisteredPair> ingest(const fs::path& root, const IngestOptions& options, IngestReport& report) {
    std::vector<RegisteredPair> pairs;
    if (!fs::is_directory(root)) {
        report.failures.push_back(root.string() + ": not a directory");
        return pairs;
    }
    std::vector<fs::path> modality_dirs;
    if (!options.modality.empty()) {
        modality_dirs.push_back(root / options.modality);
        if (!fs::is_directory(modality_dirs.back())) {
            report.failures.push_back(modality_dirs.back().string() + ": not a directory");
            return pairs;
        }
    } else {
        modality_dirs = sorted_subdirs(root);
    }
    for (const auto& mdir : modality_dirs) {
        const std::string modality = mdir.filename().string();
        for (const auto& pdir : sorted_subdirs(mdir)) {
            const std::string id = modality + "/" + pdir.filename().string();
            try {
                for (const char* name : {"mri.png", "other.png"}) {
                    if (!fs::exists(pdir / name)) throw std::runtime_error(std::string("missing ") + name);
                }
                auto mri = load_png(pdir / "mri.png");
                auto other = load_png(pdir / "other.png");
                for (const Image* img : {&mri, &other}) {
                    if (img->height() != options.size || img->width() != options.size) {
                        throw std::runtime_error("expected " + std::to_string(options.size) + "x" +
                                                 std::to_string(options.size) + ", got " +
                                                 std::to_string(img->height()) + "x" + std::to_string(img->width()));
                    }
                }
                if (mri.functional()) mri = Image{luminance(mri)};
                pairs.push_back(RegisteredPair{id, modality, std::move(mri), std::move(other)});
            } catch (const std::exception& e) {
                report.failures.push_back(pdir.string() + ": " + e.what());
            }
        }
    }
    if (pairs.empty()) report.warnings.push_back("no image pairs found under " + root.string());
    report.accepted = pairs.size();
    return pairs;
}

Augmentation Augmentation::draw(uint64_t seed, bool square) {
    std::mt19937_64 rng(seed);
    Augmentation a;
    a.flip_x = (rng() >> 63) != 0;
    a.flip_y = (rng() >> 63) != 0;
    a.rot90 = static_cast<int>(rng() >> 62);
    if (!square) a.rot90 = (a.rot90 % 2) * 2;
    return a;
}

torch::Tensor augment_image(const torch::Tensor& img, const Augmentation& aug) {
    auto t = img;
    if (aug.flip_x) t = flip_x(t);
    if (aug.flip_y) t = flip_y(t);
    if (aug.rot90 != 0) t = torch::rot90(t, aug.rot90, {2, 3});
    return t.contiguous();
}

DeformationField augment_field(const DeformationField& field, const Augmentation& aug) {
    // Each step transports the field as an image, then applies the step's linear part.
    auto ux = field.disp.select(1, 0);
    auto uy = field.disp.select(1, 1);
    auto as4 = [](const torch::Tensor& t) { return t.unsqueeze(1); };
    auto back = [](const torch::Tensor& t) { return t.squeeze(1); };
    if (aug.flip_x) {
        ux = -back(flip_x(as4(ux)));
        uy = back(flip_x(as4(uy)));
    }
    if (aug.flip_y) {
        ux = back(flip_y(as4(ux)));
        uy = -back(flip_y(as4(uy)));
    }
    for (int k = 0; k < aug.rot90; ++k) {
        // torch::rot90 maps (x, y) to (y, W-1-x): linear part (dx, dy) -> (dy, -dx).
        auto rx = back(torch::rot90(as4(ux), 1, {2, 3}));
        auto ry = back(torch::rot90(as4(uy), 1, {2, 3}));
        ux = ry;
        uy = -rx;
    }
    return {torch::stack({ux, uy}, 1).contiguous(), field.level};
}

TrainingSample make_sample(const RegisteredPair& pair, const SyntheticDeformationSpec& spec, uint64_t aug_seed,
                           bool augment) {
    const int64_t h = pair.other.height();
    const int64_t w = pair.other.width();
    auto applied64 = synthesize_deformation(spec, h, w);
    auto gt64 = invert_field(applied64);
    DeformationField applied{applied64.disp.to(torch::kFloat32), 0};
    DeformationField gt{gt64.disp.to(torch::kFloat32), 0};

    auto label = pair.other.batched();
    auto moving = warp(label, applied).clamp(0.0, 1.0);
    auto reference = pair.mri.batched();
    if (augment) {
        const auto aug = Augmentation::draw(aug_seed, h == w);
        label = augment_image(label, aug);
        moving = augment_image(moving, aug);
        reference = augment_image(reference, aug);
        applied = augment_field(applied, aug);
        gt = augment_field(gt, aug);
    }
    return TrainingSample{pair.id, moving.squeeze(0), reference.squeeze(0), label.squeeze(0), applied, gt};
}

std::pair<std::vector<RegisteredPair>, std::vector<RegisteredPair>> split(const std::vector<RegisteredPair>& pairs,
                                                                          size_t test_count, uint64_t seed) {
    if (test_count > pairs.size()) {
        throw std::invalid_argument("split: test count " + std::to_string(test_count) + " exceeds dataset size " +
                                    std::to_string(pairs.size()));
    }
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = order.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    std::vector<size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
    std::vector<size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(test_count), order.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::vector<RegisteredPair> train;
    std::vector<RegisteredPair> test;
    for (size_t i : train_idx) train.push_back(pairs[i]);
    for (size_t i : test_idx) test.push_back(pairs[i]);
    return {std::move(train), std::move(test)};
}

size_t default_test_count(const std::string& modality) {
    if (modality == "CT-MRI") return 20;
    if (modality == "PET-MRI") return 55;
    if (modality == "SPECT-MRI") return 77;
    return 0;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries,
                    const std::vector<std::string>& comments) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& c : comments) os << "# " << c << "\n";
    for (const auto& e : entries) os << e.id << " " << e.role << "\n";
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        ManifestEntry e;
        if (!(ls >> e.id >> e.role) || (e.role != "train" && e.role != "test")) {
            throw std::runtime_error(path.string() + ": malformed line: " + line);
        }
        out.push_back(std::move(e));
    }
    return out;
}

RegisteredPair make_synthetic_pair(uint64_t seed, int64_t size, const std::string& modality, const std::string& id) {
    std::mt19937_64 rng(seed);
    auto opts = torch::TensorOptions(torch::kFloat64);
    const double s = static_cast<double>(size);
    auto xs = ((torch::arange(size, opts) + 0.5) / s).view({1, size}).expand({size, size});
    auto ys = ((torch::arange(size, opts) + 0.5) / s).view({size, 1}).expand({size, size});

    auto ellipse = [&](double cx, double cy, double rx, double ry, double angle) {
        const double c = std::cos(angle);
        const double sn = std::sin(angle);
        auto dx = xs - cx;
        auto dy = ys - cy;
        auto u = (c * dx + sn * dy) / rx;
        auto v = (-sn * dx + c * dy) / ry;
        return (u * u + v * v <= 1.0).to(torch::kFloat64);
    };

    auto mri = torch::zeros({size, size}, opts);
    auto other = torch::zeros({size, size}, opts);
    const double hx = 0.5 + 0.04 * (uniform01(rng) - 0.5);
    const double hy = 0.5 + 0.04 * (uniform01(rng) - 0.5);
    const double hr = 0.36 + 0.06 * uniform01(rng);
    const double ha = 0.3 * (uniform01(rng) - 0.5);
    auto skull = ellipse(hx, hy, hr, hr * 1.15, ha);
    auto brain = ellipse(hx, hy, hr - 0.04, hr * 1.15 - 0.04, ha);
    // Skull is dark in MRI and bright in the other modality; tissue the opposite way.
    mri = mri + 0.15 * skull + (0.45 + 0.1 * uniform01(rng) - 0.15) * brain;
    other = other + 0.95 * skull + (0.25 + 0.1 * uniform01(rng) - 0.95) * brain;

    const int blobs = 3 + static_cast<int>(rng() % 3);
    for (int i = 0; i < blobs; ++i) {
        const double r = 0.55 * (hr - 0.06) * std::sqrt(uniform01(rng));
        const double t = 2.0 * std::numbers::pi * uniform01(rng);
        const double cx = hx + r * std::cos(t);
        const double cy = hy + r * std::sin(t);
        const double rx = 0.04 + 0.09 * uniform01(rng);
        const double ry = 0.04 + 0.09 * uniform01(rng);
        const double ang = std::numbers::pi * uniform01(rng);
        auto m = ellipse(cx, cy, rx, ry, ang) * brain;
        const double vm = 0.55 + 0.45 * uniform01(rng);
        const double vo = 0.05 + 0.9 * uniform01(rng);
        mri = mri * (1.0 - m) + vm * m;
        other = other * (1.0 - m) + vo * m;
    }

    // Mild blur so edges are a couple of pixels wide.
    auto blur = [&](const torch::Tensor& img) {
        auto k = torch::tensor({0.25, 0.5, 0.25}, opts);
        auto k2 = (k.view({3, 1}) * k.view({1, 3})).view({1, 1, 3, 3});
        auto x = F::pad(img.view({1, 1, size, size}), F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
        return F::conv2d(x, k2).view({1, size, size});
    };
    RegisteredPair p;
    p.modality = modality;
    p.id = id.empty() ? modality + "/" + std::to_string(seed) : id;
    p.mri = Image{blur(mri).clamp(0.0, 1.0).to(torch::kFloat32).contiguous()};
    p.other = Image{blur(other).clamp(0.0, 1.0).to(torch::kFloat32).contiguous()};
    return p;
}

void write_synthetic_dataset(const fs::path& root, const std::string& modality, size_t count, int64_t size,
                             uint64_t seed) {
    for (size_t i = 0; i < count; ++i) {
        char name[16];
        std::snprintf(name, sizeof(name), "%03zu", i);
        const fs::path dir = root / modality / name;
        fs::create_directories(dir);
        auto pair = make_synthetic_pair(mix_seed(seed, i), size, modality);
        save_png(dir / "mri.png", pair.mri);
        save_png(dir / "other.png", pair.other);
    }
}

}  // namespace regfuse
