// Dataset ingestion, synthetic misalignment, shared augmentation and deterministic
// train/test splitting.
//
// Directory layout: <root>/<MODALITY-PAIR>/<index>/{mri.png, other.png}, e.g.
// data/CT-MRI/017/mri.png. The MRI image is the fixed reference (B); the other image
// is deformed to form the moving input (A).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "regfuse/deformation.hpp"
#include "regfuse/imaging.hpp"

namespace regfuse {

struct RegisteredPair {
    std::string id;        // "<MODALITY-PAIR>/<index>"
    std::string modality;  // e.g. "CT-MRI"
    Image mri;
    Image other;
};

struct IngestReport {
    std::vector<std::string> failures;  // "<path>: <reason>"
    std::vector<std::string> warnings;
    size_t accepted = 0;
};

struct IngestOptions {
    int64_t size = 256;
    std::string modality;  // empty = every modality directory under root
};

// Loads every pair; rejected pairs are itemised in `report` and skipped.
std::vector<RegisteredPair> ingest(const std::filesystem::path& root, const IngestOptions& options,
                                   IngestReport& report);

// Single-channel view used by the network: luminance for functional (RGB) images.
torch::Tensor luminance(const Image& img);

struct TrainingSample {
    std::string id;
    torch::Tensor moving;     // I_A: deformed non-MRI image, C x H x W
    torch::Tensor reference;  // I_B: MRI, 1 x H x W
    torch::Tensor label;      // I'_A: the undeformed non-MRI image
    DeformationField applied;   // moving = warp(label, applied)
    DeformationField gt_field;  // field that re-aligns moving onto label (inverse of `applied`)
};

struct Augmentation {
    bool flip_x = false;
    bool flip_y = false;
    int rot90 = 0;  // counter-clockwise quarter turns; only 0 or 2 for non-square images

    static Augmentation draw(uint64_t seed, bool square);
};

// Applies the augmentation to an N x C x H x W image tensor.
torch::Tensor augment_image(const torch::Tensor& img, const Augmentation& aug);

// Conjugates a field so that warp(augment(x), augment(f)) == augment(warp(x, f)).
DeformationField augment_field(const DeformationField& field, const Augmentation& aug);

// Deforms pair.other with a field drawn from `spec`, then applies one shared augmentation
// (drawn from aug_seed) to all three images and both fields.
TrainingSample make_sample(const RegisteredPair& pair, const SyntheticDeformationSpec& spec, uint64_t aug_seed,
                           bool augment = true);

// Deterministic split; the test side gets exactly `test_count` pairs.
std::pair<std::vector<RegisteredPair>, std::vector<RegisteredPair>> split(const std::vector<RegisteredPair>& pairs,
                                                                          size_t test_count, uint64_t seed);

// Test counts for the three Harvard modality pairs; 0 for unknown names.
size_t default_test_count(const std::string& modality);

struct ManifestEntry {
    std::string id;
    std::string role;  // "train" or "test"
};

// Line-oriented manifest: '#' comment lines, then "<id> <role>" per pair.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries,
                    const std::vector<std::string>& comments);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

// splitmix64-based seed derivation; independent of worker count and call order.
uint64_t mix_seed(uint64_t a, uint64_t b);

// Synthetic "shapes" pair for CI: a head-like outer ellipse with random inner ellipses,
// rendered with different per-structure intensities in the two modalities.
RegisteredPair make_synthetic_pair(uint64_t seed, int64_t size, const std::string& modality = "SYN-MRI",
                                   const std::string& id = "");

// Writes `count` synthetic pairs into <root>/<modality>/<index>/.
void write_synthetic_dataset(const std::filesystem::path& root, const std::string& modality, size_t count,
                             int64_t size, uint64_t seed);

}  // namespace regfuse
