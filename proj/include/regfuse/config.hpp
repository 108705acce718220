// Model, training and run configuration, persisted as pretty-printed JSON.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "regfuse/deformation.hpp"

namespace regfuse {

struct ModelConfig {
    int levels = 5;             // K: FRL/RRL pairs; tokens sit on the H / 2^(K-1) grid
    int fusion_blocks = 5;      // J
    int token_width = 256;      // W'
    int shallow_channels = 32;  // C
    int restormer_heads = 4;
    int transformer_heads = 8;
    double ffn_expansion = 2.66;
    int transformer_mlp_ratio = 2;
    int classifier_hidden = 128;
    int reg_hidden = 64;
    int fusion_channels = 64;  // C_f
    int image_size = 256;      // reference size of the learned positional embedding grid
    bool positional_embedding = true;

    // Ablation switches.
    bool forward_registration = true;  // FRL ("w/o F" when false)
    bool reverse_registration = true;  // RRL ("w/o R" when false)
    bool registration = true;          // whole BSFA ("w/o BSFA" when false)
    bool inject_heads = true;          // MFRH cross-injection (off in Settings A and B)
    bool probe_loss = true;            // discrepancy probe loss (off in Setting A)

    // Gradient routing.
    bool probe_updates_encoder = false;  // probe loss also reaches encoder weights through the tokens
    bool detach_classifier_input = false;  // stop the modality CE at the classifier input

    // Images must have H and W divisible by this.
    int64_t size_multiple() const;
};

struct TrainConfig {
    int epochs = 3000;
    int batch_size = 32;
    double lr_init = 5e-5;
    double lr_final = 5e-7;
    double lambda_inten = 0.5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    int checkpoint_every = 100;     // epochs
    int64_t max_steps = 0;          // 0 = run all epochs
    bool resample_deformations = true;  // fresh synthetic deformation every epoch
    bool augment = true;            // shared random flips / 90-degree rotations
    int crop_size = 0;              // 0 = train on full images
    std::string device = "cpu";
    bool float64 = false;
    SyntheticDeformationSpec deformation;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const RunConfig& c);

// Strict parsing: unknown keys throw std::invalid_argument naming the key.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

// Applies "section.key=value" overrides, e.g. "train.epochs=10" or "model.levels=3".
// Values are parsed as JSON when possible, otherwise taken as strings.
RunConfig apply_overrides(const RunConfig& config, const std::vector<std::string>& overrides);

// Throws std::invalid_argument on inconsistent values.
void validate(const ModelConfig& c);
void validate(const TrainConfig& c);

// FNV-1a 64 of the canonical JSON dump; printed as 16 hex digits.
uint64_t config_hash(const nlohmann::ordered_json& j);
std::string hash_hex(uint64_t h);

}  // namespace regfuse
