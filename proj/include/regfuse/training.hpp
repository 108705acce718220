// End-to-end optimisation: the total loss, the per-epoch mu reweighting, the cosine
// learning-rate schedule, the training loop and the single-file checkpoint archive.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "regfuse/config.hpp"
#include "regfuse/data.hpp"
#include "regfuse/model.hpp"

namespace regfuse {

// Raised when a loss term is NaN or infinite; names the offending term.
class NonFiniteLoss : public std::runtime_error {
public:
    explicit NonFiniteLoss(const std::string& term)
        : std::runtime_error("non-finite loss term: " + term), term_(term) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

// ce1 + ce2 + consis + smooth + structure + grad + lambda * inten.
torch::Tensor total_loss(const LossParts& parts, double lambda);

// sum L_ssim(F, B) / sum L_ssim(F, A~) over the finished epoch. Returns `previous`
// (with a logged warning) when the denominator is zero or the result is not finite.
double update_mu(const std::vector<double>& ssim_losses_b, const std::vector<double>& ssim_losses_a,
                 double previous);

// lr_final + (lr_init - lr_final) (1 + cos(pi step / total)) / 2.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& config);

struct Batch {
    torch::Tensor moving;     // N x 1 x H x W
    torch::Tensor reference;  // N x 1 x H x W
    torch::Tensor label;      // N x 1 x H x W
    std::vector<DeformationField> gt_fields;
};

Batch collate(const std::vector<TrainingSample>& samples, torch::Dtype dtype);

struct LossValues {
    double ce1 = 0, ce2 = 0, consis = 0, smooth = 0, structure = 0, grad = 0, inten = 0, total = 0;

    LossValues& operator+=(const LossValues& o);
    LossValues scaled(double f) const;
};

LossValues to_values(const LossParts& parts, const torch::Tensor& total);

struct TrainProgress {
    int64_t step = 0;       // optimiser steps taken
    int epoch = 0;          // epoch currently in progress (0-based)
    int64_t epoch_pos = 0;  // batches already consumed in the current epoch
    double mu = 1.0;
    double best_consis = std::numeric_limits<double>::infinity();
    std::vector<double> epoch_ssim_b;  // per-sample L_ssim(F, B) so far this epoch
    std::vector<double> epoch_ssim_a;  // per-sample L_ssim(F, A~) so far this epoch
    LossValues epoch_sum;
    int64_t epoch_batches = 0;
};

struct StepRecord {
    int64_t step = 0;
    int epoch = 0;
    double lr = 0;
    LossValues loss;
};

struct EpochRecord {
    int epoch = 0;
    LossValues mean;
    double mu = 0;
    double lr = 0;
};

class Trainer {
public:
    Trainer(RunConfig config, std::vector<RegisteredPair> pairs);

    RegFusionNet& net() { return net_; }
    const RunConfig& config() const { return config_; }
    const TrainProgress& progress() const { return progress_; }
    int64_t total_steps() const;
    int64_t batches_per_epoch() const;

    // Samples for `epoch` in the order they are consumed (deterministic in seed and epoch).
    std::vector<TrainingSample> epoch_samples(int epoch) const;

    // One optimiser step on `batch` at the current schedule position.
    StepRecord step(const Batch& batch);

    // Runs until max_steps / all epochs. Writes loss_log.csv, step_log.csv and checkpoints
    // into `out_dir` (when non-empty). A non-finite loss rethrows after logging; the last
    // good checkpoint on disk is left untouched.
    void run(const std::filesystem::path& out_dir);

    void save_checkpoint(const std::filesystem::path& path) const;
    void load_checkpoint(const std::filesystem::path& path);

    const std::vector<StepRecord>& step_log() const { return step_log_; }
    const std::vector<EpochRecord>& epoch_log() const { return epoch_log_; }

private:
    void finish_epoch(const std::filesystem::path& out_dir);

    RunConfig config_;
    uint64_t config_hash_ = 0;
    torch::Dtype dtype_ = torch::kFloat32;
    std::vector<RegisteredPair> pairs_;
    RegFusionNet net_{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer_;
    TrainProgress progress_;
    std::vector<StepRecord> step_log_;
    std::vector<EpochRecord> epoch_log_;
};

// Checkpoint archive: "RFCKPT" magic, u32 version, JSON metadata, then named tensors
// (u32 name length, name, u8 dtype, u32 rank, i64 dims, little-endian payload).
struct CheckpointData {
    std::string metadata;  // compact JSON
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Rebuilds a network (weights only) from a checkpoint written by Trainer.
RegFusionNet load_network(const std::filesystem::path& path, RunConfig* config_out = nullptr);

torch::Dtype dtype_for(const TrainConfig& config);

}  // namespace regfuse
