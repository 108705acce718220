#include "regfuse/training.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "regfuse/imaging.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace regfuse {

torch::Tensor total_loss(const LossParts& p, double lambda) {
    const std::pair<const char*, const torch::Tensor*> terms[] = {
        {"ce1", &p.ce1},     {"ce2", &p.ce2},         {"consis", &p.consis}, {"smooth", &p.smooth},
        {"struct", &p.structure}, {"grad", &p.grad}, {"inten", &p.inten},
    };
    for (const auto& [name, t] : terms) {
        if (!t->defined() || !std::isfinite(t->item<double>())) throw NonFiniteLoss(name);
    }
    return p.ce1 + p.ce2 + p.consis + p.smooth + p.structure + p.grad + lambda * p.inten;
}

double update_mu(const std::vector<double>& ssim_losses_b, const std::vector<double>& ssim_losses_a,
                 double previous) {
    if (ssim_losses_b.size() != ssim_losses_a.size() || ssim_losses_a.empty()) {
        throw std::invalid_argument("update_mu: loss lists must be non-empty and of equal length");
    }
    double num = 0.0;
    double den = 0.0;
    for (double v : ssim_losses_b) num += v;
    for (double v : ssim_losses_a) den += v;
    if (den == 0.0 || !std::isfinite(num / den) || num / den <= 0.0) {
        std::cerr << "warning: mu update skipped (sums " << num << " / " << den << "), keeping " << previous << "\n";
        return previous;
    }
    return num / den;
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& c) {
    if (step < 0 || step > total_steps || total_steps <= 0) throw std::invalid_argument("lr_at: step out of range");
    if (step == 0) return c.lr_init;
    if (step == total_steps) return c.lr_final;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return c.lr_final + 0.5 * (c.lr_init - c.lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

Batch collate(const std::vector<TrainingSample>& samples, torch::Dtype dtype) {
    std::vector<torch::Tensor> moving;
    std::vector<torch::Tensor> reference;
    std::vector<torch::Tensor> label;
    Batch b;
    for (const auto& s : samples) {
        moving.push_back(s.moving);
        reference.push_back(s.reference);
        label.push_back(s.label);
        b.gt_fields.push_back(s.gt_field);
    }
    b.moving = torch::stack(moving).to(dtype);
    b.reference = torch::stack(reference).to(dtype);
    b.label = torch::stack(label).to(dtype);
    return b;
}

LossValues& LossValues::operator+=(const LossValues& o) {
    ce1 += o.ce1;
    ce2 += o.ce2;
    consis += o.consis;
    smooth += o.smooth;
    structure += o.structure;
    grad += o.grad;
    inten += o.inten;
    total += o.total;
    return *this;
}

LossValues LossValues::scaled(double f) const {
    LossValues v = *this;
    v.ce1 *= f;
    v.ce2 *= f;
    v.consis *= f;
    v.smooth *= f;
    v.structure *= f;
    v.grad *= f;
    v.inten *= f;
    v.total *= f;
    return v;
}

LossValues to_values(const LossParts& p, const torch::Tensor& total) {
    LossValues v;
    v.ce1 = p.ce1.item<double>();
    v.ce2 = p.ce2.item<double>();
    v.consis = p.consis.item<double>();
    v.smooth = p.smooth.item<double>();
    v.structure = p.structure.item<double>();
    v.grad = p.grad.item<double>();
    v.inten = p.inten.item<double>();
    v.total = total.item<double>();
    return v;
}

torch::Dtype dtype_for(const TrainConfig& config) { return config.float64 ? torch::kFloat64 : torch::kFloat32; }

namespace {

ordered_json loss_json(const LossValues& v) {
    return ordered_json{{"ce1", v.ce1},     {"ce2", v.ce2},   {"consis", v.consis}, {"smooth", v.smooth},
                        {"struct", v.structure}, {"grad", v.grad}, {"inten", v.inten},   {"total", v.total}};
}

LossValues loss_from_json(const json& j) {
    LossValues v;
    v.ce1 = j.at("ce1");
    v.ce2 = j.at("ce2");
    v.consis = j.at("consis");
    v.smooth = j.at("smooth");
    v.structure = j.at("struct");
    v.grad = j.at("grad");
    v.inten = j.at("inten");
    v.total = j.at("total");
    return v;
}

void set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

TrainingSample crop_sample(TrainingSample s, int64_t size, uint64_t seed) {
    const int64_t h = s.moving.size(1);
    const int64_t w = s.moving.size(2);
    if (size >= h && size >= w) return s;
    std::mt19937_64 rng(seed);
    const int64_t y0 = static_cast<int64_t>(rng() % static_cast<uint64_t>(h - size + 1));
    const int64_t x0 = static_cast<int64_t>(rng() % static_cast<uint64_t>(w - size + 1));
    auto crop = [&](const torch::Tensor& t) { return t.narrow(-2, y0, size).narrow(-1, x0, size).contiguous(); };
    s.moving = crop(s.moving);
    s.reference = crop(s.reference);
    s.label = crop(s.label);
    s.applied.disp = crop(s.applied.disp);
    s.gt_field.disp = crop(s.gt_field.disp);
    return s;
}

const char* kLossHeader = "ce1,ce2,consis,smooth,struct,grad,inten,total";

void write_loss_csv(std::ostream& os, const LossValues& v) {
    os << v.ce1 << ',' << v.ce2 << ',' << v.consis << ',' << v.smooth << ',' << v.structure << ',' << v.grad << ','
       << v.inten << ',' << v.total;
}

}  // namespace

Trainer::Trainer(RunConfig config, std::vector<RegisteredPair> pairs)
    : config_(std::move(config)), pairs_(std::move(pairs)) {
    validate(config_.model);
    validate(config_.train);
    if (pairs_.empty()) throw std::invalid_argument("trainer: no training pairs");
    if (config_.train.device != "cpu") {
        throw std::invalid_argument("unsupported device '" + config_.train.device + "' (this build runs on cpu)");
    }
    config_hash_ = config_hash(to_json(config_));
    dtype_ = dtype_for(config_.train);
    torch::manual_seed(config_.train.seed);
    net_ = RegFusionNet(config_.model);
    net_->to(dtype_);
    std::vector<torch::Tensor> params;
    for (auto& p : net_->parameters()) {
        if (p.requires_grad()) params.push_back(p);
    }
    optimizer_ = std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(config_.train.lr_init)
                    .betas({config_.train.adam_beta1, config_.train.adam_beta2})
                    .eps(config_.train.adam_eps));
}

int64_t Trainer::batches_per_epoch() const {
    const auto n = static_cast<int64_t>(pairs_.size());
    return (n + config_.train.batch_size - 1) / config_.train.batch_size;
}

int64_t Trainer::total_steps() const { return static_cast<int64_t>(config_.train.epochs) * batches_per_epoch(); }

std::vector<TrainingSample> Trainer::epoch_samples(int epoch) const {
    const auto& tc = config_.train;
    std::vector<size_t> order(pairs_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(tc.seed, 0x5eed0000ull + static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    std::vector<TrainingSample> out;
    out.reserve(order.size());
    for (size_t idx : order) {
        const uint64_t base = tc.resample_deformations ? mix_seed(tc.seed, static_cast<uint64_t>(epoch) + 1) : tc.seed;
        const uint64_t sample_seed = mix_seed(mix_seed(base, idx), tc.deformation.seed);
        auto spec = tc.deformation;
        spec.seed = sample_seed;
        auto s = make_sample(pairs_[idx], spec, mix_seed(sample_seed, 0xa11a), tc.augment);
        if (s.moving.size(0) == 3) {
            s.moving = luminance(Image{s.moving});
            s.label = luminance(Image{s.label});
        }
        if (tc.crop_size > 0) s = crop_sample(std::move(s), tc.crop_size, mix_seed(sample_seed, 0xc207));
        out.push_back(std::move(s));
    }
    return out;
}

StepRecord Trainer::step(const Batch& batch) {
    const double lr = lr_at(std::min(progress_.step, total_steps()), total_steps(), config_.train);
    set_lr(*optimizer_, lr);
    net_->train();
    auto out = net_->forward(batch.moving, batch.reference);
    auto parts = compute_losses(out, batch.moving, batch.reference, batch.label, progress_.mu, config_.model);
    auto total = total_loss(parts, config_.train.lambda_inten);
    optimizer_->zero_grad();
    total.backward();
    optimizer_->step();

    {
        torch::NoGradGuard guard;
        auto fused = out.fused.detach();
        auto lb = 1.0 - ssim_per_sample(fused, batch.reference);
        auto la = 1.0 - ssim_per_sample(fused, out.registered.detach());
        for (int64_t i = 0; i < lb.size(0); ++i) {
            progress_.epoch_ssim_b.push_back(lb[i].item<double>());
            progress_.epoch_ssim_a.push_back(la[i].item<double>());
        }
    }
    StepRecord rec{progress_.step, progress_.epoch, lr, to_values(parts, total)};
    progress_.epoch_sum += rec.loss;
    progress_.epoch_batches += 1;
    progress_.step += 1;
    step_log_.push_back(rec);
    return rec;
}

void Trainer::finish_epoch(const fs::path& out_dir) {
    const double lr = step_log_.empty() ? config_.train.lr_init : step_log_.back().lr;
    EpochRecord rec{progress_.epoch, progress_.epoch_sum.scaled(1.0 / std::max<int64_t>(1, progress_.epoch_batches)),
                    progress_.mu, lr};
    progress_.mu = update_mu(progress_.epoch_ssim_b, progress_.epoch_ssim_a, progress_.mu);
    rec.mu = progress_.mu;
    epoch_log_.push_back(rec);
    if (!out_dir.empty()) {
        const fs::path log = out_dir / "loss_log.csv";
        const bool fresh = !fs::exists(log);
        std::ofstream os(log, std::ios::app);
        os << std::setprecision(10);
        if (fresh) os << "# config-hash " << hash_hex(config_hash_) << "\nepoch," << kLossHeader << ",mu,lr\n";
        os << rec.epoch << ',';
        write_loss_csv(os, rec.mean);
        os << ',' << rec.mu << ',' << rec.lr << "\n";
    }
    const bool best = rec.mean.consis < progress_.best_consis;
    if (best) progress_.best_consis = rec.mean.consis;
    progress_.epoch += 1;
    progress_.epoch_pos = 0;
    progress_.epoch_ssim_a.clear();
    progress_.epoch_ssim_b.clear();
    progress_.epoch_sum = {};
    progress_.epoch_batches = 0;
    if (!out_dir.empty()) {
        if (best) save_checkpoint(out_dir / "best.rfck");
        if (progress_.epoch % config_.train.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%05d.rfck", progress_.epoch);
            save_checkpoint(out_dir / name);
        }
        save_checkpoint(out_dir / "last.rfck");
    }
}

void Trainer::run(const fs::path& out_dir) {
    if (!out_dir.empty()) fs::create_directories(out_dir);
    const int64_t limit =
        config_.train.max_steps > 0 ? std::min(config_.train.max_steps, total_steps()) : total_steps();
    std::ofstream step_csv;
    if (!out_dir.empty()) {
        const fs::path p = out_dir / "step_log.csv";
        const bool fresh = !fs::exists(p);
        step_csv.open(p, std::ios::app);
        step_csv << std::setprecision(12);
        if (fresh) step_csv << "# config-hash " << hash_hex(config_hash_) << "\nstep,epoch,lr," << kLossHeader << "\n";
    }
    const int64_t bpe = batches_per_epoch();
    const auto bs = static_cast<size_t>(config_.train.batch_size);
    while (progress_.step < limit) {
        const auto samples = epoch_samples(progress_.epoch);
        while (progress_.epoch_pos < bpe && progress_.step < limit) {
            const size_t begin = static_cast<size_t>(progress_.epoch_pos) * bs;
            const size_t end = std::min(samples.size(), begin + bs);
            std::vector<TrainingSample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(begin),
                                              samples.begin() + static_cast<std::ptrdiff_t>(end));
            StepRecord rec;
            try {
                rec = step(collate(chunk, dtype_));
            } catch (const NonFiniteLoss& e) {
                std::cerr << "training halted at step " << progress_.step << ": " << e.what() << "\n";
                throw;
            }
            progress_.epoch_pos += 1;
            if (step_csv.is_open()) {
                step_csv << rec.step << ',' << rec.epoch << ',' << rec.lr << ',';
                write_loss_csv(step_csv, rec.loss);
                step_csv << "\n";
            }
        }
        if (progress_.epoch_pos >= bpe) finish_epoch(out_dir);
    }
    if (!out_dir.empty()) save_checkpoint(out_dir / "last.rfck");
}

// --- checkpoint archive --------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'R', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint truncated");
    return v;
}

uint8_t dtype_code(torch::Dtype d) {
    switch (d) {
        case torch::kFloat32: return 0;
        case torch::kFloat64: return 1;
        case torch::kInt64: return 2;
        default: throw std::runtime_error("checkpoint: unsupported tensor dtype");
    }
}

torch::Dtype code_dtype(uint8_t c) {
    switch (c) {
        case 0: return torch::kFloat32;
        case 1: return torch::kFloat64;
        case 2: return torch::kInt64;
        default: throw std::runtime_error("checkpoint: unknown dtype code");
    }
}

}  // namespace

void write_checkpoint(const fs::path& path, const CheckpointData& data) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os.write(kCkptMagic, 8);
        put<uint32_t>(os, kCkptVersion);
        put<uint64_t>(os, data.metadata.size());
        os.write(data.metadata.data(), static_cast<std::streamsize>(data.metadata.size()));
        put<uint32_t>(os, static_cast<uint32_t>(data.tensors.size()));
        for (const auto& [name, tensor] : data.tensors) {
            auto t = tensor.detach().cpu().contiguous();
            put<uint32_t>(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<uint8_t>(os, dtype_code(t.scalar_type()));
            put<uint32_t>(os, static_cast<uint32_t>(t.dim()));
            for (int64_t d : t.sizes()) put<int64_t>(os, d);
            os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
        }
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

CheckpointData read_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string_view(magic, 8) != std::string_view(kCkptMagic, 8)) {
        throw std::runtime_error(path.string() + ": not a checkpoint");
    }
    if (get<uint32_t>(is) != kCkptVersion) throw std::runtime_error(path.string() + ": unsupported version");
    CheckpointData data;
    data.metadata.resize(get<uint64_t>(is));
    is.read(data.metadata.data(), static_cast<std::streamsize>(data.metadata.size()));
    const auto count = get<uint32_t>(is);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name(get<uint32_t>(is), '\0');
        is.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto dt = code_dtype(get<uint8_t>(is));
        std::vector<int64_t> dims(get<uint32_t>(is));
        for (auto& d : dims) d = get<int64_t>(is);
        auto t = torch::empty(dims, dt);
        is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
        if (!is) throw std::runtime_error(path.string() + ": truncated tensor " + name);
        data.tensors.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

void Trainer::save_checkpoint(const fs::path& path) const {
    ordered_json meta;
    meta["format"] = "regfuse-checkpoint";
    meta["config"] = to_json(config_);
    meta["config_hash"] = hash_hex(config_hash_);
    ordered_json prog;
    prog["step"] = progress_.step;
    prog["epoch"] = progress_.epoch;
    prog["epoch_pos"] = progress_.epoch_pos;
    prog["mu"] = progress_.mu;
    prog["best_consis"] = std::isfinite(progress_.best_consis) ? ordered_json(progress_.best_consis) : ordered_json();
    prog["epoch_ssim_b"] = progress_.epoch_ssim_b;
    prog["epoch_ssim_a"] = progress_.epoch_ssim_a;
    prog["epoch_sum"] = loss_json(progress_.epoch_sum);
    prog["epoch_batches"] = progress_.epoch_batches;
    meta["progress"] = prog;

    CheckpointData data;
    for (const auto& item : net_->named_parameters()) data.tensors.emplace_back("model." + item.key(), item.value());
    const auto& params = optimizer_->param_groups().front().params();
    ordered_json steps = ordered_json::array();
    for (size_t i = 0; i < params.size(); ++i) {
        auto it = optimizer_->state().find(params[i].unsafeGetTensorImpl());
        if (it == optimizer_->state().end()) {
            steps.push_back(0);
            continue;
        }
        const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
        steps.push_back(st.step());
        data.tensors.emplace_back("adam." + std::to_string(i) + ".exp_avg", st.exp_avg());
        data.tensors.emplace_back("adam." + std::to_string(i) + ".exp_avg_sq", st.exp_avg_sq());
    }
    meta["adam_steps"] = steps;
    data.metadata = meta.dump();
    write_checkpoint(path, data);
}

namespace {

void copy_model_tensors(torch::nn::Module& net, const CheckpointData& data) {
    std::map<std::string, const torch::Tensor*> by_name;
    for (const auto& [name, t] : data.tensors) by_name[name] = &t;
    torch::NoGradGuard guard;
    for (auto& item : net.named_parameters()) {
        auto it = by_name.find("model." + item.key());
        if (it == by_name.end()) throw std::runtime_error("checkpoint lacks parameter " + item.key());
        if (it->second->sizes() != item.value().sizes()) {
            throw std::runtime_error("checkpoint shape mismatch for " + item.key());
        }
        item.value().copy_(*it->second);
    }
}

}  // namespace

void Trainer::load_checkpoint(const fs::path& path) {
    const auto data = read_checkpoint(path);
    const auto meta = json::parse(data.metadata);
    const auto saved = run_config_from_json(meta.at("config"));
    if (to_json(saved.model) != to_json(config_.model)) {
        throw std::invalid_argument("checkpoint model config differs from the trainer's");
    }
    copy_model_tensors(*net_, data);

    std::map<std::string, const torch::Tensor*> by_name;
    for (const auto& [name, t] : data.tensors) by_name[name] = &t;
    const auto& params = optimizer_->param_groups().front().params();
    const auto& steps = meta.at("adam_steps");
    if (steps.size() != params.size()) throw std::runtime_error("checkpoint optimizer state does not match");
    optimizer_->state().clear();
    for (size_t i = 0; i < params.size(); ++i) {
        const int64_t s = steps[i].get<int64_t>();
        if (s == 0) continue;
        auto st = std::make_unique<torch::optim::AdamParamState>();
        st->step(s);
        st->exp_avg(by_name.at("adam." + std::to_string(i) + ".exp_avg")->to(params[i].scalar_type()).clone());
        st->exp_avg_sq(by_name.at("adam." + std::to_string(i) + ".exp_avg_sq")->to(params[i].scalar_type()).clone());
        optimizer_->state()[params[i].unsafeGetTensorImpl()] = std::move(st);
    }

    const auto& prog = meta.at("progress");
    progress_.step = prog.at("step");
    progress_.epoch = prog.at("epoch");
    progress_.epoch_pos = prog.at("epoch_pos");
    progress_.mu = prog.at("mu");
    progress_.best_consis =
        prog.at("best_consis").is_null() ? std::numeric_limits<double>::infinity() : prog.at("best_consis").get<double>();
    progress_.epoch_ssim_b = prog.at("epoch_ssim_b").get<std::vector<double>>();
    progress_.epoch_ssim_a = prog.at("epoch_ssim_a").get<std::vector<double>>();
    progress_.epoch_sum = loss_from_json(prog.at("epoch_sum"));
    progress_.epoch_batches = prog.at("epoch_batches");
}

RegFusionNet load_network(const fs::path& path, RunConfig* config_out) {
    const auto data = read_checkpoint(path);
    const auto meta = json::parse(data.metadata);
    const auto config = run_config_from_json(meta.at("config"));
    RegFusionNet net(config.model);
    net->to(dtype_for(config.train));
    copy_model_tensors(*net, data);
    net->eval();
    if (config_out) *config_out = config;
    return net;
}

}  // namespace regfuse
