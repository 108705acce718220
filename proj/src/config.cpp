#include "regfuse/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace regfuse {

using nlohmann::json;
using nlohmann::ordered_json;

int64_t ModelConfig::size_multiple() const {
    return int64_t{1} << (std::max(levels, fusion_blocks) - 1);
}

namespace {

// Reads every known key present in `j` into the matching field and rejects the rest.
class StrictReader {
public:
    StrictReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw std::invalid_argument(section_ + ": expected an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->get<T>();
            } catch (const json::exception& e) {
                throw std::invalid_argument(section_ + "." + key + ": " + e.what());
            }
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw std::invalid_argument("unknown config key: " + section_ + "." + it.key());
        }
    }

private:
    const json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

ordered_json to_json(const SyntheticDeformationSpec& s) {
    ordered_json j;
    j["rotation_deg"] = s.rotation_deg;
    j["translation_px"] = s.translation_px;
    j["elastic_grid"] = s.elastic_grid;
    j["elastic_px"] = s.elastic_px;
    j["seed"] = s.seed;
    return j;
}

SyntheticDeformationSpec deformation_from_json(const json& j) {
    SyntheticDeformationSpec s;
    StrictReader r(j, "train.deformation");
    r.read("rotation_deg", s.rotation_deg);
    r.read("translation_px", s.translation_px);
    r.read("elastic_grid", s.elastic_grid);
    r.read("elastic_px", s.elastic_px);
    r.read("seed", s.seed);
    r.finish();
    return s;
}

}  // namespace

ordered_json to_json(const ModelConfig& c) {
    ordered_json j;
    j["levels"] = c.levels;
    j["fusion_blocks"] = c.fusion_blocks;
    j["token_width"] = c.token_width;
    j["shallow_channels"] = c.shallow_channels;
    j["restormer_heads"] = c.restormer_heads;
    j["transformer_heads"] = c.transformer_heads;
    j["ffn_expansion"] = c.ffn_expansion;
    j["transformer_mlp_ratio"] = c.transformer_mlp_ratio;
    j["classifier_hidden"] = c.classifier_hidden;
    j["reg_hidden"] = c.reg_hidden;
    j["fusion_channels"] = c.fusion_channels;
    j["image_size"] = c.image_size;
    j["positional_embedding"] = c.positional_embedding;
    j["forward_registration"] = c.forward_registration;
    j["reverse_registration"] = c.reverse_registration;
    j["registration"] = c.registration;
    j["inject_heads"] = c.inject_heads;
    j["probe_loss"] = c.probe_loss;
    j["probe_updates_encoder"] = c.probe_updates_encoder;
    j["detach_classifier_input"] = c.detach_classifier_input;
    return j;
}

ordered_json to_json(const TrainConfig& c) {
    ordered_json j;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr_init"] = c.lr_init;
    j["lr_final"] = c.lr_final;
    j["lambda_inten"] = c.lambda_inten;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_eps"] = c.adam_eps;
    j["seed"] = c.seed;
    j["checkpoint_every"] = c.checkpoint_every;
    j["max_steps"] = c.max_steps;
    j["resample_deformations"] = c.resample_deformations;
    j["augment"] = c.augment;
    j["crop_size"] = c.crop_size;
    j["device"] = c.device;
    j["float64"] = c.float64;
    j["deformation"] = to_json(c.deformation);
    return j;
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["model"] = to_json(c.model);
    j["train"] = to_json(c.train);
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    StrictReader r(j, "model");
    r.read("levels", c.levels);
    r.read("fusion_blocks", c.fusion_blocks);
    r.read("token_width", c.token_width);
    r.read("shallow_channels", c.shallow_channels);
    r.read("restormer_heads", c.restormer_heads);
    r.read("transformer_heads", c.transformer_heads);
    r.read("ffn_expansion", c.ffn_expansion);
    r.read("transformer_mlp_ratio", c.transformer_mlp_ratio);
    r.read("classifier_hidden", c.classifier_hidden);
    r.read("reg_hidden", c.reg_hidden);
    r.read("fusion_channels", c.fusion_channels);
    r.read("image_size", c.image_size);
    r.read("positional_embedding", c.positional_embedding);
    r.read("forward_registration", c.forward_registration);
    r.read("reverse_registration", c.reverse_registration);
    r.read("registration", c.registration);
    r.read("inject_heads", c.inject_heads);
    r.read("probe_loss", c.probe_loss);
    r.read("probe_updates_encoder", c.probe_updates_encoder);
    r.read("detach_classifier_input", c.detach_classifier_input);
    r.finish();
    validate(c);
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    StrictReader r(j, "train");
    r.read("epochs", c.epochs);
    r.read("batch_size", c.batch_size);
    r.read("lr_init", c.lr_init);
    r.read("lr_final", c.lr_final);
    r.read("lambda_inten", c.lambda_inten);
    r.read("adam_beta1", c.adam_beta1);
    r.read("adam_beta2", c.adam_beta2);
    r.read("adam_eps", c.adam_eps);
    r.read("seed", c.seed);
    r.read("checkpoint_every", c.checkpoint_every);
    r.read("max_steps", c.max_steps);
    r.read("resample_deformations", c.resample_deformations);
    r.read("augment", c.augment);
    r.read("crop_size", c.crop_size);
    r.read("device", c.device);
    r.read("float64", c.float64);
    if (const json* d = r.child("deformation")) c.deformation = deformation_from_json(*d);
    r.finish();
    validate(c);
    return c;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    StrictReader r(j, "config");
    if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
    if (const json* t = r.child("train")) c.train = train_config_from_json(*t);
    r.finish();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << to_json(config).dump(2) << "\n";
}

RunConfig apply_overrides(const RunConfig& config, const std::vector<std::string>& overrides) {
    json j = json::parse(to_json(config).dump());
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("override must be key=value: " + o);
        const std::string key = o.substr(0, eq);
        const std::string raw = o.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        json* node = &j;
        std::stringstream ss(key);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        if (parts.empty()) throw std::invalid_argument("empty override key");
        for (size_t i = 0; i + 1 < parts.size(); ++i) {
            if (!node->contains(parts[i])) throw std::invalid_argument("unknown config key: " + key);
            node = &(*node)[parts[i]];
        }
        if (!node->contains(parts.back())) throw std::invalid_argument("unknown config key: " + key);
        (*node)[parts.back()] = value;
    }
    return run_config_from_json(j);
}

void validate(const ModelConfig& c) {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw std::invalid_argument(std::string("model.") + name + " must be >= 1");
    };
    positive(c.levels, "levels");
    positive(c.fusion_blocks, "fusion_blocks");
    positive(c.token_width, "token_width");
    positive(c.shallow_channels, "shallow_channels");
    positive(c.restormer_heads, "restormer_heads");
    positive(c.transformer_heads, "transformer_heads");
    positive(c.transformer_mlp_ratio, "transformer_mlp_ratio");
    positive(c.classifier_hidden, "classifier_hidden");
    positive(c.reg_hidden, "reg_hidden");
    positive(c.fusion_channels, "fusion_channels");
    positive(c.image_size, "image_size");
    if (c.token_width % c.transformer_heads != 0) {
        throw std::invalid_argument("model.token_width must be divisible by transformer_heads");
    }
    for (int ch : {c.token_width, c.shallow_channels, c.fusion_channels}) {
        if (ch % c.restormer_heads != 0) {
            throw std::invalid_argument("Restormer channel counts must be divisible by restormer_heads");
        }
    }
    if (c.image_size % c.size_multiple() != 0) {
        throw std::invalid_argument("model.image_size must be divisible by 2^(max(K,J)-1)");
    }
    if (!(c.ffn_expansion > 0)) throw std::invalid_argument("model.ffn_expansion must be positive");
}

void validate(const TrainConfig& c) {
    if (c.epochs < 1 || c.batch_size < 1) throw std::invalid_argument("train.epochs and batch_size must be >= 1");
    if (!(c.lr_init > 0) || !(c.lr_final > 0) || c.lr_final > c.lr_init) {
        throw std::invalid_argument("learning rates must be positive with lr_final <= lr_init");
    }
    if (!(c.lambda_inten > 0)) throw std::invalid_argument("train.lambda_inten must be positive");
    if (c.checkpoint_every < 1) throw std::invalid_argument("train.checkpoint_every must be >= 1");
    if (c.max_steps < 0 || c.crop_size < 0) throw std::invalid_argument("train.max_steps/crop_size must be >= 0");
    validate(c.deformation);
}

uint64_t config_hash(const ordered_json& j) {
    const std::string s = j.dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[i] = digits[h & 0xf];
    return out;
}

}  // namespace regfuse
