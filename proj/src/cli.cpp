#include "regfuse/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "regfuse/config.hpp"
#include "regfuse/data.hpp"
#include "regfuse/deformation.hpp"
#include "regfuse/imaging.hpp"
#include "regfuse/model.hpp"
#include "regfuse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace regfuse::cli {

namespace {

constexpr const char* kHashKey = "regfuse-config-hash";

void require_file(const fs::path& p, const char* what) {
    if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

std::string device_override(const std::string& configured) {
    if (const char* env = std::getenv("REGFUSE_DEVICE"); env && *env) return env;
    return configured;
}

void check_device(const std::string& device) {
    if (device != "cpu") throw UsageError("unsupported device '" + device + "' (this build runs on cpu)");
}

std::string field_file_name(const std::string& id) {
    std::string s = id;
    std::replace(s.begin(), s.end(), '/', '_');
    return s + ".rfdf";
}

uint64_t id_seed(const std::string& id) { return config_hash(ordered_json(id)); }

std::vector<std::string> manifest_comments(const ordered_json& meta) {
    std::vector<std::string> out;
    for (const auto& [k, v] : meta.items()) out.push_back(k + " " + (v.is_string() ? v.get<std::string>() : v.dump()));
    return out;
}

RunConfig effective_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig base = path.empty() ? RunConfig{} : load_run_config(path);
    auto cfg = apply_overrides(base, overrides);
    cfg.train.device = device_override(cfg.train.device);
    validate(cfg.model);
    validate(cfg.train);
    return cfg;
}

struct ManifestInfo {
    fs::path root;
    std::string modality;
    int64_t size = 256;
    std::vector<ManifestEntry> entries;
    fs::path fields_dir;
};

ManifestInfo load_manifest(const fs::path& path, const std::string& root_override) {
    require_file(path, "manifest");
    ManifestInfo info;
    const auto fields = read_comment_fields(path);
    info.entries = read_manifest(path);
    auto get = [&](const char* key) -> std::string {
        auto it = fields.find(key);
        return it == fields.end() ? std::string() : it->second;
    };
    info.root = root_override.empty() ? fs::path(get("root")) : fs::path(root_override);
    info.modality = get("modality");
    if (!get("size").empty()) info.size = std::stoll(get("size"));
    info.fields_dir = path.parent_path() / "fields";
    if (info.root.empty()) throw UsageError(path.string() + ": manifest names no data root (pass --data)");
    return info;
}

std::vector<RegisteredPair> pairs_for(const ManifestInfo& m, const std::string& role, std::ostream& err) {
    IngestReport report;
    auto all = ingest(m.root, IngestOptions{m.size, m.modality}, report);
    for (const auto& f : report.failures) err << "ingest: " << f << "\n";
    std::set<std::string> wanted;
    for (const auto& e : m.entries) {
        if (e.role == role) wanted.insert(e.id);
    }
    std::vector<RegisteredPair> out;
    for (auto& p : all) {
        if (wanted.erase(p.id)) out.push_back(std::move(p));
    }
    if (!wanted.empty()) throw UsageError("manifest entry missing from data root: " + *wanted.begin());
    return out;
}

torch::Tensor gray_input(const Image& img) { return luminance(img).unsqueeze(0); }

struct NetOutputs {
    torch::Tensor fused;       // 1 x 1 x H x W
    torch::Tensor registered;  // 1 x 1 x H x W
    DeformationField phi;
};

// Pads to the network's size multiple, runs a no-grad forward pass and crops back.
NetOutputs infer(RegFusionNet& net, const RunConfig& cfg, const torch::Tensor& a, const torch::Tensor& b) {
    torch::NoGradGuard guard;
    const int64_t h = a.size(2);
    const int64_t w = a.size(3);
    const int64_t m = cfg.model.size_multiple();
    const auto dtype = dtype_for(cfg.train);
    auto pa = pad_to_multiple(Image{a.squeeze(0)}, m).batched().to(dtype);
    auto pb = pad_to_multiple(Image{b.squeeze(0)}, m).batched().to(dtype);
    auto r = net->forward(pa, pb);
    auto crop = [&](const torch::Tensor& t) { return t.narrow(2, 0, h).narrow(3, 0, w).to(torch::kFloat32).contiguous(); };
    NetOutputs out;
    out.fused = crop(r.fused);
    out.registered = crop(r.registered).clamp(0.0, 1.0);
    out.phi = DeformationField{crop(r.phi_ab.disp), 0};
    return out;
}

// ---------------------------------------------------------------------------------------

struct PrepareArgs {
    std::string root, modality, out, config;
    std::vector<std::string> overrides;
    uint64_t seed = 0;
    int64_t size = 256;
    int64_t test_count = -1;
};

int cmd_prepare(const PrepareArgs& a, std::ostream& out, std::ostream& err) {
    const auto cfg = effective_config(a.config, a.overrides);
    IngestReport report;
    auto pairs = ingest(a.root, IngestOptions{a.size, a.modality}, report);
    fs::create_directories(a.out);
    {
        std::ofstream os(fs::path(a.out) / "ingest_report.txt");
        os << "accepted " << report.accepted << "\n";
        for (const auto& f : report.failures) os << "failure " << f << "\n";
        for (const auto& w : report.warnings) os << "warning " << w << "\n";
    }
    for (const auto& f : report.failures) err << "ingest failure: " << f << "\n";
    if (pairs.empty()) {
        err << "no usable pairs under " << a.root << "\n";
        return kUsageError;
    }
    const size_t test_count = a.test_count >= 0 ? static_cast<size_t>(a.test_count) : default_test_count(a.modality);
    if (test_count == 0 || test_count >= pairs.size()) {
        throw UsageError("test count " + std::to_string(test_count) + " invalid for " + std::to_string(pairs.size()) +
                         " pairs (pass --test-count)");
    }
    const auto [train, test] = split(pairs, test_count, a.seed);

    ordered_json meta;
    meta["command"] = "prepare";
    meta["root"] = a.root;
    meta["modality"] = a.modality;
    meta["seed"] = a.seed;
    meta["size"] = a.size;
    meta["test_count"] = test_count;
    meta["deformation"] = to_json(cfg.train).at("deformation");
    const uint64_t hash = config_hash(meta);
    ordered_json header;
    header["config-hash"] = hash_hex(hash);
    header["root"] = a.root;
    header["modality"] = a.modality;
    header["seed"] = a.seed;
    header["size"] = a.size;
    header["deformation"] = meta["deformation"].dump();

    std::vector<ManifestEntry> entries;
    for (const auto& p : pairs) {
        const bool is_test = std::any_of(test.begin(), test.end(), [&](const auto& t) { return t.id == p.id; });
        entries.push_back({p.id, is_test ? "test" : "train"});
    }
    write_manifest(fs::path(a.out) / "manifest.txt", entries, manifest_comments(header));

    const fs::path fields = fs::path(a.out) / "fields";
    fs::create_directories(fields);
    for (const auto& p : test) {
        auto spec = cfg.train.deformation;
        spec.seed = mix_seed(mix_seed(a.seed, spec.seed), id_seed(p.id));
        save_field(fields / field_file_name(p.id), synthesize_deformation(spec, p.other.height(), p.other.width()),
                   hash);
    }
    out << "prepared " << train.size() << " train / " << test.size() << " test pairs, config-hash " << hash_hex(hash)
        << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------

struct TrainArgs {
    std::string config, manifest, data, out, resume;
    std::vector<std::string> overrides;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    const auto cfg = effective_config(a.config, a.overrides);
    check_device(cfg.train.device);
    std::vector<RegisteredPair> pairs;
    if (!a.manifest.empty()) {
        pairs = pairs_for(load_manifest(a.manifest, a.data), "train", err);
    } else {
        if (a.data.empty()) throw UsageError("train needs --manifest or --data");
        IngestReport report;
        pairs = ingest(a.data, IngestOptions{cfg.model.image_size, ""}, report);
        for (const auto& f : report.failures) err << "ingest: " << f << "\n";
    }
    if (pairs.empty()) throw UsageError("no training pairs");
    if (!a.resume.empty()) require_file(a.resume, "checkpoint");

    fs::create_directories(a.out);
    save_run_config(fs::path(a.out) / "config.json", cfg);
    Trainer trainer(cfg, std::move(pairs));
    if (!a.resume.empty()) trainer.load_checkpoint(a.resume);
    try {
        trainer.run(a.out);
    } catch (const NonFiniteLoss& e) {
        err << e.what() << "; last good checkpoint kept in " << a.out << "\n";
        return kRuntimeFailure;
    }
    const auto& log = trainer.step_log();
    out << "trained to step " << trainer.progress().step << " (epoch " << trainer.progress().epoch << ")";
    if (!log.empty()) out << ", last loss " << std::setprecision(10) << log.back().loss.total;
    out << ", config-hash " << hash_hex(config_hash(to_json(cfg))) << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------

struct FuseArgs {
    std::string checkpoint, a, b, out;
};

int cmd_fuse(const FuseArgs& args, std::ostream& out, std::ostream&) {
    require_file(args.checkpoint, "checkpoint");
    require_file(args.a, "image A");
    require_file(args.b, "image B");
    RunConfig cfg;
    auto net = load_network(args.checkpoint, &cfg);
    check_device(device_override(cfg.train.device));
    const Image img_a = load_png(args.a);
    const Image img_b = load_png(args.b);
    if (img_a.height() != img_b.height() || img_a.width() != img_b.width()) {
        throw UsageError("image dims differ: A " + std::to_string(img_a.height()) + "x" + std::to_string(img_a.width()) +
                         ", B " + std::to_string(img_b.height()) + "x" + std::to_string(img_b.width()));
    }
    auto r = infer(net, cfg, gray_input(img_a), gray_input(img_b));

    ordered_json meta;
    meta["command"] = "fuse";
    meta["run"] = to_json(cfg);
    const uint64_t hash = config_hash(meta);
    const std::vector<std::pair<std::string, std::string>> text = {{kHashKey, hash_hex(hash)}};

    fs::create_directories(args.out);
    Image fused{r.fused.squeeze(0).clamp(0.0, 1.0)};
    Image registered{r.registered.squeeze(0)};
    if (img_a.functional()) {
        // Colour sources keep the registered chroma around the fused luminance.
        auto reg_rgb = warp(img_a.batched(), r.phi).squeeze(0).clamp(0.0, 1.0);
        auto ycc = rgb_to_ycbcr(reg_rgb);
        fused = Image{ycbcr_to_rgb(torch::cat({fused.pixels, ycc.slice(0, 1, 3)}, 0)).clamp(0.0, 1.0)};
        registered = Image{reg_rgb};
    }
    save_png(fs::path(args.out) / "fused.png", fused, text);
    save_png(fs::path(args.out) / "registered.png", registered, text);
    save_field(fs::path(args.out) / "phi.rfdf", DeformationField{r.phi.disp.to(torch::kFloat64), 0}, hash);
    out << "fused " << img_a.height() << "x" << img_a.width() << " -> " << args.out << ", config-hash "
        << hash_hex(hash) << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, manifest, data, out, source = "both";
    int64_t limit = 0;
};

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
    require_file(args.checkpoint, "checkpoint");
    if (args.source != "both" && args.source != "registered" && args.source != "label") {
        throw UsageError("--source must be both, registered or label");
    }
    const auto manifest = load_manifest(args.manifest, args.data);
    RunConfig cfg;
    auto net = load_network(args.checkpoint, &cfg);
    check_device(device_override(cfg.train.device));
    auto pairs = pairs_for(manifest, "test", err);
    if (args.limit > 0 && static_cast<size_t>(args.limit) < pairs.size()) pairs.resize(static_cast<size_t>(args.limit));

    MetricReport report;
    ordered_json meta;
    meta["command"] = "eval";
    meta["run"] = to_json(cfg);
    meta["metrics"] = to_json(report.params);
    meta["manifest-hash"] = read_comment_fields(args.manifest)["config-hash"];
    meta["source"] = args.source;
    const uint64_t hash = config_hash(meta);

    for (const auto& p : pairs) {
        const fs::path fpath = manifest.fields_dir / field_file_name(p.id);
        require_file(fpath, "cached deformation");
        const auto applied = load_field(fpath);
        auto label = gray_input(p.other);
        auto moving = warp(label, DeformationField{applied.disp.to(torch::kFloat32), 0}).clamp(0.0, 1.0);
        const auto gt = invert_field(applied);
        auto r = infer(net, cfg, moving, gray_input(p.mri));
        const double epe = endpoint_error(r.phi.disp, gt.disp);
        auto b = gray_input(p.mri);
        if (args.source != "label") {
            report.rows.push_back({p.id, "registered", evaluate_all(r.registered, b, r.fused, report.params), epe});
        }
        if (args.source != "registered") {
            report.rows.push_back({p.id, "label", evaluate_all(label, b, r.fused, report.params), epe});
        }
    }
    const fs::path out_path(args.out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    report.write_csv(out_path, {"config-hash " + hash_hex(hash), "checkpoint " + args.checkpoint,
                                "manifest " + args.manifest});
    out << "evaluated " << pairs.size() << " test pairs -> " << args.out << ", config-hash " << hash_hex(hash) << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

struct Group {
    std::string label;
    std::vector<MetricRow> rows;
};

std::vector<double> metric_values(const Group& g, size_t column) {
    std::vector<double> v;
    for (const auto& r : g.rows) {
        const double vals[] = {r.values.q_abf, r.values.q_cv, r.values.q_ssim, r.values.q_vif, r.values.q_s, r.epe};
        v.push_back(vals[column]);
    }
    return v;
}

void write_box_svg(const fs::path& path, const std::string& metric, const std::vector<Group>& groups,
                   const std::string& hash) {
    std::vector<BoxStats> stats;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    const size_t column = static_cast<size_t>(
        std::find(metric_columns().begin(), metric_columns().end(), metric) - metric_columns().begin());
    for (const auto& g : groups) {
        stats.push_back(box_stats(metric_values(g, column)));
        for (double v : metric_values(g, column)) {
            if (std::isfinite(v)) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
    }
    if (!std::isfinite(lo)) lo = hi = 0;
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.08 * (hi - lo);
    lo -= pad;
    hi += pad;
    const double top = 40, plot_h = 300, left = 70, slot = 160;
    const double width = left + slot * static_cast<double>(groups.size()) + 20;
    const double height = top + plot_h + 90;
    auto y = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<!-- " << kHashKey << " " << hash << " -->\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << metric << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
       << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = lo + (hi - lo) * t / 4.0;
        os << "<text x=\"" << left - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
           << std::setprecision(4) << v << "</text>\n";
    }
    for (size_t i = 0; i < groups.size(); ++i) {
        const auto& s = stats[i];
        const double cx = left + slot * (static_cast<double>(i) + 0.5);
        const double bw = 50;
        os << "<g class=\"box\" data-group=\"" << groups[i].label << "\">\n";
        if (s.count > 0) {
            os << "<line x1=\"" << cx << "\" y1=\"" << y(s.whisker_low) << "\" x2=\"" << cx << "\" y2=\"" << y(s.q1)
               << "\" stroke=\"black\"/>\n";
            os << "<line x1=\"" << cx << "\" y1=\"" << y(s.q3) << "\" x2=\"" << cx << "\" y2=\""
               << y(s.whisker_high) << "\" stroke=\"black\"/>\n";
            os << "<rect x=\"" << cx - bw / 2 << "\" y=\"" << y(s.q3) << "\" width=\"" << bw << "\" height=\""
               << std::max(0.5, y(s.q1) - y(s.q3)) << "\" fill=\"#cfe0f3\" stroke=\"black\"/>\n";
            os << "<line class=\"median\" x1=\"" << cx - bw / 2 << "\" y1=\"" << y(s.median) << "\" x2=\""
               << cx + bw / 2 << "\" y2=\"" << y(s.median) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
            os << "<line class=\"mean\" x1=\"" << cx - bw / 2 << "\" y1=\"" << y(s.mean) << "\" x2=\"" << cx + bw / 2
               << "\" y2=\"" << y(s.mean) << "\" stroke=\"red\" stroke-width=\"2\"/>\n";
            for (double o : s.outliers) {
                os << "<circle cx=\"" << cx << "\" cy=\"" << y(o) << "\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n";
            }
        }
        const double ty = top + plot_h + 18;
        os << "<text x=\"" << cx << "\" y=\"" << ty << "\" text-anchor=\"middle\" font-size=\"11\">" << groups[i].label
           << "</text>\n";
        os << "<text class=\"median-value\" x=\"" << cx << "\" y=\"" << ty + 16
           << "\" text-anchor=\"middle\" font-size=\"10\">median=" << fmt(s.median) << "</text>\n";
        os << "<text class=\"mean-value\" x=\"" << cx << "\" y=\"" << ty + 30
           << "\" text-anchor=\"middle\" font-size=\"10\" fill=\"red\">mean=" << fmt(s.mean) << "</text>\n";
        os << "</g>\n";
    }
    os << "</svg>\n";
}

struct ReportArgs {
    std::vector<std::string> csvs;
    std::string out;
};

int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream&) {
    if (args.csvs.empty()) throw UsageError("report needs at least one CSV");
    std::vector<Group> groups;
    ordered_json meta;
    meta["command"] = "report";
    meta["inputs"] = ordered_json::array();
    for (const auto& c : args.csvs) {
        require_file(c, "metric CSV");
        const auto rows = read_metric_rows(c);
        meta["inputs"].push_back({{"file", fs::path(c).filename().string()},
                                  {"hash", read_comment_fields(c)["config-hash"]}});
        std::vector<std::string> sources;
        for (const auto& r : rows) {
            if (std::find(sources.begin(), sources.end(), r.source) == sources.end()) sources.push_back(r.source);
        }
        for (const auto& s : sources) {
            Group g;
            g.label = fs::path(c).stem().string() + (sources.size() > 1 ? ":" + s : "");
            for (const auto& r : rows) {
                if (r.source == s) g.rows.push_back(r);
            }
            groups.push_back(std::move(g));
        }
    }
    const std::string hash = hash_hex(config_hash(meta));
    fs::create_directories(args.out);
    std::ofstream summary(fs::path(args.out) / "summary.csv");
    summary << "# config-hash " << hash << "\ngroup,metric,count,mean,median,q1,q3\n";
    std::ofstream table(fs::path(args.out) / "summary.md");
    table << "<!-- " << kHashKey << " " << hash << " -->\n\n| group |";
    for (const auto& m : metric_columns()) table << " " << m << " mean | " << m << " median |";
    table << "\n|---|";
    for (size_t i = 0; i < metric_columns().size(); ++i) table << "---|---|";
    table << "\n";
    for (size_t col = 0; col < metric_columns().size(); ++col) {
        const auto& m = metric_columns()[col];
        write_box_svg(fs::path(args.out) / (m + ".svg"), m, groups, hash);
        for (const auto& g : groups) {
            const auto s = box_stats(metric_values(g, col));
            summary << g.label << ',' << m << ',' << s.count << ',' << fmt(s.mean) << ',' << fmt(s.median) << ','
                    << fmt(s.q1) << ',' << fmt(s.q3) << "\n";
        }
    }
    for (const auto& g : groups) {
        table << "| " << g.label << " |";
        for (size_t col = 0; col < metric_columns().size(); ++col) {
            const auto s = box_stats(metric_values(g, col));
            table << " " << std::setprecision(5) << s.mean << " | " << s.median << " |";
        }
        table << "\n";
    }
    out << "report for " << groups.size() << " group(s) -> " << args.out << ", config-hash " << hash << "\n";
    return kOk;
}

}  // namespace

std::map<std::string, std::string> read_comment_fields(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("# ", 0) != 0) continue;
        const std::string body = line.substr(2);
        const auto sp = body.find(' ');
        if (sp == std::string::npos) continue;
        out.emplace(body.substr(0, sp), body.substr(sp + 1));
    }
    return out;
}

std::vector<MetricRow> read_metric_rows(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open " + path.string());
    std::vector<MetricRow> rows;
    std::string line;
    bool header = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            header = true;
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 2 + metric_columns().size()) {
            throw UsageError(path.string() + ": malformed row: " + line);
        }
        if (cells[0] == "mean" || cells[0] == "median") continue;
        std::vector<double> v;
        for (size_t i = 2; i < cells.size(); ++i) v.push_back(std::stod(cells[i]));
        MetricRow r;
        r.id = cells[0];
        r.source = cells[1];
        r.values = {v[0], v[1], v[2], v[3], v[4]};
        r.epe = v[5];
        rows.push_back(std::move(r));
    }
    if (!header) throw UsageError(path.string() + ": no header");
    return rows;
}

BoxStats box_stats(std::vector<double> values) {
    std::erase_if(values, [](double v) { return !std::isfinite(v); });
    BoxStats s;
    s.count = values.size();
    if (values.empty()) {
        s.mean = s.median = s.q1 = s.q3 = s.whisker_low = s.whisker_high = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    std::sort(values.begin(), values.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(values.size() - 1);
        const auto i = static_cast<size_t>(std::floor(pos));
        const double frac = pos - static_cast<double>(i);
        return i + 1 < values.size() ? values[i] + frac * (values[i + 1] - values[i]) : values[i];
    };
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    s.median = quantile(0.5);
    s.q1 = quantile(0.25);
    s.q3 = quantile(0.75);
    const double iqr = s.q3 - s.q1;
    s.whisker_low = s.q1;
    s.whisker_high = s.q3;
    for (double v : values) {
        if (v < s.q1 - 1.5 * iqr || v > s.q3 + 1.5 * iqr) {
            s.outliers.push_back(v);
        } else {
            s.whisker_low = std::min(s.whisker_low, v);
            s.whisker_high = std::max(s.whisker_high, v);
        }
    }
    return s;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint registration and fusion of unaligned multimodal medical images", "regfuse"};
    app.require_subcommand(1);

    PrepareArgs prep;
    auto* sp = app.add_subcommand("prepare", "Split a dataset and cache test deformations");
    sp->add_option("--root", prep.root, "Dataset root")->required();
    sp->add_option("--modality", prep.modality, "Modality pair directory, e.g. CT-MRI")->required();
    sp->add_option("--out", prep.out, "Output directory")->required();
    sp->add_option("--seed", prep.seed, "Split and deformation seed");
    sp->add_option("--size", prep.size, "Expected image side length");
    sp->add_option("--test-count", prep.test_count, "Test pairs (default per modality)");
    sp->add_option("--config", prep.config, "Run config (deformation settings)");
    sp->add_option("--set", prep.overrides, "Config override key=value");

    TrainArgs train;
    auto* st = app.add_subcommand("train", "Train the network");
    st->add_option("--config", train.config, "Run config JSON");
    st->add_option("--set", train.overrides, "Config override key=value");
    st->add_option("--manifest", train.manifest, "Manifest from prepare");
    st->add_option("--data", train.data, "Dataset root (overrides the manifest's)");
    st->add_option("--out", train.out, "Output directory")->required();
    st->add_option("--resume", train.resume, "Checkpoint to resume from");

    FuseArgs fuse;
    auto* sf = app.add_subcommand("fuse", "Register and fuse one image pair");
    sf->add_option("--checkpoint", fuse.checkpoint)->required();
    sf->add_option("--a", fuse.a, "Moving non-MRI image")->required();
    sf->add_option("--b", fuse.b, "MRI image")->required();
    sf->add_option("--out", fuse.out, "Output directory")->required();

    EvalArgs eval;
    auto* se = app.add_subcommand("eval", "Score the test split");
    se->add_option("--checkpoint", eval.checkpoint)->required();
    se->add_option("--manifest", eval.manifest)->required();
    se->add_option("--data", eval.data, "Dataset root (overrides the manifest's)");
    se->add_option("--out", eval.out, "CSV path")->required();
    se->add_option("--source", eval.source, "Which image scores as A: both, registered or label");
    se->add_option("--limit", eval.limit, "Score only the first N test pairs");

    ReportArgs report;
    auto* sr = app.add_subcommand("report", "Box plots and summary table from metric CSVs");
    sr->add_option("csv", report.csvs, "Metric CSVs")->required();
    sr->add_option("--out", report.out, "Output directory")->required();

    std::string synth_out;
    std::string synth_modality = "SYN-MRI";
    size_t synth_count = 8;
    int64_t synth_size = 64;
    uint64_t synth_seed = 0;
    auto* sy = app.add_subcommand("synth", "Write a synthetic shapes dataset");
    sy->add_option("--out", synth_out, "Dataset root")->required();
    sy->add_option("--modality", synth_modality);
    sy->add_option("--count", synth_count);
    sy->add_option("--size", synth_size);
    sy->add_option("--seed", synth_seed);

    std::string init_out;
    std::vector<std::string> init_overrides;
    auto* si = app.add_subcommand("init-config", "Write the default run config");
    si->add_option("--out", init_out)->required();
    si->add_option("--set", init_overrides, "Config override key=value");

    std::vector<const char*> argv{"regfuse"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsageError;
    }

    try {
        if (*sp) return cmd_prepare(prep, out, err);
        if (*st) return cmd_train(train, out, err);
        if (*sf) return cmd_fuse(fuse, out, err);
        if (*se) return cmd_eval(eval, out, err);
        if (*sr) return cmd_report(report, out, err);
        if (*sy) {
            write_synthetic_dataset(synth_out, synth_modality, synth_count, synth_size, synth_seed);
            out << "wrote " << synth_count << " synthetic pairs to " << synth_out << "\n";
            return kOk;
        }
        if (*si) {
            save_run_config(init_out, apply_overrides(RunConfig{}, init_overrides));
            return kOk;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeFailure;
    }
    return kUsageError;
}

}  // namespace regfuse::cli
