#include "doctest_torch.hpp"

#include <cmath>
#include <regex>
#include <sstream>

#include "regfuse/cli.hpp"
#include "regfuse/data.hpp"
#include "regfuse/deformation.hpp"
#include "regfuse/imaging.hpp"
#include "support.hpp"

using namespace regfuse;
using regfuse::test::slurp;
using regfuse::test::TempDir;
namespace fs = std::filesystem;

namespace {

int cli_run(std::vector<std::string> args, std::string* out_text = nullptr) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (out_text) *out_text = out.str() + err.str();
    return code;
}

// Tiny dataset, manifest with three test pairs, a tiny config and a one-step checkpoint.
struct Workspace {
    TempDir dir{"cli"};
    fs::path data, prep, cfg, run;

    Workspace() {
        data = dir / "data";
        prep = dir / "prep";
        cfg = dir / "cfg.json";
        run = dir / "run";
        REQUIRE(cli_run({"synth", "--out", data.string(), "--modality", "SYN-MRI", "--count", "6", "--size", "32"}) == 0);
        REQUIRE(cli_run({"init-config", "--out", cfg.string(), "--set", "model.levels=2", "--set", "model.fusion_blocks=2",
                         "--set", "model.token_width=32", "--set", "model.shallow_channels=8", "--set",
                         "model.restormer_heads=2", "--set", "model.transformer_heads=4", "--set",
                         "model.classifier_hidden=16", "--set", "model.reg_hidden=16", "--set",
                         "model.fusion_channels=16", "--set", "model.image_size=32", "--set", "train.batch_size=2",
                         "--set", "train.epochs=2", "--set", "train.deformation.translation_px=2", "--set",
                         "train.deformation.rotation_deg=3", "--set", "train.deformation.elastic_px=1.5"}) == 0);
        REQUIRE(cli_run({"prepare", "--root", data.string(), "--modality", "SYN-MRI", "--out", prep.string(), "--size", "32",
                         "--test-count", "3", "--seed", "4", "--config", cfg.string()}) == 0);
    }

    void train(const std::vector<std::string>& extra = {}) {
        std::vector<std::string> args = {"train", "--config", cfg.string(), "--manifest", (prep / "manifest.txt").string(),
                                         "--out", run.string()};
        args.insert(args.end(), extra.begin(), extra.end());
        REQUIRE(cli_run(args) == 0);
    }
};

std::vector<std::string> data_lines(const fs::path& p) {
    std::vector<std::string> out;
    std::istringstream is(slurp(p));
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line[0] != '#') out.push_back(line);
    }
    return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("prepare writes a reproducible manifest and cached test fields") {
    Workspace ws;
    const auto manifest = slurp(ws.prep / "manifest.txt");
    CHECK(manifest.find("# config-hash ") == 0);
    int tests = 0, trains = 0;
    for (const auto& l : data_lines(ws.prep / "manifest.txt")) {
        tests += l.ends_with(" test");
        trains += l.ends_with(" train");
    }
    CHECK(tests == 3);
    CHECK(trains == 3);
    CHECK(std::distance(fs::directory_iterator(ws.prep / "fields"), fs::directory_iterator{}) == 3);

    const fs::path again = ws.dir / "prep2";
    REQUIRE(cli_run({"prepare", "--root", ws.data.string(), "--modality", "SYN-MRI", "--out", again.string(), "--size",
                     "32", "--test-count", "3", "--seed", "4", "--config", ws.cfg.string()}) == 0);
    CHECK(slurp(again / "manifest.txt") == manifest);
    for (const auto& e : fs::directory_iterator(ws.prep / "fields")) {
        CHECK(slurp(e.path()) == slurp(again / "fields" / e.path().filename()));
    }
}

TEST_CASE("prepare on a bad root exits with a usage error and a report") {
    TempDir dir("bad");
    std::string text;
    CHECK(cli_run({"prepare", "--root", (dir / "missing").string(), "--modality", "CT-MRI", "--out",
                   (dir / "out").string()},
                  &text) == 2);
    CHECK(slurp(dir / "out" / "ingest_report.txt").find("failure") != std::string::npos);
}

TEST_CASE("usage errors") {
    CHECK(cli_run({}) == 2);
    CHECK(cli_run({"eval", "--checkpoint", "/nonexistent.rfck", "--manifest", "/nonexistent.txt", "--out", "x.csv"}) == 2);
    TempDir dir("usage");
    CHECK(cli_run({"init-config", "--out", (dir / "c.json").string(), "--set", "model.bogus=1"}) == 2);
    CHECK(cli_run({"--help"}) == 0);
}

TEST_CASE("environment variable overrides the device") {
    Workspace ws;
    ::setenv("REGFUSE_DEVICE", "cuda:7", 1);
    std::string text;
    const int code = cli_run({"train", "--config", ws.cfg.string(), "--manifest", (ws.prep / "manifest.txt").string(),
                              "--out", ws.run.string()},
                             &text);
    ::unsetenv("REGFUSE_DEVICE");
    CHECK(code == 2);
    CHECK(text.find("cuda:7") != std::string::npos);
}

TEST_CASE("train, fuse and eval on a toy manifest") {
    Workspace ws;
    ws.train({"--set", "train.max_steps=1"});
    const auto ckpt = ws.run / "last.rfck";
    REQUIRE(fs::exists(ckpt));
    CHECK(slurp(ws.run / "loss_log.csv").find("# config-hash") == std::string::npos);  // no epoch finished yet
    CHECK(slurp(ws.run / "step_log.csv").find("# config-hash") == 0);

    const fs::path fused = ws.dir / "fused";
    REQUIRE(cli_run({"fuse", "--checkpoint", ckpt.string(), "--a", (ws.data / "SYN-MRI/000/other.png").string(), "--b",
                     (ws.data / "SYN-MRI/000/mri.png").string(), "--out", fused.string()}) == 0);
    const auto img = load_png(fused / "fused.png");
    CHECK(img.height() == 32);
    CHECK(img.width() == 32);
    CHECK(load_png(fused / "registered.png").height() == 32);
    CHECK(load_field(fused / "phi.rfdf").height() == 32);
    CHECK(read_png_text(fused / "fused.png").at(0).first == "regfuse-config-hash");

    const fs::path csv = ws.dir / "eval.csv";
    REQUIRE(cli_run({"eval", "--checkpoint", ckpt.string(), "--manifest", (ws.prep / "manifest.txt").string(), "--out",
                     csv.string()}) == 0);
    const auto lines = data_lines(csv);
    REQUIRE(lines.size() == 1 + 3 * 2 + 4);
    CHECK(lines[0] == "id,source,q_abf,q_cv,q_ssim,q_vif,q_s,epe");
    int registered = 0, label = 0, summaries = 0;
    for (size_t i = 1; i < lines.size(); ++i) {
        registered += lines[i].find(",registered,") != std::string::npos && lines[i].rfind("SYN", 0) == 0;
        label += lines[i].find(",label,") != std::string::npos && lines[i].rfind("SYN", 0) == 0;
        summaries += lines[i].rfind("mean,", 0) == 0 || lines[i].rfind("median,", 0) == 0;
    }
    CHECK(registered == 3);
    CHECK(label == 3);
    CHECK(summaries == 4);
    CHECK(cli::read_comment_fields(csv).count("config-hash") == 1);
}

TEST_CASE("fuse rejects mismatched image sizes") {
    Workspace ws;
    ws.train({"--set", "train.max_steps=1"});
    save_png(ws.dir / "small.png", make_image(torch::zeros({1, 16, 16})));
    CHECK(cli_run({"fuse", "--checkpoint", (ws.run / "last.rfck").string(), "--a", (ws.dir / "small.png").string(), "--b",
                   (ws.data / "SYN-MRI/000/mri.png").string(), "--out", (ws.dir / "f").string()}) == 2);
}

TEST_CASE("report annotations equal statistics recomputed from the CSV") {
    TempDir dir("report");
    const fs::path csv = dir / "scores.csv";
    {
        std::ofstream os(csv);
        os << "# config-hash 0123456789abcdef\nid,source,q_abf,q_cv,q_ssim,q_vif,q_s,epe\n";
        const double abf[] = {0.31, 0.42, 0.27, 0.55, 0.38};
        for (int i = 0; i < 5; ++i) {
            os << "X/" << i << ",registered," << abf[i] << "," << 100 + 10 * i << ",0.9,0.3,0.7," << 0.5 * i << "\n";
        }
        os << "mean,registered,0,0,0,0,0,0\n";
    }
    REQUIRE(cli_run({"report", csv.string(), "--out", (dir / "rep").string()}) == 0);
    const auto svg = slurp(dir / "rep" / "q_abf.svg");
    std::smatch m;
    REQUIRE(std::regex_search(svg, m, std::regex("median=([-0-9.eE+]+)")));
    const double median = std::stod(m[1]);
    REQUIRE(std::regex_search(svg, m, std::regex("mean=([-0-9.eE+]+)")));
    const double mean = std::stod(m[1]);

    const auto rows = cli::read_metric_rows(csv);
    REQUIRE(rows.size() == 5);
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.values.q_abf);
    double sum = 0;
    for (double x : v) sum += x;
    std::sort(v.begin(), v.end());
    CHECK(mean == doctest::Approx(sum / 5).epsilon(1e-9));
    CHECK(median == doctest::Approx(v[2]).epsilon(1e-9));
    CHECK(svg.find("stroke=\"red\"") != std::string::npos);
    CHECK(svg.find("regfuse-config-hash") != std::string::npos);
    CHECK(fs::exists(dir / "rep" / "summary.csv"));
    CHECK(fs::exists(dir / "rep" / "epe.svg"));
}

TEST_CASE("box statistics") {
    auto s = cli::box_stats({1, 2, 3, 4, 100});
    CHECK(s.count == 5);
    CHECK(s.median == 3);
    CHECK(s.q1 == 2);
    CHECK(s.q3 == 4);
    CHECK(s.whisker_high == 4);
    REQUIRE(s.outliers.size() == 1);
    CHECK(s.outliers[0] == 100);
    CHECK(cli::box_stats({std::nan(""), 2.0}).count == 1);
}

}  // TEST_SUITE
