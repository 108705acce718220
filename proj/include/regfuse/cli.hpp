// Command-line entry points: prepare, train, fuse, eval, report, synth, init-config.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or ingest error. REGFUSE_DEVICE
// overrides the configured device. Every artifact carries the hash of the effective
// configuration that produced it.

#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "regfuse/metrics.hpp"

namespace regfuse::cli {

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kUsageError = 2 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Runs one command; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "# key value" comment lines of a manifest or CSV, keyed by the first word.
std::map<std::string, std::string> read_comment_fields(const std::filesystem::path& path);

// Per-image rows of a metric CSV written by eval (summary rows are skipped).
std::vector<MetricRow> read_metric_rows(const std::filesystem::path& path);

struct BoxStats {
    size_t count = 0;
    double mean = 0, median = 0, q1 = 0, q3 = 0;
    double whisker_low = 0, whisker_high = 0;  // most extreme values within 1.5 IQR of the box
    std::vector<double> outliers;
};

// Quartiles by linear interpolation between order statistics. NaNs are ignored.
BoxStats box_stats(std::vector<double> values);

}  // namespace regfuse::cli
