#pragma once

#include <string>
#include <vector>

#include "lrq/reconstruct.hpp"

namespace lrq {

struct CalibConfig {
    std::string source = "synthetic";  // synthetic | text
    std::string path;                  // text mode only
    int n_samples = 32;
    int seq_len = 64;
};

// One command run: schema-validated JSON document plus CLI overrides.
struct RunConfig {
    std::string model_path;
    std::string out_dir = "out";
    PipelineMode mode = PipelineMode::weight_only;
    ReconConfig recon;
    CalibConfig calib;
};

RunConfig parse_run_config_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

PipelineMode parse_mode(const std::string& s);
RoundVariant parse_variant(const std::string& s);
const char* variant_name(RoundVariant v);

// "4x4096x4096+3x4096x11008" -> layer dims with multiplicities
std::vector<LayerDims> parse_dims_spec(const std::string& spec);

CalibrationSet build_calibration(const CalibConfig& c, int64_t vocab, uint64_t seed);

// Writes out_dir/quantized.lrqm, out_dir/report.json, out_dir/trajectory.csv.
// Reruns with the same config and seed are byte-identical.
void cmd_quantize(const RunConfig& cfg);

// Teacher-forced perplexity of a container on the configured corpus; writes
// out_dir/eval.json and returns the value.
double cmd_eval(const std::string& model_path, const CalibConfig& calib, uint64_t seed, const std::string& out_dir);

// Accumulated per-block RMSE curves for calibration and unseen samples;
// writes one CSV row per block per tag.
void cmd_rmse(const std::string& fp_path, const std::string& q_path, const CalibConfig& calib, uint64_t seed,
              const std::string& out_csv);

// One quantize+evaluate per value along the axis ("rank" or
// "calib_samples"), shared seed, CSV sorted by value.
void cmd_sweep(const RunConfig& cfg, const std::string& axis, std::vector<int64_t> values,
               const std::string& out_csv);

// Learnable-parameter ratio for a dims spec; optionally also written as CSV.
RatioResult cmd_ratio(const std::string& dims_spec, int64_t rank, const std::string& out_csv);

void cmd_make_model(const ModelConfig& cfg, uint64_t seed, const std::string& out_path);

}  // namespace lrq
