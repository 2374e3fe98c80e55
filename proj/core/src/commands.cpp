#include "lrq/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "lrq/container.hpp"
#include "lrq/perplexity.hpp"

namespace lrq {

namespace {

using nlohmann::json;

std::string fmt_float(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

uint64_t salt_mix(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + salt;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw io_error("write failed for " + path);
}

void check_keys(const json& j, const std::set<std::string>& allowed, const char* where) {
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) throw config_error(std::string(where) + ": unknown key \"" + k + "\"");
    }
}

// Calibration sets for the unseen tag: a fresh seed for synthetic data, the
// following chunk of the file for text data.
CalibrationSet build_unseen(const CalibConfig& c, int64_t vocab, uint64_t seed) {
    if (c.source == "text") {
        CalibrationSet both = make_calibration_text(c.path, 2 * c.n_samples, c.seq_len);
        both.sequences.erase(both.sequences.begin(), both.sequences.begin() + c.n_samples);
        return both;
    }
    return make_calibration_synthetic(vocab, c.n_samples, c.seq_len, salt_mix(seed, 0x00d5ee));
}

}  // namespace

PipelineMode parse_mode(const std::string& s) {
    if (s == "per-tensor-static") return PipelineMode::per_tensor_static_wa;
    if (s == "per-token") return PipelineMode::per_token_wa;
    if (s == "weight-only") return PipelineMode::weight_only;
    throw config_error("unknown mode \"" + s + "\" (per-tensor-static|per-token|weight-only)");
}

RoundVariant parse_variant(const std::string& s) {
    if (s == "rtn") return RoundVariant::rtn;
    if (s == "flexround") return RoundVariant::flexround;
    if (s == "lrq") return RoundVariant::lrq;
    if (s == "lrq-no-bias") return RoundVariant::lrq_no_bias;
    throw config_error("unknown variant \"" + s + "\" (rtn|flexround|lrq|lrq-no-bias)");
}

const char* variant_name(RoundVariant v) {
    switch (v) {
        case RoundVariant::rtn: return "rtn";
        case RoundVariant::flexround: return "flexround";
        case RoundVariant::lrq: return "lrq";
        case RoundVariant::lrq_no_bias: return "lrq-no-bias";
    }
    return "?";
}

RunConfig parse_run_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw config_error(std::string("config: invalid JSON: ") + e.what());
    }
    static const std::set<std::string> allowed = {
        "model",      "out_dir",    "mode",    "variant", "seed",   "iterations", "batch_size",
        "lr",         "adam_beta1", "adam_beta2", "adam_eps", "quant_drop_prob", "bits_w",
        "bits_a",     "bits_kv",    "rank",    "u2_std",  "eval_interval", "calib"};
    check_keys(j, allowed, "config");
    RunConfig cfg;
    try {
        if (j.contains("model")) cfg.model_path = j["model"].get<std::string>();
        if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
        if (j.contains("mode")) cfg.mode = parse_mode(j["mode"].get<std::string>());
        if (j.contains("variant")) cfg.recon.variant = parse_variant(j["variant"].get<std::string>());
        if (j.contains("seed")) cfg.recon.seed = j["seed"].get<uint64_t>();
        if (j.contains("iterations")) cfg.recon.iterations = j["iterations"].get<int64_t>();
        if (j.contains("batch_size")) cfg.recon.batch_size = j["batch_size"].get<int64_t>();
        if (j.contains("lr")) cfg.recon.lr = j["lr"].get<double>();
        if (j.contains("adam_beta1")) cfg.recon.adam_beta1 = j["adam_beta1"].get<double>();
        if (j.contains("adam_beta2")) cfg.recon.adam_beta2 = j["adam_beta2"].get<double>();
        if (j.contains("adam_eps")) cfg.recon.adam_eps = j["adam_eps"].get<double>();
        if (j.contains("quant_drop_prob")) cfg.recon.quant_drop_prob = j["quant_drop_prob"].get<double>();
        if (j.contains("bits_w")) cfg.recon.bits_w = j["bits_w"].get<int>();
        if (j.contains("bits_a")) cfg.recon.bits_a = j["bits_a"].get<int>();
        if (j.contains("bits_kv")) cfg.recon.bits_kv = j["bits_kv"].get<int>();
        if (j.contains("rank")) cfg.recon.rank = j["rank"].get<int>();
        if (j.contains("u2_std")) cfg.recon.u2_std = j["u2_std"].get<float>();
        if (j.contains("eval_interval")) cfg.recon.eval_interval = j["eval_interval"].get<int64_t>();
        if (j.contains("calib")) {
            const json& c = j["calib"];
            check_keys(c, {"source", "path", "n_samples", "seq_len"}, "config.calib");
            if (c.contains("source")) cfg.calib.source = c["source"].get<std::string>();
            if (c.contains("path")) cfg.calib.path = c["path"].get<std::string>();
            if (c.contains("n_samples")) cfg.calib.n_samples = c["n_samples"].get<int>();
            if (c.contains("seq_len")) cfg.calib.seq_len = c["seq_len"].get<int>();
        }
    } catch (const json::exception& e) {
        throw config_error(std::string("config: bad value type: ") + e.what());
    }
    if (cfg.calib.source != "synthetic" && cfg.calib.source != "text") {
        throw config_error("config: calib.source must be synthetic or text");
    }
    cfg.recon.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_run_config_json(text);
}

std::vector<LayerDims> parse_dims_spec(const std::string& spec) {
    std::vector<LayerDims> dims;
    size_t pos = 0;
    while (pos < spec.size()) {
        size_t end = spec.find('+', pos);
        if (end == std::string::npos) end = spec.size();
        const std::string term = spec.substr(pos, end - pos);
        LayerDims d;
        if (std::sscanf(term.c_str(), "%ldx%ldx%ld", &d.count, &d.c_out, &d.c_in) != 3) {
            throw config_error("dims spec term \"" + term + "\" (want COUNTxC_OUTxC_IN)");
        }
        dims.push_back(d);
        pos = end + 1;
    }
    if (dims.empty()) throw config_error("empty dims spec");
    return dims;
}

CalibrationSet build_calibration(const CalibConfig& c, int64_t vocab, uint64_t seed) {
    if (c.source == "text") return make_calibration_text(c.path, c.n_samples, c.seq_len);
    return make_calibration_synthetic(vocab, c.n_samples, c.seq_len, salt_mix(seed, 0xca11b));
}

void cmd_quantize(const RunConfig& cfg) {
    if (cfg.model_path.empty()) throw config_error("quantize: config needs a \"model\" path");
    const Model fp = load_model(cfg.model_path);
    const CalibrationSet calib = build_calibration(cfg.calib, fp.config.vocab_size, cfg.recon.seed);

    QuantizeResult qr = quantize_model(fp, calib, cfg.recon, cfg.mode);

    std::filesystem::create_directories(cfg.out_dir);
    save_model(qr.model, cfg.out_dir + "/quantized.lrqm");

    json rep;
    rep["mode"] = pipeline_mode_name(cfg.mode);
    rep["variant"] = variant_name(cfg.recon.variant);
    rep["bits_w"] = cfg.recon.bits_w;
    rep["seed"] = cfg.recon.seed;
    rep["blocks"] = json::array();
    std::string traj = "block,iteration,loss\n";
    for (const BlockReport& b : qr.report.blocks) {
        rep["blocks"].push_back(
            {{"index", b.index}, {"initial_loss", b.initial_loss}, {"final_loss", b.final_loss}});
        for (const auto& [it, loss] : b.trajectory) {
            traj += std::to_string(b.index) + "," + std::to_string(it) + "," + fmt_float(loss) + "\n";
        }
        std::fprintf(stderr, "block %ld: initial %.6g final %.6g (%.2f s)\n", long(b.index), b.initial_loss,
                     b.final_loss, b.wall_seconds);
    }
    write_text(cfg.out_dir + "/report.json", rep.dump(2) + "\n");
    write_text(cfg.out_dir + "/trajectory.csv", traj);
}

double cmd_eval(const std::string& model_path, const CalibConfig& calib, uint64_t seed, const std::string& out_dir) {
    const Model m = load_model(model_path);
    const CalibrationSet corpus = build_calibration(calib, m.config.vocab_size, seed);
    const PplResult r = evaluate_ppl(m, corpus);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        json j{{"ppl", r.ppl}, {"nll_sum", r.nll_sum}, {"tokens", r.tokens}};
        write_text(out_dir + "/eval.json", j.dump(2) + "\n");
    }
    std::printf("ppl %.6f over %ld tokens\n", r.ppl, long(r.tokens));
    return r.ppl;
}

void cmd_rmse(const std::string& fp_path, const std::string& q_path, const CalibConfig& calib, uint64_t seed,
              const std::string& out_csv) {
    const Model fp = load_model(fp_path);
    const Model q = load_model(q_path);
    const CalibrationSet cal = build_calibration(calib, fp.config.vocab_size, seed);
    const CalibrationSet unseen = build_unseen(calib, fp.config.vocab_size, seed);

    const std::vector<double> curve_cal = accumulated_rmse(fp, q, cal.sequences);
    const std::vector<double> curve_un = accumulated_rmse(fp, q, unseen.sequences);

    std::string csv = "block,tag,rmse\n";
    for (size_t k = 0; k < curve_cal.size(); ++k) {
        csv += std::to_string(k) + ",calibration," + fmt_float(curve_cal[k]) + "\n";
    }
    for (size_t k = 0; k < curve_un.size(); ++k) {
        csv += std::to_string(k) + ",unseen," + fmt_float(curve_un[k]) + "\n";
    }
    write_text(out_csv, csv);
}

void cmd_sweep(const RunConfig& cfg, const std::string& axis, std::vector<int64_t> values,
               const std::string& out_csv) {
    if (values.empty()) throw config_error("sweep: values must be non-empty");
    if (axis != "rank" && axis != "calib_samples") {
        throw config_error("sweep: axis must be rank or calib_samples");
    }
    std::sort(values.begin(), values.end());
    if (std::adjacent_find(values.begin(), values.end()) != values.end()) {
        throw config_error("sweep: duplicate values rejected");
    }
    if (cfg.model_path.empty()) throw config_error("sweep: config needs a \"model\" path");
    const Model fp = load_model(cfg.model_path);

    std::string csv = "value,calib_loss,heldout_rmse,ppl\n";
    for (int64_t v : values) {
        RunConfig point = cfg;
        if (axis == "rank") {
            point.recon.rank = int(v);
        } else {
            point.calib.n_samples = int(v);
        }
        const CalibrationSet calib = build_calibration(point.calib, fp.config.vocab_size, point.recon.seed);
        const CalibrationSet unseen = build_unseen(point.calib, fp.config.vocab_size, point.recon.seed);

        QuantizeResult qr = quantize_model(fp, calib, point.recon, point.mode);
        double calib_loss = 0.0;
        for (const BlockReport& b : qr.report.blocks) calib_loss += b.final_loss;
        if (!qr.report.blocks.empty()) calib_loss /= double(qr.report.blocks.size());
        const std::vector<double> curve = accumulated_rmse(fp, qr.model, unseen.sequences);
        const double heldout = curve.empty() ? 0.0 : curve.back();
        const double ppl = evaluate_ppl(qr.model, unseen).ppl;
        csv += std::to_string(v) + "," + fmt_float(calib_loss) + "," + fmt_float(heldout) + "," + fmt_float(ppl) +
               "\n";
        std::fprintf(stderr, "sweep %s=%ld: calib_loss %.6g heldout_rmse %.6g ppl %.6g\n", axis.c_str(), long(v),
                     calib_loss, heldout, ppl);
    }
    write_text(out_csv, csv);
}

RatioResult cmd_ratio(const std::string& dims_spec, int64_t rank, const std::string& out_csv) {
    const RatioResult r = learnable_param_ratio(parse_dims_spec(dims_spec), rank);
    std::printf("l2u2_ratio %.2f%%  full_ratio %.2f%%  (%ld / %ld learnable, %ld weights)\n", r.l2u2_percent,
                r.full_percent, long(r.l2u2_count), long(r.full_count), long(r.weight_count));
    if (!out_csv.empty()) {
        std::string csv = "rank,l2u2_percent,full_percent,l2u2_count,full_count,weight_count\n";
        csv += std::to_string(rank) + "," + fmt_float(r.l2u2_percent) + "," + fmt_float(r.full_percent) + "," +
               std::to_string(r.l2u2_count) + "," + std::to_string(r.full_count) + "," +
               std::to_string(r.weight_count) + "\n";
        write_text(out_csv, csv);
    }
    return r;
}

void cmd_make_model(const ModelConfig& cfg, uint64_t seed, const std::string& out_path) {
    save_model(make_toy_model(cfg, seed), out_path);
}

}  // namespace lrq
