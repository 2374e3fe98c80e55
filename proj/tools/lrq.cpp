#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "lrq/commands.hpp"
#include "lrq/errors.hpp"

namespace {

struct Overrides {
    std::string config_path;
    std::string out_dir;
    std::string mode, variant;
    int64_t seed = -1;
    int bits_w = 0, bits_a = 0, bits_kv = -1, rank = -1;
};

void add_common(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--config", ov.config_path, "JSON run configuration");
    cmd->add_option("--seed", ov.seed, "override the config seed");
    cmd->add_option("--out", ov.out_dir, "output directory");
    cmd->add_option("--mode", ov.mode, "per-tensor-static|per-token|weight-only");
    cmd->add_option("--variant", ov.variant, "rtn|flexround|lrq|lrq-no-bias");
    cmd->add_option("--bits-w", ov.bits_w, "weight bits");
    cmd->add_option("--bits-a", ov.bits_a, "activation bits");
    cmd->add_option("--bits-kv", ov.bits_kv, "KV cache bits (0 disables)");
    cmd->add_option("--rank", ov.rank, "low-rank dimension (0 = per-layer min dim)");
}

lrq::RunConfig resolve(const Overrides& ov) {
    lrq::RunConfig cfg;
    if (!ov.config_path.empty()) cfg = lrq::load_run_config(ov.config_path);
    if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
    if (!ov.mode.empty()) cfg.mode = lrq::parse_mode(ov.mode);
    if (!ov.variant.empty()) cfg.recon.variant = lrq::parse_variant(ov.variant);
    if (ov.seed >= 0) cfg.recon.seed = uint64_t(ov.seed);
    if (ov.bits_w > 0) cfg.recon.bits_w = ov.bits_w;
    if (ov.bits_a > 0) cfg.recon.bits_a = ov.bits_a;
    if (ov.bits_kv >= 0) cfg.recon.bits_kv = ov.bits_kv;
    if (ov.rank >= 0) cfg.recon.rank = ov.rank;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"post-training quantization toolkit (low-rank learned rounding)"};
    app.require_subcommand(1);

    Overrides ov;
    std::string model_path, fp_path, q_path, axis, values_csv, dims_spec, out_path;
    int64_t ratio_rank = 0;
    lrq::ModelConfig make_cfg;
    make_cfg.vocab_size = 256;
    make_cfg.d_model = 64;
    make_cfg.n_layers = 3;
    make_cfg.n_heads = 4;
    make_cfg.d_ff = 128;
    int64_t make_seed = 0;

    CLI::App* c_quant = app.add_subcommand("quantize", "block-wise reconstruction of a model container");
    add_common(c_quant, ov);

    CLI::App* c_eval = app.add_subcommand("eval", "teacher-forced perplexity of a container");
    c_eval->add_option("--model", model_path, "model container")->required();
    add_common(c_eval, ov);

    CLI::App* c_rmse = app.add_subcommand("rmse", "accumulated per-block RMSE between two containers");
    c_rmse->add_option("--fp-model", fp_path, "FP model container")->required();
    c_rmse->add_option("--q-model", q_path, "quantized model container")->required();
    add_common(c_rmse, ov);

    CLI::App* c_sweep = app.add_subcommand("sweep", "quantize+evaluate along an axis");
    c_sweep->add_option("--axis", axis, "rank|calib_samples")->required();
    c_sweep->add_option("--values", values_csv, "comma-separated integers")->required();
    add_common(c_sweep, ov);

    CLI::App* c_ratio = app.add_subcommand("ratio", "learnable-parameter ratio for a dims spec");
    c_ratio->add_option("--dims", dims_spec, "e.g. 4x4096x4096+3x4096x11008")->required();
    c_ratio->add_option("--rank", ratio_rank, "low-rank dimension")->required();
    c_ratio->add_option("--out", ov.out_dir, "optional output directory");

    CLI::App* c_make = app.add_subcommand("make-model", "write a seeded toy model container");
    c_make->add_option("--vocab", make_cfg.vocab_size, "vocabulary size");
    c_make->add_option("--d", make_cfg.d_model, "model width");
    c_make->add_option("--layers", make_cfg.n_layers, "transformer blocks");
    c_make->add_option("--heads", make_cfg.n_heads, "attention heads");
    c_make->add_option("--dff", make_cfg.d_ff, "FFN width");
    c_make->add_option("--seed", make_seed, "weight seed");
    c_make->add_option("--out", out_path, "output container path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*c_quant) {
            lrq::cmd_quantize(resolve(ov));
        } else if (*c_eval) {
            lrq::RunConfig cfg = resolve(ov);
            lrq::cmd_eval(model_path, cfg.calib, cfg.recon.seed, cfg.out_dir);
        } else if (*c_rmse) {
            lrq::RunConfig cfg = resolve(ov);
            lrq::cmd_rmse(fp_path, q_path, cfg.calib, cfg.recon.seed, cfg.out_dir + "/rmse.csv");
        } else if (*c_sweep) {
            lrq::RunConfig cfg = resolve(ov);
            std::vector<int64_t> values;
            size_t pos = 0;
            while (pos < values_csv.size()) {
                size_t end = values_csv.find(',', pos);
                if (end == std::string::npos) end = values_csv.size();
                values.push_back(std::stoll(values_csv.substr(pos, end - pos)));
                pos = end + 1;
            }
            lrq::cmd_sweep(cfg, axis, values, cfg.out_dir + "/sweep.csv");
        } else if (*c_ratio) {
            lrq::cmd_ratio(dims_spec, ratio_rank, ov.out_dir.empty() ? "" : ov.out_dir + "/ratio.csv");
        } else if (*c_make) {
            lrq::cmd_make_model(make_cfg, uint64_t(make_seed), out_path);
        }
    } catch (const lrq::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const lrq::dimension_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const lrq::numeric_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const lrq::io_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
