#include "choose/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "choose/checkpoint.hpp"
#include "choose/evaluate.hpp"
#include "choose/train.hpp"

namespace choose {

namespace {

int env_threads() {
    if (const char* env = std::getenv("CHOOSE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 0;
}

std::string default_model_id(const std::string& ckpt_dir) {
    auto name = std::filesystem::path(ckpt_dir).filename().string();
    return name.empty() ? ckpt_dir : name;
}

struct EvalArgs {
    std::string ckpt;
    int modulation = 16;
    double snr_db = 30.0;
    long n_tasks = 100000;
    int block_len = 11;
    std::string pilots = "";
    std::uint64_t seed = 0;
    int threads = 0;
    std::string out_csv;
    std::string model_id;
    bool no_cache = false;
};

void add_eval_style_options(CLI::App* cmd, EvalArgs& a, bool with_ckpt) {
    if (with_ckpt) cmd->add_option("--ckpt", a.ckpt, "checkpoint directory")->required();
    cmd->add_option("--mod", a.modulation, "modulation order (4, 16, 64)");
    cmd->add_option("--snr-db", a.snr_db, "evaluation SNR in dB");
    cmd->add_option("--tasks", a.n_tasks, "number of test tasks");
    cmd->add_option("--block-len", a.block_len, "coherence block length T");
    cmd->add_option("--pilots", a.pilots, "pilot counts, e.g. 0..10 or 0,4,8");
    cmd->add_option("--seed", a.seed, "master seed");
    cmd->add_option("--threads", a.threads, "worker threads (default: CHOOSE_THREADS or all)");
    cmd->add_option("--out", a.out_csv, "metrics CSV path");
    cmd->add_option("--model-id", a.model_id, "model id column value");
}

EvalOptions to_eval_options(const EvalArgs& a) {
    EvalOptions opts;
    opts.modulation = a.modulation;
    opts.snr_db = a.snr_db;
    opts.n_tasks = a.n_tasks;
    opts.block_len = a.block_len;
    if (!a.pilots.empty()) opts.k_list = parse_pilot_spec(a.pilots);
    opts.seed = a.seed;
    opts.n_threads = a.threads > 0 ? a.threads : env_threads();
    return opts;
}

void print_report(std::ostream& out, const EvalReport& rep, const std::string& label) {
    out << label << " modulation=" << rep.meta.modulation << " snr=" << rep.meta.snr_db << " dB\n";
    for (const auto& p : rep.points) {
        out << "  k=" << p.k << "  mse=" << p.mse << " (±" << p.mse_ci95 << ")  ser=" << p.ser
            << " (±" << p.ser_ci95 << ")  n=" << p.n << "\n";
    }
}

}  // namespace

std::vector<int> parse_pilot_spec(const std::string& spec) {
    std::vector<int> out;
    const auto dots = spec.find("..");
    if (dots != std::string::npos) {
        const int lo = std::stoi(spec.substr(0, dots));
        const int hi = std::stoi(spec.substr(dots + 2));
        if (hi < lo) throw std::invalid_argument("pilot range hi < lo: " + spec);
        for (int k = lo; k <= hi; ++k) out.push_back(k);
        return out;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    if (out.empty()) throw std::invalid_argument("empty pilot spec: " + spec);
    return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"CHOOSE: latent chain-of-thought in-context symbol detection"};
    app.require_subcommand(1);

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
    std::string config_path;
    bool dry_run = false;
    std::uint64_t train_seed = 0;
    bool train_seed_given = false;
    int train_threads = 0;
    std::string train_out;
    train_cmd->add_option("--config", config_path, "JSON config path")->required();
    train_cmd->add_flag("--dry-run", dry_run, "validate config, print parameter count, train nothing");
    train_cmd->add_option("--seed", train_seed, "override config seed")
        ->each([&](const std::string&) { train_seed_given = true; });
    train_cmd->add_option("--threads", train_threads, "override config threads");
    train_cmd->add_option("--out", train_out, "override config out_dir");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (MSE/SER per pilot count)");
    EvalArgs eval_args;
    add_eval_style_options(eval_cmd, eval_args, true);
    eval_cmd->add_flag("--no-cache", eval_args.no_cache, "disable KV-cached inference");

    // ---- oracle ----
    auto* oracle_cmd = app.add_subcommand("oracle", "evaluate the closed-form MMSE estimator");
    EvalArgs oracle_args;
    add_eval_style_options(oracle_cmd, oracle_args, false);
    std::string convention = "standard";
    oracle_cmd->add_option("--convention", convention,
                           "covariance convention: standard or half-signal");

    // ---- unfold ----
    auto* unfold_cmd = app.add_subcommand("unfold", "per-thought-step metrics of a checkpoint");
    EvalArgs unfold_args;
    add_eval_style_options(unfold_cmd, unfold_args, true);

    // ---- bench ----
    auto* bench_cmd = app.add_subcommand("bench", "parameter count and inference timing");
    EvalArgs bench_args;
    bench_args.n_tasks = 500;
    bench_args.threads = 1;
    add_eval_style_options(bench_cmd, bench_args, true);
    int bench_reps = 5;
    bench_cmd->add_option("--reps", bench_reps, "timing repetitions (median reported)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            out << app.help() << "\n";
            return 0;
        }
        err << "error: " << e.what() << "\n";
        err << app.help() << "\n";
        return 1;
    }

    try {
        if (*train_cmd) {
            TrainConfig cfg = train_config_from_file(config_path);
            if (train_seed_given) cfg.seed = train_seed;
            if (train_threads > 0) cfg.n_threads = train_threads;
            else if (cfg.n_threads == 0) cfg.n_threads = env_threads();
            if (!train_out.empty()) cfg.out_dir = train_out;
            out << "config " << train_config_to_json(cfg) << "\n";
            out << "parameters " << count_params(cfg.model) << "\n";
            if (dry_run) return 0;
            TrainResult result = train(cfg, &out);
            out << "final loss " << result.final_loss << " (per-query mse " << result.final_mse
                << ")\ncheckpoint " << cfg.out_dir << "\n";
            return 0;
        }
        if (*eval_cmd) {
            Checkpoint ckpt = load_checkpoint(eval_args.ckpt);
            const EvalOptions opts = to_eval_options(eval_args);
            const std::string id = eval_args.model_id.empty() ? default_model_id(eval_args.ckpt)
                                                              : eval_args.model_id;
            EvalReport rep = evaluate_model(ckpt.params, opts, id, !eval_args.no_cache);
            print_report(out, rep, "eval " + id);
            if (!eval_args.out_csv.empty()) write_metrics_csv(eval_args.out_csv, report_to_rows(rep));
            return 0;
        }
        if (*oracle_cmd) {
            CovarianceConvention conv;
            if (convention == "standard") conv = CovarianceConvention::Standard;
            else if (convention == "half-signal") conv = CovarianceConvention::HalfSignal;
            else throw std::invalid_argument("unknown convention: " + convention);
            const EvalOptions opts = to_eval_options(oracle_args);
            EvalReport rep = evaluate_oracle(opts, conv);
            print_report(out, rep, "oracle");
            if (!oracle_args.out_csv.empty())
                write_metrics_csv(oracle_args.out_csv, report_to_rows(rep));
            return 0;
        }
        if (*unfold_cmd) {
            Checkpoint ckpt = load_checkpoint(unfold_args.ckpt);
            const EvalOptions opts = to_eval_options(unfold_args);
            const std::string id = unfold_args.model_id.empty()
                                       ? default_model_id(unfold_args.ckpt)
                                       : unfold_args.model_id;
            auto reports = unfold_eval(ckpt.params, opts, id);
            std::vector<MetricsRow> rows;
            for (std::size_t j = 0; j < reports.size(); ++j) {
                print_report(out, reports[j], "unfold step " + std::to_string(j + 1));
                auto step_rows =
                    report_to_rows(reports[j], "_step" + std::to_string(j + 1));
                rows.insert(rows.end(), step_rows.begin(), step_rows.end());
            }
            if (!unfold_args.out_csv.empty()) write_metrics_csv(unfold_args.out_csv, rows);
            return 0;
        }
        if (*bench_cmd) {
            Checkpoint ckpt = load_checkpoint(bench_args.ckpt);
            const EvalOptions opts = to_eval_options(bench_args);
            const std::string id = bench_args.model_id.empty()
                                       ? default_model_id(bench_args.ckpt)
                                       : bench_args.model_id;
            BenchResult bench = bench_model(ckpt.params, opts, bench_reps);
            out << "params " << bench.param_count << "\ncached " << bench.cached_ms
                << " ms\nuncached " << bench.uncached_ms << " ms\npredictions "
                << bench.n_predictions << "\n";
            EvalMeta meta;
            meta.model_id = id;
            meta.layers = ckpt.params.config.n_layers;
            meta.embed_dim = ckpt.params.config.embed_dim;
            meta.heads = ckpt.params.config.n_heads;
            meta.c_steps = ckpt.params.config.n_thoughts;
            meta.modulation = opts.modulation;
            meta.snr_db = opts.snr_db;
            if (!bench_args.out_csv.empty())
                write_metrics_csv(bench_args.out_csv, bench_to_rows(bench, meta));
            return 0;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << "error: no subcommand\n";
    return 1;
}

}  // namespace choose
