#include "choose/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace choose {

namespace {

struct CellAccum {
    double sum = 0.0;
    double sum_sq = 0.0;
    long errors = 0;
    long n = 0;

    void merge(const CellAccum& o) {
        sum += o.sum;
        sum_sq += o.sum_sq;
        errors += o.errors;
        n += o.n;
    }
};

// accumulators for one chunk of tasks: [step][k index]
using ChunkAccum = std::vector<std::vector<CellAccum>>;

constexpr long kChunkTasks = 64;  // fixed chunk size keeps reductions order-stable

std::vector<int> default_k_list(int block_len) {
    std::vector<int> ks(static_cast<std::size_t>(block_len));
    for (int k = 0; k < block_len; ++k) ks[static_cast<std::size_t>(k)] = k;
    return ks;
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

std::vector<EvalReport> evaluate_steps(const PredictorFactory& factory, int n_steps,
                                       const EvalOptions& opts, const EvalMeta& meta) {
    if (n_steps < 1) throw std::invalid_argument("evaluate_steps: n_steps must be >= 1");
    if (opts.n_tasks < 1) throw std::invalid_argument("evaluate_steps: n_tasks must be >= 1");
    const std::vector<int> k_list = opts.k_list.empty() ? default_k_list(opts.block_len) : opts.k_list;
    for (int k : k_list)
        if (k < 0 || k >= opts.block_len)
            throw std::invalid_argument("evaluate_steps: pilot count " + std::to_string(k) +
                                        " outside [0, T)");
    const Constellation constellation = build_constellation(opts.modulation);
    const Rng master(opts.seed);

    const long n_chunks = (opts.n_tasks + kChunkTasks - 1) / kChunkTasks;
    std::vector<ChunkAccum> chunk_results(static_cast<std::size_t>(n_chunks));
    std::atomic<long> next_chunk{0};
    std::mutex err_mu;
    std::exception_ptr worker_error = nullptr;

    auto worker_body = [&]() {
        PredictFn predict = factory();
        for (;;) {
            const long chunk = next_chunk.fetch_add(1);
            if (chunk >= n_chunks) break;
            ChunkAccum acc(static_cast<std::size_t>(n_steps),
                           std::vector<CellAccum>(k_list.size()));
            const long lo = chunk * kChunkTasks;
            const long hi = std::min(opts.n_tasks, lo + kChunkTasks);
            for (long i = lo; i < hi; ++i) {
                Rng rng = master.sub(stream::kEvalTask, static_cast<std::uint64_t>(i));
                const FadingTask task = sample_task(rng, opts.snr_db, opts.snr_db);
                const CoherenceBlock block = simulate_block(task, opts.block_len, constellation, rng);
                for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
                    const int k = k_list[ki];
                    for (int t = k + 1; t <= opts.block_len; ++t) {
                        const StepPredictions preds = predict(block, k, t);
                        if (static_cast<int>(preds.size()) != n_steps)
                            throw std::runtime_error("evaluate_steps: predictor returned " +
                                                     std::to_string(preds.size()) +
                                                     " steps, expected " + std::to_string(n_steps));
                        const cplx x_true = block.x[static_cast<std::size_t>(t - 1)];
                        const int label_true = block.labels[static_cast<std::size_t>(t - 1)];
                        for (int s = 0; s < n_steps; ++s) {
                            CellAccum& cell = acc[static_cast<std::size_t>(s)][ki];
                            const double e2 = std::norm(preds[static_cast<std::size_t>(s)] - x_true);
                            cell.sum += e2;
                            cell.sum_sq += e2 * e2;
                            cell.errors +=
                                project_nearest(preds[static_cast<std::size_t>(s)], constellation) !=
                                label_true;
                            cell.n += 1;
                        }
                    }
                }
            }
            chunk_results[static_cast<std::size_t>(chunk)] = std::move(acc);
        }
    };
    auto worker = [&]() {
        try {
            worker_body();
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!worker_error) worker_error = std::current_exception();
        }
    };

    const int n_threads = std::min<long>(resolve_threads(opts.n_threads), n_chunks);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int w = 0; w < n_threads; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (worker_error) std::rethrow_exception(worker_error);

    // reduce in chunk order
    ChunkAccum total(static_cast<std::size_t>(n_steps), std::vector<CellAccum>(k_list.size()));
    for (const auto& chunk : chunk_results)
        for (std::size_t s = 0; s < chunk.size(); ++s)
            for (std::size_t ki = 0; ki < k_list.size(); ++ki) total[s][ki].merge(chunk[s][ki]);

    std::vector<EvalReport> reports(static_cast<std::size_t>(n_steps));
    for (int s = 0; s < n_steps; ++s) {
        EvalReport& rep = reports[static_cast<std::size_t>(s)];
        rep.meta = meta;
        rep.points.reserve(k_list.size());
        for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
            const CellAccum& cell = total[static_cast<std::size_t>(s)][ki];
            EvalPoint p;
            p.k = k_list[ki];
            p.n = cell.n;
            p.mse = cell.n ? cell.sum / static_cast<double>(cell.n) : 0.0;
            p.mse_ci95 = normal_halfwidth95(cell.sum, cell.sum_sq, cell.n);
            p.ser = cell.n ? static_cast<double>(cell.errors) / static_cast<double>(cell.n) : 0.0;
            p.ser_ci95 = wilson_halfwidth95(cell.errors, cell.n);
            rep.points.push_back(p);
        }
    }
    return reports;
}

EvalReport evaluate_predictor(const PredictorFactory& factory, const EvalOptions& opts,
                              const EvalMeta& meta) {
    return evaluate_steps(factory, 1, opts, meta).back();
}

PredictorFactory model_predictor(const ModelParams<float>& params, bool use_cache) {
    const ModelParams<float>* p = &params;
    return [p, use_cache]() -> PredictFn {
        struct State {
            KVCache<float> pilot_cache;
            int k = -1;
            explicit State(const ModelConfig& cfg) : pilot_cache(cfg) {}
        };
        auto st = std::make_shared<State>(p->config);
        return [p, st, use_cache](const CoherenceBlock& block, int k, int t) -> StepPredictions {
            const int c_steps = std::max(p->config.n_thoughts, 1);
            std::vector<std::array<float, 2>> raw;
            if (!use_cache) {
                raw = predict_eval_uncached(*p, assemble_eval_prompt(block, k, t), p->config.n_thoughts);
            } else {
                // pilot prefix is shared by every query of this (block, k) group;
                // groups always open at t == k+1
                if (t == k + 1 || st->k != k) {
                    st->pilot_cache = KVCache<float>(p->config);
                    for (int i = 0; i < k; ++i) {
                        step_with_cache(*p, st->pilot_cache,
                                        embed_token_row(*p, to_token(block.y[static_cast<std::size_t>(i)]), 2 * i),
                                        2 * i);
                        step_with_cache(*p, st->pilot_cache,
                                        embed_token_row(*p, to_token(block.x[static_cast<std::size_t>(i)]), 2 * i + 1),
                                        2 * i + 1);
                    }
                    st->k = k;
                }
                KVCache<float> cache = st->pilot_cache;
                raw = predict_query_with_cache(*p, cache,
                                               to_token(block.y[static_cast<std::size_t>(t - 1)]),
                                               p->config.n_thoughts);
            }
            StepPredictions out;
            out.reserve(raw.size());
            for (const auto& iq : raw) out.emplace_back(iq[0], iq[1]);
            return out;
        };
    };
}

PredictorFactory oracle_predictor(int modulation, CovarianceConvention conv) {
    return [modulation, conv]() -> PredictFn {
        auto constellation = std::make_shared<Constellation>(build_constellation(modulation));
        return [constellation, conv](const CoherenceBlock& block, int k, int t) -> StepPredictions {
            return {mmse_estimate(make_instance(block, k, t), *constellation, conv)};
        };
    };
}

namespace {

EvalMeta meta_for_model(const ModelParams<float>& params, const EvalOptions& opts,
                        const std::string& model_id) {
    EvalMeta meta;
    meta.model_id = model_id;
    meta.layers = params.config.n_layers;
    meta.embed_dim = params.config.embed_dim;
    meta.heads = params.config.n_heads;
    meta.c_steps = params.config.n_thoughts;
    meta.modulation = opts.modulation;
    meta.snr_db = opts.snr_db;
    meta.seed = opts.seed;
    return meta;
}

}  // namespace

EvalReport evaluate_model(const ModelParams<float>& params, const EvalOptions& opts,
                          const std::string& model_id, bool use_cache) {
    const int n_steps = std::max(params.config.n_thoughts, 1);
    return evaluate_steps(model_predictor(params, use_cache), n_steps, opts,
                          meta_for_model(params, opts, model_id))
        .back();
}

std::vector<EvalReport> unfold_eval(const ModelParams<float>& params, const EvalOptions& opts,
                                    const std::string& model_id) {
    if (params.config.n_thoughts < 1)
        throw std::invalid_argument("unfold_eval: checkpoint has no thought steps");
    return evaluate_steps(model_predictor(params, true), params.config.n_thoughts, opts,
                          meta_for_model(params, opts, model_id));
}

EvalReport evaluate_oracle(const EvalOptions& opts, CovarianceConvention conv) {
    EvalMeta meta;
    meta.model_id = "mmse_oracle";
    meta.modulation = opts.modulation;
    meta.snr_db = opts.snr_db;
    meta.seed = opts.seed;
    return evaluate_predictor(oracle_predictor(opts.modulation, conv), opts, meta);
}

BenchResult bench_model(const ModelParams<float>& params, const EvalOptions& opts, int reps) {
    if (reps < 1) throw std::invalid_argument("bench_model: reps must be >= 1");
    BenchResult result;
    result.param_count = count_params(params.config);
    const std::vector<int> k_list = opts.k_list.empty() ? default_k_list(opts.block_len) : opts.k_list;
    for (int k : k_list) result.n_predictions += opts.n_tasks * (opts.block_len - k);

    const EvalMeta meta = meta_for_model(params, opts, "bench");
    const int n_steps = std::max(params.config.n_thoughts, 1);
    auto timed_run = [&](bool cached) {
        const auto t0 = std::chrono::steady_clock::now();
        evaluate_steps(model_predictor(params, cached), n_steps, opts, meta);
        const auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count();
    };
    for (bool cached : {true, false}) {
        timed_run(cached);  // warmup, excluded
        std::vector<double> times(static_cast<std::size_t>(reps));
        for (int r = 0; r < reps; ++r) times[static_cast<std::size_t>(r)] = timed_run(cached);
        std::sort(times.begin(), times.end());
        const double median = times[times.size() / 2];
        (cached ? result.cached_ms : result.uncached_ms) = median;
    }
    return result;
}

std::vector<MetricsRow> bench_to_rows(const BenchResult& bench, const EvalMeta& meta) {
    auto base = [&]() {
        MetricsRow row;
        row.model_id = meta.model_id;
        row.layers = meta.layers;
        row.embed_dim = meta.embed_dim;
        row.heads = meta.heads;
        row.c_steps = meta.c_steps;
        row.modulation = meta.modulation;
        row.snr_db = meta.snr_db;
        row.k = -1;
        row.n = bench.n_predictions;
        return row;
    };
    MetricsRow params_row = base();
    params_row.metric = "params";
    params_row.value = static_cast<double>(bench.param_count);
    MetricsRow cached = base();
    cached.metric = "time_cached_ms";
    cached.value = bench.cached_ms;
    MetricsRow uncached = base();
    uncached.metric = "time_uncached_ms";
    uncached.value = bench.uncached_ms;
    return {params_row, cached, uncached};
}

}  // namespace choose
