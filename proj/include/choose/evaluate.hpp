#pragma once

#include <functional>
#include <string>
#include <vector>

#include "choose/channel.hpp"
#include "choose/metrics.hpp"
#include "choose/model.hpp"
#include "choose/oracle.hpp"

namespace choose {

// Per-step soft predictions for one query; the last entry is the final
// estimate. Single-step predictors return one entry.
using StepPredictions = std::vector<cplx>;

// Called with (block, k, t) grouped by ascending t within each (block, k), so
// implementations may reuse per-(block, k) state such as a pilot KV cache.
using PredictFn = std::function<StepPredictions(const CoherenceBlock&, int k, int t)>;

// One PredictFn per worker thread.
using PredictorFactory = std::function<PredictFn()>;

struct EvalOptions {
    int modulation = 16;
    double snr_db = 30.0;
    long n_tasks = 10000;
    int block_len = 11;        // T
    std::vector<int> k_list;   // default: 0 .. T-1
    std::uint64_t seed = 0;
    int n_threads = 0;         // 0: hardware concurrency
};

// Evaluates every query index t in (k, T] for each k over freshly simulated
// test tasks. Returns one report per prediction step (`n_steps` entries); the
// last is the final-step report. Task generation depends only on
// (seed, task index), so runs with equal options are paired sample-by-sample
// regardless of the predictor or thread count.
std::vector<EvalReport> evaluate_steps(const PredictorFactory& factory, int n_steps,
                                       const EvalOptions& opts, const EvalMeta& meta);

EvalReport evaluate_predictor(const PredictorFactory& factory, const EvalOptions& opts,
                              const EvalMeta& meta);

PredictorFactory model_predictor(const ModelParams<float>& params, bool use_cache = true);
PredictorFactory oracle_predictor(int modulation,
                                  CovarianceConvention conv = CovarianceConvention::Standard);

EvalReport evaluate_model(const ModelParams<float>& params, const EvalOptions& opts,
                          const std::string& model_id, bool use_cache = true);

// per-thought-step reports for the unfolding analysis (requires C >= 1)
std::vector<EvalReport> unfold_eval(const ModelParams<float>& params, const EvalOptions& opts,
                                    const std::string& model_id);

EvalReport evaluate_oracle(const EvalOptions& opts,
                           CovarianceConvention conv = CovarianceConvention::Standard);

struct BenchResult {
    long param_count = 0;
    double cached_ms = 0.0;    // median over repetitions
    double uncached_ms = 0.0;
    long n_predictions = 0;
};

// Inference timing at a fixed thread count, warmup pass excluded, median of
// `reps` repetitions for both the cached and the recompute-everything path.
BenchResult bench_model(const ModelParams<float>& params, const EvalOptions& opts, int reps = 5);

std::vector<MetricsRow> bench_to_rows(const BenchResult& bench, const EvalMeta& meta);

}  // namespace choose
