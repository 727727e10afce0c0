#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace choose {

struct EvalPoint {
    int k = 0;
    double mse = 0.0;
    double mse_ci95 = 0.0;  // normal-approximation half-width
    double ser = 0.0;
    double ser_ci95 = 0.0;  // Wilson half-width
    long n = 0;             // predictions aggregated into this point
};

struct EvalMeta {
    std::string model_id;
    int layers = 0;
    int embed_dim = 0;
    int heads = 0;
    int c_steps = 0;
    int modulation = 0;
    double snr_db = 0.0;
    std::uint64_t seed = 0;
};

struct EvalReport {
    EvalMeta meta;
    std::vector<EvalPoint> points;  // one per pilot count k

    const EvalPoint& at_k(int k) const;
};

// one CSV record; k = -1 for metrics that are not per-pilot-count
struct MetricsRow {
    std::string model_id;
    int layers = 0;
    int embed_dim = 0;
    int heads = 0;
    int c_steps = 0;
    int modulation = 0;
    double snr_db = 0.0;
    int k = -1;
    std::string metric;
    double value = 0.0;
    double ci95 = 0.0;
    long n = 0;
};

// fixed schema; golden-file tested
inline const char* kMetricsCsvHeader = "model_id,layers,embed_dim,heads,C,modulation,snr_db,k,metric,value,ci95,n";

std::string metrics_row_to_csv(const MetricsRow& row);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// report rows: per k, metric "mse" then "ser"; `metric_suffix` tags unfold
// steps (e.g. "_step2")
std::vector<MetricsRow> report_to_rows(const EvalReport& report,
                                       const std::string& metric_suffix = "");

// 95% Wilson score half-width for an error proportion
double wilson_halfwidth95(long errors, long n);
// Wilson-centered point is not reported; value stays the plain proportion
double normal_halfwidth95(double sum, double sum_sq, long n);

}  // namespace choose
