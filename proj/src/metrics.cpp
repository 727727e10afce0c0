#include "choose/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace choose {

const EvalPoint& EvalReport::at_k(int k) const {
    for (const auto& p : points)
        if (p.k == k) return p;
    throw std::out_of_range("EvalReport: no point for k=" + std::to_string(k));
}

std::string metrics_row_to_csv(const MetricsRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%d,%d,%.6g,%d,%s,%.9g,%.4g,%ld",
                  row.model_id.c_str(), row.layers, row.embed_dim, row.heads, row.c_steps,
                  row.modulation, row.snr_db, row.k, row.metric.c_str(), row.value, row.ci95,
                  row.n);
    return buf;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    out << kMetricsCsvHeader << "\n";
    for (const auto& row : rows) out << metrics_row_to_csv(row) << "\n";
    if (!out) throw std::runtime_error("write_metrics_csv: short write to " + path);
}

std::vector<MetricsRow> report_to_rows(const EvalReport& report, const std::string& metric_suffix) {
    std::vector<MetricsRow> rows;
    rows.reserve(report.points.size() * 2);
    for (const auto& p : report.points) {
        MetricsRow base;
        base.model_id = report.meta.model_id;
        base.layers = report.meta.layers;
        base.embed_dim = report.meta.embed_dim;
        base.heads = report.meta.heads;
        base.c_steps = report.meta.c_steps;
        base.modulation = report.meta.modulation;
        base.snr_db = report.meta.snr_db;
        base.k = p.k;
        base.n = p.n;

        MetricsRow mse = base;
        mse.metric = "mse" + metric_suffix;
        mse.value = p.mse;
        mse.ci95 = p.mse_ci95;
        rows.push_back(mse);

        MetricsRow ser = base;
        ser.metric = "ser" + metric_suffix;
        ser.value = p.ser;
        ser.ci95 = p.ser_ci95;
        rows.push_back(ser);
    }
    return rows;
}

double wilson_halfwidth95(long errors, long n) {
    if (n <= 0) return 0.0;
    constexpr double z = 1.959963984540054;
    const double z2 = z * z;
    const double p = static_cast<double>(errors) / static_cast<double>(n);
    const double nn = static_cast<double>(n);
    return z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / (1.0 + z2 / nn);
}

double normal_halfwidth95(double sum, double sum_sq, long n) {
    if (n <= 1) return 0.0;
    const double nn = static_cast<double>(n);
    const double mean = sum / nn;
    const double var = std::max(0.0, sum_sq / nn - mean * mean);
    constexpr double z = 1.959963984540054;
    return z * std::sqrt(var / nn);
}

}  // namespace choose
