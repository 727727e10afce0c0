#include "choose/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace choose {

std::pair<double, double> sherman_morrison_solve(std::span<const cplx> x_vec,
                                                 std::span<const cplx> y_vec, double sigma2,
                                                 double alpha) {
    if (sigma2 <= 0.0) throw std::invalid_argument("sherman_morrison_solve: sigma2 must be > 0");
    if (x_vec.size() != y_vec.size())
        throw std::invalid_argument("sherman_morrison_solve: length mismatch");
    const std::size_t n = x_vec.size();
    double x_norm2 = 0.0, y_norm2 = 0.0;
    cplx xy(0.0, 0.0);  // x^H y
    for (std::size_t i = 0; i < n; ++i) {
        x_norm2 += std::norm(x_vec[i]);
        y_norm2 += std::norm(y_vec[i]);
        xy += std::conj(x_vec[i]) * y_vec[i];
    }
    const double denom = sigma2 + alpha * x_norm2;
    const double quad = (y_norm2 - alpha * std::norm(xy) / denom) / sigma2;
    const double log_det =
        static_cast<double>(n - 1) * std::log(sigma2) + std::log(denom);
    return {quad, log_det};
}

std::pair<double, double> dense_solve(std::span<const cplx> x_vec, std::span<const cplx> y_vec,
                                      double sigma2, double alpha) {
    if (sigma2 <= 0.0) throw std::invalid_argument("dense_solve: sigma2 must be > 0");
    if (x_vec.size() != y_vec.size()) throw std::invalid_argument("dense_solve: length mismatch");
    const std::size_t n = x_vec.size();
    // C = alpha x x^H + sigma2 I
    std::vector<cplx> c(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            c[i * n + j] = alpha * x_vec[i] * std::conj(x_vec[j]);
            if (i == j) c[i * n + j] += sigma2;
        }
    // complex Cholesky, C = L L^H
    std::vector<cplx> lo(n * n, cplx(0.0, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            cplx s = c[i * n + j];
            for (std::size_t l = 0; l < j; ++l) s -= lo[i * n + l] * std::conj(lo[j * n + l]);
            if (i == j) {
                const double re = s.real();
                if (re <= 0.0) throw std::runtime_error("dense_solve: matrix not positive definite");
                lo[i * n + i] = std::sqrt(re);
            } else {
                lo[i * n + j] = s / lo[j * n + j];
            }
        }
    }
    // forward solve L z = y; quad = ||z||^2, log det = 2 sum log L_ii
    std::vector<cplx> z(n);
    double quad = 0.0, log_det = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        cplx s = y_vec[i];
        for (std::size_t l = 0; l < i; ++l) s -= lo[i * n + l] * z[l];
        z[i] = s / lo[i * n + i];
        quad += std::norm(z[i]);
        log_det += 2.0 * std::log(lo[i * n + i].real());
    }
    return {quad, log_det};
}

namespace {

double log_like_impl(std::span<const cplx> x_vec, std::span<const cplx> y_vec, double sigma2,
                     CovarianceConvention conv, bool use_dense) {
    const double alpha = (conv == CovarianceConvention::HalfSignal) ? 0.5 : 1.0;
    const auto [quad, log_det] = use_dense ? dense_solve(x_vec, y_vec, sigma2, alpha)
                                           : sherman_morrison_solve(x_vec, y_vec, sigma2, alpha);
    if (conv == CovarianceConvention::HalfSignal) return -0.5 * quad - 0.5 * log_det;
    return -quad - log_det;
}

}  // namespace

double log_likelihood(const OracleInstance& inst, cplx candidate, CovarianceConvention conv,
                      bool use_dense) {
    if (inst.sigma2 <= 0.0) throw std::invalid_argument("log_likelihood: sigma2 must be > 0");
    if (inst.received.size() != inst.pilots_x.size() + 1)
        throw std::invalid_argument("log_likelihood: received must have k+1 entries");
    std::vector<cplx> x_vec(inst.pilots_x.begin(), inst.pilots_x.end());
    x_vec.push_back(candidate);
    return log_like_impl(x_vec, inst.received, inst.sigma2, conv, use_dense);
}

PosteriorTable posterior(const OracleInstance& inst, const Constellation& c,
                         CovarianceConvention conv, bool use_dense) {
    PosteriorTable table;
    table.log_like.resize(static_cast<std::size_t>(c.order));
    for (int i = 0; i < c.order; ++i)
        table.log_like[static_cast<std::size_t>(i)] =
            log_likelihood(inst, c.points[static_cast<std::size_t>(i)], conv, use_dense);
    const double mx = *std::max_element(table.log_like.begin(), table.log_like.end());
    double denom = 0.0;
    table.prob.resize(table.log_like.size());
    for (std::size_t i = 0; i < table.log_like.size(); ++i) {
        table.prob[i] = std::exp(table.log_like[i] - mx);
        denom += table.prob[i];
    }
    for (auto& p : table.prob) p /= denom;
    return table;
}

cplx mmse_estimate(const OracleInstance& inst, const Constellation& c, CovarianceConvention conv,
                   bool use_dense) {
    const PosteriorTable table = posterior(inst, c, conv, use_dense);
    cplx est(0.0, 0.0);
    for (int i = 0; i < c.order; ++i)
        est += c.points[static_cast<std::size_t>(i)] * table.prob[static_cast<std::size_t>(i)];
    return est;
}

OracleInstance make_instance(const CoherenceBlock& block, int n_pilots, int query_t) {
    if (n_pilots < 0 || query_t <= n_pilots || query_t > block.block_len)
        throw std::invalid_argument("make_instance: need 0 <= k < t <= T");
    OracleInstance inst;
    inst.sigma2 = block.task.sigma2;
    inst.pilots_x.assign(block.x.begin(), block.x.begin() + n_pilots);
    inst.received.assign(block.y.begin(), block.y.begin() + n_pilots);
    inst.received.push_back(block.y[static_cast<std::size_t>(query_t - 1)]);
    return inst;
}

}  // namespace choose
