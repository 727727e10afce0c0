#pragma once

#include <span>
#include <utility>
#include <vector>

#include "choose/channel.hpp"

namespace choose {

// Covariance convention for the conditional-mean estimator.
//   Standard:   C(x) = X X^H + sigma^2 I, log p(y) = -y^H C^-1 y - log det C + const
//               (circularly-symmetric complex Gaussian of y = h X + z, h ~ CN(0,1))
//   HalfSignal: C(x) = 1/2 X X^H + sigma^2 I with a real-composite density,
//               log p(y) = -1/2 y^H C^-1 y - 1/2 log det C + const
// Standard is the default; it is the convention validated against an
// independent Monte-Carlo conditional-mean computation (see acceptance suite).
enum class CovarianceConvention { Standard, HalfSignal };

struct OracleInstance {
    std::vector<cplx> pilots_x;  // x_{1:k}, constellation points
    std::vector<cplx> received;  // y_{1:k+1}: pilot receptions then the query
    double sigma2 = 0.0;
};

struct PosteriorTable {
    std::vector<double> log_like;  // unnormalized log-likelihood per symbol
    std::vector<double> prob;      // normalized posterior, sums to 1
};

// (y^H C^-1 y, log|det C|) for C = alpha * x x^H + sigma2 * I via the rank-one
// closed forms; O(k) instead of O(k^3)
std::pair<double, double> sherman_morrison_solve(std::span<const cplx> x_vec,
                                                 std::span<const cplx> y_vec, double sigma2,
                                                 double alpha = 1.0);

// dense reference path: builds C explicitly and runs a complex Cholesky
std::pair<double, double> dense_solve(std::span<const cplx> x_vec, std::span<const cplx> y_vec,
                                      double sigma2, double alpha = 1.0);

// unnormalized log-likelihood of the instance's receptions under `candidate`
double log_likelihood(const OracleInstance& inst, cplx candidate,
                      CovarianceConvention conv = CovarianceConvention::Standard,
                      bool use_dense = false);

PosteriorTable posterior(const OracleInstance& inst, const Constellation& c,
                         CovarianceConvention conv = CovarianceConvention::Standard,
                         bool use_dense = false);

// conditional-mean (MMSE) estimate: sum_x x * P(x | y_{1:k+1}, x_{1:k})
cplx mmse_estimate(const OracleInstance& inst, const Constellation& c,
                   CovarianceConvention conv = CovarianceConvention::Standard,
                   bool use_dense = false);

// instance for query symbol t (1-based, t > k) of a simulated block
OracleInstance make_instance(const CoherenceBlock& block, int n_pilots, int query_t);

}  // namespace choose
