#include <doctest.h>

#include <chrono>
#include <cmath>
#include <complex>

#include "choose/channel.hpp"
#include "choose/oracle.hpp"
#include "choose/rng.hpp"

using namespace choose;

namespace {

OracleInstance random_instance(int k, double snr_db, const Constellation& c, Rng& rng) {
    FadingTask task = sample_task(rng, snr_db, snr_db);
    CoherenceBlock block = simulate_block(task, k + 1, c, rng);
    return make_instance(block, k, k + 1);
}

}  // namespace

TEST_CASE("k=0 on 4QAM: constant modulus makes every candidate equally likely") {
    auto c4 = build_constellation(4);
    Rng rng(51);
    for (int trial = 0; trial < 20; ++trial) {
        OracleInstance inst;
        inst.sigma2 = snr_db_to_sigma2(rng.uniform(0.0, 40.0));
        inst.received = {cplx(rng.normal(), rng.normal())};
        const double ref = log_likelihood(inst, c4.points[0]);
        for (int i = 1; i < 4; ++i)
            CHECK(log_likelihood(inst, c4.points[static_cast<std::size_t>(i)]) ==
                  doctest::Approx(ref).epsilon(1e-12));
        auto table = posterior(inst, c4);
        for (double p : table.prob) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
        // symmetric posterior pulls the estimate to the constellation mean
        CHECK(std::abs(mmse_estimate(inst, c4)) < 1e-12);
    }
}

TEST_CASE("Sherman-Morrison path equals the dense Cholesky path") {
    auto c16 = build_constellation(16);
    Rng rng(52);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = rng.uniform_int(11);
        auto inst = random_instance(k, rng.uniform(10.0, 45.0), c16, rng);
        for (double alpha : {1.0, 0.5}) {
            std::vector<cplx> x_vec(inst.pilots_x);
            x_vec.push_back(c16.points[static_cast<std::size_t>(rng.uniform_int(16))]);
            auto [q_sm, d_sm] = sherman_morrison_solve(x_vec, inst.received, inst.sigma2, alpha);
            auto [q_dn, d_dn] = dense_solve(x_vec, inst.received, inst.sigma2, alpha);
            CHECK(std::abs(q_sm - q_dn) <= 1e-9 * std::max(1.0, std::abs(q_dn)));
            CHECK(std::abs(d_sm - d_dn) <= 1e-9 * std::max(1.0, std::abs(d_dn)));
        }
    }
}

TEST_CASE("log_likelihood dense flag matches the fast path at k=4") {
    auto c16 = build_constellation(16);
    Rng rng(53);
    auto inst = random_instance(4, 30.0, c16, rng);
    for (int i = 0; i < 16; ++i) {
        const double fast = log_likelihood(inst, c16.points[static_cast<std::size_t>(i)]);
        const double dense = log_likelihood(inst, c16.points[static_cast<std::size_t>(i)],
                                            CovarianceConvention::Standard, true);
        CHECK(std::abs(fast - dense) <= 1e-9 * std::max(1.0, std::abs(dense)));
    }
}

TEST_CASE("sherman_morrison_solve diagonal case") {
    std::vector<cplx> x_vec(7, cplx(0.0, 0.0));
    std::vector<cplx> y_vec;
    Rng rng(54);
    double y_norm2 = 0.0;
    for (int i = 0; i < 7; ++i) {
        y_vec.emplace_back(rng.normal(), rng.normal());
        y_norm2 += std::norm(y_vec.back());
    }
    const double sigma2 = 0.37;
    auto [quad, log_det] = sherman_morrison_solve(x_vec, y_vec, sigma2);
    CHECK(quad == doctest::Approx(y_norm2 / sigma2).epsilon(1e-12));
    CHECK(log_det == doctest::Approx(7.0 * std::log(sigma2)).epsilon(1e-12));

    CHECK_THROWS_AS(sherman_morrison_solve(x_vec, y_vec, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(sherman_morrison_solve(x_vec, y_vec, -1.0), std::invalid_argument);
}

TEST_CASE("posterior approaches uniform when noise dominates") {
    auto c16 = build_constellation(16);
    Rng rng(55);
    OracleInstance inst;
    inst.sigma2 = 1e6;
    inst.pilots_x = {c16.points[3], c16.points[11]};
    inst.received = {cplx(0.4, -1.0), cplx(0.2, 0.9), cplx(-0.3, 0.1)};
    auto table = posterior(inst, c16);
    for (double p : table.prob) CHECK(std::abs(p - 1.0 / 16.0) < 1e-3);
    CHECK(std::abs(mmse_estimate(inst, c16)) < 1e-3);
}

TEST_CASE("posterior sums to one and the estimate stays inside the grid") {
    auto c64 = build_constellation(64);
    Rng rng(56);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = rng.uniform_int(11);
        auto inst = random_instance(k, rng.uniform(5.0, 45.0), c64, rng);
        auto table = posterior(inst, c64);
        double sum = 0.0;
        for (double p : table.prob) {
            CHECK(p >= 0.0);
            sum += p;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        const cplx est = mmse_estimate(inst, c64);
        CHECK(std::abs(est.real()) <= c64.max_coord + 1e-12);
        CHECK(std::abs(est.imag()) <= c64.max_coord + 1e-12);
    }
}

TEST_CASE("posterior concentrates with pilots at high SNR") {
    auto c16 = build_constellation(16);
    Rng rng(57);
    int concentrated = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto inst = random_instance(8, 30.0, c16, rng);
        auto table = posterior(inst, c16);
        double mx = 0.0;
        for (double p : table.prob) mx = std::max(mx, p);
        concentrated += mx > 0.99;
    }
    CHECK(concentrated >= 17);  // typical draws; rare deep fades may stay diffuse
}

TEST_CASE("point-mass posterior returns that symbol") {
    auto c16 = build_constellation(16);
    // long pilot run at very high SNR pins h, and the query reception sits
    // exactly on one symbol
    Rng rng(58);
    FadingTask task{cplx(1.0, 0.0), snr_db_to_sigma2(50.0), 50.0};
    CoherenceBlock block = simulate_block(task, 9, c16, rng);
    auto inst = make_instance(block, 8, 9);
    auto table = posterior(inst, c16);
    const int truth = block.labels[8];
    CHECK(table.prob[static_cast<std::size_t>(truth)] > 0.999);
    const cplx est = mmse_estimate(inst, c16);
    CHECK(std::abs(est - block.x[8]) < 1e-2);
}

TEST_CASE("fast path scales linearly in the pilot count") {
    Rng rng(59);
    auto make_vecs = [&](int n) {
        std::vector<cplx> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            x[static_cast<std::size_t>(i)] = cplx(rng.normal(), rng.normal());
            y[static_cast<std::size_t>(i)] = cplx(rng.normal(), rng.normal());
        }
        return std::pair{x, y};
    };
    auto time_solve = [&](int n) {
        auto [x, y] = make_vecs(n);
        const auto t0 = std::chrono::steady_clock::now();
        double acc = 0.0;
        for (int rep = 0; rep < 2000; ++rep) {
            auto [q, d] = sherman_morrison_solve(x, y, 1e-3);
            acc += q + d;
        }
        const auto t1 = std::chrono::steady_clock::now();
        CHECK(std::isfinite(acc));
        return std::chrono::duration<double>(t1 - t0).count();
    };
    time_solve(256);  // warmup
    const double t_small = time_solve(256);
    const double t_large = time_solve(1024);
    // linear cost gives ~4x; a cubic term would give ~64x
    CHECK(t_large / t_small < 16.0);
}
