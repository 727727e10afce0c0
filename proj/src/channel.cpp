#include "choose/channel.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace choose {

Constellation build_constellation(int order) {
    int side = 0;
    switch (order) {
        case 4: side = 2; break;
        case 16: side = 4; break;
        case 64: side = 8; break;
        default:
            throw std::invalid_argument("build_constellation: unsupported order " +
                                        std::to_string(order) + " (expected 4, 16 or 64)");
    }
    // odd-integer grid {±1, ±3, ...}, row-major labels, then a global scale
    // so the mean squared magnitude is exactly 1
    std::vector<cplx> pts;
    pts.reserve(static_cast<std::size_t>(order));
    double power_sum = 0.0;
    for (int i = 0; i < side; ++i) {
        const double re = static_cast<double>(2 * i - side + 1);
        for (int j = 0; j < side; ++j) {
            const double im = static_cast<double>(2 * j - side + 1);
            pts.emplace_back(re, im);
            power_sum += re * re + im * im;
        }
    }
    const double scale = 1.0 / std::sqrt(power_sum / static_cast<double>(order));
    for (auto& p : pts) p *= scale;

    Constellation c;
    c.order = order;
    c.points = std::move(pts);
    c.max_coord = static_cast<double>(side - 1) * scale;
    return c;
}

double snr_db_to_sigma2(double snr_db) { return std::pow(10.0, -snr_db / 10.0); }

FadingTask sample_task(Rng& rng, double snr_lo_db, double snr_hi_db) {
    if (snr_lo_db > snr_hi_db) {
        throw std::invalid_argument("sample_task: snr range lo > hi");
    }
    FadingTask t;
    // E|h|^2 = 1: each component Normal(0, 1/2)
    const double s = std::sqrt(0.5);
    t.h = cplx(s * rng.normal(), s * rng.normal());
    t.snr_db = rng.uniform(snr_lo_db, snr_hi_db);
    t.sigma2 = snr_db_to_sigma2(t.snr_db);
    return t;
}

CoherenceBlock simulate_block(const FadingTask& task, int block_len, const Constellation& c,
                              Rng& rng) {
    if (block_len < 1) throw std::invalid_argument("simulate_block: block_len must be >= 1");
    CoherenceBlock b;
    b.task = task;
    b.block_len = block_len;
    b.labels.resize(static_cast<std::size_t>(block_len));
    b.x.resize(static_cast<std::size_t>(block_len));
    b.y.resize(static_cast<std::size_t>(block_len));
    const double ns = std::sqrt(task.sigma2 / 2.0);  // per-component noise std
    for (int t = 0; t < block_len; ++t) {
        const int label = rng.uniform_int(c.order);
        b.labels[static_cast<std::size_t>(t)] = label;
        const cplx xt = c.points[static_cast<std::size_t>(label)];
        const cplx zt(ns * rng.normal(), ns * rng.normal());
        b.x[static_cast<std::size_t>(t)] = xt;
        b.y[static_cast<std::size_t>(t)] = task.h * xt + zt;
    }
    return b;
}

PromptSequence assemble_train_prompt(const CoherenceBlock& block) {
    PromptSequence p;
    const int T = block.block_len;
    p.roles.reserve(static_cast<std::size_t>(2 * T));
    p.tokens.reserve(static_cast<std::size_t>(2 * T));
    for (int t = 0; t < T; ++t) {
        p.query_positions.push_back(static_cast<int>(p.tokens.size()));
        p.roles.push_back(Role::Received);
        p.tokens.push_back(to_token(block.y[static_cast<std::size_t>(t)]));
        p.roles.push_back(Role::Transmitted);
        p.tokens.push_back(to_token(block.x[static_cast<std::size_t>(t)]));
    }
    return p;
}

PromptSequence assemble_eval_prompt(const CoherenceBlock& block, int n_pilots, int query_t) {
    const int T = block.block_len;
    if (n_pilots < 0 || query_t <= n_pilots || query_t > T) {
        throw std::invalid_argument("assemble_eval_prompt: need 0 <= k < t <= T, got k=" +
                                    std::to_string(n_pilots) + " t=" + std::to_string(query_t) +
                                    " T=" + std::to_string(T));
    }
    PromptSequence p;
    for (int i = 0; i < n_pilots; ++i) {
        p.roles.push_back(Role::Received);
        p.tokens.push_back(to_token(block.y[static_cast<std::size_t>(i)]));
        p.roles.push_back(Role::Transmitted);
        p.tokens.push_back(to_token(block.x[static_cast<std::size_t>(i)]));
    }
    p.query_positions.push_back(static_cast<int>(p.tokens.size()));
    p.roles.push_back(Role::Received);
    p.tokens.push_back(to_token(block.y[static_cast<std::size_t>(query_t - 1)]));
    return p;
}

int project_nearest(cplx xhat, const Constellation& c) {
    int best = 0;
    double best_d = std::norm(xhat - c.points[0]);
    for (int i = 1; i < c.order; ++i) {
        const double d = std::norm(xhat - c.points[static_cast<std::size_t>(i)]);
        if (d < best_d) {  // strict: ties keep the lowest label
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace choose
