#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <vector>

#include "choose/rng.hpp"

namespace choose {

using cplx = std::complex<double>;

// Square-QAM symbol set, unit average power. Labels are the row-major grid
// order of the points vector.
struct Constellation {
    int order = 0;
    std::vector<cplx> points;
    double max_coord = 0.0;  // largest |Re| == largest |Im| after scaling
};

// order in {4, 16, 64}
Constellation build_constellation(int order);

// SNR = 1/sigma^2 with unit signal and channel power
double snr_db_to_sigma2(double snr_db);

// One detection task: channel coefficient and noise level. h stays constant
// within a coherence block.
struct FadingTask {
    cplx h;
    double sigma2 = 0.0;
    double snr_db = 0.0;
};

// h ~ CN(0,1) (Rayleigh), snr_db ~ Uniform[lo, hi]
FadingTask sample_task(Rng& rng, double snr_lo_db, double snr_hi_db);

struct CoherenceBlock {
    FadingTask task;
    int block_len = 0;           // T
    std::vector<int> labels;     // transmitted symbol indices
    std::vector<cplx> x;         // transmitted symbols
    std::vector<cplx> y;         // received, y_t = h*x_t + z_t
};

CoherenceBlock simulate_block(const FadingTask& task, int block_len, const Constellation& c,
                              Rng& rng);

enum class Role : std::uint8_t { Received, Transmitted };

// Interleaved I/Q token sequence. Training layout (y1,x1,...,yT,xT) marks
// every Received position as a query; eval layout (y1,x1,...,yk,xk,yt) marks
// only the final token.
struct PromptSequence {
    std::vector<Role> roles;
    std::vector<std::array<double, 2>> tokens;
    std::vector<int> query_positions;

    int length() const { return static_cast<int>(tokens.size()); }
};

PromptSequence assemble_train_prompt(const CoherenceBlock& block);

// n_pilots = k in [0, T), query_t is the 1-based symbol index with k < query_t <= T
PromptSequence assemble_eval_prompt(const CoherenceBlock& block, int n_pilots, int query_t);

// Euclidean nearest constellation point; ties go to the lowest label.
int project_nearest(cplx xhat, const Constellation& c);

inline std::array<double, 2> to_token(cplx v) { return {v.real(), v.imag()}; }
inline cplx from_token(const std::array<double, 2>& t) { return {t[0], t[1]}; }

}  // namespace choose
