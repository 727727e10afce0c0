#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "choose/model.hpp"

namespace choose {

struct TrainConfig {
    ModelConfig model;
    int modulation = 16;
    int block_len = 11;  // T
    double snr_lo_db = 25.0;
    double snr_hi_db = 35.0;
    double lr = 3e-4;
    int batch_size = 128;
    long total_steps = 100000;
    int warmup_steps = 1000;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    std::string out_dir = "ckpt";
    ChainMode chain_mode = ChainMode::Masked;
    long checkpoint_every = 0;  // 0: final checkpoint only
    long log_every = 100;
    int n_threads = 0;  // 0: hardware concurrency

    void validate() const;
};

// JSON mirror of TrainConfig; unknown keys are rejected. `snr_range_db`
// defaults to [25,35] for 16QAM and [30,45] for 64QAM; `model.max_positions`
// defaults to 2*block_len + n_thoughts.
TrainConfig train_config_from_json_text(const std::string& text);
TrainConfig train_config_from_file(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);  // canonical, used for hashing

struct TrainResult {
    ModelParams<float> params;
    double final_loss = 0.0;      // batch-mean of per-sequence sums (the objective)
    double final_mse = 0.0;       // objective / T, per-query soft MSE
    long steps = 0;
};

// Adam on freshly simulated batches (new tasks every step). Loss per sequence
// sums the squared complex error of the final prediction over all T query
// positions; the batch objective is the mean over sequences. Deterministic
// given (seed, build): gradients reduce in sequence order no matter the
// thread count.
TrainResult train(const TrainConfig& cfg, std::ostream* log = nullptr);

}  // namespace choose
