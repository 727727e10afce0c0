#include "choose/train.hpp"

#include <atomic>
#include <mutex>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <vector>

#include <json.hpp>

#include "choose/channel.hpp"
#include "choose/checkpoint.hpp"

namespace choose {

using nlohmann::json;

void TrainConfig::validate() const {
    model.validate();
    if (modulation != 4 && modulation != 16 && modulation != 64)
        throw std::invalid_argument("TrainConfig: modulation must be 4, 16 or 64");
    if (block_len < 1) throw std::invalid_argument("TrainConfig: block_len must be >= 1");
    if (snr_lo_db > snr_hi_db) throw std::invalid_argument("TrainConfig: snr range lo > hi");
    if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
    if (warmup_steps < 0) throw std::invalid_argument("TrainConfig: warmup_steps must be >= 0");
    if (grad_clip < 0.0) throw std::invalid_argument("TrainConfig: grad_clip must be >= 0");
    const int needed = 2 * block_len + std::max(model.n_thoughts, 1) - 1;
    if (model.max_positions < needed)
        throw std::invalid_argument("TrainConfig: max_positions " +
                                    std::to_string(model.max_positions) + " < required " +
                                    std::to_string(needed));
}

namespace {

ModelConfig model_config_from_json(const json& j, int block_len, int* max_positions_given) {
    ModelConfig cfg;
    *max_positions_given = 0;
    for (const auto& [key, value] : j.items()) {
        if (key == "n_layers") cfg.n_layers = value.get<int>();
        else if (key == "embed_dim") cfg.embed_dim = value.get<int>();
        else if (key == "n_heads") cfg.n_heads = value.get<int>();
        else if (key == "n_thoughts") cfg.n_thoughts = value.get<int>();
        else if (key == "max_positions") { cfg.max_positions = value.get<int>(); *max_positions_given = 1; }
        else if (key == "mlp_ratio") cfg.mlp_ratio = value.get<int>();
        else throw std::invalid_argument("config: unknown key model." + key);
    }
    if (!*max_positions_given) cfg.max_positions = 2 * block_len + std::max(cfg.n_thoughts, 0);
    return cfg;
}

}  // namespace

TrainConfig train_config_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    TrainConfig cfg;
    bool snr_given = false;
    bool model_given = false;
    json model_json;
    for (const auto& [key, value] : j.items()) {
        if (key == "model") { model_json = value; model_given = true; }
        else if (key == "modulation") cfg.modulation = value.get<int>();
        else if (key == "block_len") cfg.block_len = value.get<int>();
        else if (key == "snr_range_db") {
            if (!value.is_array() || value.size() != 2)
                throw std::invalid_argument("config: snr_range_db must be [lo, hi]");
            cfg.snr_lo_db = value[0].get<double>();
            cfg.snr_hi_db = value[1].get<double>();
            snr_given = true;
        } else if (key == "lr") cfg.lr = value.get<double>();
        else if (key == "batch_size") cfg.batch_size = value.get<int>();
        else if (key == "total_steps") cfg.total_steps = value.get<long>();
        else if (key == "warmup_steps") cfg.warmup_steps = value.get<int>();
        else if (key == "grad_clip") cfg.grad_clip = value.get<double>();
        else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
        else if (key == "out_dir") cfg.out_dir = value.get<std::string>();
        else if (key == "chain_mode") {
            const auto mode = value.get<std::string>();
            if (mode == "masked") cfg.chain_mode = ChainMode::Masked;
            else if (mode == "unrolled") cfg.chain_mode = ChainMode::Unrolled;
            else throw std::invalid_argument("config: chain_mode must be masked or unrolled");
        } else if (key == "checkpoint_every") cfg.checkpoint_every = value.get<long>();
        else if (key == "log_every") cfg.log_every = value.get<long>();
        else if (key == "threads") cfg.n_threads = value.get<int>();
        else throw std::invalid_argument("config: unknown key " + key);
    }
    if (!snr_given && cfg.modulation == 64) {
        cfg.snr_lo_db = 30.0;
        cfg.snr_hi_db = 45.0;
    }
    int max_positions_given = 0;
    if (model_given) cfg.model = model_config_from_json(model_json, cfg.block_len, &max_positions_given);
    else cfg.model.max_positions = 2 * cfg.block_len + std::max(cfg.model.n_thoughts, 0);
    cfg.validate();
    return cfg;
}

TrainConfig train_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return train_config_from_json_text(text);
}

std::string train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["model"] = {{"n_layers", cfg.model.n_layers},
                  {"embed_dim", cfg.model.embed_dim},
                  {"n_heads", cfg.model.n_heads},
                  {"n_thoughts", cfg.model.n_thoughts},
                  {"max_positions", cfg.model.max_positions},
                  {"mlp_ratio", cfg.model.mlp_ratio}};
    j["modulation"] = cfg.modulation;
    j["block_len"] = cfg.block_len;
    j["snr_range_db"] = {cfg.snr_lo_db, cfg.snr_hi_db};
    j["lr"] = cfg.lr;
    j["batch_size"] = cfg.batch_size;
    j["total_steps"] = cfg.total_steps;
    j["warmup_steps"] = cfg.warmup_steps;
    j["grad_clip"] = cfg.grad_clip;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["chain_mode"] = cfg.chain_mode == ChainMode::Masked ? "masked" : "unrolled";
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["log_every"] = cfg.log_every;
    j["threads"] = cfg.n_threads;
    return j.dump();
}

namespace {

class Adam {
  public:
    Adam(std::size_t n_params, double lr, int warmup)
        : m_(n_params, 0.0f), v_(n_params, 0.0f), lr_(lr), warmup_(warmup) {}

    void step(long step_idx, std::vector<float*>& weights, const std::vector<float>& grads) {
        const double lr_t =
            warmup_ > 0 ? lr_ * std::min(1.0, static_cast<double>(step_idx) / warmup_) : lr_;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_idx));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_idx));
        std::size_t off = 0;
        for (float* w : weights) {
            const float g = grads[off];
            m_[off] = static_cast<float>(kBeta1 * m_[off] + (1.0 - kBeta1) * g);
            v_[off] = static_cast<float>(kBeta2 * v_[off] + (1.0 - kBeta2) * g * g);
            const double mhat = m_[off] / bc1;
            const double vhat = v_[off] / bc2;
            *w -= static_cast<float>(lr_t * mhat / (std::sqrt(vhat) + kEps));
            ++off;
        }
    }

  private:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    std::vector<float> m_, v_;
    double lr_;
    int warmup_;
};

// flattened pointers to every weight element, in named order
std::vector<float*> flat_param_view(ModelParams<float>& params) {
    std::vector<float*> view;
    for (auto& [name, t] : params.named())
        for (auto& w : t->value()) view.push_back(&w);
    return view;
}

struct SequenceWork {
    double loss = 0.0;
    std::vector<float> grads;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, std::ostream* log) {
    cfg.validate();
    const Constellation constellation = build_constellation(cfg.modulation);
    const Rng master(cfg.seed);

    Rng init_rng = master.sub(stream::kParamInit);
    ModelParams<float> params = init_params<float>(cfg.model, init_rng);
    const std::size_t n_params = static_cast<std::size_t>(count_params(cfg.model));
    std::vector<float*> weights = flat_param_view(params);

    Adam adam(n_params, cfg.lr, cfg.warmup_steps);
    const int n_threads =
        std::min<int>(cfg.n_threads > 0 ? cfg.n_threads
                                        : std::max(1u, std::thread::hardware_concurrency()),
                      cfg.batch_size);

    const std::string config_json = train_config_to_json(cfg);
    const std::string config_hash = fnv1a_hex(config_json);

    std::vector<SequenceWork> batch_out(static_cast<std::size_t>(cfg.batch_size));
    double objective = 0.0;
    const auto t_start = std::chrono::steady_clock::now();

    for (long step = 1; step <= cfg.total_steps; ++step) {
        std::atomic<int> next_seq{0};
        std::mutex err_mu;
        std::string worker_error;
        auto worker_body = [&]() {
            // thread-local copy so tape gradients never race on shared tensors
            ModelParams<float> local = params.clone();
            auto local_named = local.named();
            for (;;) {
                const int i = next_seq.fetch_add(1);
                if (i >= cfg.batch_size) break;
                local.zero_grads();
                const std::uint64_t task_idx =
                    static_cast<std::uint64_t>(step - 1) * cfg.batch_size + i;
                Rng rng = master.sub(stream::kTrainTask, task_idx);
                const FadingTask task = sample_task(rng, cfg.snr_lo_db, cfg.snr_hi_db);
                const CoherenceBlock block =
                    simulate_block(task, cfg.block_len, constellation, rng);
                const PromptSequence prompt = assemble_train_prompt(block);

                Tape<float> tape;
                Tensor<float> preds;
                if (cfg.model.n_thoughts == 0) {
                    preds = forward_vanilla(local, prompt, &tape);
                } else {
                    preds = forward_choose(local, prompt, cfg.model.n_thoughts, cfg.chain_mode,
                                           &tape)
                                .predictions;
                }
                Tensor<float> targets = Tensor<float>::zeros({cfg.block_len, 2});
                for (int t = 0; t < cfg.block_len; ++t) {
                    targets.value()[static_cast<std::size_t>(t) * 2] =
                        static_cast<float>(block.x[static_cast<std::size_t>(t)].real());
                    targets.value()[static_cast<std::size_t>(t) * 2 + 1] =
                        static_cast<float>(block.x[static_cast<std::size_t>(t)].imag());
                }
                auto diff = sub(preds, targets, &tape);
                auto loss = sum_all(mul(diff, diff, &tape), &tape);
                tape.backward(loss);

                SequenceWork& out = batch_out[static_cast<std::size_t>(i)];
                out.loss = loss.item();
                out.grads.clear();
                out.grads.reserve(n_params);
                for (auto& [name, t] : local_named)
                    out.grads.insert(out.grads.end(), t->grad().begin(), t->grad().end());
            }
        };
        auto worker = [&]() {
            try {
                worker_body();
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (worker_error.empty()) worker_error = e.what();
            }
        };

        if (n_threads <= 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            pool.reserve(static_cast<std::size_t>(n_threads));
            for (int w = 0; w < n_threads; ++w) pool.emplace_back(worker);
            for (auto& th : pool) th.join();
        }
        if (!worker_error.empty())
            throw std::runtime_error("train: step " + std::to_string(step) +
                                     " aborted: " + worker_error);

        // sequence-ordered reduction: deterministic for any thread count
        std::vector<float> grads(n_params, 0.0f);
        objective = 0.0;
        for (const auto& seq : batch_out) {
            objective += seq.loss;
            for (std::size_t j = 0; j < n_params; ++j) grads[j] += seq.grads[j];
        }
        objective /= cfg.batch_size;
        const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
        for (auto& g : grads) g *= inv_batch;

        if (!std::isfinite(objective))
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));

        if (cfg.grad_clip > 0.0) {
            double norm_sq = 0.0;
            for (float g : grads) norm_sq += static_cast<double>(g) * g;
            const double norm = std::sqrt(norm_sq);
            if (norm > cfg.grad_clip) {
                const float scale_by = static_cast<float>(cfg.grad_clip / norm);
                for (auto& g : grads) g *= scale_by;
            }
        }

        adam.step(step, weights, grads);

        if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1)) {
            const auto elapsed = std::chrono::duration<double>(
                                     std::chrono::steady_clock::now() - t_start)
                                     .count();
            (*log) << "step " << step << "/" << cfg.total_steps << "  loss " << objective
                   << "  mse " << objective / cfg.block_len << "  elapsed " << elapsed << "s\n";
            log->flush();
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
            step != cfg.total_steps) {
            CheckpointProvenance prov{config_hash, step, objective, cfg.seed};
            save_checkpoint(cfg.out_dir, params, prov);
        }
    }

    CheckpointProvenance prov{config_hash, cfg.total_steps, objective, cfg.seed};
    if (!cfg.out_dir.empty()) save_checkpoint(cfg.out_dir, params, prov);

    TrainResult result{std::move(params), objective, objective / cfg.block_len, cfg.total_steps};
    return result;
}

}  // namespace choose
