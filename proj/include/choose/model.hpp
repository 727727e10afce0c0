#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "choose/channel.hpp"
#include "choose/rng.hpp"
#include "choose/tensor.hpp"

namespace choose {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int n_layers = 1;
    int embed_dim = 32;
    int n_heads = 4;
    int n_thoughts = 0;  // C; 0 = vanilla ICL
    int max_positions = 26;
    int mlp_ratio = 4;

    void validate() const {
        if (n_layers < 0 || n_layers > 8)
            throw std::invalid_argument("ModelConfig: n_layers must be in [0, 8]");
        if (embed_dim < 1) throw std::invalid_argument("ModelConfig: embed_dim must be >= 1");
        if (n_heads < 1 || embed_dim % n_heads != 0)
            throw std::invalid_argument("ModelConfig: embed_dim must be divisible by n_heads");
        if (n_thoughts < 0) throw std::invalid_argument("ModelConfig: n_thoughts must be >= 0");
        if (max_positions < 2) throw std::invalid_argument("ModelConfig: max_positions must be >= 2");
        if (mlp_ratio < 1) throw std::invalid_argument("ModelConfig: mlp_ratio must be >= 1");
    }

    int head_dim() const { return embed_dim / n_heads; }

    bool operator==(const ModelConfig&) const = default;
};

// Exact parameter count:
//   input head        2d + d
//   positional table  max_positions * d
//   per layer         2d (ln1) + 4(d^2+d) (attention) + 2d (ln2)
//                     + 2*m*d^2 + (m+1)d (mlp, hidden m*d)
//   final layer norm  2d
//   output head       2d + 2
// = 3d + P*d + L*((4+2m)d^2 + (9+m)d) + 2d + 2d + 2
inline long count_params(const ModelConfig& cfg) {
    cfg.validate();
    const long d = cfg.embed_dim;
    const long m = cfg.mlp_ratio;
    const long per_layer = (4 + 2 * m) * d * d + (9 + m) * d;
    return 3 * d + static_cast<long>(cfg.max_positions) * d + cfg.n_layers * per_layer + 2 * d +
           (2 * d + 2);
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

template <typename T>
struct ModelParams {
    ModelConfig config;

    Tensor<T> w_in, b_in;  // 2 -> d
    Tensor<T> pos;         // max_positions x d
    struct Layer {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> w_fc, b_fc, w_proj, b_proj;
    };
    std::vector<Layer> layers;
    Tensor<T> lnf_g, lnf_b;
    Tensor<T> w_out, b_out;  // d -> 2

    // fixed order; checkpoints and the optimizer both follow it
    std::vector<std::pair<std::string, Tensor<T>*>> named() {
        std::vector<std::pair<std::string, Tensor<T>*>> v;
        v.reserve(7 + layers.size() * 16);
        v.emplace_back("w_in", &w_in);
        v.emplace_back("b_in", &b_in);
        v.emplace_back("pos", &pos);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string base = "layers." + std::to_string(i) + ".";
            Layer& l = layers[i];
            v.emplace_back(base + "ln1_g", &l.ln1_g);
            v.emplace_back(base + "ln1_b", &l.ln1_b);
            v.emplace_back(base + "wq", &l.wq);
            v.emplace_back(base + "bq", &l.bq);
            v.emplace_back(base + "wk", &l.wk);
            v.emplace_back(base + "bk", &l.bk);
            v.emplace_back(base + "wv", &l.wv);
            v.emplace_back(base + "bv", &l.bv);
            v.emplace_back(base + "wo", &l.wo);
            v.emplace_back(base + "bo", &l.bo);
            v.emplace_back(base + "ln2_g", &l.ln2_g);
            v.emplace_back(base + "ln2_b", &l.ln2_b);
            v.emplace_back(base + "w_fc", &l.w_fc);
            v.emplace_back(base + "b_fc", &l.b_fc);
            v.emplace_back(base + "w_proj", &l.w_proj);
            v.emplace_back(base + "b_proj", &l.b_proj);
        }
        v.emplace_back("lnf_g", &lnf_g);
        v.emplace_back("lnf_b", &lnf_b);
        v.emplace_back("w_out", &w_out);
        v.emplace_back("b_out", &b_out);
        return v;
    }

    void set_requires_grad(bool b) {
        for (auto& [name, t] : named()) t->set_requires_grad(b);
    }

    void zero_grads() {
        for (auto& [name, t] : named()) t->zero_grad();
    }

    // deep copy; the copy owns fresh storage
    ModelParams clone() const {
        ModelParams out = make_zeroed(config);
        auto dst = out.named();
        auto src = const_cast<ModelParams*>(this)->named();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i].second->value() = src[i].second->value();
            dst[i].second->set_requires_grad(src[i].second->requires_grad());
        }
        return out;
    }

    static ModelParams make_zeroed(const ModelConfig& cfg) {
        cfg.validate();
        const int d = cfg.embed_dim;
        const int md = cfg.mlp_ratio * d;
        ModelParams p;
        p.config = cfg;
        p.w_in = Tensor<T>::zeros({2, d});
        p.b_in = Tensor<T>::zeros({d});
        p.pos = Tensor<T>::zeros({cfg.max_positions, d});
        p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& l : p.layers) {
            l.ln1_g = Tensor<T>::zeros({d});
            l.ln1_b = Tensor<T>::zeros({d});
            l.wq = Tensor<T>::zeros({d, d});
            l.bq = Tensor<T>::zeros({d});
            l.wk = Tensor<T>::zeros({d, d});
            l.bk = Tensor<T>::zeros({d});
            l.wv = Tensor<T>::zeros({d, d});
            l.bv = Tensor<T>::zeros({d});
            l.wo = Tensor<T>::zeros({d, d});
            l.bo = Tensor<T>::zeros({d});
            l.ln2_g = Tensor<T>::zeros({d});
            l.ln2_b = Tensor<T>::zeros({d});
            l.w_fc = Tensor<T>::zeros({d, md});
            l.b_fc = Tensor<T>::zeros({md});
            l.w_proj = Tensor<T>::zeros({md, d});
            l.b_proj = Tensor<T>::zeros({d});
        }
        p.lnf_g = Tensor<T>::zeros({d});
        p.lnf_b = Tensor<T>::zeros({d});
        p.w_out = Tensor<T>::zeros({d, 2});
        p.b_out = Tensor<T>::zeros({2});
        return p;
    }
};

// Gaussian(0, 0.02^2) weights and positional table, zero biases, unit norm gains.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
    ModelParams<T> p = ModelParams<T>::make_zeroed(cfg);
    auto is_weight = [](const std::string& name) {
        return name == "w_in" || name == "pos" || name == "w_out" ||
               name.ends_with(".wq") || name.ends_with(".wk") || name.ends_with(".wv") ||
               name.ends_with(".wo") || name.ends_with(".w_fc") || name.ends_with(".w_proj");
    };
    auto is_norm_gain = [](const std::string& name) {
        return name == "lnf_g" || name.ends_with("ln1_g") || name.ends_with("ln2_g");
    };
    for (auto& [name, t] : p.named()) {
        if (is_weight(name)) {
            for (auto& v : t->value()) v = static_cast<T>(kInitStd * rng.normal());
        } else if (is_norm_gain(name)) {
            for (auto& v : t->value()) v = T(1);
        }
        // biases stay exactly zero
    }
    p.set_requires_grad(true);
    return p;
}

// count_params must agree with the allocated shapes
template <typename T>
long sum_param_elements(ModelParams<T>& p) {
    long n = 0;
    for (auto& [name, t] : p.named()) n += t->numel();
    return n;
}

// ---------------------------------------------------------------------------
// chain layout: physical token arrangement for CHOOSE forwards
// ---------------------------------------------------------------------------
//
// The first thought of a query is read directly at its Received position, so
// each query chain reserves C-1 physical slots, placed immediately after the
// query token. Slot i carries thought i as its input embedding and yields
// thought i+1 at its output. Logical (positional-table) indices restart the
// count from the query position, so every chain sees the positions it would
// see if it ran alone on its own context prefix.

struct ChainLayout {
    int n_phys = 0;
    int n_queries = 0;
    int n_thoughts = 0;                       // C
    std::vector<int> prompt_of_phys;          // -1 for slots
    std::vector<int> logical_pos;             // per phys token
    std::vector<int> slot_query;              // -1 for non-slots
    std::vector<int> slot_ord;                // 1..C-1 for slots, 0 otherwise
    std::vector<int> query_phys;              // per query
    std::vector<int> query_prompt;            // per query: prompt index
    std::vector<std::vector<int>> slot_phys;  // per query: C-1 slot positions
};

inline ChainLayout build_chain_layout(const PromptSequence& prompt, int n_thoughts) {
    if (n_thoughts < 1) throw std::invalid_argument("build_chain_layout: need C >= 1");
    ChainLayout lay;
    lay.n_thoughts = n_thoughts;
    lay.n_queries = static_cast<int>(prompt.query_positions.size());
    lay.query_phys.resize(static_cast<std::size_t>(lay.n_queries));
    lay.query_prompt = prompt.query_positions;
    lay.slot_phys.assign(static_cast<std::size_t>(lay.n_queries), {});
    std::vector<int> query_of_prompt(static_cast<std::size_t>(prompt.length()), -1);
    for (int q = 0; q < lay.n_queries; ++q)
        query_of_prompt[static_cast<std::size_t>(prompt.query_positions[q])] = q;

    for (int i = 0; i < prompt.length(); ++i) {
        const int phys = lay.n_phys++;
        lay.prompt_of_phys.push_back(i);
        lay.logical_pos.push_back(i);
        lay.slot_query.push_back(-1);
        lay.slot_ord.push_back(0);
        const int q = query_of_prompt[static_cast<std::size_t>(i)];
        if (q >= 0) {
            lay.query_phys[static_cast<std::size_t>(q)] = phys;
            for (int o = 1; o < n_thoughts; ++o) {
                const int sp = lay.n_phys++;
                lay.prompt_of_phys.push_back(-1);
                lay.logical_pos.push_back(i + o);
                lay.slot_query.push_back(q);
                lay.slot_ord.push_back(o);
                lay.slot_phys[static_cast<std::size_t>(q)].push_back(sp);
            }
        }
    }
    return lay;
}

// Additive attention mask for the chain layout. Thought slots attend to their
// own chain (context prefix through the query, earlier slots, themselves);
// nothing outside a chain can attend into it.
template <typename T>
Tensor<T> chain_mask(const ChainLayout& lay) {
    const int n = lay.n_phys;
    Tensor<T> mask = Tensor<T>::zeros({n, n});
    constexpr T kBlocked = -std::numeric_limits<T>::infinity();
    T* m = mask.value().data();
    for (int a = 0; a < n; ++a) {
        T* row = m + static_cast<std::size_t>(a) * n;
        const bool a_slot = lay.slot_query[static_cast<std::size_t>(a)] >= 0;
        for (int b = 0; b < n; ++b) {
            bool ok;
            const bool b_slot = lay.slot_query[static_cast<std::size_t>(b)] >= 0;
            if (!a_slot && !b_slot) {
                ok = lay.prompt_of_phys[static_cast<std::size_t>(b)] <=
                     lay.prompt_of_phys[static_cast<std::size_t>(a)];
            } else if (a_slot && !b_slot) {
                const int q = lay.slot_query[static_cast<std::size_t>(a)];
                ok = lay.prompt_of_phys[static_cast<std::size_t>(b)] <=
                     lay.query_prompt[static_cast<std::size_t>(q)];
            } else if (a_slot && b_slot) {
                ok = lay.slot_query[static_cast<std::size_t>(a)] ==
                         lay.slot_query[static_cast<std::size_t>(b)] &&
                     lay.slot_ord[static_cast<std::size_t>(b)] <=
                         lay.slot_ord[static_cast<std::size_t>(a)];
            } else {
                ok = false;  // non-slot never attends a slot
            }
            row[b] = ok ? T(0) : kBlocked;
        }
    }
    return mask;
}

template <typename T>
Tensor<T> causal_mask(int n) {
    Tensor<T> mask = Tensor<T>::zeros({n, n});
    constexpr T kBlocked = -std::numeric_limits<T>::infinity();
    T* m = mask.value().data();
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) m[static_cast<std::size_t>(a) * n + b] = kBlocked;
    return mask;
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

// pre-norm decoder stack over an embedded sequence; returns the hidden states
// after the final layer norm
template <typename T>
Tensor<T> backbone_forward(const ModelParams<T>& p, Tensor<T> x, const Tensor<T>& mask,
                           Tape<T>* tape = nullptr) {
    const int d = p.config.embed_dim;
    const int nh = p.config.n_heads;
    const int dh = p.config.head_dim();
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
    const T eps = static_cast<T>(kLayerNormEps);
    for (const auto& l : p.layers) {
        auto h = layer_norm(x, l.ln1_g, l.ln1_b, eps, tape);
        auto q = add_bias(matmul(h, l.wq, tape), l.bq, tape);
        auto k = add_bias(matmul(h, l.wk, tape), l.bk, tape);
        auto v = add_bias(matmul(h, l.wv, tape), l.bv, tape);
        std::vector<Tensor<T>> head_out;
        head_out.reserve(static_cast<std::size_t>(nh));
        for (int hh = 0; hh < nh; ++hh) {
            auto qh = slice_cols(q, hh * dh, (hh + 1) * dh, tape);
            auto kh = slice_cols(k, hh * dh, (hh + 1) * dh, tape);
            auto vh = slice_cols(v, hh * dh, (hh + 1) * dh, tape);
            auto scores = scale(matmul_nt(qh, kh, tape), att_scale, tape);
            auto att = masked_softmax(scores, mask, tape);
            head_out.push_back(matmul(att, vh, tape));
        }
        auto merged = concat_cols(head_out, tape);
        auto attn = add_bias(matmul(merged, l.wo, tape), l.bo, tape);
        x = add(x, attn, tape);
        auto h2 = layer_norm(x, l.ln2_g, l.ln2_b, eps, tape);
        auto fc = gelu(add_bias(matmul(h2, l.w_fc, tape), l.b_fc, tape), tape);
        auto proj = add_bias(matmul(fc, l.w_proj, tape), l.b_proj, tape);
        x = add(x, proj, tape);
    }
    return layer_norm(x, p.lnf_g, p.lnf_b, eps, tape);
}

namespace model_detail {

template <typename T>
void check_positions(const ModelParams<T>& p, const std::vector<int>& logical) {
    for (int idx : logical) {
        if (idx >= p.config.max_positions) {
            throw std::invalid_argument(
                "sequence needs positional index " + std::to_string(idx) +
                " but max_positions is " + std::to_string(p.config.max_positions));
        }
    }
}

// input-head embedding plus positional rows; token_of_phys[i] == -1 leaves a
// zero token (thought slots get their real input later via set_rows)
template <typename T>
Tensor<T> embed(const ModelParams<T>& p, const PromptSequence& prompt,
                const std::vector<int>& token_of_phys, const std::vector<int>& logical,
                Tape<T>* tape) {
    check_positions(p, logical);
    const int n = static_cast<int>(token_of_phys.size());
    Tensor<T> tok = Tensor<T>::zeros({n, 2});
    for (int i = 0; i < n; ++i) {
        const int ti = token_of_phys[static_cast<std::size_t>(i)];
        if (ti >= 0) {
            tok.value()[static_cast<std::size_t>(i) * 2 + 0] =
                static_cast<T>(prompt.tokens[static_cast<std::size_t>(ti)][0]);
            tok.value()[static_cast<std::size_t>(i) * 2 + 1] =
                static_cast<T>(prompt.tokens[static_cast<std::size_t>(ti)][1]);
        }
    }
    auto e = add_bias(matmul(tok, p.w_in, tape), p.b_in, tape);
    return add(e, gather_rows(p.pos, logical, tape), tape);
}

template <typename T>
Tensor<T> output_head(const ModelParams<T>& p, const Tensor<T>& h, Tape<T>* tape) {
    return add_bias(matmul(h, p.w_out, tape), p.b_out, tape);
}

}  // namespace model_detail

// ---------------------------------------------------------------------------
// vanilla forward
// ---------------------------------------------------------------------------

// predictions (I,Q) at every query position, [n_queries x 2]
template <typename T>
Tensor<T> forward_vanilla(const ModelParams<T>& p, const PromptSequence& prompt,
                          Tape<T>* tape = nullptr) {
    const int n = prompt.length();
    std::vector<int> token_of_phys(static_cast<std::size_t>(n));
    std::vector<int> logical(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        token_of_phys[static_cast<std::size_t>(i)] = i;
        logical[static_cast<std::size_t>(i)] = i;
    }
    auto x = model_detail::embed(p, prompt, token_of_phys, logical, tape);
    auto h = backbone_forward(p, x, causal_mask<T>(n), tape);
    auto hq = gather_rows(h, prompt.query_positions, tape);
    return model_detail::output_head(p, hq, tape);
}

// ---------------------------------------------------------------------------
// CHOOSE forward
// ---------------------------------------------------------------------------

enum class ChainMode { Masked, Unrolled };

template <typename T>
struct ChooseOut {
    Tensor<T> predictions;             // [n_queries x 2], from the final thought
    std::vector<Tensor<T>> thoughts;   // C entries, each [n_queries x d]
};

namespace model_detail {

template <typename T>
ChooseOut<T> forward_choose_masked(const ModelParams<T>& p, const PromptSequence& prompt, int C,
                                   Tape<T>* tape) {
    const ChainLayout lay = build_chain_layout(prompt, C);
    std::vector<int> token_of_phys(static_cast<std::size_t>(lay.n_phys));
    for (int i = 0; i < lay.n_phys; ++i)
        token_of_phys[static_cast<std::size_t>(i)] = lay.prompt_of_phys[static_cast<std::size_t>(i)];

    auto x = embed(p, prompt, token_of_phys, lay.logical_pos, tape);
    const auto mask = chain_mask<T>(lay);

    ChooseOut<T> out;
    out.thoughts.reserve(static_cast<std::size_t>(C));
    for (int j = 1; j <= C; ++j) {
        auto h = backbone_forward(p, x, mask, tape);
        std::vector<int> producers(static_cast<std::size_t>(lay.n_queries));
        for (int q = 0; q < lay.n_queries; ++q) {
            producers[static_cast<std::size_t>(q)] =
                (j == 1) ? lay.query_phys[static_cast<std::size_t>(q)]
                         : lay.slot_phys[static_cast<std::size_t>(q)][static_cast<std::size_t>(j - 2)];
        }
        auto e_j = gather_rows(h, producers, tape);
        out.thoughts.push_back(e_j);
        if (j < C) {
            std::vector<int> slots(static_cast<std::size_t>(lay.n_queries));
            std::vector<int> slot_logical(static_cast<std::size_t>(lay.n_queries));
            for (int q = 0; q < lay.n_queries; ++q) {
                const int sp = lay.slot_phys[static_cast<std::size_t>(q)][static_cast<std::size_t>(j - 1)];
                slots[static_cast<std::size_t>(q)] = sp;
                slot_logical[static_cast<std::size_t>(q)] = lay.logical_pos[static_cast<std::size_t>(sp)];
            }
            auto slot_in = add(e_j, gather_rows(p.pos, slot_logical, tape), tape);
            x = set_rows(x, slots, slot_in, tape);
        }
    }
    out.predictions = output_head(p, out.thoughts.back(), tape);
    return out;
}

template <typename T>
ChooseOut<T> forward_choose_unrolled(const ModelParams<T>& p, const PromptSequence& prompt, int C,
                                     Tape<T>* tape) {
    const int nq = static_cast<int>(prompt.query_positions.size());
    // per step j, per query: [1 x d] thought rows
    std::vector<std::vector<Tensor<T>>> rows(static_cast<std::size_t>(C));
    for (int q = 0; q < nq; ++q) {
        const int pq = prompt.query_positions[static_cast<std::size_t>(q)];
        std::vector<int> ctx_tokens(static_cast<std::size_t>(pq + 1));
        std::vector<int> ctx_logical(static_cast<std::size_t>(pq + 1));
        for (int i = 0; i <= pq; ++i) {
            ctx_tokens[static_cast<std::size_t>(i)] = i;
            ctx_logical[static_cast<std::size_t>(i)] = i;
        }
        std::vector<Tensor<T>> chain;  // thought input rows, position-encoded
        for (int j = 1; j <= C; ++j) {
            const int n = pq + 1 + static_cast<int>(chain.size());
            auto ctx = embed(p, prompt, ctx_tokens, ctx_logical, tape);
            Tensor<T> x;
            if (chain.empty()) {
                x = ctx;
            } else {
                std::vector<Tensor<T>> parts;
                parts.push_back(ctx);
                for (const auto& c : chain) parts.push_back(c);
                x = concat_rows(parts, tape);
            }
            auto h = backbone_forward(p, x, causal_mask<T>(n), tape);
            auto e_j = gather_rows(h, {n - 1}, tape);
            rows[static_cast<std::size_t>(j - 1)].push_back(e_j);
            if (j < C) {
                const int slot_logical = pq + j;
                check_positions(p, {slot_logical});
                auto pos_row = gather_rows(p.pos, {slot_logical}, tape);
                chain.push_back(add(e_j, pos_row, tape));
            }
        }
    }
    ChooseOut<T> out;
    out.thoughts.reserve(static_cast<std::size_t>(C));
    for (int j = 0; j < C; ++j)
        out.thoughts.push_back(nq == 1 ? rows[static_cast<std::size_t>(j)][0]
                                       : concat_rows(rows[static_cast<std::size_t>(j)], tape));
    out.predictions = output_head(p, out.thoughts.back(), tape);
    return out;
}

}  // namespace model_detail

// C latent refinement steps per query; gradients flow through the whole chain
template <typename T>
ChooseOut<T> forward_choose(const ModelParams<T>& p, const PromptSequence& prompt, int C,
                            ChainMode mode = ChainMode::Masked, Tape<T>* tape = nullptr) {
    if (C < 1) throw std::invalid_argument("forward_choose: need C >= 1");
    return mode == ChainMode::Masked ? model_detail::forward_choose_masked(p, prompt, C, tape)
                                     : model_detail::forward_choose_unrolled(p, prompt, C, tape);
}

// per-step output-head readout: entry j is OutputHead(thought j+1), [nq x 2];
// the last entry coincides with forward_choose's predictions
template <typename T>
std::vector<Tensor<T>> unfold_thoughts(const ModelParams<T>& p, const PromptSequence& prompt, int C,
                                       ChainMode mode = ChainMode::Masked, Tape<T>* tape = nullptr) {
    auto out = forward_choose(p, prompt, C, mode, tape);
    std::vector<Tensor<T>> preds;
    preds.reserve(out.thoughts.size());
    for (std::size_t j = 0; j + 1 < out.thoughts.size(); ++j)
        preds.push_back(model_detail::output_head(p, out.thoughts[j], tape));
    preds.push_back(out.predictions);
    return preds;
}

// ---------------------------------------------------------------------------
// KV-cached incremental inference
// ---------------------------------------------------------------------------

template <typename T>
struct KVCache {
    struct LayerKV {
        std::vector<T> k, v;  // cached_len x d, row-major, append-only
    };
    std::vector<LayerKV> layers;
    int dim = 0;
    int cached_len = 0;

    explicit KVCache(const ModelConfig& cfg)
        : layers(static_cast<std::size_t>(cfg.n_layers)), dim(cfg.embed_dim) {}
};

namespace model_detail {

template <typename T>
void row_layer_norm(const T* x, const T* g, const T* b, T* out, int d) {
    T mean = T(0);
    for (int j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
        const T dv = x[j] - mean;
        var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (int j = 0; j < d; ++j) out[j] = g[j] * (x[j] - mean) * inv + b[j];
}

// out[j] = sum_l x[l] * W[l, j] + b[j], W row-major [din x dout]
template <typename T>
void row_affine(const T* x, const T* w, const T* b, T* out, int din, int dout) {
    for (int j = 0; j < dout; ++j) out[j] = b[j];
    for (int l = 0; l < din; ++l) {
        const T xl = x[l];
        const T* wl = w + static_cast<std::size_t>(l) * dout;
        for (int j = 0; j < dout; ++j) out[j] += xl * wl[j];
    }
}

}  // namespace model_detail

// One incremental decoder step: appends exactly one K/V row per layer and
// returns the post-final-norm hidden state. `embedding` must already carry
// its positional encoding. `position` must equal the current cache length.
template <typename T>
std::vector<T> step_with_cache(const ModelParams<T>& p, KVCache<T>& cache,
                               const std::vector<T>& embedding, int position) {
    const int d = p.config.embed_dim;
    if (static_cast<int>(embedding.size()) != d)
        throw std::invalid_argument("step_with_cache: embedding size mismatch");
    if (position != cache.cached_len)
        throw std::invalid_argument("step_with_cache: position " + std::to_string(position) +
                                    " does not match cache length " +
                                    std::to_string(cache.cached_len));
    if (position >= p.config.max_positions)
        throw std::invalid_argument("step_with_cache: cache full at max_positions");

    const int nh = p.config.n_heads;
    const int dh = p.config.head_dim();
    const int md = p.config.mlp_ratio * d;
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

    std::vector<T> x(embedding.begin(), embedding.end());
    std::vector<T> h(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d));
    std::vector<T> krow(static_cast<std::size_t>(d)), vrow(static_cast<std::size_t>(d));
    std::vector<T> merged(static_cast<std::size_t>(d)), tmp(static_cast<std::size_t>(d));
    std::vector<T> fc(static_cast<std::size_t>(md));

    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const auto& l = p.layers[li];
        auto& kv = cache.layers[li];
        model_detail::row_layer_norm(x.data(), l.ln1_g.value().data(), l.ln1_b.value().data(),
                                     h.data(), d);
        model_detail::row_affine(h.data(), l.wq.value().data(), l.bq.value().data(), q.data(), d, d);
        model_detail::row_affine(h.data(), l.wk.value().data(), l.bk.value().data(), krow.data(), d,
                                 d);
        model_detail::row_affine(h.data(), l.wv.value().data(), l.bv.value().data(), vrow.data(), d,
                                 d);
        kv.k.insert(kv.k.end(), krow.begin(), krow.end());
        kv.v.insert(kv.v.end(), vrow.begin(), vrow.end());
        const int len = position + 1;

        for (int hh = 0; hh < nh; ++hh) {
            const int off = hh * dh;
            // scores against every cached position (all are attendable)
            std::vector<T> scores(static_cast<std::size_t>(len));
            T mx = -std::numeric_limits<T>::infinity();
            for (int t = 0; t < len; ++t) {
                const T* kt = kv.k.data() + static_cast<std::size_t>(t) * d + off;
                T acc = T(0);
                for (int j = 0; j < dh; ++j) acc += q[static_cast<std::size_t>(off + j)] * kt[j];
                acc *= att_scale;
                scores[static_cast<std::size_t>(t)] = acc;
                if (acc > mx) mx = acc;
            }
            T denom = T(0);
            for (int t = 0; t < len; ++t) {
                const T e = std::exp(scores[static_cast<std::size_t>(t)] - mx);
                scores[static_cast<std::size_t>(t)] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (int j = 0; j < dh; ++j) merged[static_cast<std::size_t>(off + j)] = T(0);
            for (int t = 0; t < len; ++t) {
                const T w = scores[static_cast<std::size_t>(t)] * inv;
                const T* vt = kv.v.data() + static_cast<std::size_t>(t) * d + off;
                for (int j = 0; j < dh; ++j) merged[static_cast<std::size_t>(off + j)] += w * vt[j];
            }
        }
        model_detail::row_affine(merged.data(), l.wo.value().data(), l.bo.value().data(), tmp.data(),
                                 d, d);
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];

        model_detail::row_layer_norm(x.data(), l.ln2_g.value().data(), l.ln2_b.value().data(),
                                     h.data(), d);
        model_detail::row_affine(h.data(), l.w_fc.value().data(), l.b_fc.value().data(), fc.data(),
                                 d, md);
        for (int j = 0; j < md; ++j) {
            const T v = fc[static_cast<std::size_t>(j)];
            const T u = ops_detail::kGeluRoot2OverPi<T> * (v + ops_detail::kGeluCubic<T> * v * v * v);
            fc[static_cast<std::size_t>(j)] = T(0.5) * v * (T(1) + std::tanh(u));
        }
        model_detail::row_affine(fc.data(), l.w_proj.value().data(), l.b_proj.value().data(),
                                 tmp.data(), md, d);
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];
    }
    cache.cached_len = position + 1;
    std::vector<T> out(static_cast<std::size_t>(d));
    model_detail::row_layer_norm(x.data(), p.lnf_g.value().data(), p.lnf_b.value().data(),
                                 out.data(), d);
    return out;
}

// position-ready input row for a prompt token
template <typename T>
std::vector<T> embed_token_row(const ModelParams<T>& p, const std::array<double, 2>& token,
                               int logical_pos) {
    const int d = p.config.embed_dim;
    if (logical_pos >= p.config.max_positions)
        throw std::invalid_argument("embed_token_row: position beyond max_positions");
    std::vector<T> row(static_cast<std::size_t>(d));
    const T t0 = static_cast<T>(token[0]);
    const T t1 = static_cast<T>(token[1]);
    const T* w = p.w_in.value().data();
    const T* b = p.b_in.value().data();
    const T* prow = p.pos.value().data() + static_cast<std::size_t>(logical_pos) * d;
    for (int j = 0; j < d; ++j)
        row[static_cast<std::size_t>(j)] = t0 * w[j] + t1 * w[d + j] + b[j] + prow[j];
    return row;
}

template <typename T>
std::array<T, 2> output_head_row(const ModelParams<T>& p, std::span<const T> hidden) {
    const int d = p.config.embed_dim;
    const T* w = p.w_out.value().data();
    std::array<T, 2> out{p.b_out.value()[0], p.b_out.value()[1]};
    for (int j = 0; j < d; ++j) {
        out[0] += hidden[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(j) * 2 + 0];
        out[1] += hidden[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(j) * 2 + 1];
    }
    return out;
}

// Runs one query token plus its thought chain against a cache already
// prefilled with the 2k pilot tokens. Returns the per-step head readouts
// (max(C,1) entries; a single entry is the vanilla readout).
template <typename T>
std::vector<std::array<T, 2>> predict_query_with_cache(const ModelParams<T>& p, KVCache<T>& cache,
                                                       const std::array<double, 2>& query_tok,
                                                       int C) {
    const int n0 = cache.cached_len;
    std::vector<T> hidden = step_with_cache(p, cache, embed_token_row(p, query_tok, n0), n0);
    const int steps = std::max(C, 1);
    std::vector<std::array<T, 2>> preds;
    preds.reserve(static_cast<std::size_t>(steps));
    preds.push_back(output_head_row(p, std::span<const T>(hidden)));
    for (int j = 2; j <= steps; ++j) {
        const int pos_idx = n0 + j - 1;
        if (pos_idx >= p.config.max_positions)
            throw std::invalid_argument(
                "predict_query_with_cache: thought position beyond max_positions");
        std::vector<T> row = hidden;
        const T* prow = p.pos.value().data() + static_cast<std::size_t>(pos_idx) * p.config.embed_dim;
        for (int jj = 0; jj < p.config.embed_dim; ++jj) row[static_cast<std::size_t>(jj)] += prow[jj];
        hidden = step_with_cache(p, cache, row, pos_idx);
        preds.push_back(output_head_row(p, std::span<const T>(hidden)));
    }
    return preds;
}

// Cached single-query inference over an eval prompt: prefills the context,
// then runs the thought chain token by token.
template <typename T>
std::vector<std::array<T, 2>> predict_eval_cached(const ModelParams<T>& p,
                                                  const PromptSequence& prompt, int C) {
    if (prompt.query_positions.size() != 1 ||
        prompt.query_positions[0] != prompt.length() - 1)
        throw std::invalid_argument("predict_eval_cached: expected a single trailing query");
    KVCache<T> cache(p.config);
    const int n = prompt.length();
    for (int i = 0; i + 1 < n; ++i)
        step_with_cache(p, cache, embed_token_row(p, prompt.tokens[static_cast<std::size_t>(i)], i), i);
    return predict_query_with_cache(p, cache, prompt.tokens[static_cast<std::size_t>(n - 1)], C);
}

// Same predictions computed without any caching: every thought step re-runs
// the backbone over the whole sequence so far. Reference path for benchmarks.
template <typename T>
std::vector<std::array<T, 2>> predict_eval_uncached(const ModelParams<T>& p,
                                                    const PromptSequence& prompt, int C) {
    if (prompt.query_positions.size() != 1 ||
        prompt.query_positions[0] != prompt.length() - 1)
        throw std::invalid_argument("predict_eval_uncached: expected a single trailing query");
    const int n0 = prompt.length();
    const int steps = std::max(C, 1);
    std::vector<std::vector<T>> chain_rows;  // position-encoded thought inputs
    std::vector<std::array<T, 2>> preds;
    std::vector<T> hidden;
    for (int j = 1; j <= steps; ++j) {
        const int n = n0 + static_cast<int>(chain_rows.size());
        Tensor<T> x = Tensor<T>::zeros({n, p.config.embed_dim});
        for (int i = 0; i < n0; ++i) {
            auto row = embed_token_row(p, prompt.tokens[static_cast<std::size_t>(i)], i);
            std::copy(row.begin(), row.end(),
                      x.value().begin() + static_cast<std::size_t>(i) * p.config.embed_dim);
        }
        for (std::size_t ci = 0; ci < chain_rows.size(); ++ci)
            std::copy(chain_rows[ci].begin(), chain_rows[ci].end(),
                      x.value().begin() + (static_cast<std::size_t>(n0) + ci) * p.config.embed_dim);
        auto h = backbone_forward(p, x, causal_mask<T>(n));
        hidden.assign(h.value().begin() + static_cast<std::size_t>(n - 1) * p.config.embed_dim,
                      h.value().begin() + static_cast<std::size_t>(n) * p.config.embed_dim);
        preds.push_back(output_head_row(p, std::span<const T>(hidden)));
        if (j < steps) {
            const int pos_idx = n0 + j - 1;
            if (pos_idx >= p.config.max_positions)
                throw std::invalid_argument(
                    "predict_eval_uncached: thought position beyond max_positions");
            std::vector<T> row = hidden;
            const T* prow = p.pos.value().data() + static_cast<std::size_t>(pos_idx) * p.config.embed_dim;
            for (int jj = 0; jj < p.config.embed_dim; ++jj)
                row[static_cast<std::size_t>(jj)] += prow[jj];
            chain_rows.push_back(std::move(row));
        }
    }
    return preds;
}

}  // namespace choose
