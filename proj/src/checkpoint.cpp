#include "choose/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace choose {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

void require_little_endian() {
    if constexpr (std::endian::native != std::endian::little) {
        throw std::runtime_error("checkpoint: only little-endian hosts are supported");
    }
}

}  // namespace

std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_checkpoint(const std::string& dir, ModelParams<float>& params,
                     const CheckpointProvenance& prov) {
    require_little_endian();
    std::filesystem::create_directories(dir);

    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["byte_order"] = "little";
    const auto& cfg = params.config;
    manifest["model"] = {{"n_layers", cfg.n_layers},           {"embed_dim", cfg.embed_dim},
                         {"n_heads", cfg.n_heads},             {"n_thoughts", cfg.n_thoughts},
                         {"max_positions", cfg.max_positions}, {"mlp_ratio", cfg.mlp_ratio}};

    json entries = json::array();
    std::size_t offset = 0;
    std::ofstream bin(dir + "/weights.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("checkpoint: cannot open " + dir + "/weights.bin");
    for (auto& [name, t] : params.named()) {
        const std::size_t bytes = t->value().size() * sizeof(float);
        entries.push_back(
            {{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"length", bytes}});
        bin.write(reinterpret_cast<const char*>(t->value().data()),
                  static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    if (!bin) throw std::runtime_error("checkpoint: short write to " + dir + "/weights.bin");
    bin.close();
    manifest["entries"] = std::move(entries);
    manifest["total_bytes"] = offset;
    manifest["provenance"] = {{"config_hash", prov.config_hash},
                              {"steps", prov.steps},
                              {"final_loss", prov.final_loss},
                              {"seed", prov.seed}};

    std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
    if (!mf) throw std::runtime_error("checkpoint: cannot open " + dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw std::runtime_error("checkpoint: short write to " + dir + "/manifest.json");
}

Checkpoint load_checkpoint(const std::string& dir) {
    require_little_endian();
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("checkpoint: cannot open " + dir + "/manifest.json");
    json manifest = json::parse(mf);

    if (manifest.at("format_version").get<int>() != kFormatVersion)
        throw std::runtime_error("checkpoint: unsupported format version");
    if (manifest.at("byte_order").get<std::string>() != "little")
        throw std::runtime_error("checkpoint: unsupported byte order");

    ModelConfig cfg;
    const auto& m = manifest.at("model");
    cfg.n_layers = m.at("n_layers").get<int>();
    cfg.embed_dim = m.at("embed_dim").get<int>();
    cfg.n_heads = m.at("n_heads").get<int>();
    cfg.n_thoughts = m.at("n_thoughts").get<int>();
    cfg.max_positions = m.at("max_positions").get<int>();
    cfg.mlp_ratio = m.at("mlp_ratio").get<int>();
    cfg.validate();

    Checkpoint ckpt{ModelParams<float>::make_zeroed(cfg), {}};
    const auto& prov = manifest.at("provenance");
    ckpt.provenance.config_hash = prov.at("config_hash").get<std::string>();
    ckpt.provenance.steps = prov.at("steps").get<long>();
    ckpt.provenance.final_loss = prov.at("final_loss").get<double>();
    ckpt.provenance.seed = prov.at("seed").get<std::uint64_t>();

    std::ifstream bin(dir + "/weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot open " + dir + "/weights.bin");

    auto named = ckpt.params.named();
    const auto& entries = manifest.at("entries");
    if (entries.size() != named.size())
        throw std::runtime_error("checkpoint: entry count does not match model config");
    std::size_t expect_offset = 0;
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& e = entries.at(i);
        if (e.at("name").get<std::string>() != named[i].first)
            throw std::runtime_error("checkpoint: entry order mismatch at " + named[i].first);
        const auto shape = e.at("shape").get<Shape>();
        if (shape != named[i].second->shape())
            throw std::runtime_error("checkpoint: shape mismatch at " + named[i].first);
        const auto offset = e.at("offset").get<std::size_t>();
        const auto length = e.at("length").get<std::size_t>();
        if (offset != expect_offset)
            throw std::runtime_error("checkpoint: entries are not contiguous at " + named[i].first);
        if (length != named[i].second->value().size() * sizeof(float))
            throw std::runtime_error("checkpoint: length mismatch at " + named[i].first);
        bin.read(reinterpret_cast<char*>(named[i].second->value().data()),
                 static_cast<std::streamsize>(length));
        if (bin.gcount() != static_cast<std::streamsize>(length))
            throw std::runtime_error("checkpoint: short read at " + named[i].first);
        expect_offset = offset + length;
    }
    if (manifest.at("total_bytes").get<std::size_t>() != expect_offset)
        throw std::runtime_error("checkpoint: total_bytes disagrees with entries");
    bin.peek();
    if (!bin.eof()) throw std::runtime_error("checkpoint: weights.bin has trailing bytes");
    ckpt.params.set_requires_grad(true);
    return ckpt;
}

}  // namespace choose
