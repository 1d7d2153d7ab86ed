#pragma once

// Checkpoint file: "AFDC", u32 version, length-prefixed JSON header (phase,
// step, flat config), u32 record count, then named tensors
// (u32 name length + bytes, u32 rank, u64 dims, f64 payload).

#include "afd/binary_io.hpp"
#include "afd/config.hpp"
#include "afd/model.hpp"
#include "afd/optim.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace afd {

enum class Phase { adad, adat };

inline const char* to_string(Phase p) { return p == Phase::adad ? "adad" : "adat"; }

inline Phase parse_phase(const std::string& s) {
    if (s == "adad") return Phase::adad;
    if (s == "adat") return Phase::adat;
    throw std::invalid_argument("unknown phase '" + s + "'");
}

struct Checkpoint {
    Phase phase = Phase::adad;
    std::size_t step = 0;
    RunConfig config;
    std::vector<NamedTensor> tensors;  // model state
    std::vector<NamedTensor> moments;  // "adam.m.<param>" / "adam.v.<param>"
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
    io::Writer w;
    w.bytes("AFDC", 4);
    w.u32(kCheckpointVersion);
    nlohmann::ordered_json header;
    header["phase"] = to_string(ckpt.phase);
    header["step"] = ckpt.step;
    header["config"] = to_flat_json(ckpt.config);
    w.text(header.dump());
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size() + ckpt.moments.size()));
    for (const auto* group : {&ckpt.tensors, &ckpt.moments})
        for (const auto& nt : *group) {
            w.text(nt.name);
            w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
            for (auto d : nt.tensor.shape()) w.u64(d);
            for (double v : nt.tensor.values()) w.f64(v);
        }
    return w.buffer();
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    io::Writer w;
    const auto bytes = encode_checkpoint(ckpt);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    auto r = io::Reader::load(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "AFDC") throw IoError(path.string() + ": not a checkpoint (bad magic)");
    if (const auto version = r.u32(); version != kCheckpointVersion)
        throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    try {
        const auto header = nlohmann::json::parse(r.text(1u << 24));
        ckpt.phase = parse_phase(header.at("phase").get<std::string>());
        ckpt.step = header.at("step").get<std::size_t>();
        ckpt.config = run_config_from_json(header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": bad checkpoint header: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw IoError(path.string() + ": bad checkpoint header: " + e.what());
    }
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.text();
        const auto rank = r.u32();
        if (rank == 0 || rank > 8) throw IoError(path.string() + ": tensor " + name + " has implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = r.u64();
        std::vector<double> data(numel(shape));
        for (auto& v : data) v = r.f64();
        NamedTensor nt{name, Tensor(std::move(shape), std::move(data))};
        (name.starts_with("adam.") ? ckpt.moments : ckpt.tensors).push_back(std::move(nt));
    }
    if (!r.at_end()) throw IoError(path.string() + ": trailing bytes after tensor records");
    return ckpt;
}

/// Copies checkpointed values into the model's tensors, matching by name and shape.
inline void load_state(TwoBranchModel& model, const std::vector<NamedTensor>& state) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : state) by_name[nt.name] = &nt.tensor;
    for (auto& nt : model.named_tensors()) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + nt.name);
        if (it->second->shape() != nt.tensor.shape())
            throw IoError("checkpoint tensor " + nt.name + " has shape " + to_string(it->second->shape()) +
                          ", model expects " + to_string(nt.tensor.shape()));
        auto dst = nt.tensor.mutable_data();
        std::copy(it->second->values().begin(), it->second->values().end(), dst.begin());
    }
}

/// Deep copy of the model's current state.
inline std::vector<NamedTensor> snapshot(const TwoBranchModel& model) {
    std::vector<NamedTensor> out;
    for (const auto& nt : model.named_tensors()) out.push_back({nt.name, nt.tensor.detach()});
    return out;
}

inline TwoBranchModel model_from_checkpoint(const Checkpoint& ckpt) {
    TwoBranchModel model(ckpt.config.train.model, 0);
    if (ckpt.phase == Phase::adat) model.enable_adat();
    load_state(model, ckpt.tensors);
    return model;
}

inline std::vector<NamedTensor> moments_to_tensors(const std::vector<NamedTensor>& params,
                                                   const std::vector<AdamMoments>& moments) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < params.size() && i < moments.size(); ++i) {
        if (moments[i].first.empty()) continue;
        out.push_back({"adam.m." + params[i].name, Tensor(params[i].tensor.shape(), moments[i].first)});
        out.push_back({"adam.v." + params[i].name, Tensor(params[i].tensor.shape(), moments[i].second)});
    }
    return out;
}

}  // namespace afd
