#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "udavt/model.hpp"

namespace udavt {

// Single-file checkpoint: header (format version, scalar width, seed,
// config hash + full config echo) followed by a flat list of
// name -> shape -> raw little-endian floats, with per-parameter freeze
// flags.
inline constexpr char kCheckpointMagic[8] = {'U', 'D', 'V', 'T', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

template <class S>
struct CheckpointData {
    uint64_t model_seed = 0;
    uint64_t config_hash = 0;
    std::string config_echo;
    struct Param {
        std::string name;
        bool frozen;
        TensorT<S> tensor;
    };
    std::vector<Param> params;
};

namespace ckpt_detail {

template <class T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void get(std::ifstream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw PreconditionError("checkpoint: truncated file");
}

}  // namespace ckpt_detail

template <class S>
void save_checkpoint(const std::string& path, const VideoModelT<S>& model, const std::string& config_echo,
                     uint64_t config_hash) {
    using namespace ckpt_detail;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("checkpoint: cannot write " + path);
    os.write(kCheckpointMagic, 8);
    put(os, kCheckpointVersion);
    put(os, static_cast<uint32_t>(sizeof(S)));
    put(os, model.init_seed);
    put(os, config_hash);
    put(os, static_cast<uint32_t>(config_echo.size()));
    os.write(config_echo.data(), static_cast<std::streamsize>(config_echo.size()));
    put(os, static_cast<uint32_t>(model.params.count()));
    for (const auto& e : model.params.entries()) {
        put(os, static_cast<uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put(os, static_cast<uint8_t>(e.frozen ? 1 : 0));
        put(os, static_cast<uint8_t>(e.tensor.ndim()));
        for (int d : e.tensor.shape()) put(os, static_cast<int32_t>(d));
        os.write(reinterpret_cast<const char*>(e.tensor.data().data()),
                 static_cast<std::streamsize>(e.tensor.data().size() * sizeof(S)));
    }
    if (!os) throw ConfigError("checkpoint: write failed for " + path);
}

template <class S>
CheckpointData<S> load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
        throw ConfigError("checkpoint: bad magic in " + path);
    uint32_t version = 0, scalar = 0, echo_len = 0, n = 0;
    get(is, version);
    if (version != kCheckpointVersion)
        throw ConfigError("checkpoint: unsupported format version " + std::to_string(version));
    get(is, scalar);
    if (scalar != sizeof(S))
        throw ConfigError("checkpoint: scalar width " + std::to_string(scalar) + " does not match build (" +
                          std::to_string(sizeof(S)) + "); set run precision accordingly");
    CheckpointData<S> out;
    get(is, out.model_seed);
    get(is, out.config_hash);
    get(is, echo_len);
    out.config_echo.resize(echo_len);
    is.read(out.config_echo.data(), echo_len);
    get(is, n);
    out.params.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        uint16_t name_len = 0;
        get(is, name_len);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint8_t frozen = 0, ndim = 0;
        get(is, frozen);
        get(is, ndim);
        std::vector<int> shape(ndim);
        for (auto& d : shape) {
            int32_t v = 0;
            get(is, v);
            d = v;
        }
        std::vector<S> data(TensorT<S>::count(shape));
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(S)));
        if (!is) throw PreconditionError("checkpoint: truncated tensor data in " + path);
        out.params.push_back({std::move(name), frozen != 0,
                              TensorT<S>::from_data(std::move(shape), std::move(data))});
    }
    return out;
}

// Restores stored tensors into the model, adding any parameters the fresh
// model does not have yet (projection head, second classifier).
template <class S>
void restore_into(VideoModelT<S>& model, const CheckpointData<S>& ckpt) {
    model.init_seed = ckpt.model_seed;
    for (const auto& p : ckpt.params) {
        if (!model.params.has(p.name)) {
            model.params.add(p.name, p.tensor.detached());
        } else {
            auto& t = model.params.at(p.name);
            if (t.shape() != p.tensor.shape())
                throw ConfigError("checkpoint: shape of '" + p.name + "' " + shape_str(p.tensor.shape()) +
                                  " does not match model " + shape_str(t.shape()));
            t.data() = p.tensor.data();
        }
        model.params.set_frozen(p.name, p.frozen);
    }
}

}  // namespace udavt
