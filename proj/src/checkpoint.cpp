#include "fedtp/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fedtp {

namespace {

constexpr char kMagic[8] = {'F', 'T', 'C', 'K', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

}  // namespace

void save_named_arrays(const std::string& path, const ParamSet& arrays, const std::string& config_echo_json) {
    nlohmann::json manifest;
    manifest["dtype"] = "f64";
    manifest["config"] = nlohmann::json::parse(config_echo_json);
    auto& list = manifest["arrays"] = nlohmann::json::array();
    for (const auto& [name, t] : arrays) {
        list.push_back({{"name", name}, {"shape", t.shape}, {"count", t.data.size()}});
    }
    std::string header = manifest.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    write_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : arrays) {
        os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
    }
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

NamedArrayFile load_named_arrays(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("'" + path + "' is not a checkpoint file");
    std::uint64_t hlen = read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("truncated manifest in '" + path + "'");

    nlohmann::json manifest = nlohmann::json::parse(header);
    if (manifest.at("dtype").get<std::string>() != "f64")
        throw std::runtime_error("unsupported dtype in '" + path + "'");

    NamedArrayFile out;
    out.config_echo_json = manifest.at("config").dump();
    for (const auto& entry : manifest.at("arrays")) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        std::size_t count = entry.at("count").get<std::size_t>();
        if (static_cast<std::int64_t>(count) != shape_numel(shape))
            throw std::runtime_error("array '" + name + "' count does not match shape in '" + path + "'");
        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(count);
        is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(count * 8));
        if (!is) throw std::runtime_error("truncated payload for array '" + name + "' in '" + path + "'");
        out.arrays[name] = std::move(t);
    }
    return out;
}

}  // namespace fedtp
