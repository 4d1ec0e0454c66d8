#include "gradiend/container.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace gradiend {

namespace {

constexpr char kMagic[4] = {'G', 'R', 'D', '1'};
constexpr int kVersion = 1;

void put_u32_le(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t get_u32_le(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

} // namespace

std::vector<uint8_t> save_container(const NamedTensors& entries) {
    std::set<std::string> names;
    for (const auto& [name, t] : entries)
        if (!names.insert(name).second)
            throw std::invalid_argument("save_container: duplicate entry name " + name);

    nlohmann::json header;
    header["version"] = kVersion;
    header["entries"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : entries) {
        uint64_t length = t.size() * sizeof(float);
        header["entries"].push_back({{"name", name},
                                     {"shape", t.shape},
                                     {"dtype", "f32"},
                                     {"offset", offset},
                                     {"length", length}});
        offset += length;
    }
    std::string hs = header.dump();

    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32_le(out, static_cast<uint32_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& [name, t] : entries) {
        size_t pos = out.size();
        out.resize(pos + t.size() * sizeof(float));
        // little-endian serialization, byte by byte for portability
        for (size_t i = 0; i < t.size(); ++i) {
            uint32_t bits;
            std::memcpy(&bits, &t.data[i], 4);
            out[pos + 4 * i + 0] = static_cast<uint8_t>(bits & 0xff);
            out[pos + 4 * i + 1] = static_cast<uint8_t>((bits >> 8) & 0xff);
            out[pos + 4 * i + 2] = static_cast<uint8_t>((bits >> 16) & 0xff);
            out[pos + 4 * i + 3] = static_cast<uint8_t>((bits >> 24) & 0xff);
        }
    }
    return out;
}

NamedTensors load_container(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("load_container: bad magic");
    uint32_t header_len = get_u32_le(bytes.data() + 4);
    if (bytes.size() < 8ull + header_len) throw std::runtime_error("load_container: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("load_container: invalid header JSON: ") + e.what());
    }
    if (header.at("version").get<int>() != kVersion)
        throw std::runtime_error("load_container: unknown version " +
                                 header.at("version").dump());
    const uint8_t* payload = bytes.data() + 8 + header_len;
    uint64_t payload_size = bytes.size() - 8 - header_len;

    NamedTensors out;
    for (const auto& e : header.at("entries")) {
        std::string name = e.at("name").get<std::string>();
        auto shape = e.at("shape").get<std::vector<int>>();
        if (e.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("load_container: unsupported dtype for " + name);
        uint64_t offset = e.at("offset").get<uint64_t>();
        uint64_t length = e.at("length").get<uint64_t>();
        if (offset + length > payload_size)
            throw std::runtime_error("load_container: truncated payload at entry " + name);
        size_t count = length / sizeof(float);
        std::vector<float> data(count);
        for (size_t i = 0; i < count; ++i) {
            uint32_t bits = get_u32_le(payload + offset + 4 * i);
            std::memcpy(&data[i], &bits, 4);
        }
        out.emplace_back(std::move(name), Tensor(shape, std::move(data)));
    }
    return out;
}

void save_container_file(const std::string& path, const NamedTensors& entries) {
    auto bytes = save_container(entries);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_container_file: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("save_container_file: write failed for " + path);
}

NamedTensors load_container_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_container_file: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return load_container(bytes);
}

} // namespace gradiend
