#include "vcdm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "vcdm/errors.hpp"

namespace vcdm {

namespace {

constexpr char kMagic[8] = {'V', 'C', 'D', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void Checkpoint::put(const std::string& name, std::vector<int> shape, std::vector<double> values) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    if (n != values.size()) throw InvalidArgument("checkpoint tensor " + name + ": shape/value count mismatch");
    tensors[name] = Tensor{std::move(shape), std::move(values)};
}

void Checkpoint::put(const std::string& name, const std::vector<double>& values) {
    put(name, {static_cast<int>(values.size())}, values);
}

const Checkpoint::Tensor& Checkpoint::get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IncompatibleCheckpoint("checkpoint has no tensor named " + name);
    return it->second;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["meta"] = nlohmann::json::parse(meta_json);
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.values.size();
    }
    const std::string text = header.dump();
    const std::uint64_t header_bytes = text.size();

    // Write-then-rename so an interrupted save never leaves a torn file.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        out.write(kMagic, sizeof(kMagic));
        out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
        out.write(reinterpret_cast<const char*>(&header_bytes), sizeof(header_bytes));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : tensors) {
            out.write(reinterpret_cast<const char*>(t.values.data()),
                      static_cast<std::streamsize>(t.values.size() * sizeof(double)));
        }
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotReady("checkpoint not found: " + path.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t header_bytes = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&header_bytes), sizeof(header_bytes));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0 || version != kVersion) {
        throw IncompatibleCheckpoint("not a checkpoint container: " + path.string());
    }
    std::string text(header_bytes, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_bytes));
    if (!in) throw IncompatibleCheckpoint("truncated checkpoint header: " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IncompatibleCheckpoint("unreadable checkpoint header: " + std::string(e.what()));
    }

    Checkpoint ckpt;
    ckpt.meta_json = header.at("meta").dump();
    const auto data_start = in.tellg();
    for (const auto& entry : header.at("tensors")) {
        Tensor t;
        t.shape = entry.at("shape").get<std::vector<int>>();
        std::size_t n = 1;
        for (int d : t.shape) n *= static_cast<std::size_t>(d);
        t.values.resize(n);
        const auto offset = entry.at("offset").get<std::uint64_t>();
        in.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(double)));
        in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw IncompatibleCheckpoint("truncated checkpoint data: " + path.string());
        ckpt.tensors[entry.at("name").get<std::string>()] = std::move(t);
    }
    return ckpt;
}

}  // namespace vcdm
