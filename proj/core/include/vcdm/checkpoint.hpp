#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace vcdm {

// Named float64 tensors plus a JSON metadata document.
//
// On-disk layout (little endian):
//   "VCDMCKPT" | u32 version | u64 header_bytes | header JSON | tensor data
// The header JSON has {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
// where offset counts doubles from the start of the data section.
struct Checkpoint {
    struct Tensor {
        std::vector<int> shape;
        std::vector<double> values;
    };

    std::string meta_json = "{}";
    std::map<std::string, Tensor> tensors;

    void put(const std::string& name, std::vector<int> shape, std::vector<double> values);
    void put(const std::string& name, const std::vector<double>& values);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace vcdm
