#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace callosum {

// Named-parameter archive with dotted path names. Binary layout:
//   CALLOSUM-CKPT v1
//   META <one-line json>
//   TENSORS <count>
//   <name>\tf32\t<rank>\t<dim0> <dim1> ...      (one line per tensor)
//   DATA
//   <raw little-endian float payloads, in listing order>
struct Tensor {
    std::string name;
    std::vector<int64_t> dims;
    std::vector<float> values;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

struct Checkpoint {
    std::string meta_json = "{}"; // single line
    std::vector<Tensor> tensors;

    const Tensor* find(const std::string& name) const;
    Tensor* find(const std::string& name);
    Tensor& add(const std::string& name, std::vector<int64_t> dims);
    std::vector<std::string> names() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path); // atomic
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace callosum
