#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ssmpeft/tensor.hpp"

namespace ssmpeft {

struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct corruption_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Binary container: 8-byte magic "SSMPEFT1", u64 manifest length, JSON
// manifest (name -> shape, dtype f64, byte offset), then little-endian f64
// payload with every tensor 64-byte aligned. Entries are written sorted by
// name so save -> load -> save is byte-identical.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor*>>& params);
Checkpoint load_checkpoint(const std::string& path);

// assigns stored arrays into matching named parameters (shape-checked)
void load_checkpoint_into(const std::string& path,
                          std::vector<std::pair<std::string, Tensor*>> params);

}  // namespace ssmpeft
