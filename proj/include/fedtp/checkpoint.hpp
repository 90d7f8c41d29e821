#pragma once

#include <string>

#include "fedtp/tensor.hpp"

namespace fedtp {

// Named, shape-tagged flat arrays in one binary file: a magic tag, a JSON
// manifest (names, shapes, dtype, config echo), then raw little-endian f64
// payloads in manifest order.
void save_named_arrays(const std::string& path, const ParamSet& arrays, const std::string& config_echo_json = "{}");

struct NamedArrayFile {
    ParamSet arrays;
    std::string config_echo_json;
};

NamedArrayFile load_named_arrays(const std::string& path);

}  // namespace fedtp
