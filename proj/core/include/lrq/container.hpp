#pragma once

#include <string>

#include "lrq/model.hpp"

namespace lrq {

// Binary model container: magic "LRQM", u32 version, u64 header length,
// UTF-8 JSON header, zero padding, then raw little-endian float32 payload
// with every tensor offset 64-byte aligned. save/load round-trips are
// bit-exact, including any extra (learned-rounding) tensors.
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

}  // namespace lrq
