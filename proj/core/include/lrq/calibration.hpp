#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lrq {

struct CalibrationSet {
    std::vector<std::vector<int32_t>> sequences;  // equal length
    int64_t vocab_size = 0;
    std::string source;
};

// Uniform random token ids, reproducible under the seed.
CalibrationSet make_calibration_synthetic(int64_t vocab_size, int n_samples, int seq_len, uint64_t seed);

// Byte-level ingestion: each byte of the file is one token id (vocab 256),
// chunked into consecutive non-overlapping sequences.
CalibrationSet make_calibration_text(const std::string& path, int n_samples, int seq_len);

}  // namespace lrq
