#include "lrq/calibration.hpp"

#include <fstream>

#include "lrq/errors.hpp"
#include "lrq/rng.hpp"

namespace lrq {

namespace {

void check_sizes(int n_samples, int seq_len) {
    if (n_samples < 1) throw config_error("make_calibration: n_samples must be >= 1");
    if (seq_len < 2) throw config_error("make_calibration: seq_len must be >= 2");
}

}  // namespace

CalibrationSet make_calibration_synthetic(int64_t vocab_size, int n_samples, int seq_len, uint64_t seed) {
    check_sizes(n_samples, seq_len);
    if (vocab_size < 2) throw config_error("make_calibration: vocab_size must be >= 2");
    CalibrationSet set;
    set.vocab_size = vocab_size;
    set.source = "synthetic";
    Rng rng(seed);
    set.sequences.resize(size_t(n_samples));
    for (auto& seq : set.sequences) {
        seq.resize(size_t(seq_len));
        for (auto& id : seq) id = int32_t(rng.next_below(vocab_size));
    }
    return set;
}

CalibrationSet make_calibration_text(const std::string& path, int n_samples, int seq_len) {
    check_sizes(n_samples, seq_len);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("make_calibration: cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const size_t needed = size_t(n_samples) * size_t(seq_len);
    if (bytes.size() < needed) {
        throw io_error("make_calibration: " + path + " holds " + std::to_string(bytes.size()) +
                       " bytes, need " + std::to_string(needed));
    }
    CalibrationSet set;
    set.vocab_size = 256;
    set.source = path;
    set.sequences.resize(size_t(n_samples));
    size_t pos = 0;
    for (auto& seq : set.sequences) {
        seq.resize(size_t(seq_len));
        for (auto& id : seq) id = int32_t(uint8_t(bytes[pos++]));
    }
    return set;
}

}  // namespace lrq
