#pragma once

#include "lrq/calibration.hpp"
#include "lrq/model.hpp"

namespace lrq {

struct PplResult {
    double nll_sum = 0.0;
    int64_t tokens = 0;
    double ppl = 0.0;
};

// Teacher-forced causal perplexity: exp(mean token negative log-likelihood)
// over every next-token position, honoring the model's embedded
// quantization config. Accumulation is in double over sequences in index
// order, so any batching of the corpus yields the same value.
PplResult evaluate_ppl(const Model& m, const CalibrationSet& corpus);
PplResult evaluate_ppl_range(const Model& m, const CalibrationSet& corpus, size_t begin, size_t end);

}  // namespace lrq
