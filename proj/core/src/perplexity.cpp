#include "lrq/perplexity.hpp"

#include <cmath>

namespace lrq {

PplResult evaluate_ppl_range(const Model& m, const CalibrationSet& corpus, size_t begin, size_t end) {
    if (corpus.sequences.empty()) throw config_error("evaluate_ppl: empty corpus");
    if (corpus.vocab_size > m.config.vocab_size) throw config_error("evaluate_ppl: corpus vocab exceeds model vocab");
    PplResult res;
    for (size_t s = begin; s < end && s < corpus.sequences.size(); ++s) {
        const std::vector<int32_t>& seq = corpus.sequences[s];
        const Tensor logits = model_logits(m, seq);
        const int64_t V = m.config.vocab_size;
        for (size_t t = 0; t + 1 < seq.size(); ++t) {
            const float* row = logits.data() + int64_t(t) * V;
            double mx = row[0];
            for (int64_t j = 1; j < V; ++j) mx = std::max(mx, double(row[j]));
            double denom = 0.0;
            for (int64_t j = 0; j < V; ++j) denom += std::exp(double(row[j]) - mx);
            res.nll_sum -= double(row[seq[t + 1]]) - mx - std::log(denom);
            res.tokens += 1;
        }
    }
    res.ppl = res.tokens == 0 ? 0.0 : std::exp(res.nll_sum / double(res.tokens));
    return res;
}

PplResult evaluate_ppl(const Model& m, const CalibrationSet& corpus) {
    return evaluate_ppl_range(m, corpus, 0, corpus.sequences.size());
}

}  // namespace lrq
