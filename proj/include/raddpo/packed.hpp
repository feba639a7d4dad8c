#pragma once

// Packed multi-candidate sequence: [prompt][candidate 1]...[candidate m] in
// one flat token stream. Candidates are mutually invisible under the
// block-diagonal visibility rule, all candidates see the prompt, and position
// ids restart at the prompt length for every candidate so all candidates share
// the same relative positional encoding.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "raddpo/common.hpp"

namespace raddpo {

struct PackedBatch {
    std::vector<int> tokens;
    std::vector<int> segment_ids;     // 0 = prompt, 1..m = candidate segments
    std::vector<int> position_ids;    // prompt: 0..P-1; each candidate: P, P+1, ...
    std::vector<uint8_t> target_mask; // 1 on candidate tokens (likelihood targets)
    size_t num_segments = 0;          // m (candidates, excluding the prompt)

    size_t seq_len() const { return tokens.size(); }

    size_t prompt_len() const {
        size_t p = 0;
        while (p < segment_ids.size() && segment_ids[p] == 0) ++p;
        return p;
    }

    size_t last_prompt_position() const {
        const size_t p = prompt_len();
        if (p == 0) throw ConfigError("packed batch: empty prompt");
        return p - 1;
    }

    // Flat positions of candidate segment `seg` (1-based), ascending.
    std::vector<size_t> segment_positions(size_t seg) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < segment_ids.size(); ++i) {
            if (segment_ids[i] == static_cast<int>(seg)) out.push_back(i);
        }
        return out;
    }

    // Key j is visible from query i iff j is not in the future and j belongs
    // to the prompt or to i's own segment.
    bool visible(size_t i, size_t j) const {
        return j <= i && (segment_ids[j] == 0 || segment_ids[j] == segment_ids[i]);
    }

    // Additive attention mask, row-major [T, T]: 0 where visible, -inf where not.
    std::vector<double> attention_mask() const {
        const size_t T = seq_len();
        const double ninf = -std::numeric_limits<double>::infinity();
        std::vector<double> mask(T * T, ninf);
        for (size_t i = 0; i < T; ++i) {
            for (size_t j = 0; j <= i; ++j) {
                if (visible(i, j)) mask[i * T + j] = 0.0;
            }
        }
        return mask;
    }

    // Enforces every structural invariant; throws ConfigError on violation.
    void validate(size_t max_seq_len) const;
};

// Builds a PackedBatch from prompt tokens and candidate token lists; an EOS
// token is appended to every candidate segment.
PackedBatch make_packed(const std::vector<int>& prompt_tokens,
                        const std::vector<std::vector<int>>& candidates, int eos_token);

} // namespace raddpo
