#pragma once

// Token id layout shared by datagen, model, and eval:
//   [0] PAD, [1] EOS, per-level SID code tokens in disjoint contiguous ranges,
//   then query tokens. A SID serializes to one token per level.

#include <cstddef>
#include <vector>

#include "raddpo/common.hpp"
#include "raddpo/sid.hpp"

namespace raddpo {

struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;

    std::vector<size_t> level_sizes;
    size_t n_query_tokens = 0;

    size_t num_levels() const { return level_sizes.size(); }

    size_t level_offset(size_t level) const {
        size_t off = 2;
        for (size_t l = 0; l < level; ++l) off += level_sizes[l];
        return off;
    }

    size_t total_level_tokens() const {
        size_t s = 0;
        for (size_t k : level_sizes) s += k;
        return s;
    }

    size_t query_offset() const { return 2 + total_level_tokens(); }
    size_t size() const { return query_offset() + n_query_tokens; }

    int level_token(size_t level, int code) const {
        if (level >= num_levels() || code < 0 ||
            static_cast<size_t>(code) >= level_sizes[level]) {
            throw ConfigError("vocab: level code out of range");
        }
        return static_cast<int>(level_offset(level)) + code;
    }

    int query_token(size_t q) const {
        if (q >= n_query_tokens) throw ConfigError("vocab: query id out of range");
        return static_cast<int>(query_offset() + q);
    }

    bool is_level_token(int tok, size_t level) const {
        if (level >= num_levels()) return false;
        const size_t off = level_offset(level);
        return tok >= static_cast<int>(off) && tok < static_cast<int>(off + level_sizes[level]);
    }

    bool is_any_level_token(int tok) const {
        return tok >= 2 && tok < static_cast<int>(query_offset());
    }

    // Serialize: one token per level from disjoint ranges.
    std::vector<int> sid_tokens(const sid::SemanticId& s) const {
        if (s.codes.size() != num_levels()) throw ConfigError("vocab: SID level count mismatch");
        std::vector<int> out;
        out.reserve(num_levels());
        for (size_t l = 0; l < num_levels(); ++l) out.push_back(level_token(l, s.codes[l]));
        return out;
    }

    // Parse is the inverse of sid_tokens; throws on malformed sequences.
    sid::SemanticId parse_sid_tokens(const std::vector<int>& toks) const {
        sid::SemanticId s;
        if (!try_parse_sid_tokens(toks, &s)) throw ConfigError("vocab: invalid SID token sequence");
        return s;
    }

    // Non-throwing parse used for hallucination checks on free-form decodes.
    bool try_parse_sid_tokens(const std::vector<int>& toks, sid::SemanticId* out) const {
        if (toks.size() != num_levels()) return false;
        sid::SemanticId s;
        s.codes.reserve(num_levels());
        for (size_t l = 0; l < num_levels(); ++l) {
            if (!is_level_token(toks[l], l)) return false;
            s.codes.push_back(toks[l] - static_cast<int>(level_offset(l)));
        }
        *out = std::move(s);
        return true;
    }
};

} // namespace raddpo
