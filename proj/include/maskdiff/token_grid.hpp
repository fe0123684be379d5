#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskdiff/errors.hpp"

namespace maskdiff {

// Token id alphabet: real ids 0..n_real-1, the absorbing mask id is n_real.
struct Vocab {
    int n_real = 4;

    Vocab() = default;
    explicit Vocab(int n_real_) : n_real(n_real_) {
        if (n_real < 2) throw std::domain_error("Vocab: n_real must be >= 2");
    }

    int mask_id() const { return n_real; }
    int n_states() const { return n_real + 1; }

    bool is_real(int32_t id) const { return id >= 0 && id < n_real; }
    bool is_valid(int32_t id) const { return id >= 0 && id <= n_real; }
};

// L x d grid of token ids, one row per quantizer level. Level 0 is the
// coarsest (slowest-varying) stream.
struct TokenGrid {
    int levels = 0;
    int length = 0;
    std::vector<int32_t> cells;  // row-major [level][position]

    TokenGrid() = default;
    TokenGrid(int levels_, int length_, int32_t fill = 0)
        : levels(levels_), length(length_),
          cells(static_cast<size_t>(levels_) * static_cast<size_t>(length_), fill) {
        if (levels_ < 1 || length_ < 1)
            throw std::domain_error("TokenGrid: levels and length must be >= 1");
    }

    int32_t& at(int level, int pos) { return cells[static_cast<size_t>(level) * length + pos]; }
    int32_t at(int level, int pos) const { return cells[static_cast<size_t>(level) * length + pos]; }

    size_t size() const { return cells.size(); }

    bool contains_mask(const Vocab& vocab) const {
        for (int32_t c : cells)
            if (c == vocab.mask_id()) return true;
        return false;
    }

    int count_mask(const Vocab& vocab) const {
        int n = 0;
        for (int32_t c : cells) n += (c == vocab.mask_id());
        return n;
    }

    void check_ids(const Vocab& vocab) const {
        for (int32_t c : cells)
            if (!vocab.is_valid(c))
                throw std::domain_error("TokenGrid: token id " + std::to_string(c) +
                                        " outside vocabulary (mask_id=" +
                                        std::to_string(vocab.mask_id()) + ")");
    }

    // Copy of the first `n` levels.
    TokenGrid truncated(int n) const {
        if (n < 1 || n > levels) throw std::domain_error("TokenGrid::truncated: bad level count");
        TokenGrid out(n, length);
        std::copy(cells.begin(), cells.begin() + static_cast<size_t>(n) * length, out.cells.begin());
        return out;
    }

    bool operator==(const TokenGrid& o) const {
        return levels == o.levels && length == o.length && cells == o.cells;
    }
};

// Base-(n_real+1) packing of a grid into a single integer key. Requires the
// packed space to fit 64 bits; guarded by the enumeration capacity checks.
inline uint64_t encode_grid(const TokenGrid& g, const Vocab& vocab) {
    const uint64_t base = static_cast<uint64_t>(vocab.n_states());
    uint64_t key = 0;
    for (int32_t c : g.cells) key = key * base + static_cast<uint64_t>(c);
    return key;
}

inline TokenGrid decode_grid(uint64_t key, const Vocab& vocab, int levels, int length) {
    const uint64_t base = static_cast<uint64_t>(vocab.n_states());
    TokenGrid g(levels, length);
    for (int i = static_cast<int>(g.cells.size()) - 1; i >= 0; --i) {
        g.cells[i] = static_cast<int32_t>(key % base);
        key /= base;
    }
    return g;
}

}  // namespace maskdiff
