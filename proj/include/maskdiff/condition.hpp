#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace maskdiff {

// Conditioning bundle for one sequence. Each slot is optional; an empty
// optional is the null condition used for unconditional evaluation and for
// condition dropout.
struct ConditionSet {
    std::optional<std::vector<double>> identity;  // speaker embedding
    std::optional<int> emotion;                   // class label
    std::optional<std::vector<int32_t>> text;     // symbol ids, one per position

    static ConditionSet all_null() { return {}; }

    bool is_all_null() const { return !identity && !emotion && !text; }
    int num_present() const {
        return (identity ? 1 : 0) + (emotion ? 1 : 0) + (text ? 1 : 0);
    }

    // Copy with every slot except `keep` nulled (0=identity, 1=emotion, 2=text).
    ConditionSet only(int keep) const {
        ConditionSet out;
        if (keep == 0) out.identity = identity;
        if (keep == 1) out.emotion = emotion;
        if (keep == 2) out.text = text;
        return out;
    }

    bool operator==(const ConditionSet& o) const {
        return identity == o.identity && emotion == o.emotion && text == o.text;
    }
};

}  // namespace maskdiff
