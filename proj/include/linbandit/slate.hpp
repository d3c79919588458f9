#pragma once

#include <optional>
#include <vector>

namespace linbandit {

// Ordered top-K recommendation. Scores align with items; slots filled by
// uniform exploration carry no score.
struct Slate {
    std::vector<int> items;
    std::vector<std::optional<double>> scores;
};

}  // namespace linbandit
