#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "loraloop/numcore/tensor.hpp"

namespace loraloop {

/// Flattened images [batch, pixels] with integer class labels indexing the
/// active class list.
struct LabeledBatch {
  num::Tensor images;
  std::vector<std::size_t> labels;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] bool empty() const noexcept { return labels.empty(); }

  [[nodiscard]] LabeledBatch subset(std::span<const std::size_t> rows) const {
    LabeledBatch out;
    out.images = images.gather_rows(rows);
    out.labels.reserve(rows.size());
    for (auto r : rows) out.labels.push_back(labels.at(r));
    return out;
  }

  /// Row indices carrying `label`, in order.
  [[nodiscard]] std::vector<std::size_t> rows_of(std::size_t label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) out.push_back(i);
    return out;
  }
};

using Dataset = LabeledBatch;

}  // namespace loraloop
