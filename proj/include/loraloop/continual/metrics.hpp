#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace loraloop::continual {

/// A[i][j]: accuracy on column j (0 = base pool) after training through task i
/// (row 0 = the pretrained model).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t n_tasks) : n_(n_tasks), cells_((n_tasks + 1) * (n_tasks + 1)) {}

  [[nodiscard]] std::size_t n_tasks() const noexcept { return n_; }
  void set(std::size_t row, std::size_t col, double value);
  [[nodiscard]] double at(std::size_t row, std::size_t col) const;
  [[nodiscard]] bool filled(std::size_t row, std::size_t col) const;
  [[nodiscard]] bool row_filled(std::size_t row) const;
  /// Rows 0..k filled, where k is the returned count minus one.
  [[nodiscard]] std::size_t filled_rows() const;

  void write_csv(std::ostream& out) const;
  static AccuracyMatrix read_csv(std::istream& in);

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  [[nodiscard]] std::size_t index(std::size_t row, std::size_t col) const;
  std::size_t n_ = 0;
  std::vector<std::optional<double>> cells_;
};

struct MetricsReport {
  bool transfer_includes_row0 = true;
  /// Per task j = 1..n (index j-1). Transfer of task 1 is NaN when row 0 is excluded.
  std::vector<double> transfer, avg, last;
  double mean_transfer = 0.0;
  double mean_avg = 0.0;
  double mean_last = 0.0;
  /// Base-pool column.
  double base_initial = 0.0;
  double base_last = 0.0;
  double base_avg = 0.0;
};

/// Transfer_j = mean of A[i][j] over rows before j; Avg_j over every row;
/// Last_j = A[n][j]. Headline means run over tasks 1..n.
MetricsReport compute_metrics(const AccuracyMatrix& matrix, bool transfer_includes_row0 = true);

}  // namespace loraloop::continual
