#include "loraloop/continual/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace loraloop::continual {

std::size_t AccuracyMatrix::index(std::size_t row, std::size_t col) const {
  if (row > n_ || col > n_)
    throw std::out_of_range("accuracy matrix cell (" + std::to_string(row) + ", " + std::to_string(col) +
                            ") outside " + std::to_string(n_ + 1) + "x" + std::to_string(n_ + 1));
  return row * (n_ + 1) + col;
}

void AccuracyMatrix::set(std::size_t row, std::size_t col, double value) {
  if (!(value >= 0.0 && value <= 1.0)) throw std::invalid_argument("accuracy must lie in [0, 1]");
  cells_[index(row, col)] = value;
}

double AccuracyMatrix::at(std::size_t row, std::size_t col) const {
  const auto& c = cells_[index(row, col)];
  if (!c) throw std::logic_error("accuracy matrix row " + std::to_string(row) + " is not populated");
  return *c;
}

bool AccuracyMatrix::filled(std::size_t row, std::size_t col) const { return cells_[index(row, col)].has_value(); }

bool AccuracyMatrix::row_filled(std::size_t row) const {
  for (std::size_t j = 0; j <= n_; ++j)
    if (!filled(row, j)) return false;
  return true;
}

std::size_t AccuracyMatrix::filled_rows() const {
  std::size_t k = 0;
  while (k <= n_ && row_filled(k)) ++k;
  return k;
}

void AccuracyMatrix::write_csv(std::ostream& out) const {
  out << "row";
  for (std::size_t j = 0; j <= n_; ++j) out << ",col" << j;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i <= n_; ++i) {
    out << i;
    for (std::size_t j = 0; j <= n_; ++j) {
      out << ',';
      if (filled(i, j)) out << at(i, j);
    }
    out << '\n';
  }
}

AccuracyMatrix AccuracyMatrix::read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("matrix csv: missing header");
  std::size_t cols = 0;
  for (char ch : line)
    if (ch == ',') ++cols;
  if (cols == 0) throw std::runtime_error("matrix csv: header has no columns");
  AccuracyMatrix m(cols - 1);
  for (std::size_t i = 0; i < cols; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("matrix csv: missing row " + std::to_string(i));
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::getline(ss, cell, ',')) cell.clear();
      if (!cell.empty()) m.set(i, j, std::stod(cell));
    }
  }
  return m;
}

namespace {

// Mean taken about the first value, so a constant input returns that constant exactly.
double shifted_mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double d = 0.0;
  for (double x : v) d += x - v.front();
  return v.front() + d / static_cast<double>(v.size());
}

}  // namespace

MetricsReport compute_metrics(const AccuracyMatrix& matrix, bool transfer_includes_row0) {
  const std::size_t n = matrix.n_tasks();
  for (std::size_t i = 0; i <= n; ++i)
    if (!matrix.row_filled(i)) throw std::logic_error("compute_metrics: row " + std::to_string(i) + " is not populated");
  MetricsReport r;
  r.transfer_includes_row0 = transfer_includes_row0;
  std::vector<double> defined_transfer;
  for (std::size_t j = 1; j <= n; ++j) {
    std::vector<double> before, all;
    for (std::size_t i = transfer_includes_row0 ? 0 : 1; i < j; ++i) before.push_back(matrix.at(i, j));
    for (std::size_t i = 0; i <= n; ++i) all.push_back(matrix.at(i, j));
    r.transfer.push_back(shifted_mean(before));
    r.avg.push_back(shifted_mean(all));
    r.last.push_back(matrix.at(n, j));
    if (!before.empty()) defined_transfer.push_back(r.transfer.back());
  }
  if (n > 0) {
    r.mean_transfer = shifted_mean(defined_transfer);
    r.mean_avg = shifted_mean(r.avg);
    r.mean_last = shifted_mean(r.last);
  }
  r.base_initial = matrix.at(0, 0);
  r.base_last = matrix.at(n, 0);
  std::vector<double> base;
  for (std::size_t i = 0; i <= n; ++i) base.push_back(matrix.at(i, 0));
  r.base_avg = shifted_mean(base);
  return r;
}

}  // namespace loraloop::continual
