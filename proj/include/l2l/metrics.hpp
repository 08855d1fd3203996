#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "l2l/tensor.hpp"

namespace l2l::metrics {

// Append-only CSV stream; header written once on open.
class CsvSink {
 public:
  CsvSink() = default;
  CsvSink(const std::string& path, const std::vector<std::string>& header);

  void row(const std::vector<double>& values);
  void row(const std::vector<std::string>& values);
  void flush();
  bool open() const { return os_.is_open(); }

 private:
  std::ofstream os_;
  size_t columns_ = 0;
};

struct HistogramRow {
  int checkpoint = 0;
  std::array<int64_t, 5> counts{};
  std::array<double, 5> cdf{};
};

// |weights| normalized to [0,1] by the max-abs of the FIRST checkpoint,
// clustered into five equal bins; one row per checkpoint.
std::vector<HistogramRow> weight_histograms(const std::vector<Tensor>& sequence);

void write_histograms(const std::string& path,
                      const std::vector<HistogramRow>& rows);

}  // namespace l2l::metrics
