#include "l2l/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace l2l::metrics {

CsvSink::CsvSink(const std::string& path, const std::vector<std::string>& header)
    : os_(path, std::ios::trunc), columns_(header.size()) {
  if (!os_) throw std::runtime_error("metrics: cannot open " + path);
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) os_ << ',';
    os_ << header[i];
  }
  os_ << '\n';
}

void CsvSink::row(const std::vector<double>& values) {
  if (values.size() != columns_)
    throw std::invalid_argument("metrics: row width mismatch");
  std::ostringstream line;
  line.precision(9);
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) line << ',';
    line << values[i];
  }
  os_ << line.str() << '\n';
}

void CsvSink::row(const std::vector<std::string>& values) {
  if (values.size() != columns_)
    throw std::invalid_argument("metrics: row width mismatch");
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) os_ << ',';
    os_ << values[i];
  }
  os_ << '\n';
}

void CsvSink::flush() { os_.flush(); }

std::vector<HistogramRow> weight_histograms(const std::vector<Tensor>& sequence) {
  if (sequence.empty()) return {};
  for (const auto& t : sequence)
    if (!t.same_shape(sequence.front()))
      throw std::invalid_argument("weight_histograms: shape mismatch across checkpoints");
  float norm = 0;
  for (float v : sequence.front().data) norm = std::max(norm, std::abs(v));
  if (norm == 0) norm = 1.0f;
  std::vector<HistogramRow> rows;
  for (size_t c = 0; c < sequence.size(); ++c) {
    HistogramRow r;
    r.checkpoint = static_cast<int>(c);
    for (float v : sequence[c].data) {
      double x = std::abs(v) / norm;
      int bin = std::min(4, int(x * 5.0));
      if (x >= 1.0) bin = 4;
      r.counts[size_t(bin)]++;
    }
    const double total = double(sequence[c].numel());
    double run = 0;
    for (int b = 0; b < 5; ++b) {
      run += double(r.counts[size_t(b)]);
      r.cdf[size_t(b)] = run / total;
    }
    rows.push_back(r);
  }
  return rows;
}

void write_histograms(const std::string& path,
                      const std::vector<HistogramRow>& rows) {
  CsvSink sink(path, {"checkpoint", "bin1", "bin2", "bin3", "bin4", "bin5",
                      "cdf1", "cdf2", "cdf3", "cdf4", "cdf5"});
  for (const auto& r : rows)
    sink.row(std::vector<double>{double(r.checkpoint), double(r.counts[0]),
                                 double(r.counts[1]), double(r.counts[2]),
                                 double(r.counts[3]), double(r.counts[4]),
                                 r.cdf[0], r.cdf[1], r.cdf[2], r.cdf[3], r.cdf[4]});
  sink.flush();
}

}  // namespace l2l::metrics
