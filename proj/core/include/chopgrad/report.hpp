#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace chopgrad {

/// RFC-4180 CSV: comma separated, CRLF-free, fields quoted only when needed.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  CsvWriter& row(const std::vector<std::string>& fields);
  std::string str() const { return out_; }
  void save(const std::filesystem::path& path) const;

  static std::string escape(const std::string& field);

 private:
  std::size_t columns_;
  std::string out_;
};

/// Shortest round-trip decimal form of a double, so reruns print identically.
std::string format_double(double v);

struct SvgSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool scatter = false;  // markers only
};

struct SvgReference {
  std::string name;
  double y;
};

/// Line chart with markers, labelled axes and dashed horizontal reference lines.
struct SvgChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<SvgSeries> series;
  std::vector<SvgReference> references;
  bool log_y = false;

  std::string render(int width = 640, int height = 400) const;
  void save(const std::filesystem::path& path) const;
};

/// Grid of non-negative values, row 0 at the top. Zero cells are white and the
/// largest value is fully saturated; `log_scale` shades by log10 over the
/// positive range.
struct SvgHeatmap {
  std::string title;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major
  std::vector<bool> outline;   // optional per-cell marker, row-major
  std::string outline_label;
  bool log_scale = true;

  std::string render(int cell = 16) const;
  void save(const std::filesystem::path& path) const;
};

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace chopgrad
